#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "canids/autograd.hpp"
#include "canids/models/training.hpp"
#include "canids/pipeline.hpp"

namespace canids::models {

// One next-payload predictor per CAN id, trained unsupervised on that id's
// normal traffic: dense(128, tanh) -> dense(128, tanh) -> lstm(512) ->
// lstm(512) -> dense(64, sigmoid), dropout 0.2 between layers. A message is
// flagged when its prediction error exceeds the id's detection threshold (the
// 99th percentile of training errors). Ids never seen in training classify as
// attack; messages without a full history window classify as normal.
struct LstmConfig {
  int seq_len = 20;
  int dense_units = 128;
  int lstm_units = 512;
  double width_scale = 1.0;
  double dropout = 0.2;
  double learning_rate = 0.001;
  int epochs = 10;
  int batch_size = 64;
  int patience = 3;
  double val_fraction = 0.1;
  double threshold_percentile = 99.0;

  int d() const { return std::max(2, static_cast<int>(std::llround(dense_units * width_scale))); }
  int h() const { return std::max(2, static_cast<int>(std::llround(lstm_units * width_scale))); }
};

class SotaLstm {
 public:
  struct SubModel {
    std::vector<autograd::Tensor<float>> params;
    double threshold = 0.0;
    std::vector<float> train_errors;  // per-window errors the threshold derives from
  };

  // Trains one sub-model per id present in `data` with enough normal history
  // (seq_len + 1 messages); ids with less are skipped and reported.
  static SotaLstm train(const pipeline::Dataset& data, const LstmConfig& config,
                        const TrainSeeds& seeds);

  // Message-level classification over a sample stream (windows never span
  // block boundaries). Returns one 0/1 label per sample.
  std::vector<int> classify_stream(const pipeline::Dataset& view) const;

  // Prediction error (mean binary crossentropy over the 64 data bits) of
  // predicting `next` from `window`; `window` must hold seq_len samples of
  // one id.
  double window_error(std::uint16_t id, std::span<const pipeline::LabeledSample> window,
                      const pipeline::FeatureVector& next) const;

  std::vector<float> predict_next_bits(std::uint16_t id,
                                       std::span<const pipeline::LabeledSample> window) const;

  // Gradient of the window prediction loss with respect to the window
  // features and the target bits.
  std::pair<autograd::Tensor<float>, std::vector<float>> input_gradient(
      std::uint16_t id, std::span<const pipeline::LabeledSample> window,
      std::span<const float> target_bits) const;

  bool has_id(std::uint16_t id) const { return sub_.count(id) > 0; }
  double threshold(std::uint16_t id) const;
  const std::map<std::uint16_t, SubModel>& sub_models() const { return sub_; }
  const std::vector<std::uint16_t>& skipped_ids() const { return skipped_; }
  const LstmConfig& config() const { return cfg_; }

  std::string to_json_text() const;
  static SotaLstm from_json_text(const std::string& text);

  static std::vector<autograd::Tensor<float>> init_params(const LstmConfig& config,
                                                          std::uint64_t seed);

  template <class T>
  static typename autograd::Graph<T>::Id build_prediction(
      autograd::Graph<T>& g, std::span<const typename autograd::Graph<T>::Id> p,
      typename autograd::Graph<T>::Id x, const LstmConfig& cfg, bool train_mode,
      std::uint64_t dropout_seed) {
    const auto& xs = g.value(x).shape;
    int batch = xs[0], len = xs[1];
    auto flat = g.reshape(x, {batch * len, pipeline::kFeatureCount});
    auto h = g.tanh_op(g.dense(flat, p[0], p[1]));
    h = g.dropout(h, cfg.dropout, train_mode, dropout_seed ^ 0x11u);
    h = g.tanh_op(g.dense(h, p[2], p[3]));
    h = g.dropout(h, cfg.dropout, train_mode, dropout_seed ^ 0x22u);
    auto seq = g.reshape(h, {batch, len, cfg.d()});
    seq = g.lstm_layer(seq, p[4], p[5], p[6]);
    seq = g.dropout(seq, cfg.dropout, train_mode, dropout_seed ^ 0x33u);
    seq = g.lstm_layer(seq, p[7], p[8], p[9]);
    seq = g.dropout(seq, cfg.dropout, train_mode, dropout_seed ^ 0x44u);
    auto last = g.last_step(seq);
    return g.sigmoid(g.dense(last, p[10], p[11]));
  }

 private:
  LstmConfig cfg_;
  TrainSeeds seeds_;
  std::map<std::uint16_t, SubModel> sub_;
  std::vector<std::uint16_t> skipped_;
};

}  // namespace canids::models
