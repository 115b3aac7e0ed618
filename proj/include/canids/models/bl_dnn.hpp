#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "canids/autograd.hpp"
#include "canids/models/training.hpp"
#include "canids/pipeline.hpp"

namespace canids::models {

// 77 -> dense(128, relu, l2) -> layer-norm -> dense(64, relu, l2) -> layer-norm
// -> dense(2, softmax); Adam lr 0.001, sparse categorical crossentropy.
struct BlDnnConfig {
  int hidden1 = 128;
  int hidden2 = 64;
  double width_scale = 1.0;
  double l2 = 1e-4;
  double learning_rate = 0.001;
  int epochs = 10;
  int batch_size = 64;
  int patience = 3;
  double val_fraction = 0.1;

  int h1() const;
  int h2() const;
};

class BlDnn {
 public:
  static BlDnn train(const pipeline::Dataset& data, const BlDnnConfig& config,
                     const TrainSeeds& seeds);

  int predict_label(std::span<const float> features) const;
  std::array<float, 2> predict_proba(std::span<const float> features) const;
  std::vector<int> predict_labels(std::span<const pipeline::LabeledSample> samples) const;

  // Gradient of the classification loss at (features, target_label) with
  // respect to the input features.
  std::vector<float> input_gradient(std::span<const float> features, int target_label) const;

  const std::vector<double>& epoch_losses() const { return epoch_losses_; }
  const BlDnnConfig& config() const { return cfg_; }
  std::span<const autograd::Tensor<float>> params() const { return params_; }

  std::string to_json_text() const;
  static BlDnn from_json_text(const std::string& text);

  // Continues training from the current weights on another dataset (used for
  // adversarial fine-tuning). Epoch/patience settings come from `config`.
  void fine_tune(const pipeline::Dataset& data, const BlDnnConfig& config, const TrainSeeds& seeds);

  static std::vector<autograd::Tensor<float>> init_params(const BlDnnConfig& config,
                                                          std::uint64_t seed);

  // The network graph, shared between training, inference, and the numeric
  // gradient oracles (which instantiate it in double precision).
  template <class T>
  static typename autograd::Graph<T>::Id build_probs(
      autograd::Graph<T>& g, std::span<const typename autograd::Graph<T>::Id> p,
      typename autograd::Graph<T>::Id x) {
    auto h = g.dense(x, p[0], p[1]);
    h = g.relu(h);
    h = g.layer_norm(h, p[2], p[3]);
    h = g.dense(h, p[4], p[5]);
    h = g.relu(h);
    h = g.layer_norm(h, p[6], p[7]);
    h = g.dense(h, p[8], p[9]);
    return g.softmax(h);
  }

  static constexpr std::size_t kW1 = 0, kW2 = 4;  // tensors carrying the l2 penalty

 private:
  BlDnnConfig cfg_;
  TrainSeeds seeds_;
  std::vector<autograd::Tensor<float>> params_;
  autograd::AdamState<float> adam_;
  std::vector<double> epoch_losses_;

  double run_epoch(std::span<const pipeline::LabeledSample> samples,
                   std::span<const std::uint32_t> order, bool train_mode);
};

}  // namespace canids::models
