#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "canids/autograd.hpp"
#include "canids/models/training.hpp"
#include "canids/pipeline.hpp"

namespace canids::models {

// Reduced Inception-ResNet classifier over 29x29 binary frames of message-id
// bits: Stem -> Inception-ResNet-A -> Reduction-A -> Inception-ResNet-B ->
// Reduction-B -> average pool -> dropout -> dense softmax. Widths scale with
// a single factor.
struct CnnConfig {
  double width_scale = 0.25;
  double dropout = 0.2;
  double residual_scale = 0.2;
  double learning_rate = 0.001;
  int epochs = 10;
  int batch_size = 64;
  int patience = 3;
  double val_fraction = 0.1;

  int ch(int base) const {
    return std::max(2, static_cast<int>(std::llround(base * width_scale)));
  }
};

namespace cnn_detail {

// The block wiring, written once and replayed by two contexts: one collects
// parameter shapes, the other consumes parameters while emitting graph ops.
template <class Ctx, class Val>
Val trunk(Ctx& cx, Val x, const CnnConfig& cfg) {
  // stem: 29 -> 15
  x = cx.conv(x, cfg.ch(32), 3, 2, 1, true);
  x = cx.conv(x, cfg.ch(64), 3, 1, 1, true);
  {  // inception-resnet-a (residual at 15x15)
    Val b0 = cx.conv(x, cfg.ch(32), 1, 1, 0, true);
    Val b1 = cx.conv(x, cfg.ch(32), 1, 1, 0, true);
    b1 = cx.conv(b1, cfg.ch(32), 3, 1, 1, true);
    Val b2 = cx.conv(x, cfg.ch(32), 1, 1, 0, true);
    b2 = cx.conv(b2, cfg.ch(32), 3, 1, 1, true);
    b2 = cx.conv(b2, cfg.ch(32), 3, 1, 1, true);
    Val cat = cx.concat3(b0, b1, b2);
    Val up = cx.conv(cat, cx.channels(x), 1, 1, 0, false);
    x = cx.residual(x, up);
  }
  {  // reduction-a: 15 -> 7
    Val r0 = cx.conv(x, cfg.ch(96), 3, 2, 0, true);
    Val r1 = cx.conv(x, cfg.ch(48), 1, 1, 0, true);
    r1 = cx.conv(r1, cfg.ch(48), 3, 1, 1, true);
    r1 = cx.conv(r1, cfg.ch(64), 3, 2, 0, true);
    Val r2 = cx.pool(x, 3, 2);
    x = cx.concat3(r0, r1, r2);
  }
  {  // inception-resnet-b (residual at 7x7)
    Val b0 = cx.conv(x, cfg.ch(64), 1, 1, 0, true);
    Val b1 = cx.conv(x, cfg.ch(64), 1, 1, 0, true);
    b1 = cx.conv(b1, cfg.ch(64), 3, 1, 1, true);
    Val cat = cx.concat2(b0, b1);
    Val up = cx.conv(cat, cx.channels(x), 1, 1, 0, false);
    x = cx.residual(x, up);
  }
  {  // reduction-b: 7 -> 3
    Val r0 = cx.conv(x, cfg.ch(128), 3, 2, 0, true);
    Val r1 = cx.conv(x, cfg.ch(96), 1, 1, 0, true);
    r1 = cx.conv(r1, cfg.ch(128), 3, 2, 0, true);
    Val r2 = cx.pool(x, 3, 2);
    x = cx.concat3(r0, r1, r2);
  }
  return cx.pool(x, 3, 1);  // 3 -> 1 (global)
}

struct ShapeVal {
  int c, h, w;
};

// Collects the kernel/bias shapes in wiring order.
struct ShapeCtx {
  std::vector<autograd::Shape> shapes;

  int channels(ShapeVal v) const { return v.c; }
  ShapeVal conv(ShapeVal x, int oc, int k, int stride, int pad, bool) {
    shapes.push_back({oc, x.c, k, k});
    shapes.push_back({oc});
    return {oc, (x.h + 2 * pad - k) / stride + 1, (x.w + 2 * pad - k) / stride + 1};
  }
  ShapeVal pool(ShapeVal x, int win, int stride) {
    return {x.c, (x.h - win) / stride + 1, (x.w - win) / stride + 1};
  }
  ShapeVal concat2(ShapeVal a, ShapeVal b) { return {a.c + b.c, a.h, a.w}; }
  ShapeVal concat3(ShapeVal a, ShapeVal b, ShapeVal c) { return {a.c + b.c + c.c, a.h, a.w}; }
  ShapeVal residual(ShapeVal x, ShapeVal) { return x; }
};

template <class T>
struct GraphCtx {
  autograd::Graph<T>& g;
  std::span<const typename autograd::Graph<T>::Id> params;
  std::size_t cursor = 0;
  double residual_scale;

  using Id = typename autograd::Graph<T>::Id;

  int channels(Id v) const { return g.value(v).dim(1); }
  Id conv(Id x, int, int, int stride, int pad, bool relu_after) {
    Id w = params[cursor++];
    Id b = params[cursor++];
    Id y = g.conv2d(x, w, b, stride, pad);
    return relu_after ? g.relu(y) : y;
  }
  Id pool(Id x, int win, int stride) { return g.avg_pool(x, win, stride); }
  Id concat2(Id a, Id b) {
    std::array<Id, 2> xs{a, b};
    return g.concat_channels(xs);
  }
  Id concat3(Id a, Id b, Id c) {
    std::array<Id, 3> xs{a, b, c};
    return g.concat_channels(xs);
  }
  Id residual(Id x, Id up) {
    return g.relu(g.add(x, g.scale(up, static_cast<T>(residual_scale))));
  }
};

}  // namespace cnn_detail

class SotaCnn {
 public:
  static constexpr int kFrameSide = 29;

  static SotaCnn train(std::span<const pipeline::LabeledSample> samples,
                       std::span<const pipeline::Frame> frames, const CnnConfig& config,
                       const TrainSeeds& seeds);

  // frames tensor must be [B, 1, 29, 29]
  std::vector<int> predict_labels(const autograd::Tensor<float>& frames) const;
  int predict_label(const autograd::Tensor<float>& frame) const;
  autograd::Tensor<float> input_gradient(const autograd::Tensor<float>& frame,
                                         int target_label) const;

  // Rows are the 11 id bits of each window message, left-padded to 29 columns.
  static autograd::Tensor<float> encode_frames(std::span<const pipeline::LabeledSample> samples,
                                               std::span<const pipeline::Frame> frames);

  const CnnConfig& config() const { return cfg_; }
  const std::vector<double>& val_accuracy_curve() const { return val_accuracy_; }
  std::span<const autograd::Tensor<float>> params() const { return params_; }

  void fine_tune(std::span<const pipeline::LabeledSample> samples,
                 std::span<const pipeline::Frame> frames, const CnnConfig& config,
                 const TrainSeeds& seeds);

  std::string to_json_text() const;
  static SotaCnn from_json_text(const std::string& text);

  static std::vector<autograd::Tensor<float>> init_params(const CnnConfig& config,
                                                          std::uint64_t seed);

  template <class T>
  static typename autograd::Graph<T>::Id build_probs(
      autograd::Graph<T>& g, std::span<const typename autograd::Graph<T>::Id> p,
      typename autograd::Graph<T>::Id x, const CnnConfig& cfg, bool train_mode,
      std::uint64_t dropout_seed) {
    cnn_detail::GraphCtx<T> cx{g, p, 0, cfg.residual_scale};
    auto feat = cnn_detail::trunk<cnn_detail::GraphCtx<T>, typename autograd::Graph<T>::Id>(
        cx, x, cfg);
    int c = g.value(feat).dim(1);
    int batch = g.value(feat).dim(0);
    auto flat = g.reshape(feat, {batch, c});
    flat = g.dropout(flat, cfg.dropout, train_mode, dropout_seed);
    auto logits = g.dense(flat, p[cx.cursor], p[cx.cursor + 1]);
    return g.softmax(logits);
  }

 private:
  CnnConfig cfg_;
  TrainSeeds seeds_;
  std::vector<autograd::Tensor<float>> params_;
  autograd::AdamState<float> adam_;
  std::vector<double> val_accuracy_;

  void check_frame_tensor(const autograd::Tensor<float>& t, const char* op) const;
};

}  // namespace canids::models
