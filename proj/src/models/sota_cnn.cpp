#include "canids/models/sota_cnn.hpp"

#include <algorithm>

#include "canids/common.hpp"
#include "canids/models/serialize.hpp"

namespace canids::models {

using autograd::Graph;
using autograd::Shape;
using autograd::Tensor;

std::vector<Tensor<float>> SotaCnn::init_params(const CnnConfig& cfg, std::uint64_t seed) {
  cnn_detail::ShapeCtx sx;
  auto out = cnn_detail::trunk<cnn_detail::ShapeCtx, cnn_detail::ShapeVal>(
      sx, cnn_detail::ShapeVal{1, kFrameSide, kFrameSide}, cfg);
  Rng rng(seed);
  std::vector<Tensor<float>> params;
  for (std::size_t i = 0; i < sx.shapes.size(); i += 2) {
    const Shape& k = sx.shapes[i];
    int fan_in = k[1] * k[2] * k[3];
    int fan_out = k[0] * k[2] * k[3];
    params.push_back(autograd::glorot_uniform<float>(k, fan_in, fan_out, rng));
    params.push_back(Tensor<float>::zeros(sx.shapes[i + 1]));
  }
  params.push_back(autograd::glorot_uniform<float>({out.c, 2}, out.c, 2, rng));
  params.push_back(Tensor<float>::zeros({2}));
  return params;
}

Tensor<float> SotaCnn::encode_frames(std::span<const pipeline::LabeledSample> samples,
                                     std::span<const pipeline::Frame> frames) {
  auto t = Tensor<float>::zeros(
      {static_cast<int>(frames.size()), 1, kFrameSide, kFrameSide});
  constexpr int pad = kFrameSide - pipeline::kIdBitCount;  // 18 leading zero columns
  for (std::size_t fi = 0; fi < frames.size(); ++fi) {
    float* plane = t.v.data() + fi * kFrameSide * kFrameSide;
    for (int row = 0; row < kFrameSide; ++row) {
      const auto& fv = samples[frames[fi].begin + static_cast<std::size_t>(row)].features;
      for (int b = 0; b < pipeline::kIdBitCount; ++b)
        plane[row * kFrameSide + pad + b] = fv.f[static_cast<std::size_t>(b)];
    }
  }
  return t;
}

void SotaCnn::check_frame_tensor(const Tensor<float>& t, const char* op) const {
  if (t.rank() != 4 || t.dim(1) != 1 || t.dim(2) != kFrameSide || t.dim(3) != kFrameSide)
    throw autograd::ShapeError(op, "expected frames shaped [B,1,29,29], got " +
                                       autograd::shape_str(t.shape));
}

namespace {

std::vector<Graph<float>::Id> leaf_params(Graph<float>& g,
                                          std::span<const Tensor<float>> params,
                                          bool needs_grad) {
  std::vector<Graph<float>::Id> ids;
  ids.reserve(params.size());
  for (const auto& p : params) ids.push_back(g.leaf(p, needs_grad));
  return ids;
}

Tensor<float> slice_frames(const Tensor<float>& all, std::span<const std::uint32_t> rows) {
  auto plane = static_cast<std::size_t>(SotaCnn::kFrameSide) * SotaCnn::kFrameSide;
  auto t = Tensor<float>::zeros(
      {static_cast<int>(rows.size()), 1, SotaCnn::kFrameSide, SotaCnn::kFrameSide});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(all.v.data() + rows[i] * plane, plane, t.v.data() + i * plane);
  return t;
}

}  // namespace

SotaCnn SotaCnn::train(std::span<const pipeline::LabeledSample> samples,
                       std::span<const pipeline::Frame> frames, const CnnConfig& config,
                       const TrainSeeds& seeds) {
  SotaCnn model;
  model.cfg_ = config;
  model.seeds_ = seeds;
  model.params_ = init_params(config, seeds.init);
  model.adam_.learning_rate = static_cast<float>(config.learning_rate);
  model.fine_tune(samples, frames, config, seeds);
  return model;
}

void SotaCnn::fine_tune(std::span<const pipeline::LabeledSample> samples,
                        std::span<const pipeline::Frame> frames, const CnnConfig& config,
                        const TrainSeeds& seeds) {
  if (frames.empty()) throw DataError("train_sota_cnn: no frames to train on");
  cfg_ = config;
  adam_.learning_rate = static_cast<float>(config.learning_rate);

  Tensor<float> all = encode_frames(samples, frames);
  std::vector<int> labels(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) labels[i] = frames[i].label;

  // stratified holdout over frame labels
  std::vector<std::uint32_t> train_idx, val_idx;
  {
    std::vector<std::uint32_t> by_class[2];
    for (std::uint32_t i = 0; i < frames.size(); ++i)
      by_class[labels[i] ? 1 : 0].push_back(i);
    Rng rng(seeds.shuffle ^ 0xc1au);
    std::vector<std::uint8_t> is_val(frames.size(), 0);
    for (auto& idx : by_class) {
      if (idx.empty()) continue;
      rng.shuffle(idx);
      auto n_val = static_cast<std::size_t>(
          std::llround(config.val_fraction * static_cast<double>(idx.size())));
      n_val = std::min(n_val, idx.size() > 1 ? idx.size() - 1 : std::size_t{0});
      for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = 1;
    }
    for (std::uint32_t i = 0; i < frames.size(); ++i)
      (is_val[i] ? val_idx : train_idx).push_back(i);
    if (train_idx.empty()) train_idx = val_idx;
  }

  Rng shuffle_rng(seeds.shuffle);
  Rng dropout_rng(seeds.dropout);
  EarlyStopper stopper(config.patience, /*maximize=*/true);
  std::vector<Tensor<float>> best = params_;
  val_accuracy_.clear();

  int batch = std::max(1, config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::uint32_t> order = train_idx;
    shuffle_rng.shuffle(order);
    std::size_t done = 0;
    while (done < order.size()) {
      std::size_t n = std::min<std::size_t>(batch, order.size() - done);
      std::span<const std::uint32_t> rows(order.data() + done, n);
      Graph<float> g;
      auto p = leaf_params(g, params_, true);
      auto x = g.leaf(slice_frames(all, rows), false);
      std::vector<int> batch_labels(n);
      for (std::size_t i = 0; i < n; ++i) batch_labels[i] = labels[rows[i]];
      auto probs = build_probs<float>(g, p, x, cfg_, /*train_mode=*/true, dropout_rng.fork());
      auto loss = g.sparse_categorical_crossentropy(probs, std::move(batch_labels));
      g.backward(loss);
      std::vector<Tensor<float>*> ptrs;
      std::vector<const Tensor<float>*> grads;
      for (std::size_t i = 0; i < params_.size(); ++i) {
        ptrs.push_back(&params_[i]);
        grads.push_back(&g.grad(p[i]));
      }
      adam_step<float>(ptrs, grads, adam_);
      done += n;
    }

    // validation accuracy
    const auto& eval_idx = val_idx.empty() ? train_idx : val_idx;
    std::size_t correct = 0;
    done = 0;
    while (done < eval_idx.size()) {
      std::size_t n = std::min<std::size_t>(256, eval_idx.size() - done);
      std::span<const std::uint32_t> rows(eval_idx.data() + done, n);
      Graph<float> g;
      auto p = leaf_params(g, params_, false);
      auto x = g.leaf(slice_frames(all, rows), false);
      auto probs = build_probs<float>(g, p, x, cfg_, false, 0);
      const auto& v = g.value(probs).v;
      for (std::size_t i = 0; i < n; ++i)
        correct += (v[i * 2 + 1] > v[i * 2] ? 1 : 0) == labels[rows[i]];
      done += n;
    }
    double acc = static_cast<double>(correct) / static_cast<double>(eval_idx.size());
    val_accuracy_.push_back(acc);
    if (stopper.update(acc)) best = params_;
    if (stopper.should_stop()) break;
  }
  params_ = std::move(best);
}

std::vector<int> SotaCnn::predict_labels(const Tensor<float>& frames) const {
  check_frame_tensor(frames, "sota_cnn.predict");
  std::vector<int> out(static_cast<std::size_t>(frames.dim(0)));
  auto n = static_cast<std::size_t>(frames.dim(0));
  std::size_t done = 0;
  while (done < n) {
    std::size_t take = std::min<std::size_t>(256, n - done);
    std::vector<std::uint32_t> rows(take);
    for (std::size_t i = 0; i < take; ++i) rows[i] = static_cast<std::uint32_t>(done + i);
    Graph<float> g;
    auto p = leaf_params(g, params_, false);
    auto x = g.leaf(slice_frames(frames, rows), false);
    auto probs = build_probs<float>(g, p, x, cfg_, false, 0);
    const auto& v = g.value(probs).v;
    for (std::size_t i = 0; i < take; ++i) out[done + i] = v[i * 2 + 1] > v[i * 2] ? 1 : 0;
    done += take;
  }
  return out;
}

int SotaCnn::predict_label(const Tensor<float>& frame) const {
  Tensor<float> one = frame;
  if (one.rank() == 2) one.shape = {1, 1, one.dim(0), one.dim(1)};
  return predict_labels(one)[0];
}

Tensor<float> SotaCnn::input_gradient(const Tensor<float>& frame, int target_label) const {
  Tensor<float> one = frame;
  Shape original = one.shape;
  if (one.rank() == 2) one.shape = {1, 1, one.dim(0), one.dim(1)};
  check_frame_tensor(one, "sota_cnn.input_gradient");
  if (one.dim(0) != 1)
    throw autograd::ShapeError("sota_cnn.input_gradient", "expected a single frame");
  Graph<float> g;
  auto p = leaf_params(g, params_, false);
  auto x = g.leaf(one, /*needs_grad=*/true);
  auto probs = build_probs<float>(g, p, x, cfg_, false, 0);
  auto loss = g.sparse_categorical_crossentropy(probs, {target_label});
  g.backward(loss);
  Tensor<float> grad = g.grad(x);
  grad.shape = original;
  return grad;
}

std::string SotaCnn::to_json_text() const {
  nlohmann::json j;
  j["config"] = {{"width_scale", cfg_.width_scale},
                 {"dropout", cfg_.dropout},
                 {"residual_scale", cfg_.residual_scale},
                 {"learning_rate", cfg_.learning_rate},
                 {"epochs", cfg_.epochs},
                 {"batch_size", cfg_.batch_size},
                 {"patience", cfg_.patience},
                 {"val_fraction", cfg_.val_fraction}};
  j["seeds"] = detail::seeds_to_json(seeds_);
  j["params"] = detail::tensors_to_json(params_);
  j["adam"] = detail::adam_to_json(adam_);
  j["val_accuracy"] = val_accuracy_;
  return j.dump();
}

SotaCnn SotaCnn::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SotaCnn m;
  const auto& c = j.at("config");
  m.cfg_.width_scale = c.value("width_scale", 0.25);
  m.cfg_.dropout = c.value("dropout", 0.2);
  m.cfg_.residual_scale = c.value("residual_scale", 0.2);
  m.cfg_.learning_rate = c.value("learning_rate", 0.001);
  m.cfg_.epochs = c.value("epochs", 10);
  m.cfg_.batch_size = c.value("batch_size", 64);
  m.cfg_.patience = c.value("patience", 3);
  m.cfg_.val_fraction = c.value("val_fraction", 0.1);
  m.seeds_ = detail::seeds_from_json(j.at("seeds"));
  m.params_ = detail::tensors_from_json(j.at("params"));
  m.adam_ = detail::adam_from_json(j.at("adam"));
  m.val_accuracy_ = j.value("val_accuracy", std::vector<double>{});
  return m;
}

}  // namespace canids::models
