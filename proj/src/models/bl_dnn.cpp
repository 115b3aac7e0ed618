#include "canids/models/bl_dnn.hpp"

#include <algorithm>
#include <cmath>

#include "canids/common.hpp"
#include "canids/models/serialize.hpp"

namespace canids::models {

using autograd::Graph;
using autograd::Tensor;

int BlDnnConfig::h1() const {
  return std::max(2, static_cast<int>(std::llround(hidden1 * width_scale)));
}
int BlDnnConfig::h2() const {
  return std::max(2, static_cast<int>(std::llround(hidden2 * width_scale)));
}

std::vector<Tensor<float>> BlDnn::init_params(const BlDnnConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  int in = pipeline::kFeatureCount, h1 = cfg.h1(), h2 = cfg.h2();
  std::vector<Tensor<float>> p;
  p.push_back(autograd::glorot_uniform<float>({in, h1}, in, h1, rng));
  p.push_back(Tensor<float>::zeros({h1}));
  p.push_back(Tensor<float>::full({h1}, 1.0f));  // layer-norm gain
  p.push_back(Tensor<float>::zeros({h1}));       // layer-norm bias
  p.push_back(autograd::glorot_uniform<float>({h1, h2}, h1, h2, rng));
  p.push_back(Tensor<float>::zeros({h2}));
  p.push_back(Tensor<float>::full({h2}, 1.0f));
  p.push_back(Tensor<float>::zeros({h2}));
  p.push_back(autograd::glorot_uniform<float>({h2, 2}, h2, 2, rng));
  p.push_back(Tensor<float>::zeros({2}));
  return p;
}

namespace {

// Loads parameters into a fresh graph; returns the leaf ids.
std::vector<Graph<float>::Id> leaf_params(Graph<float>& g, std::span<const Tensor<float>> params,
                                          bool needs_grad) {
  std::vector<Graph<float>::Id> ids;
  ids.reserve(params.size());
  for (const auto& p : params) ids.push_back(g.leaf(p, needs_grad));
  return ids;
}

void check_classes(const pipeline::Dataset& data, const char* op) {
  if (data.samples.empty()) throw DataError(std::string(op) + ": empty dataset");
  std::size_t attack = data.count_label(1);
  if (attack == 0 || attack == data.samples.size())
    throw DataError(std::string(op) + ": need both classes in the training data");
}

}  // namespace

double BlDnn::run_epoch(std::span<const pipeline::LabeledSample> samples,
                        std::span<const std::uint32_t> order, bool train_mode) {
  double total_loss = 0.0;
  std::size_t done = 0;
  int batch = std::max(1, cfg_.batch_size);
  while (done < order.size()) {
    std::size_t n = std::min<std::size_t>(batch, order.size() - done);
    std::span<const std::uint32_t> rows = order.subspan(done, n);
    Graph<float> g;
    auto p = leaf_params(g, params_, train_mode);
    auto x = g.leaf(feature_matrix(samples, rows), false);
    auto probs = build_probs<float>(g, p, x);
    auto loss = g.sparse_categorical_crossentropy(probs, label_vector(samples, rows));
    if (train_mode) {
      std::array<Graph<float>::Id, 2> l2_ids{p[kW1], p[kW2]};
      loss = g.add(loss, g.l2_penalty(l2_ids, static_cast<float>(cfg_.l2)));
    }
    total_loss += static_cast<double>(g.value(loss).v[0]) * static_cast<double>(n);
    if (train_mode) {
      g.backward(loss);
      std::vector<Tensor<float>*> ptrs;
      std::vector<const Tensor<float>*> grads;
      for (std::size_t i = 0; i < params_.size(); ++i) {
        ptrs.push_back(&params_[i]);
        grads.push_back(&g.grad(p[i]));
      }
      adam_step<float>(ptrs, grads, adam_);
    }
    done += n;
  }
  return order.empty() ? 0.0 : total_loss / static_cast<double>(order.size());
}

BlDnn BlDnn::train(const pipeline::Dataset& data, const BlDnnConfig& config,
                   const TrainSeeds& seeds) {
  check_classes(data, "train_bl_dnn");
  BlDnn model;
  model.cfg_ = config;
  model.seeds_ = seeds;
  model.params_ = init_params(config, seeds.init);
  model.adam_.learning_rate = static_cast<float>(config.learning_rate);
  model.fine_tune(data, config, seeds);
  return model;
}

void BlDnn::fine_tune(const pipeline::Dataset& data, const BlDnnConfig& config,
                      const TrainSeeds& seeds) {
  check_classes(data, "train_bl_dnn");
  cfg_ = config;
  adam_.learning_rate = static_cast<float>(config.learning_rate);

  std::vector<std::uint32_t> train_idx, val_idx;
  stratified_holdout(data.samples, config.val_fraction, seeds.shuffle ^ 0x76a1u, train_idx, val_idx);
  if (train_idx.empty()) train_idx.assign(val_idx.begin(), val_idx.end());

  Rng shuffle_rng(seeds.shuffle);
  EarlyStopper stopper(config.patience, /*maximize=*/false);
  std::vector<Tensor<float>> best = params_;
  epoch_losses_.clear();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::uint32_t> order = train_idx;
    shuffle_rng.shuffle(order);
    double train_loss = run_epoch(data.samples, order, /*train_mode=*/true);
    epoch_losses_.push_back(train_loss);
    double val_loss =
        val_idx.empty() ? train_loss : run_epoch(data.samples, val_idx, /*train_mode=*/false);
    if (stopper.update(val_loss)) best = params_;
    if (stopper.should_stop()) break;
  }
  params_ = std::move(best);
}

std::array<float, 2> BlDnn::predict_proba(std::span<const float> features) const {
  if (features.size() != pipeline::kFeatureCount)
    throw autograd::ShapeError("bl_dnn.predict",
                               "expected 77 features, got " + std::to_string(features.size()));
  Graph<float> g;
  auto p = leaf_params(g, params_, false);
  auto x = g.leaf(Tensor<float>({1, pipeline::kFeatureCount},
                                std::vector<float>(features.begin(), features.end())),
                  false);
  auto probs = build_probs<float>(g, p, x);
  const auto& v = g.value(probs).v;
  return {v[0], v[1]};
}

int BlDnn::predict_label(std::span<const float> features) const {
  auto probs = predict_proba(features);
  return probs[1] > probs[0] ? 1 : 0;
}

std::vector<int> BlDnn::predict_labels(std::span<const pipeline::LabeledSample> samples) const {
  std::vector<int> labels(samples.size());
  constexpr std::size_t kChunk = 512;
  std::size_t done = 0;
  while (done < samples.size()) {
    std::size_t n = std::min(kChunk, samples.size() - done);
    std::vector<std::uint32_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = static_cast<std::uint32_t>(done + i);
    Graph<float> g;
    auto p = leaf_params(g, params_, false);
    auto x = g.leaf(feature_matrix(samples, rows), false);
    auto probs = build_probs<float>(g, p, x);
    const auto& v = g.value(probs).v;
    for (std::size_t i = 0; i < n; ++i) labels[done + i] = v[i * 2 + 1] > v[i * 2] ? 1 : 0;
    done += n;
  }
  return labels;
}

std::vector<float> BlDnn::input_gradient(std::span<const float> features, int target_label) const {
  if (features.size() != pipeline::kFeatureCount)
    throw autograd::ShapeError("bl_dnn.input_gradient",
                               "expected 77 features, got " + std::to_string(features.size()));
  Graph<float> g;
  auto p = leaf_params(g, params_, false);
  auto x = g.leaf(Tensor<float>({1, pipeline::kFeatureCount},
                                std::vector<float>(features.begin(), features.end())),
                  /*needs_grad=*/true);
  auto probs = build_probs<float>(g, p, x);
  auto loss = g.sparse_categorical_crossentropy(probs, {target_label});
  g.backward(loss);
  return g.grad(x).v;
}

std::string BlDnn::to_json_text() const {
  nlohmann::json j;
  j["config"] = {{"hidden1", cfg_.hidden1},       {"hidden2", cfg_.hidden2},
                 {"width_scale", cfg_.width_scale}, {"l2", cfg_.l2},
                 {"learning_rate", cfg_.learning_rate}, {"epochs", cfg_.epochs},
                 {"batch_size", cfg_.batch_size}, {"patience", cfg_.patience},
                 {"val_fraction", cfg_.val_fraction}};
  j["seeds"] = detail::seeds_to_json(seeds_);
  j["params"] = detail::tensors_to_json(params_);
  j["adam"] = detail::adam_to_json(adam_);
  j["epoch_losses"] = epoch_losses_;
  return j.dump();
}

BlDnn BlDnn::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  BlDnn model;
  const auto& c = j.at("config");
  model.cfg_.hidden1 = c.value("hidden1", 128);
  model.cfg_.hidden2 = c.value("hidden2", 64);
  model.cfg_.width_scale = c.value("width_scale", 1.0);
  model.cfg_.l2 = c.value("l2", 1e-4);
  model.cfg_.learning_rate = c.value("learning_rate", 0.001);
  model.cfg_.epochs = c.value("epochs", 10);
  model.cfg_.batch_size = c.value("batch_size", 64);
  model.cfg_.patience = c.value("patience", 3);
  model.cfg_.val_fraction = c.value("val_fraction", 0.1);
  model.seeds_ = detail::seeds_from_json(j.at("seeds"));
  model.params_ = detail::tensors_from_json(j.at("params"));
  model.adam_ = detail::adam_from_json(j.at("adam"));
  model.epoch_losses_ = j.value("epoch_losses", std::vector<double>{});
  return model;
}

}  // namespace canids::models
