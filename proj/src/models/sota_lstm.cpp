#include "canids/models/sota_lstm.hpp"

#include <algorithm>
#include <cmath>

#include "canids/common.hpp"
#include "canids/models/serialize.hpp"

namespace canids::models {

using autograd::Graph;
using autograd::Tensor;

std::vector<Tensor<float>> SotaLstm::init_params(const LstmConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  int in = pipeline::kFeatureCount, d = cfg.d(), h = cfg.h();
  std::vector<Tensor<float>> p;
  p.push_back(autograd::glorot_uniform<float>({in, d}, in, d, rng));
  p.push_back(Tensor<float>::zeros({d}));
  p.push_back(autograd::glorot_uniform<float>({d, d}, d, d, rng));
  p.push_back(Tensor<float>::zeros({d}));
  // lstm 1
  p.push_back(autograd::glorot_uniform<float>({d, 4 * h}, d, 4 * h, rng));
  p.push_back(autograd::glorot_uniform<float>({h, 4 * h}, h, 4 * h, rng));
  {
    auto b = Tensor<float>::zeros({4 * h});
    for (int j = h; j < 2 * h; ++j) b.v[static_cast<std::size_t>(j)] = 1.0f;  // forget gate
    p.push_back(std::move(b));
  }
  // lstm 2
  p.push_back(autograd::glorot_uniform<float>({h, 4 * h}, h, 4 * h, rng));
  p.push_back(autograd::glorot_uniform<float>({h, 4 * h}, h, 4 * h, rng));
  {
    auto b = Tensor<float>::zeros({4 * h});
    for (int j = h; j < 2 * h; ++j) b.v[static_cast<std::size_t>(j)] = 1.0f;
    p.push_back(std::move(b));
  }
  p.push_back(autograd::glorot_uniform<float>({h, 64}, h, 64, rng));
  p.push_back(Tensor<float>::zeros({64}));
  return p;
}

namespace {

constexpr int kBits = pipeline::kDataBitCount;

struct Window {
  std::uint32_t begin;   // first sample index (into the stream's sample list)
  std::uint32_t target;  // sample whose data bits are predicted
};

// Per-id consecutive positions within each block.
std::map<std::uint16_t, std::vector<std::uint32_t>> positions_by_id(const pipeline::Dataset& data,
                                                                    bool normal_only) {
  std::map<std::uint16_t, std::vector<std::uint32_t>> out;
  for (std::uint32_t i = 0; i < data.samples.size(); ++i) {
    if (normal_only && data.samples[i].label != 0) continue;
    out[pipeline::decode_can_id(data.samples[i].features)].push_back(i);
  }
  return out;
}

Tensor<float> window_tensor(std::span<const pipeline::LabeledSample> samples,
                            std::span<const std::uint32_t> stream, std::span<const Window> windows,
                            int seq_len) {
  auto t = Tensor<float>::zeros(
      {static_cast<int>(windows.size()), seq_len, pipeline::kFeatureCount});
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (int s = 0; s < seq_len; ++s)
      std::copy_n(samples[stream[windows[w].begin + static_cast<std::uint32_t>(s)]].features.f.data(),
                  pipeline::kFeatureCount,
                  t.v.data() + (w * static_cast<std::size_t>(seq_len) + static_cast<std::size_t>(s)) *
                                   pipeline::kFeatureCount);
  return t;
}

Tensor<float> target_tensor(std::span<const pipeline::LabeledSample> samples,
                            std::span<const std::uint32_t> stream,
                            std::span<const Window> windows) {
  auto t = Tensor<float>::zeros({static_cast<int>(windows.size()), kBits});
  for (std::size_t w = 0; w < windows.size(); ++w)
    std::copy_n(samples[stream[windows[w].target]].features.f.data() + pipeline::kDataBitsBegin,
                kBits, t.v.data() + w * kBits);
  return t;
}

std::vector<Graph<float>::Id> leaf_params(Graph<float>& g, std::span<const Tensor<float>> params,
                                          bool needs_grad) {
  std::vector<Graph<float>::Id> ids;
  ids.reserve(params.size());
  for (const auto& p : params) ids.push_back(g.leaf(p, needs_grad));
  return ids;
}

double bce_error(std::span<const float> pred, std::span<const float> target) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double p = std::clamp(static_cast<double>(pred[i]), 1e-7, 1.0 - 1e-7);
    double t = static_cast<double>(target[i]);
    total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  return total / static_cast<double>(pred.size());
}

}  // namespace

SotaLstm SotaLstm::train(const pipeline::Dataset& data, const LstmConfig& config,
                         const TrainSeeds& seeds) {
  if (data.samples.empty()) throw DataError("train_sota_lstm: empty dataset");
  SotaLstm model;
  model.cfg_ = config;
  model.seeds_ = seeds;

  // Build per-(block, id) normal streams, then windows within each stream.
  struct IdData {
    std::uint16_t id;
    std::vector<std::uint32_t> stream;  // sample indices, block-contiguous
    std::vector<Window> windows;        // indices into `stream`
  };
  std::vector<IdData> ids;
  {
    std::map<std::uint16_t, std::vector<std::uint32_t>> streams = positions_by_id(data, true);
    for (auto& [id, stream] : streams) {
      IdData d;
      d.id = id;
      d.stream = std::move(stream);
      std::size_t run_begin = 0;
      for (std::size_t i = 1; i <= d.stream.size(); ++i) {
        bool boundary = i == d.stream.size() ||
                        (!data.block.empty() && data.block[d.stream[i]] != data.block[d.stream[run_begin]]);
        if (boundary) {
          std::size_t run_len = i - run_begin;
          if (run_len >= static_cast<std::size_t>(config.seq_len) + 1)
            for (std::size_t w = run_begin; w + static_cast<std::size_t>(config.seq_len) < i; ++w)
              d.windows.push_back(Window{static_cast<std::uint32_t>(w),
                                         static_cast<std::uint32_t>(w + static_cast<std::size_t>(config.seq_len))});
          run_begin = i;
        }
      }
      if (d.windows.empty())
        model.skipped_.push_back(id);
      else
        ids.push_back(std::move(d));
    }
  }
  if (ids.empty()) throw DataError("train_sota_lstm: no id has enough normal history");

  std::vector<SubModel> trained(ids.size());
  parallel_tasks(static_cast<std::int64_t>(ids.size()), [&](std::int64_t t) {
    const IdData& d = ids[static_cast<std::size_t>(t)];
    std::uint64_t salt = 0x9e3779b97f4a7c15ull * (d.id + 1);
    TrainSeeds sub_seeds{seeds.init ^ salt, seeds.dropout ^ salt, seeds.shuffle ^ salt};
    SubModel sub;
    sub.params = init_params(config, sub_seeds.init);
    autograd::AdamState<float> adam;
    adam.learning_rate = static_cast<float>(config.learning_rate);

    // holdout split over windows
    std::vector<std::uint32_t> order(d.windows.size());
    for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng holdout_rng(sub_seeds.shuffle ^ 0x5117u);
    std::vector<std::uint32_t> shuffled = order;
    holdout_rng.shuffle(shuffled);
    auto n_val = static_cast<std::size_t>(
        std::llround(config.val_fraction * static_cast<double>(order.size())));
    n_val = std::min(n_val, order.size() > 1 ? order.size() - 1 : std::size_t{0});
    std::vector<std::uint32_t> val_idx(shuffled.begin(),
                                       shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::uint32_t> train_idx(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val),
                                         shuffled.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());

    auto run_batches = [&](std::span<const std::uint32_t> rows, bool train_mode, Rng* dropout_rng) {
      double loss_sum = 0.0;
      std::size_t done = 0;
      int batch = std::max(1, config.batch_size);
      while (done < rows.size()) {
        std::size_t n = std::min<std::size_t>(batch, rows.size() - done);
        std::vector<Window> batch_windows(n);
        for (std::size_t i = 0; i < n; ++i) batch_windows[i] = d.windows[rows[done + i]];
        Graph<float> g;
        auto p = leaf_params(g, sub.params, train_mode);
        auto x = g.leaf(window_tensor(data.samples, d.stream, batch_windows, config.seq_len), false);
        auto target = g.leaf(target_tensor(data.samples, d.stream, batch_windows), false);
        auto pred = build_prediction<float>(g, p, x, config, train_mode,
                                            dropout_rng ? dropout_rng->fork() : 0);
        auto loss = g.binary_crossentropy(pred, target);
        loss_sum += static_cast<double>(g.value(loss).v[0]) * static_cast<double>(n);
        if (train_mode) {
          g.backward(loss);
          std::vector<Tensor<float>*> ptrs;
          std::vector<const Tensor<float>*> grads;
          for (std::size_t i = 0; i < sub.params.size(); ++i) {
            ptrs.push_back(&sub.params[i]);
            grads.push_back(&g.grad(p[i]));
          }
          adam_step<float>(ptrs, grads, adam);
        }
        done += n;
      }
      return rows.empty() ? 0.0 : loss_sum / static_cast<double>(rows.size());
    };

    Rng shuffle_rng(sub_seeds.shuffle);
    Rng dropout_rng(sub_seeds.dropout);
    EarlyStopper stopper(config.patience, /*maximize=*/false);
    std::vector<Tensor<float>> best = sub.params;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
      std::vector<std::uint32_t> epoch_order = train_idx;
      shuffle_rng.shuffle(epoch_order);
      double train_loss = run_batches(epoch_order, true, &dropout_rng);
      double val_loss = val_idx.empty() ? train_loss : run_batches(val_idx, false, nullptr);
      if (stopper.update(val_loss)) best = sub.params;
      if (stopper.should_stop()) break;
    }
    sub.params = std::move(best);

    // per-window training errors -> detection threshold
    sub.train_errors.reserve(d.windows.size());
    std::size_t done = 0;
    while (done < d.windows.size()) {
      std::size_t n = std::min<std::size_t>(256, d.windows.size() - done);
      std::span<const Window> batch_windows(d.windows.data() + done, n);
      Graph<float> g;
      auto p = leaf_params(g, sub.params, false);
      auto x = g.leaf(window_tensor(data.samples, d.stream, batch_windows, config.seq_len), false);
      auto pred = build_prediction<float>(g, p, x, config, false, 0);
      Tensor<float> targets = target_tensor(data.samples, d.stream, batch_windows);
      const auto& pv = g.value(pred).v;
      for (std::size_t i = 0; i < n; ++i)
        sub.train_errors.push_back(static_cast<float>(
            bce_error({pv.data() + i * kBits, kBits}, {targets.v.data() + i * kBits, kBits})));
      done += n;
    }
    std::vector<double> errs(sub.train_errors.begin(), sub.train_errors.end());
    sub.threshold = percentile(std::move(errs), config.threshold_percentile);
    trained[static_cast<std::size_t>(t)] = std::move(sub);
  });

  for (std::size_t i = 0; i < ids.size(); ++i) model.sub_[ids[i].id] = std::move(trained[i]);
  return model;
}

double SotaLstm::threshold(std::uint16_t id) const {
  auto it = sub_.find(id);
  if (it == sub_.end()) throw DataError("sota_lstm: no sub-model for id " + std::to_string(id));
  return it->second.threshold;
}

std::vector<float> SotaLstm::predict_next_bits(
    std::uint16_t id, std::span<const pipeline::LabeledSample> window) const {
  auto it = sub_.find(id);
  if (it == sub_.end()) throw DataError("sota_lstm: no sub-model for id " + std::to_string(id));
  if (window.size() != static_cast<std::size_t>(cfg_.seq_len))
    throw autograd::ShapeError("sota_lstm.predict", "expected a window of " +
                                                        std::to_string(cfg_.seq_len) + " samples");
  Graph<float> g;
  auto p = leaf_params(g, it->second.params, false);
  auto x = Tensor<float>::zeros({1, cfg_.seq_len, pipeline::kFeatureCount});
  for (int s = 0; s < cfg_.seq_len; ++s)
    std::copy_n(window[static_cast<std::size_t>(s)].features.f.data(), pipeline::kFeatureCount,
                x.v.data() + static_cast<std::size_t>(s) * pipeline::kFeatureCount);
  auto pred = build_prediction<float>(g, p, g.leaf(std::move(x), false), cfg_, false, 0);
  return g.value(pred).v;
}

double SotaLstm::window_error(std::uint16_t id, std::span<const pipeline::LabeledSample> window,
                              const pipeline::FeatureVector& next) const {
  auto pred = predict_next_bits(id, window);
  return bce_error(pred, {next.f.data() + pipeline::kDataBitsBegin, kBits});
}

std::pair<Tensor<float>, std::vector<float>> SotaLstm::input_gradient(
    std::uint16_t id, std::span<const pipeline::LabeledSample> window,
    std::span<const float> target_bits) const {
  auto it = sub_.find(id);
  if (it == sub_.end()) throw DataError("sota_lstm: no sub-model for id " + std::to_string(id));
  if (window.size() != static_cast<std::size_t>(cfg_.seq_len) || target_bits.size() != kBits)
    throw autograd::ShapeError("sota_lstm.input_gradient", "window/target geometry mismatch");
  Graph<float> g;
  auto p = leaf_params(g, it->second.params, false);
  auto x = Tensor<float>::zeros({1, cfg_.seq_len, pipeline::kFeatureCount});
  for (int s = 0; s < cfg_.seq_len; ++s)
    std::copy_n(window[static_cast<std::size_t>(s)].features.f.data(), pipeline::kFeatureCount,
                x.v.data() + static_cast<std::size_t>(s) * pipeline::kFeatureCount);
  auto x_id = g.leaf(std::move(x), true);
  auto t_id = g.leaf(Tensor<float>({1, kBits}, std::vector<float>(target_bits.begin(), target_bits.end())),
                     true);
  auto pred = build_prediction<float>(g, p, x_id, cfg_, false, 0);
  auto loss = g.binary_crossentropy(pred, t_id);
  g.backward(loss);
  return {g.grad(x_id), g.grad(t_id).v};
}

std::vector<int> SotaLstm::classify_stream(const pipeline::Dataset& view) const {
  std::vector<int> labels(view.samples.size(), 0);

  struct IdStream {
    std::uint16_t id;
    std::vector<std::uint32_t> stream;
    std::vector<Window> windows;  // window -> target position in stream
  };

  std::map<std::uint16_t, std::vector<std::uint32_t>> streams = positions_by_id(view, false);
  std::vector<IdStream> work;
  for (auto& [id, stream] : streams) {
    auto it = sub_.find(id);
    if (it == sub_.end()) {
      for (auto pos : stream) labels[pos] = 1;  // unseen id rule
      continue;
    }
    IdStream s;
    s.id = id;
    s.stream = std::move(stream);
    std::size_t run_begin = 0;
    for (std::size_t i = 1; i <= s.stream.size(); ++i) {
      bool boundary = i == s.stream.size() ||
                      (!view.block.empty() && view.block[s.stream[i]] != view.block[s.stream[run_begin]]);
      if (boundary) {
        for (std::size_t w = run_begin; w + static_cast<std::size_t>(cfg_.seq_len) < i; ++w)
          s.windows.push_back(Window{static_cast<std::uint32_t>(w),
                                     static_cast<std::uint32_t>(w + static_cast<std::size_t>(cfg_.seq_len))});
        run_begin = i;
      }
    }
    if (!s.windows.empty()) work.push_back(std::move(s));
  }

  parallel_tasks(static_cast<std::int64_t>(work.size()), [&](std::int64_t t) {
    const IdStream& s = work[static_cast<std::size_t>(t)];
    const SubModel& sub = sub_.at(s.id);
    std::size_t done = 0;
    while (done < s.windows.size()) {
      std::size_t n = std::min<std::size_t>(256, s.windows.size() - done);
      std::span<const Window> batch(s.windows.data() + done, n);
      Graph<float> g;
      auto p = leaf_params(g, sub.params, false);
      auto x = g.leaf(window_tensor(view.samples, s.stream, batch, cfg_.seq_len), false);
      auto pred = build_prediction<float>(g, p, x, cfg_, false, 0);
      Tensor<float> targets = target_tensor(view.samples, s.stream, batch);
      const auto& pv = g.value(pred).v;
      for (std::size_t i = 0; i < n; ++i) {
        double err = bce_error({pv.data() + i * kBits, kBits}, {targets.v.data() + i * kBits, kBits});
        labels[s.stream[batch[i].target]] = err > sub.threshold ? 1 : 0;
      }
      done += n;
    }
  });
  return labels;
}

std::string SotaLstm::to_json_text() const {
  nlohmann::json j;
  j["config"] = {{"seq_len", cfg_.seq_len},
                 {"dense_units", cfg_.dense_units},
                 {"lstm_units", cfg_.lstm_units},
                 {"width_scale", cfg_.width_scale},
                 {"dropout", cfg_.dropout},
                 {"learning_rate", cfg_.learning_rate},
                 {"epochs", cfg_.epochs},
                 {"batch_size", cfg_.batch_size},
                 {"patience", cfg_.patience},
                 {"val_fraction", cfg_.val_fraction},
                 {"threshold_percentile", cfg_.threshold_percentile}};
  j["seeds"] = detail::seeds_to_json(seeds_);
  j["skipped_ids"] = skipped_;
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& [id, sub] : sub_) {
    subs.push_back({{"id", id},
                    {"threshold", sub.threshold},
                    {"train_errors", floats_to_base64(sub.train_errors)},
                    {"params", detail::tensors_to_json(sub.params)}});
  }
  j["sub_models"] = std::move(subs);
  return j.dump();
}

SotaLstm SotaLstm::from_json_text(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  SotaLstm m;
  const auto& c = j.at("config");
  m.cfg_.seq_len = c.value("seq_len", 20);
  m.cfg_.dense_units = c.value("dense_units", 128);
  m.cfg_.lstm_units = c.value("lstm_units", 512);
  m.cfg_.width_scale = c.value("width_scale", 1.0);
  m.cfg_.dropout = c.value("dropout", 0.2);
  m.cfg_.learning_rate = c.value("learning_rate", 0.001);
  m.cfg_.epochs = c.value("epochs", 10);
  m.cfg_.batch_size = c.value("batch_size", 64);
  m.cfg_.patience = c.value("patience", 3);
  m.cfg_.val_fraction = c.value("val_fraction", 0.1);
  m.cfg_.threshold_percentile = c.value("threshold_percentile", 99.0);
  m.seeds_ = detail::seeds_from_json(j.at("seeds"));
  m.skipped_ = j.value("skipped_ids", std::vector<std::uint16_t>{});
  for (const auto& s : j.at("sub_models")) {
    SubModel sub;
    sub.threshold = s.at("threshold").get<double>();
    sub.train_errors = base64_to_floats(s.at("train_errors").get<std::string>());
    sub.params = detail::tensors_from_json(s.at("params"));
    m.sub_[s.at("id").get<std::uint16_t>()] = std::move(sub);
  }
  return m;
}

}  // namespace canids::models
