#include "canids/models/training.hpp"

#include <algorithm>
#include <cmath>

#include "canids/common.hpp"

namespace canids::models {

int early_stop_epoch(std::span<const double> metrics, int patience, bool maximize) {
  EarlyStopper stopper(patience, maximize);
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    stopper.update(metrics[i]);
    if (stopper.should_stop()) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(metrics.size());
}

void stratified_holdout(std::span<const pipeline::LabeledSample> samples, double val_fraction,
                        std::uint64_t seed, std::vector<std::uint32_t>& train_idx,
                        std::vector<std::uint32_t>& val_idx) {
  train_idx.clear();
  val_idx.clear();
  std::vector<std::uint32_t> by_class[2];
  for (std::uint32_t i = 0; i < samples.size(); ++i)
    by_class[samples[i].label ? 1 : 0].push_back(i);
  Rng rng(seed);
  std::vector<std::uint8_t> is_val(samples.size(), 0);
  for (auto& idx : by_class) {
    if (idx.empty()) continue;
    rng.shuffle(idx);
    auto n_val = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(idx.size())));
    n_val = std::min(n_val, idx.size() > 1 ? idx.size() - 1 : std::size_t{0});
    for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = 1;
  }
  for (std::uint32_t i = 0; i < samples.size(); ++i)
    (is_val[i] ? val_idx : train_idx).push_back(i);
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw DataError("percentile: empty value set");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  rank = std::clamp(rank, 0.0, static_cast<double>(values.size() - 1));
  auto lo = static_cast<std::size_t>(rank);
  double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

autograd::Tensor<float> feature_matrix(std::span<const pipeline::LabeledSample> samples,
                                       std::span<const std::uint32_t> rows) {
  auto t = autograd::Tensor<float>::zeros(
      {static_cast<int>(rows.size()), pipeline::kFeatureCount});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(samples[rows[r]].features.f.data(), pipeline::kFeatureCount,
                t.v.data() + r * pipeline::kFeatureCount);
  return t;
}

std::vector<int> label_vector(std::span<const pipeline::LabeledSample> samples,
                              std::span<const std::uint32_t> rows) {
  std::vector<int> labels(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) labels[r] = samples[rows[r]].label;
  return labels;
}

}  // namespace canids::models
