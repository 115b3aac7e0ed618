#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "canids/autograd.hpp"
#include "canids/pipeline.hpp"

namespace canids::models {

struct TrainSeeds {
  std::uint64_t init = 1;
  std::uint64_t dropout = 2;
  std::uint64_t shuffle = 3;
};

// Patience-based early stopping: training halts after `patience` consecutive
// epochs without strict improvement. The best epoch's weights are kept.
class EarlyStopper {
 public:
  EarlyStopper(int patience, bool maximize) : patience_(patience), maximize_(maximize) {}

  // Returns true when `metric` strictly improves on the best seen so far.
  bool update(double metric) {
    bool better = best_epoch_ < 0 || (maximize_ ? metric > best_ : metric < best_);
    ++epoch_;
    if (better) {
      best_ = metric;
      best_epoch_ = epoch_;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return better;
  }

  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  bool maximize_;
  double best_ = 0.0;
  int best_epoch_ = -1;
  int stale_ = 0;
  int epoch_ = 0;
};

// Replays a per-epoch metric trace; returns the 1-based epoch after which
// training stops (the trace length if patience is never exhausted).
int early_stop_epoch(std::span<const double> metrics, int patience, bool maximize);

// Seeded stratified split into train/validation index lists (original order
// preserved inside each part).
void stratified_holdout(std::span<const pipeline::LabeledSample> samples, double val_fraction,
                        std::uint64_t seed, std::vector<std::uint32_t>& train_idx,
                        std::vector<std::uint32_t>& val_idx);

// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double pct);

// Copies sample features into a [rows.size(), 77] float tensor.
autograd::Tensor<float> feature_matrix(std::span<const pipeline::LabeledSample> samples,
                                       std::span<const std::uint32_t> rows);

std::vector<int> label_vector(std::span<const pipeline::LabeledSample> samples,
                              std::span<const std::uint32_t> rows);

}  // namespace canids::models
