#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "canids/pipeline.hpp"

namespace canids::models {

// The five sub-learners share this surface: fit on 77-feature rows with 0/1
// labels, predict a label per row.
struct LogisticRegressionModel {
  std::vector<float> weights;  // 77 weights + bias at the end
  double l2 = 1e-4;
  double learning_rate = 0.5;
  int iterations = 300;

  void fit(std::span<const pipeline::LabeledSample> samples);
  int predict(std::span<const float> x) const;
  double decision(std::span<const float> x) const;
};

struct DecisionTreeModel {
  struct Node {
    int feature = -1;        // -1 marks a leaf
    float threshold = 0.0f;  // go left when x[feature] <= threshold
    int left = -1;
    int right = -1;
    std::uint8_t leaf_label = 0;
  };
  std::vector<Node> nodes;
  int max_depth = 12;

  void fit(std::span<const pipeline::LabeledSample> samples);
  int predict(std::span<const float> x) const;
};

struct LinearSvmModel {
  std::vector<float> weights;  // 77 weights + bias
  double l2 = 1e-4;
  double learning_rate = 0.5;
  int iterations = 300;

  void fit(std::span<const pipeline::LabeledSample> samples);
  int predict(std::span<const float> x) const;
  double decision(std::span<const float> x) const;
};

struct KnnModel {
  int k = 5;
  std::vector<float> train_features;  // row-major [n, 77]
  std::vector<std::uint8_t> train_labels;

  void fit(std::span<const pipeline::LabeledSample> samples);
  int predict(std::span<const float> x) const;
};

struct GaussianNbModel {
  double variance_floor = 1e-9;
  std::array<double, 2> log_prior{};
  std::vector<double> mean;      // [2, 77]
  std::vector<double> variance;  // [2, 77]

  void fit(std::span<const pipeline::LabeledSample> samples);
  int predict(std::span<const float> x) const;
};

// Hard-voting combination of the five learners. Five binary voters cannot
// tie.
class EnsembleModel {
 public:
  static EnsembleModel train(const pipeline::Dataset& data, std::uint64_t seed);

  int predict_label(std::span<const float> features) const;
  std::vector<int> predict_labels(std::span<const pipeline::LabeledSample> samples) const;
  std::array<int, 5> votes(std::span<const float> features) const;

  static int majority(const std::array<int, 5>& votes);

  const LogisticRegressionModel& logistic() const { return logistic_; }
  const DecisionTreeModel& tree() const { return tree_; }
  const LinearSvmModel& svm() const { return svm_; }
  const KnnModel& knn() const { return knn_; }
  const GaussianNbModel& nb() const { return nb_; }

  std::string to_json_text() const;
  static EnsembleModel from_json_text(const std::string& text);

 private:
  LogisticRegressionModel logistic_;
  DecisionTreeModel tree_;
  LinearSvmModel svm_;
  KnnModel knn_;
  GaussianNbModel nb_;
  std::uint64_t seed_ = 0;
};

}  // namespace canids::models
