#include "canids/models/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "canids/common.hpp"
#include "json.hpp"

namespace canids::models {

namespace {

constexpr int kF = pipeline::kFeatureCount;

void require_two_classes(std::span<const pipeline::LabeledSample> samples, const char* op) {
  std::size_t attack = 0;
  for (const auto& s : samples) attack += s.label;
  if (samples.empty() || attack == 0 || attack == samples.size())
    throw DataError(std::string(op) + ": need both classes in the training data");
}

double dot_plus_bias(std::span<const float> w, std::span<const float> x) {
  double acc = static_cast<double>(w[kF]);  // bias
  for (int i = 0; i < kF; ++i) acc += static_cast<double>(w[static_cast<std::size_t>(i)]) *
                                      static_cast<double>(x[static_cast<std::size_t>(i)]);
  return acc;
}

}  // namespace

// ---------------------------------------------------------------- logistic

void LogisticRegressionModel::fit(std::span<const pipeline::LabeledSample> samples) {
  require_two_classes(samples, "logistic_regression");
  weights.assign(kF + 1, 0.0f);
  std::vector<double> grad(static_cast<std::size_t>(kF) + 1);
  auto n = static_cast<double>(samples.size());
  for (int it = 0; it < iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& s : samples) {
      double z = dot_plus_bias(weights, s.features.f);
      double p = 1.0 / (1.0 + std::exp(-z));
      double err = p - static_cast<double>(s.label);
      for (int i = 0; i < kF; ++i)
        grad[static_cast<std::size_t>(i)] += err * static_cast<double>(s.features.f[static_cast<std::size_t>(i)]);
      grad[static_cast<std::size_t>(kF)] += err;
    }
    for (int i = 0; i <= kF; ++i) {
      double g = grad[static_cast<std::size_t>(i)] / n;
      if (i < kF) g += l2 * static_cast<double>(weights[static_cast<std::size_t>(i)]);
      weights[static_cast<std::size_t>(i)] -= static_cast<float>(learning_rate * g);
    }
  }
}

double LogisticRegressionModel::decision(std::span<const float> x) const {
  return dot_plus_bias(weights, x);
}

int LogisticRegressionModel::predict(std::span<const float> x) const {
  return decision(x) > 0.0 ? 1 : 0;
}

// ---------------------------------------------------------------- decision tree

namespace {

double gini_impurity(std::size_t pos, std::size_t total) {
  if (total == 0) return 0.0;
  double p = static_cast<double>(pos) / static_cast<double>(total);
  return 2.0 * p * (1.0 - p);
}

struct TreeBuilder {
  std::span<const pipeline::LabeledSample> samples;
  std::vector<DecisionTreeModel::Node>& nodes;
  int max_depth;

  int build(std::vector<std::uint32_t>& idx, int depth) {
    std::size_t pos = 0;
    for (auto i : idx) pos += samples[i].label;
    auto make_leaf = [&] {
      DecisionTreeModel::Node leaf;
      leaf.leaf_label = pos * 2 > idx.size() ? 1 : 0;  // tie -> normal
      nodes.push_back(leaf);
      return static_cast<int>(nodes.size() - 1);
    };
    if (depth >= max_depth || idx.size() < 2 || pos == 0 || pos == idx.size()) return make_leaf();

    double parent = gini_impurity(pos, idx.size());
    double best_gain = 1e-12;
    int best_feature = -1;
    float best_threshold = 0.0f;

    std::vector<std::pair<float, std::uint8_t>> column(idx.size());
    for (int f = 0; f < kF; ++f) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        column[i] = {samples[idx[i]].features.f[static_cast<std::size_t>(f)], samples[idx[i]].label};
      std::sort(column.begin(), column.end());
      std::size_t left_pos = 0;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        left_pos += column[i].second;
        if (column[i].first == column[i + 1].first) continue;
        std::size_t left_n = i + 1;
        std::size_t right_n = column.size() - left_n;
        double weighted =
            (static_cast<double>(left_n) * gini_impurity(left_pos, left_n) +
             static_cast<double>(right_n) * gini_impurity(pos - left_pos, right_n)) /
            static_cast<double>(column.size());
        double gain = parent - weighted;
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          best_threshold = (column[i].first + column[i + 1].first) / 2.0f;
        }
      }
    }
    if (best_feature < 0) return make_leaf();

    std::vector<std::uint32_t> left, right;
    for (auto i : idx)
      (samples[i].features.f[static_cast<std::size_t>(best_feature)] <= best_threshold ? left : right)
          .push_back(i);
    if (left.empty() || right.empty()) return make_leaf();

    DecisionTreeModel::Node node;
    node.feature = best_feature;
    node.threshold = best_threshold;
    nodes.push_back(node);
    int self = static_cast<int>(nodes.size() - 1);
    idx.clear();
    idx.shrink_to_fit();
    int l = build(left, depth + 1);
    int r = build(right, depth + 1);
    nodes[static_cast<std::size_t>(self)].left = l;
    nodes[static_cast<std::size_t>(self)].right = r;
    return self;
  }
};

}  // namespace

void DecisionTreeModel::fit(std::span<const pipeline::LabeledSample> samples) {
  require_two_classes(samples, "decision_tree");
  nodes.clear();
  std::vector<std::uint32_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0u);
  TreeBuilder builder{samples, nodes, max_depth};
  builder.build(idx, 0);
}

int DecisionTreeModel::predict(std::span<const float> x) const {
  int at = 0;
  while (true) {
    const Node& n = nodes[static_cast<std::size_t>(at)];
    if (n.feature < 0) return n.leaf_label;
    at = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
}

// ---------------------------------------------------------------- linear svm

void LinearSvmModel::fit(std::span<const pipeline::LabeledSample> samples) {
  require_two_classes(samples, "linear_svm");
  weights.assign(kF + 1, 0.0f);
  std::vector<double> grad(static_cast<std::size_t>(kF) + 1);
  auto n = static_cast<double>(samples.size());
  for (int it = 0; it < iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& s : samples) {
      double y = s.label ? 1.0 : -1.0;
      double margin = y * dot_plus_bias(weights, s.features.f);
      if (margin >= 1.0) continue;  // hinge subgradient is zero
      for (int i = 0; i < kF; ++i)
        grad[static_cast<std::size_t>(i)] -= y * static_cast<double>(s.features.f[static_cast<std::size_t>(i)]);
      grad[static_cast<std::size_t>(kF)] -= y;
    }
    double lr = learning_rate / std::sqrt(static_cast<double>(it + 1));
    for (int i = 0; i <= kF; ++i) {
      double g = grad[static_cast<std::size_t>(i)] / n;
      if (i < kF) g += l2 * static_cast<double>(weights[static_cast<std::size_t>(i)]);
      weights[static_cast<std::size_t>(i)] -= static_cast<float>(lr * g);
    }
  }
}

double LinearSvmModel::decision(std::span<const float> x) const { return dot_plus_bias(weights, x); }

int LinearSvmModel::predict(std::span<const float> x) const { return decision(x) > 0.0 ? 1 : 0; }

// ---------------------------------------------------------------- knn

void KnnModel::fit(std::span<const pipeline::LabeledSample> samples) {
  require_two_classes(samples, "knn");
  train_features.resize(samples.size() * kF);
  train_labels.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy_n(samples[i].features.f.data(), kF, train_features.data() + i * kF);
    train_labels[i] = samples[i].label;
  }
}

int KnnModel::predict(std::span<const float> x) const {
  auto n = train_labels.size();
  int kept = std::min<int>(k, static_cast<int>(n));
  // (distance, index) heap of the current best; index breaks distance ties
  std::vector<std::pair<double, std::size_t>> best;
  best.reserve(static_cast<std::size_t>(kept) + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = train_features.data() + i * kF;
    double d = 0.0;
    for (int f = 0; f < kF; ++f) {
      double diff = static_cast<double>(row[f]) - static_cast<double>(x[static_cast<std::size_t>(f)]);
      d += diff * diff;
    }
    std::pair<double, std::size_t> cand{d, i};
    if (best.size() < static_cast<std::size_t>(kept)) {
      best.push_back(cand);
      std::push_heap(best.begin(), best.end());
    } else if (cand < best.front()) {
      std::pop_heap(best.begin(), best.end());
      best.back() = cand;
      std::push_heap(best.begin(), best.end());
    }
  }
  int votes = 0;
  for (const auto& [d, i] : best) votes += train_labels[i];
  return votes * 2 > kept ? 1 : 0;
}

// ---------------------------------------------------------------- gaussian nb

void GaussianNbModel::fit(std::span<const pipeline::LabeledSample> samples) {
  require_two_classes(samples, "gaussian_nb");
  mean.assign(2 * kF, 0.0);
  variance.assign(2 * kF, 0.0);
  std::array<std::size_t, 2> counts{};
  for (const auto& s : samples) {
    counts[s.label]++;
    for (int f = 0; f < kF; ++f)
      mean[static_cast<std::size_t>(s.label) * kF + static_cast<std::size_t>(f)] +=
          static_cast<double>(s.features.f[static_cast<std::size_t>(f)]);
  }
  for (int c = 0; c < 2; ++c)
    for (int f = 0; f < kF; ++f)
      mean[static_cast<std::size_t>(c) * kF + static_cast<std::size_t>(f)] /=
          static_cast<double>(counts[static_cast<std::size_t>(c)]);
  for (const auto& s : samples) {
    for (int f = 0; f < kF; ++f) {
      double d = static_cast<double>(s.features.f[static_cast<std::size_t>(f)]) -
                 mean[static_cast<std::size_t>(s.label) * kF + static_cast<std::size_t>(f)];
      variance[static_cast<std::size_t>(s.label) * kF + static_cast<std::size_t>(f)] += d * d;
    }
  }
  for (int c = 0; c < 2; ++c)
    for (int f = 0; f < kF; ++f) {
      double& v = variance[static_cast<std::size_t>(c) * kF + static_cast<std::size_t>(f)];
      v = std::max(v / static_cast<double>(counts[static_cast<std::size_t>(c)]), variance_floor);
    }
  auto total = static_cast<double>(samples.size());
  log_prior[0] = std::log(static_cast<double>(counts[0]) / total);
  log_prior[1] = std::log(static_cast<double>(counts[1]) / total);
}

int GaussianNbModel::predict(std::span<const float> x) const {
  std::array<double, 2> score = log_prior;
  for (int c = 0; c < 2; ++c) {
    for (int f = 0; f < kF; ++f) {
      double m = mean[static_cast<std::size_t>(c) * kF + static_cast<std::size_t>(f)];
      double v = variance[static_cast<std::size_t>(c) * kF + static_cast<std::size_t>(f)];
      double d = static_cast<double>(x[static_cast<std::size_t>(f)]) - m;
      score[static_cast<std::size_t>(c)] += -0.5 * (std::log(2.0 * 3.141592653589793 * v) + d * d / v);
    }
  }
  return score[1] > score[0] ? 1 : 0;
}

// ---------------------------------------------------------------- ensemble

EnsembleModel EnsembleModel::train(const pipeline::Dataset& data, std::uint64_t seed) {
  require_two_classes(data.samples, "train_ensemble");
  EnsembleModel model;
  model.seed_ = seed;
  model.logistic_.fit(data.samples);
  model.tree_.fit(data.samples);
  model.svm_.fit(data.samples);
  model.knn_.fit(data.samples);
  model.nb_.fit(data.samples);
  return model;
}

int EnsembleModel::majority(const std::array<int, 5>& votes) {
  int sum = 0;
  for (int v : votes) sum += v;
  return sum >= 3 ? 1 : 0;
}

std::array<int, 5> EnsembleModel::votes(std::span<const float> x) const {
  return {logistic_.predict(x), tree_.predict(x), svm_.predict(x), knn_.predict(x), nb_.predict(x)};
}

int EnsembleModel::predict_label(std::span<const float> x) const { return majority(votes(x)); }

std::vector<int> EnsembleModel::predict_labels(
    std::span<const pipeline::LabeledSample> samples) const {
  std::vector<int> labels(samples.size());
  parallel_for(static_cast<std::int64_t>(samples.size()), [&](std::int64_t i) {
    labels[static_cast<std::size_t>(i)] =
        predict_label(samples[static_cast<std::size_t>(i)].features.f);
  });
  return labels;
}

namespace {

using nlohmann::json;

json linear_to_json(const std::vector<float>& w) { return floats_to_base64(w); }

std::vector<float> linear_from_json(const json& j) {
  return base64_to_floats(j.get<std::string>());
}

}  // namespace

std::string EnsembleModel::to_json_text() const {
  json j;
  j["seed"] = seed_;
  j["logistic"] = {{"weights", linear_to_json(logistic_.weights)}};
  json tree_nodes = json::array();
  for (const auto& n : tree_.nodes)
    tree_nodes.push_back({n.feature, n.threshold, n.left, n.right, n.leaf_label});
  j["tree"] = {{"nodes", tree_nodes}, {"max_depth", tree_.max_depth}};
  j["svm"] = {{"weights", linear_to_json(svm_.weights)}};
  j["knn"] = {{"k", knn_.k},
              {"features", floats_to_base64(knn_.train_features)},
              {"labels", base64_encode(knn_.train_labels.data(), knn_.train_labels.size())}};
  j["nb"] = {{"log_prior", nb_.log_prior},
             {"mean", doubles_to_base64(nb_.mean)},
             {"variance", doubles_to_base64(nb_.variance)}};
  return j.dump();
}

EnsembleModel EnsembleModel::from_json_text(const std::string& text) {
  json j = json::parse(text);
  EnsembleModel m;
  m.seed_ = j.value("seed", std::uint64_t{0});
  m.logistic_.weights = linear_from_json(j.at("logistic").at("weights"));
  m.tree_.max_depth = j.at("tree").value("max_depth", 12);
  for (const auto& n : j.at("tree").at("nodes")) {
    DecisionTreeModel::Node node;
    node.feature = n.at(0).get<int>();
    node.threshold = n.at(1).get<float>();
    node.left = n.at(2).get<int>();
    node.right = n.at(3).get<int>();
    node.leaf_label = n.at(4).get<std::uint8_t>();
    m.tree_.nodes.push_back(node);
  }
  m.svm_.weights = linear_from_json(j.at("svm").at("weights"));
  m.knn_.k = j.at("knn").value("k", 5);
  m.knn_.train_features = base64_to_floats(j.at("knn").at("features").get<std::string>());
  auto labels = base64_decode(j.at("knn").at("labels").get<std::string>());
  m.knn_.train_labels.assign(labels.begin(), labels.end());
  m.nb_.log_prior = j.at("nb").at("log_prior").get<std::array<double, 2>>();
  m.nb_.mean = base64_to_doubles(j.at("nb").at("mean").get<std::string>());
  m.nb_.variance = base64_to_doubles(j.at("nb").at("variance").get<std::string>());
  return m;
}

}  // namespace canids::models
