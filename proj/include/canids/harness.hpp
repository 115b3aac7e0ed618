#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canids/adversary.hpp"
#include "canids/models/handle.hpp"
#include "canids/pipeline.hpp"

namespace canids::harness {

struct Metrics {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::optional<double> accuracy, f1, fnr, fpr;

  std::int64_t total() const { return tp + fp + tn + fn; }

  // Derives the rate metrics from the confusion counts. Degenerate
  // denominators leave the metric unset rather than silently zero; F1 uses
  // 2tp/(2tp+fp+fn), which is 0 (not undefined) whenever tp = 0 but some
  // positive exists on either side.
  static Metrics from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn);
  static Metrics from_predictions(std::span<const int> predicted, std::span<const int> truth);
};

enum class Phase { Baseline, Adversarial, Defence };

std::string_view phase_name(Phase phase);

struct ExperimentReport {
  Phase phase = Phase::Baseline;
  models::Family family = models::Family::BlDnn;
  adversary::Scenario scenario = adversary::Scenario::Full;
  std::string dataset_tag;  // B, C, B', C'
  Metrics metrics;
  std::uint64_t seed = 0;
  std::string config_digest;
};

// Restricts a dataset to the logs a scenario covers: the matching attack log
// plus any pure-normal logs (everything for Full). Order is preserved.
pipeline::Dataset scenario_view(const pipeline::Dataset& data, adversary::Scenario scenario);

// Evaluates a trained model against ground truth using its own geometry:
// single messages for BL-DNN and the ensemble, id-bit frames for SOTA-CNN,
// per-id sequence classification for SOTA-LSTM.
Metrics evaluate(const models::ModelHandle& handle, const pipeline::Dataset& view,
                 int frame_stride = 1);

// Adapter exposing a trained BL-DNN to the sample generator.
class BlDnnGradientAdapter final : public adversary::GradientModel {
 public:
  explicit BlDnnGradientAdapter(const models::BlDnn& model) : model_(&model) {}
  int predict_label(std::span<const float> features) const override {
    return model_->predict_label(features);
  }
  std::vector<float> input_gradient(std::span<const float> features,
                                    int target_label) const override {
    return model_->input_gradient(features, target_label);
  }

 private:
  const models::BlDnn* model_;
};

struct ScenarioArtifacts {
  pipeline::Dataset b_clean, c_clean;  // scenario views of B and C
  pipeline::Dataset b_adv, c_adv;      // same views with matching attacks perturbed
  std::vector<adversary::AdversarialResult> results_b, results_c;
};

struct AdversarialArtifacts {
  std::map<adversary::Scenario, ScenarioArtifacts> per_scenario;
};

// Generates B' and C' for every requested scenario on the BL-DNN model.
AdversarialArtifacts generate_adversarial_datasets(const models::BlDnn& generator,
                                                   const pipeline::Dataset& b,
                                                   const pipeline::Dataset& c,
                                                   std::span<const adversary::Scenario> scenarios,
                                                   const adversary::AttackConfig& config);

struct ReportContext {
  std::uint64_t seed = 0;
  std::string config_digest;
  int frame_stride = 1;
};

// Baseline test: every model on the full clean B and C.
std::vector<ExperimentReport> run_baseline_test(
    std::span<const models::ModelHandle* const> handles, const pipeline::Dataset& b,
    const pipeline::Dataset& c, const ReportContext& ctx);

// FNR of each model on each scenario's B'+C' (rows: scenarios in kAllScenarios
// order, columns: models in the order passed).
struct TransferMatrix {
  std::vector<adversary::Scenario> scenarios;
  std::vector<models::Family> families;
  std::vector<std::vector<std::optional<double>>> fnr;  // [scenario][model]
};

struct AdversarialTestOutput {
  std::vector<ExperimentReport> reports;            // phase=Adversarial rows on B'/C'
  std::vector<ExperimentReport> clean_references;   // phase=Baseline rows on the scenario views
  TransferMatrix transfer;
};

AdversarialTestOutput run_adversarial_test(std::span<const models::ModelHandle* const> handles,
                                           const AdversarialArtifacts& artifacts,
                                           const ReportContext& ctx);

struct RetrainConfig {
  int epochs = 10;
  int patience = 3;
  std::uint64_t seed = 11;
};

// Adversarial training on B': BL-DNN and SOTA-CNN fine-tune from their
// trained state; the ensemble refits on A united with B'. SOTA-LSTM is not
// retrained.
models::ModelHandle adversarial_retrain(const models::ModelHandle& handle,
                                        const pipeline::Dataset& dataset_a,
                                        const pipeline::Dataset& b_adv,
                                        const RetrainConfig& config, int frame_stride = 1);

// Defence test: each retrained (model, scenario) on clean C and C'.
std::vector<ExperimentReport> run_defence_test(
    const std::map<adversary::Scenario, std::vector<models::ModelHandle>>& retrained,
    std::span<const models::Family> families, const AdversarialArtifacts& artifacts,
    const ReportContext& ctx);

struct PerturbationStats {
  adversary::Scenario scenario = adversary::Scenario::Full;
  std::size_t sample_count = 0;
  std::size_t failure_count = 0;
  double mean_size = 0.0;
  double max_size = 0.0;
  double mean_iterations = 0.0;  // failures counted at max_iterations
  double max_iterations = 0.0;
};

PerturbationStats compute_perturbation_stats(std::span<const adversary::AdversarialResult> results,
                                             adversary::Scenario scenario, int max_iterations);

struct FeatureHeatmap {
  // modification counts per scenario, indexed [scenario][feature]
  std::map<adversary::Scenario, std::array<std::int64_t, pipeline::kFeatureCount>> counts;
};

FeatureHeatmap compute_feature_heatmap(
    const std::map<adversary::Scenario, std::vector<const adversary::AdversarialResult*>>& results);

// --- table rendering ------------------------------------------------------

std::string reports_table(std::span<const ExperimentReport> reports);
std::string transfer_matrix_table(const TransferMatrix& matrix);
std::string perturbation_stats_table(std::span<const PerturbationStats> stats);
std::string heatmap_table(const FeatureHeatmap& heatmap);
std::string format_metric(const std::optional<double>& value);

}  // namespace canids::harness
