#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canids/pipeline.hpp"

namespace canids::adversary {

enum class Scenario : std::uint8_t { Full = 0, DoS = 1, Fuzzy = 2, Malfunction = 3 };

inline constexpr std::array<Scenario, 4> kAllScenarios{Scenario::Full, Scenario::DoS,
                                                       Scenario::Fuzzy, Scenario::Malfunction};

std::string_view scenario_name(Scenario s);
Scenario scenario_from_name(std::string_view name);

// Which features a scenario may perturb, plus per-feature value bounds.
//   Full        all 77 features
//   DoS         the last three id bits and all 64 data bits
//   Fuzzy       all 11 id bits and all 64 data bits
//   Malfunction the 64 data bits only
struct ScenarioMask {
  Scenario scenario = Scenario::Full;
  std::vector<int> allowed;                                      // ascending indices
  std::array<std::pair<float, float>, pipeline::kFeatureCount> bounds{};

  bool is_allowed(int feature) const;
};

ScenarioMask scenario_mask(Scenario s);

struct AttackConfig {
  float epsilon = 1.0f;
  int max_iterations = 50;
  int target_label = 0;
  bool record_trace = false;  // keep the per-iteration step list on results
};

// Minimal surface the generator needs from a model: a hard label and the
// input gradient of its loss toward a target class.
class GradientModel {
 public:
  virtual ~GradientModel() = default;
  virtual int predict_label(std::span<const float> features) const = 0;
  virtual std::vector<float> input_gradient(std::span<const float> features,
                                            int target_label) const = 0;
};

struct StepRecord {
  int feature = -1;
  float before = 0.0f;
  float after = 0.0f;
};

struct AdversarialResult {
  pipeline::FeatureVector original;
  pipeline::FeatureVector perturbed;
  bool success = false;
  int iterations_used = 0;
  std::vector<int> modified_features;  // ascending indices where perturbed != original
  Scenario scenario = Scenario::Full;
  std::uint32_t source_index = 0;
  std::uint32_t dataset_position = 0;  // position within the perturbed dataset
  std::vector<StepRecord> trace;       // filled when AttackConfig::record_trace
};

struct FgsmStepResult {
  std::optional<int> feature;  // modified coordinate; empty on exhaustion
  float before = 0.0f;
  float after = 0.0f;
};

// One L1 step: pick the allowed, non-stuck coordinate with the largest
// absolute gradient (ties to the lowest index) and move it by epsilon against
// the gradient sign, clamped to its bounds. A coordinate is stuck when it
// sits at a bound the step would push past, or its gradient is exactly zero.
FgsmStepResult fgsm_step(const GradientModel& model, std::span<float> features, int target_label,
                         const ScenarioMask& mask, float epsilon);

// Iterates fgsm_step until the model predicts the target label, the step is
// exhausted, or max_iterations is reached. Only attack samples are accepted.
AdversarialResult generate_adversarial(const GradientModel& model,
                                       const pipeline::LabeledSample& sample, Scenario scenario,
                                       const AttackConfig& config);

struct PerturbOutcome {
  pipeline::Dataset dataset;               // same order; matching attacks replaced
  std::vector<AdversarialResult> results;  // one per perturbed sample
  std::string warning;                     // set when nothing matched the scenario
};

// Replaces every attack sample whose source log matches the scenario (all
// attack samples for Full) with its perturbed version, keeping labels and
// order intact.
PerturbOutcome perturb_dataset(const GradientModel& model, const pipeline::Dataset& data,
                               Scenario scenario, const AttackConfig& config);

// Sidecar report: one row per perturbed sample.
void write_results(std::span<const AdversarialResult> results, const std::filesystem::path& path);
std::vector<AdversarialResult> read_results(const std::filesystem::path& path);

}  // namespace canids::adversary
