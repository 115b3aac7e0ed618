#include "canids/adversary.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "canids/common.hpp"

namespace canids::adversary {

std::string_view scenario_name(Scenario s) {
  switch (s) {
    case Scenario::Full: return "full";
    case Scenario::DoS: return "dos";
    case Scenario::Fuzzy: return "fuzzy";
    case Scenario::Malfunction: return "malfunction";
  }
  return "full";
}

Scenario scenario_from_name(std::string_view name) {
  if (name == "full") return Scenario::Full;
  if (name == "dos") return Scenario::DoS;
  if (name == "fuzzy") return Scenario::Fuzzy;
  if (name == "malfunction") return Scenario::Malfunction;
  throw DataError("unknown scenario '" + std::string(name) + "'");
}

bool ScenarioMask::is_allowed(int feature) const {
  return std::binary_search(allowed.begin(), allowed.end(), feature);
}

ScenarioMask scenario_mask(Scenario s) {
  ScenarioMask mask;
  mask.scenario = s;
  for (int i = 0; i < pipeline::kFeatureCount; ++i) mask.bounds[static_cast<std::size_t>(i)] = {0.0f, 1.0f};
  mask.bounds[pipeline::kDlcIndex] = {0.0f, pipeline::kDlcMax};
  mask.bounds[pipeline::kDtimeIndex] = {0.0f, pipeline::kDtimeMax};

  auto add_range = [&mask](int begin, int end) {
    for (int i = begin; i < end; ++i) mask.allowed.push_back(i);
  };
  switch (s) {
    case Scenario::Full:
      add_range(0, pipeline::kFeatureCount);
      break;
    case Scenario::DoS:
      add_range(8, 11);  // last three id bits
      add_range(pipeline::kDataBitsBegin, pipeline::kDataBitsBegin + pipeline::kDataBitCount);
      break;
    case Scenario::Fuzzy:
      add_range(0, pipeline::kIdBitCount);
      add_range(pipeline::kDataBitsBegin, pipeline::kDataBitsBegin + pipeline::kDataBitCount);
      break;
    case Scenario::Malfunction:
      add_range(pipeline::kDataBitsBegin, pipeline::kDataBitsBegin + pipeline::kDataBitCount);
      break;
  }
  return mask;
}

FgsmStepResult fgsm_step(const GradientModel& model, std::span<float> features, int target_label,
                         const ScenarioMask& mask, float epsilon) {
  if (features.size() != pipeline::kFeatureCount)
    throw DataError("fgsm_step: expected 77 features");
  std::vector<float> grad = model.input_gradient(features, target_label);

  int best = -1;
  float best_mag = 0.0f;
  for (int idx : mask.allowed) {
    float g = grad[static_cast<std::size_t>(idx)];
    if (g == 0.0f) continue;  // a zero-gradient step cannot make progress
    auto [lo, hi] = mask.bounds[static_cast<std::size_t>(idx)];
    float x = features[static_cast<std::size_t>(idx)];
    // descent direction is -sign(g); skip coordinates pinned at the bound the
    // step would push past
    if (g > 0.0f && x <= lo) continue;
    if (g < 0.0f && x >= hi) continue;
    float mag = std::fabs(g);
    if (mag > best_mag) {
      best_mag = mag;
      best = idx;
    }
  }
  if (best < 0) return {};  // exhausted

  auto [lo, hi] = mask.bounds[static_cast<std::size_t>(best)];
  float before = features[static_cast<std::size_t>(best)];
  float g = grad[static_cast<std::size_t>(best)];
  float after = std::clamp(before - epsilon * (g > 0.0f ? 1.0f : -1.0f), lo, hi);
  features[static_cast<std::size_t>(best)] = after;
  return {best, before, after};
}

AdversarialResult generate_adversarial(const GradientModel& model,
                                       const pipeline::LabeledSample& sample, Scenario scenario,
                                       const AttackConfig& config) {
  if (sample.label != 1)
    throw DataError("generate_adversarial: only attack samples are perturbed");
  if (!(config.epsilon > 0.0f) || config.max_iterations < 1)
    throw DataError("generate_adversarial: epsilon must be positive and max_iterations >= 1");

  ScenarioMask mask = scenario_mask(scenario);
  AdversarialResult result;
  result.original = sample.features;
  result.perturbed = sample.features;
  result.scenario = scenario;
  result.source_index = sample.source_index;

  std::span<float> x(result.perturbed.f.data(), pipeline::kFeatureCount);
  result.success = model.predict_label(x) == config.target_label;
  while (!result.success && result.iterations_used < config.max_iterations) {
    FgsmStepResult step = fgsm_step(model, x, config.target_label, mask, config.epsilon);
    if (!step.feature) break;  // exhausted: no movable coordinate remains
    result.iterations_used += 1;
    if (config.record_trace)
      result.trace.push_back(StepRecord{*step.feature, step.before, step.after});
    result.success = model.predict_label(x) == config.target_label;
  }

  for (int i = 0; i < pipeline::kFeatureCount; ++i)
    if (result.perturbed.f[static_cast<std::size_t>(i)] != result.original.f[static_cast<std::size_t>(i)])
      result.modified_features.push_back(i);
  return result;
}

namespace {

bool scenario_matches(Scenario scenario, canlog::AttackKind kind) {
  switch (scenario) {
    case Scenario::Full: return kind != canlog::AttackKind::None;
    case Scenario::DoS: return kind == canlog::AttackKind::DoS;
    case Scenario::Fuzzy: return kind == canlog::AttackKind::Fuzzy;
    case Scenario::Malfunction: return kind == canlog::AttackKind::Malfunction;
  }
  return false;
}

}  // namespace

PerturbOutcome perturb_dataset(const GradientModel& model, const pipeline::Dataset& data,
                               Scenario scenario, const AttackConfig& config) {
  PerturbOutcome out;
  out.dataset = data;

  std::vector<std::uint32_t> targets;
  for (std::uint32_t i = 0; i < data.samples.size(); ++i) {
    canlog::AttackKind kind = data.origin.empty() ? canlog::AttackKind::None : data.origin[i];
    if (data.samples[i].label == 1 && scenario_matches(scenario, kind)) targets.push_back(i);
  }
  if (targets.empty()) {
    out.warning = "no attack samples match scenario '" + std::string(scenario_name(scenario)) + "'";
    return out;
  }

  out.results.resize(targets.size());
  parallel_tasks(static_cast<std::int64_t>(targets.size()), [&](std::int64_t t) {
    std::uint32_t pos = targets[static_cast<std::size_t>(t)];
    AdversarialResult r = generate_adversarial(model, data.samples[pos], scenario, config);
    r.dataset_position = pos;
    out.results[static_cast<std::size_t>(t)] = std::move(r);
  });
  for (const auto& r : out.results) {
    out.dataset.samples[r.dataset_position].features = r.perturbed;
    // ground-truth label stays 1
  }
  return out;
}

void write_results(std::span<const AdversarialResult> results, const std::filesystem::path& path) {
  std::ofstream outfile(path, std::ios::trunc);
  if (!outfile) throw DataError("cannot create results file '" + path.string() + "'");
  outfile << "scenario,source_index,dataset_position,success,iterations_used,modified_features\n";
  for (const auto& r : results) {
    outfile << scenario_name(r.scenario) << ',' << r.source_index << ',' << r.dataset_position
            << ',' << (r.success ? 1 : 0) << ',' << r.iterations_used << ',';
    for (std::size_t i = 0; i < r.modified_features.size(); ++i) {
      if (i) outfile << ' ';
      outfile << r.modified_features[i];
    }
    outfile << '\n';
  }
  if (!outfile) throw DataError("write error in results file '" + path.string() + "'");
}

std::vector<AdversarialResult> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file '" + path.string() + "'");
  std::vector<AdversarialResult> results;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    AdversarialResult r;
    std::size_t start = 0;
    auto next = [&](char sep) {
      std::size_t end = line.find(sep, start);
      std::string_view field(line.data() + start,
                             (end == std::string::npos ? line.size() : end) - start);
      start = end == std::string::npos ? line.size() : end + 1;
      return field;
    };
    r.scenario = scenario_from_name(next(','));
    auto parse_u32 = [](std::string_view f) {
      std::uint32_t v = 0;
      std::from_chars(f.data(), f.data() + f.size(), v);
      return v;
    };
    r.source_index = parse_u32(next(','));
    r.dataset_position = parse_u32(next(','));
    r.success = next(',') == "1";
    r.iterations_used = static_cast<int>(parse_u32(next(',')));
    std::string_view rest(line.data() + start, line.size() - start);
    std::size_t p = 0;
    while (p < rest.size()) {
      while (p < rest.size() && rest[p] == ' ') ++p;
      std::size_t q = p;
      while (q < rest.size() && rest[q] != ' ') ++q;
      if (q > p) {
        int idx = 0;
        std::from_chars(rest.data() + p, rest.data() + q, idx);
        r.modified_features.push_back(idx);
      }
      p = q;
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace canids::adversary
