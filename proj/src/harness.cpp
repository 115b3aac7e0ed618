#include "canids/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "canids/common.hpp"

namespace canids::harness {

Metrics Metrics::from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  std::int64_t total = m.total();
  if (total > 0) m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(total);
  if (2 * tp + fp + fn > 0)
    m.f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
  if (fn + tp > 0) m.fnr = static_cast<double>(fn) / static_cast<double>(fn + tp);
  if (fp + tn > 0) m.fpr = static_cast<double>(fp) / static_cast<double>(fp + tn);
  return m;
}

Metrics Metrics::from_predictions(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size())
    throw DataError("evaluate: prediction/label count mismatch");
  if (predicted.empty()) throw DataError("evaluate: empty dataset");
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (truth[i]) {
      (predicted[i] ? tp : fn)++;
    } else {
      (predicted[i] ? fp : tn)++;
    }
  }
  // independent recount guard: matches/mismatches must agree with the counts
  std::int64_t agree = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) agree += (predicted[i] == truth[i]);
  if (agree != tp + tn || static_cast<std::int64_t>(predicted.size()) != tp + fp + tn + fn)
    throw DataError("evaluate: confusion recount mismatch");
  return from_counts(tp, fp, tn, fn);
}

std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::Baseline: return "baseline";
    case Phase::Adversarial: return "adversarial";
    case Phase::Defence: return "defence";
  }
  return "baseline";
}

pipeline::Dataset scenario_view(const pipeline::Dataset& data, adversary::Scenario scenario) {
  if (scenario == adversary::Scenario::Full) return data;
  canlog::AttackKind match = canlog::AttackKind::None;
  switch (scenario) {
    case adversary::Scenario::DoS: match = canlog::AttackKind::DoS; break;
    case adversary::Scenario::Fuzzy: match = canlog::AttackKind::Fuzzy; break;
    case adversary::Scenario::Malfunction: match = canlog::AttackKind::Malfunction; break;
    case adversary::Scenario::Full: break;
  }
  pipeline::Dataset view;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    canlog::AttackKind kind = data.origin.empty() ? canlog::AttackKind::None : data.origin[i];
    if (kind != match && kind != canlog::AttackKind::None) continue;
    view.samples.push_back(data.samples[i]);
    view.origin.push_back(kind);
    view.block.push_back(data.block.empty() ? 0 : data.block[i]);
  }
  return view;
}

Metrics evaluate(const models::ModelHandle& handle, const pipeline::Dataset& view,
                 int frame_stride) {
  if (view.samples.empty()) throw DataError("evaluate: empty dataset");
  switch (handle.family()) {
    case models::Family::BlDnn: {
      std::vector<int> pred = handle.bl_dnn().predict_labels(view.samples);
      std::vector<int> truth(view.samples.size());
      for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = view.samples[i].label;
      return Metrics::from_predictions(pred, truth);
    }
    case models::Family::Ensemble: {
      std::vector<int> pred = handle.ensemble().predict_labels(view.samples);
      std::vector<int> truth(view.samples.size());
      for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = view.samples[i].label;
      return Metrics::from_predictions(pred, truth);
    }
    case models::Family::SotaCnn: {
      auto frames = pipeline::window_frames_blocked(view, pipeline::kFrameWidth, frame_stride);
      if (frames.empty())
        throw DataError("evaluate: dataset too short for 29-message frames");
      auto tensor = models::SotaCnn::encode_frames(view.samples, frames);
      std::vector<int> pred = handle.sota_cnn().predict_labels(tensor);
      std::vector<int> truth(frames.size());
      for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = frames[i].label;
      return Metrics::from_predictions(pred, truth);
    }
    case models::Family::SotaLstm: {
      std::vector<int> pred = handle.sota_lstm().classify_stream(view);
      std::vector<int> truth(view.samples.size());
      for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = view.samples[i].label;
      return Metrics::from_predictions(pred, truth);
    }
  }
  throw DataError("evaluate: unknown family");
}

AdversarialArtifacts generate_adversarial_datasets(const models::BlDnn& generator,
                                                   const pipeline::Dataset& b,
                                                   const pipeline::Dataset& c,
                                                   std::span<const adversary::Scenario> scenarios,
                                                   const adversary::AttackConfig& config) {
  AdversarialArtifacts artifacts;
  BlDnnGradientAdapter adapter(generator);
  for (adversary::Scenario s : scenarios) {
    ScenarioArtifacts art;
    art.b_clean = scenario_view(b, s);
    art.c_clean = scenario_view(c, s);
    auto pb = adversary::perturb_dataset(adapter, art.b_clean, s, config);
    auto pc = adversary::perturb_dataset(adapter, art.c_clean, s, config);
    art.b_adv = std::move(pb.dataset);
    art.c_adv = std::move(pc.dataset);
    art.results_b = std::move(pb.results);
    art.results_c = std::move(pc.results);
    artifacts.per_scenario.emplace(s, std::move(art));
  }
  return artifacts;
}

std::vector<ExperimentReport> run_baseline_test(
    std::span<const models::ModelHandle* const> handles, const pipeline::Dataset& b,
    const pipeline::Dataset& c, const ReportContext& ctx) {
  std::vector<ExperimentReport> reports;
  for (const models::ModelHandle* handle : handles) {
    for (const auto& [tag, data] : {std::pair<const char*, const pipeline::Dataset*>{"B", &b},
                                    std::pair<const char*, const pipeline::Dataset*>{"C", &c}}) {
      ExperimentReport r;
      r.phase = Phase::Baseline;
      r.family = handle->family();
      r.scenario = adversary::Scenario::Full;
      r.dataset_tag = tag;
      r.metrics = evaluate(*handle, *data, ctx.frame_stride);
      r.seed = ctx.seed;
      r.config_digest = ctx.config_digest;
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

AdversarialTestOutput run_adversarial_test(std::span<const models::ModelHandle* const> handles,
                                           const AdversarialArtifacts& artifacts,
                                           const ReportContext& ctx) {
  AdversarialTestOutput out;
  out.transfer.scenarios.assign(adversary::kAllScenarios.begin(), adversary::kAllScenarios.end());
  for (const models::ModelHandle* h : handles) out.transfer.families.push_back(h->family());

  for (adversary::Scenario s : adversary::kAllScenarios) {
    auto it = artifacts.per_scenario.find(s);
    if (it == artifacts.per_scenario.end())
      throw DataError("run_adversarial_test: missing adversarial dataset for scenario '" +
                      std::string(adversary::scenario_name(s)) + "'");
    const ScenarioArtifacts& art = it->second;
    std::vector<std::optional<double>> row;
    for (const models::ModelHandle* handle : handles) {
      Metrics mb_clean = evaluate(*handle, art.b_clean, ctx.frame_stride);
      Metrics mc_clean = evaluate(*handle, art.c_clean, ctx.frame_stride);
      Metrics mb_adv = evaluate(*handle, art.b_adv, ctx.frame_stride);
      Metrics mc_adv = evaluate(*handle, art.c_adv, ctx.frame_stride);

      auto push = [&](Phase phase, const char* tag, const Metrics& m,
                      std::vector<ExperimentReport>& dst) {
        ExperimentReport r;
        r.phase = phase;
        r.family = handle->family();
        r.scenario = s;
        r.dataset_tag = tag;
        r.metrics = m;
        r.seed = ctx.seed;
        r.config_digest = ctx.config_digest;
        dst.push_back(std::move(r));
      };
      push(Phase::Baseline, "B", mb_clean, out.clean_references);
      push(Phase::Baseline, "C", mc_clean, out.clean_references);
      push(Phase::Adversarial, "B'", mb_adv, out.reports);
      push(Phase::Adversarial, "C'", mc_adv, out.reports);

      Metrics combined = Metrics::from_counts(mb_adv.tp + mc_adv.tp, mb_adv.fp + mc_adv.fp,
                                              mb_adv.tn + mc_adv.tn, mb_adv.fn + mc_adv.fn);
      row.push_back(combined.fnr);
    }
    out.transfer.fnr.push_back(std::move(row));
  }
  return out;
}

models::ModelHandle adversarial_retrain(const models::ModelHandle& handle,
                                        const pipeline::Dataset& dataset_a,
                                        const pipeline::Dataset& b_adv,
                                        const RetrainConfig& config, int frame_stride) {
  models::TrainSeeds seeds{config.seed ^ 0xf1du, config.seed ^ 0xd07u, config.seed ^ 0x5e8u};
  switch (handle.family()) {
    case models::Family::BlDnn: {
      models::ModelHandle clone = handle;
      models::BlDnnConfig cfg = clone.bl_dnn().config();
      cfg.epochs = config.epochs;
      cfg.patience = config.patience;
      clone.bl_dnn().fine_tune(b_adv, cfg, seeds);
      return clone;
    }
    case models::Family::SotaCnn: {
      models::ModelHandle clone = handle;
      models::CnnConfig cfg = clone.sota_cnn().config();
      cfg.epochs = config.epochs;
      cfg.patience = config.patience;
      auto frames = pipeline::window_frames_blocked(b_adv, pipeline::kFrameWidth, frame_stride);
      if (frames.empty()) throw DataError("adversarial_retrain: B' too short for frames");
      clone.sota_cnn().fine_tune(b_adv.samples, frames, cfg, seeds);
      return clone;
    }
    case models::Family::Ensemble: {
      // classical learners have no incremental mode; refit on A united with B'
      pipeline::Dataset merged = dataset_a;
      for (std::size_t i = 0; i < b_adv.samples.size(); ++i) {
        merged.samples.push_back(b_adv.samples[i]);
        merged.origin.push_back(b_adv.origin.empty() ? canlog::AttackKind::None : b_adv.origin[i]);
        merged.block.push_back(b_adv.block.empty() ? 0 : b_adv.block[i]);
      }
      return models::ModelHandle(models::EnsembleModel::train(merged, config.seed));
    }
    case models::Family::SotaLstm:
      throw CapabilityError("sota_lstm is not retrained");
  }
  throw CapabilityError("unknown family");
}

std::vector<ExperimentReport> run_defence_test(
    const std::map<adversary::Scenario, std::vector<models::ModelHandle>>& retrained,
    std::span<const models::Family> families, const AdversarialArtifacts& artifacts,
    const ReportContext& ctx) {
  std::vector<ExperimentReport> reports;
  for (const auto& [s, handles] : retrained) {
    auto it = artifacts.per_scenario.find(s);
    if (it == artifacts.per_scenario.end())
      throw DataError("run_defence_test: missing adversarial dataset for scenario '" +
                      std::string(adversary::scenario_name(s)) + "'");
    const ScenarioArtifacts& art = it->second;
    if (handles.size() != families.size())
      throw DataError("run_defence_test: family list does not match retrained handles");
    for (std::size_t i = 0; i < handles.size(); ++i) {
      for (const auto& [tag, data] :
           {std::pair<const char*, const pipeline::Dataset*>{"C", &art.c_clean},
            std::pair<const char*, const pipeline::Dataset*>{"C'", &art.c_adv}}) {
        ExperimentReport r;
        r.phase = Phase::Defence;
        r.family = families[i];
        r.scenario = s;
        r.dataset_tag = tag;
        r.metrics = evaluate(handles[i], *data, ctx.frame_stride);
        r.seed = ctx.seed;
        r.config_digest = ctx.config_digest;
        reports.push_back(std::move(r));
      }
    }
  }
  return reports;
}

PerturbationStats compute_perturbation_stats(std::span<const adversary::AdversarialResult> results,
                                             adversary::Scenario scenario, int max_iterations) {
  if (results.empty()) throw DataError("compute_perturbation_stats: empty result list");
  PerturbationStats stats;
  stats.scenario = scenario;
  stats.sample_count = results.size();
  double size_sum = 0.0, iter_sum = 0.0;
  for (const auto& r : results) {
    double size = static_cast<double>(r.modified_features.size());
    double iters = r.success ? static_cast<double>(r.iterations_used)
                             : static_cast<double>(max_iterations);
    if (!r.success) stats.failure_count += 1;
    size_sum += size;
    iter_sum += iters;
    stats.max_size = std::max(stats.max_size, size);
    stats.max_iterations = std::max(stats.max_iterations, iters);
  }
  stats.mean_size = size_sum / static_cast<double>(results.size());
  stats.mean_iterations = iter_sum / static_cast<double>(results.size());
  return stats;
}

FeatureHeatmap compute_feature_heatmap(
    const std::map<adversary::Scenario, std::vector<const adversary::AdversarialResult*>>&
        results) {
  FeatureHeatmap heatmap;
  for (const auto& [s, list] : results) {
    auto& row = heatmap.counts[s];
    row.fill(0);
    for (const auto* r : list)
      for (int f : r->modified_features) row[static_cast<std::size_t>(f)] += 1;
  }
  return heatmap;
}

std::string format_metric(const std::optional<double>& value) {
  if (!value) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *value);
  return buf;
}

std::string reports_table(std::span<const ExperimentReport> reports) {
  std::string out =
      "phase\tmodel\tscenario\tdataset\ttp\tfp\ttn\tfn\taccuracy\tf1\tfnr\tfpr\tseed\tconfig_"
      "digest\n";
  for (const auto& r : reports) {
    out += std::string(phase_name(r.phase)) + '\t';
    out += std::string(models::family_name(r.family)) + '\t';
    out += std::string(adversary::scenario_name(r.scenario)) + '\t';
    out += r.dataset_tag + '\t';
    out += std::to_string(r.metrics.tp) + '\t' + std::to_string(r.metrics.fp) + '\t' +
           std::to_string(r.metrics.tn) + '\t' + std::to_string(r.metrics.fn) + '\t';
    out += format_metric(r.metrics.accuracy) + '\t' + format_metric(r.metrics.f1) + '\t' +
           format_metric(r.metrics.fnr) + '\t' + format_metric(r.metrics.fpr) + '\t';
    out += std::to_string(r.seed) + '\t' + r.config_digest + '\n';
  }
  return out;
}

std::string transfer_matrix_table(const TransferMatrix& matrix) {
  std::string out = "scenario";
  for (models::Family f : matrix.families) out += '\t' + std::string(models::family_name(f));
  out += '\n';
  for (std::size_t i = 0; i < matrix.scenarios.size(); ++i) {
    out += std::string(adversary::scenario_name(matrix.scenarios[i]));
    for (const auto& cell : matrix.fnr[i]) out += '\t' + format_metric(cell);
    out += '\n';
  }
  return out;
}

std::string perturbation_stats_table(std::span<const PerturbationStats> stats) {
  std::string out =
      "scenario\tsamples\tfailures\tmean_size\tmax_size\tmean_iterations\tmax_iterations\n";
  for (const auto& s : stats) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s\t%zu\t%zu\t%.6f\t%.0f\t%.6f\t%.0f\n",
                  std::string(adversary::scenario_name(s.scenario)).c_str(), s.sample_count,
                  s.failure_count, s.mean_size, s.max_size, s.mean_iterations, s.max_iterations);
    out += buf;
  }
  return out;
}

std::string heatmap_table(const FeatureHeatmap& heatmap) {
  std::string out = "scenario";
  for (int f = 0; f < pipeline::kFeatureCount; ++f) out += "\tf" + std::to_string(f);
  out += '\n';
  for (const auto& [s, row] : heatmap.counts) {
    out += std::string(adversary::scenario_name(s));
    for (auto count : row) out += '\t' + std::to_string(count);
    out += '\n';
  }
  return out;
}

}  // namespace canids::harness
