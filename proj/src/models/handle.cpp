#include "canids/models/handle.hpp"

#include <fstream>
#include <sstream>

#include "canids/common.hpp"
#include "json.hpp"

namespace canids::models {

std::string_view family_name(Family family) {
  switch (family) {
    case Family::BlDnn: return "bl_dnn";
    case Family::Ensemble: return "bl_ensemble";
    case Family::SotaCnn: return "sota_cnn";
    case Family::SotaLstm: return "sota_lstm";
  }
  return "bl_dnn";
}

Family family_from_name(std::string_view name) {
  if (name == "bl_dnn") return Family::BlDnn;
  if (name == "bl_ensemble") return Family::Ensemble;
  if (name == "sota_cnn") return Family::SotaCnn;
  if (name == "sota_lstm") return Family::SotaLstm;
  throw DataError("unknown model family '" + std::string(name) + "'");
}

namespace {
[[noreturn]] void wrong_family(const char* want, Family got) {
  throw DataError(std::string("model handle holds ") + std::string(family_name(got)) +
                  ", expected " + want);
}
}  // namespace

const BlDnn& ModelHandle::bl_dnn() const {
  if (family_ != Family::BlDnn) wrong_family("bl_dnn", family_);
  return std::get<BlDnn>(model_);
}
const EnsembleModel& ModelHandle::ensemble() const {
  if (family_ != Family::Ensemble) wrong_family("bl_ensemble", family_);
  return std::get<EnsembleModel>(model_);
}
const SotaCnn& ModelHandle::sota_cnn() const {
  if (family_ != Family::SotaCnn) wrong_family("sota_cnn", family_);
  return std::get<SotaCnn>(model_);
}
const SotaLstm& ModelHandle::sota_lstm() const {
  if (family_ != Family::SotaLstm) wrong_family("sota_lstm", family_);
  return std::get<SotaLstm>(model_);
}
BlDnn& ModelHandle::bl_dnn() {
  if (family_ != Family::BlDnn) wrong_family("bl_dnn", family_);
  return std::get<BlDnn>(model_);
}
SotaCnn& ModelHandle::sota_cnn() {
  if (family_ != Family::SotaCnn) wrong_family("sota_cnn", family_);
  return std::get<SotaCnn>(model_);
}
EnsembleModel& ModelHandle::ensemble() {
  if (family_ != Family::Ensemble) wrong_family("bl_ensemble", family_);
  return std::get<EnsembleModel>(model_);
}

int ModelHandle::predict_label(std::span<const float> features) const {
  switch (family_) {
    case Family::BlDnn: return bl_dnn().predict_label(features);
    case Family::Ensemble: return ensemble().predict_label(features);
    default:
      throw autograd::ShapeError("predict", std::string(family_name(family_)) +
                                                " does not take single-message inputs");
  }
}

std::vector<float> ModelHandle::input_gradient(std::span<const float> input,
                                               int target_label) const {
  switch (family_) {
    case Family::Ensemble:
      throw CapabilityError("bl_ensemble is not gradient-capable");
    case Family::BlDnn:
      return bl_dnn().input_gradient(input, target_label);
    case Family::SotaCnn: {
      constexpr int side = SotaCnn::kFrameSide;
      if (input.size() != static_cast<std::size_t>(side) * side)
        throw autograd::ShapeError("input_gradient", "sota_cnn expects a flattened 29x29 frame");
      autograd::Tensor<float> frame({1, 1, side, side},
                                    std::vector<float>(input.begin(), input.end()));
      return sota_cnn().input_gradient(frame, target_label).v;
    }
    case Family::SotaLstm: {
      const SotaLstm& m = sota_lstm();
      int len = m.config().seq_len;
      auto expected = static_cast<std::size_t>(len + 1) * pipeline::kFeatureCount;
      if (input.size() != expected)
        throw autograd::ShapeError("input_gradient",
                                   "sota_lstm expects a flattened window of " +
                                       std::to_string(len + 1) + " messages");
      std::vector<pipeline::LabeledSample> window(static_cast<std::size_t>(len));
      for (int s = 0; s < len; ++s)
        std::copy_n(input.data() + static_cast<std::size_t>(s) * pipeline::kFeatureCount,
                    pipeline::kFeatureCount, window[static_cast<std::size_t>(s)].features.f.data());
      const float* next = input.data() + static_cast<std::size_t>(len) * pipeline::kFeatureCount;
      std::uint16_t id;
      {
        pipeline::FeatureVector fv;
        std::copy_n(next, pipeline::kFeatureCount, fv.f.data());
        id = pipeline::decode_can_id(fv);
      }
      auto [wgrad, tgrad] = m.input_gradient(
          id, window, std::span<const float>(next + pipeline::kDataBitsBegin, pipeline::kDataBitCount));
      std::vector<float> out(expected, 0.0f);
      std::copy(wgrad.v.begin(), wgrad.v.end(), out.begin());
      for (int b = 0; b < pipeline::kDataBitCount; ++b)
        out[static_cast<std::size_t>(len) * pipeline::kFeatureCount + pipeline::kDataBitsBegin +
            static_cast<std::size_t>(b)] = tgrad[static_cast<std::size_t>(b)];
      (void)target_label;  // the reconstruction loss has no class target
      return out;
    }
  }
  throw CapabilityError("unreachable");
}

std::string ModelHandle::to_json_text() const {
  nlohmann::json j;
  j["format"] = "canids-checkpoint";
  j["version"] = 1;
  j["family"] = std::string(family_name(family_));
  std::string payload;
  switch (family_) {
    case Family::BlDnn: payload = bl_dnn().to_json_text(); break;
    case Family::Ensemble: payload = ensemble().to_json_text(); break;
    case Family::SotaCnn: payload = sota_cnn().to_json_text(); break;
    case Family::SotaLstm: payload = sota_lstm().to_json_text(); break;
  }
  j["payload"] = nlohmann::json::parse(payload);
  return j.dump();
}

ModelHandle ModelHandle::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint: invalid json: ") + e.what());
  }
  if (j.value("format", "") != "canids-checkpoint")
    throw DataError("checkpoint: missing canids-checkpoint format marker");
  Family family = family_from_name(j.at("family").get<std::string>());
  std::string payload = j.at("payload").dump();
  switch (family) {
    case Family::BlDnn: return ModelHandle(BlDnn::from_json_text(payload));
    case Family::Ensemble: return ModelHandle(EnsembleModel::from_json_text(payload));
    case Family::SotaCnn: return ModelHandle(SotaCnn::from_json_text(payload));
    case Family::SotaLstm: return ModelHandle(SotaLstm::from_json_text(payload));
  }
  throw DataError("checkpoint: unknown family");
}

void ModelHandle::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot create checkpoint '" + path.string() + "'");
  out << to_json_text();
  out.flush();
  if (!out) throw DataError("write error in checkpoint '" + path.string() + "'");
}

ModelHandle ModelHandle::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json_text(buffer.str());
}

}  // namespace canids::models
