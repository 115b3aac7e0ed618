#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <variant>

#include "canids/models/bl_dnn.hpp"
#include "canids/models/ensemble.hpp"
#include "canids/models/sota_cnn.hpp"
#include "canids/models/sota_lstm.hpp"

namespace canids::models {

enum class Family { BlDnn, Ensemble, SotaCnn, SotaLstm };

std::string_view family_name(Family family);
Family family_from_name(std::string_view name);

// Uniform wrapper over the four trained families: family tag, prediction,
// gradient capability, and checkpoint round-tripping.
class ModelHandle {
 public:
  ModelHandle() = default;
  explicit ModelHandle(BlDnn m) : family_(Family::BlDnn), model_(std::move(m)) {}
  explicit ModelHandle(EnsembleModel m) : family_(Family::Ensemble), model_(std::move(m)) {}
  explicit ModelHandle(SotaCnn m) : family_(Family::SotaCnn), model_(std::move(m)) {}
  explicit ModelHandle(SotaLstm m) : family_(Family::SotaLstm), model_(std::move(m)) {}

  Family family() const { return family_; }
  bool gradient_capable() const { return family_ != Family::Ensemble; }

  const BlDnn& bl_dnn() const;
  const EnsembleModel& ensemble() const;
  const SotaCnn& sota_cnn() const;
  const SotaLstm& sota_lstm() const;
  BlDnn& bl_dnn();
  SotaCnn& sota_cnn();
  EnsembleModel& ensemble();

  // Message-geometry prediction (BL-DNN and ensemble); frame/sequence
  // families reject with a geometry error.
  int predict_label(std::span<const float> features) const;

  // Gradient of the family loss with respect to a flattened input:
  //   bl_dnn    77 features
  //   sota_cnn  841 (29x29 id-bit frame)
  //   sota_lstm (seq_len + 1) * 77 (history window plus the predicted message)
  // The ensemble is not gradient-capable.
  std::vector<float> input_gradient(std::span<const float> input, int target_label) const;

  void save(const std::filesystem::path& path) const;
  static ModelHandle load(const std::filesystem::path& path);

  std::string to_json_text() const;
  static ModelHandle from_json_text(const std::string& text);

 private:
  Family family_ = Family::BlDnn;
  std::variant<BlDnn, EnsembleModel, SotaCnn, SotaLstm> model_;
};

}  // namespace canids::models
