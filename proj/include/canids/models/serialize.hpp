#pragma once

// Checkpoint building blocks shared by the model families. Tensors serialize
// bit-exactly (base64 of little-endian float32), so save -> load reproduces
// predictions identically.

#include <string>
#include <vector>

#include "canids/autograd.hpp"
#include "canids/models/training.hpp"
#include "json.hpp"

namespace canids::models::detail {

nlohmann::json tensor_to_json(const autograd::Tensor<float>& t);
autograd::Tensor<float> tensor_from_json(const nlohmann::json& j);

nlohmann::json tensors_to_json(std::span<const autograd::Tensor<float>> tensors);
std::vector<autograd::Tensor<float>> tensors_from_json(const nlohmann::json& j);

nlohmann::json adam_to_json(const autograd::AdamState<float>& state);
autograd::AdamState<float> adam_from_json(const nlohmann::json& j);

nlohmann::json seeds_to_json(const TrainSeeds& seeds);
TrainSeeds seeds_from_json(const nlohmann::json& j);

}  // namespace canids::models::detail
