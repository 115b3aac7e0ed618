#include "canids/models/serialize.hpp"

#include "canids/common.hpp"

namespace canids::models::detail {

using nlohmann::json;

json tensor_to_json(const autograd::Tensor<float>& t) {
  return json{{"shape", t.shape}, {"data", floats_to_base64(t.v)}};
}

autograd::Tensor<float> tensor_from_json(const json& j) {
  autograd::Tensor<float> t;
  t.shape = j.at("shape").get<std::vector<int>>();
  t.v = base64_to_floats(j.at("data").get<std::string>());
  if (autograd::shape_numel(t.shape) != static_cast<std::int64_t>(t.v.size()))
    throw DataError("checkpoint: tensor payload does not match its shape");
  return t;
}

json tensors_to_json(std::span<const autograd::Tensor<float>> tensors) {
  json arr = json::array();
  for (const auto& t : tensors) arr.push_back(tensor_to_json(t));
  return arr;
}

std::vector<autograd::Tensor<float>> tensors_from_json(const json& j) {
  std::vector<autograd::Tensor<float>> out;
  for (const auto& item : j) out.push_back(tensor_from_json(item));
  return out;
}

json adam_to_json(const autograd::AdamState<float>& state) {
  return json{{"step", state.step},
              {"learning_rate", state.learning_rate},
              {"beta1", state.beta1},
              {"beta2", state.beta2},
              {"epsilon", state.epsilon},
              {"m", tensors_to_json(state.m)},
              {"v", tensors_to_json(state.v)}};
}

autograd::AdamState<float> adam_from_json(const json& j) {
  autograd::AdamState<float> state;
  state.step = j.value("step", std::int64_t{0});
  state.learning_rate = j.value("learning_rate", 0.001f);
  state.beta1 = j.value("beta1", 0.9f);
  state.beta2 = j.value("beta2", 0.999f);
  state.epsilon = j.value("epsilon", 1e-8f);
  if (j.contains("m")) state.m = tensors_from_json(j.at("m"));
  if (j.contains("v")) state.v = tensors_from_json(j.at("v"));
  return state;
}

json seeds_to_json(const TrainSeeds& seeds) {
  return json{{"init", seeds.init}, {"dropout", seeds.dropout}, {"shuffle", seeds.shuffle}};
}

TrainSeeds seeds_from_json(const json& j) {
  TrainSeeds seeds;
  seeds.init = j.value("init", std::uint64_t{1});
  seeds.dropout = j.value("dropout", std::uint64_t{2});
  seeds.shuffle = j.value("shuffle", std::uint64_t{3});
  return seeds;
}

}  // namespace canids::models::detail
