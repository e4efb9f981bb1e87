#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/model.hpp"

namespace cst {

// Checkpoint layout, version 1:
//   {"version": 1,
//    "config": {"d": ..., "V": ..., "D_f": ...},
//    "tensors": {name: [[dims...], [row-major values...]], ...}}
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const ModelParams& params) {
  nlohmann::json tensors = nlohmann::json::object();
  visit_tensors(params, [&](const char* name, const auto& t) {
    using T = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<T, Matrix>) {
      tensors[name] = {std::vector<long long>{static_cast<long long>(t.rows),
                                              static_cast<long long>(t.cols)},
                       t.data};
    } else {
      tensors[name] = {std::vector<long long>{static_cast<long long>(t.size())}, t};
    }
  });
  return {{"version", kCheckpointVersion},
          {"config", {{"d", params.d}, {"V", params.V}, {"D_f", params.D_f}}},
          {"tensors", tensors}};
}

inline void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << checkpoint_json(params).dump() << "\n";
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("version") || j["version"].get<int>() != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version in " + path);

  const auto& cfg = j.at("config");
  ModelParams p = init_params(cfg.at("d").get<int>(), cfg.at("V").get<int>(),
                              cfg.at("D_f").get<int>(), 0);
  const auto& tensors = j.at("tensors");
  visit_tensors(p, [&](const char* name, auto& t) {
    if (!tensors.contains(name))
      throw std::runtime_error(std::string("checkpoint missing tensor: ") + name);
    const auto& entry = tensors.at(name);
    const auto dims = entry.at(0).get<std::vector<long long>>();
    auto values = entry.at(1).get<std::vector<double>>();
    using T = std::decay_t<decltype(t)>;
    if constexpr (std::is_same_v<T, Matrix>) {
      if (dims.size() != 2 || dims[0] != static_cast<long long>(t.rows) ||
          dims[1] != static_cast<long long>(t.cols) || values.size() != t.data.size())
        throw std::runtime_error(std::string("checkpoint tensor shape mismatch: ") + name);
      t.data = std::move(values);
    } else {
      if (dims.size() != 1 || values.size() != t.size())
        throw std::runtime_error(std::string("checkpoint tensor shape mismatch: ") + name);
      t = std::move(values);
    }
  });
  if (!all_finite(p)) throw std::runtime_error("checkpoint holds non-finite values: " + path);
  return p;
}

}  // namespace cst
