#pragma once

// JSON checkpoints: format tag, model configuration, normalization statistics
// and every parameter tensor keyed by layer path.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "costi/data.hpp"
#include "costi/network.hpp"
#include "costi/schedule.hpp"

namespace costi {

inline constexpr std::string_view kCheckpointFormat = "costi-checkpoint/1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"data_channels", c.data_channels},
          {"channels", c.channels},
          {"heads", c.heads},
          {"nem_layers", c.nem_layers},
          {"f_t", c.f_t},
          {"f_s", c.f_s},
          {"dropout", c.dropout},
          {"temporal_mixer", std::string(to_string(c.temporal_mixer))},
          {"use_cond", c.use_cond},
          {"use_stfem", c.use_stfem},
          {"use_nem", c.use_nem},
          {"use_self_attention", c.use_self_attention},
          {"embedding_frequencies", c.embedding_frequencies}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.data_channels = j.at("data_channels").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.nem_layers = j.at("nem_layers").get<std::size_t>();
  c.f_t = j.at("f_t").get<std::size_t>();
  c.f_s = j.at("f_s").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.temporal_mixer = parse_temporal_mixer(j.at("temporal_mixer").get<std::string>());
  c.use_cond = j.at("use_cond").get<bool>();
  c.use_stfem = j.at("use_stfem").get<bool>();
  c.use_nem = j.at("use_nem").get<bool>();
  c.use_self_attention = j.at("use_self_attention").get<bool>();
  c.embedding_frequencies = j.at("embedding_frequencies").get<std::size_t>();
  c.validate();
  return c;
}

template <typename T>
struct Checkpoint {
  ModelConfig model;
  NoiseSchedule schedule;
  Normalizer normalizer;
  std::size_t window = 0;
  ParamStore<T> params;
  nlohmann::json extra = nlohmann::json::object();
};

template <typename T>
nlohmann::json checkpoint_to_json(const Checkpoint<T>& ck) {
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& t = ck.params[i];
    std::vector<double> values(t.data().begin(), t.data().end());
    params.push_back({{"path", ck.params.path(i)}, {"shape", t.shape()}, {"values", values}});
  }
  return {{"format", kCheckpointFormat},
          {"model", model_config_to_json(ck.model)},
          {"schedule",
           {{"sigma_min", ck.schedule.sigma_min},
            {"sigma_max", ck.schedule.sigma_max},
            {"rho", ck.schedule.rho},
            {"sigma_data", ck.schedule.sigma_data}}},
          {"normalizer", {{"mean", ck.normalizer.mean}, {"std", ck.normalizer.std}}},
          {"window", ck.window},
          {"seed", ck.params.seed()},
          {"params", params},
          {"extra", ck.extra}};
}

/// Rebuilds the checkpoint and verifies that every parameter of the stored
/// configuration is present with the expected shape.
template <typename T>
Checkpoint<T> checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw CheckpointError("unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
    Checkpoint<T> ck;
    ck.model = model_config_from_json(j.at("model"));
    const auto& s = j.at("schedule");
    ck.schedule.sigma_min = s.at("sigma_min").get<double>();
    ck.schedule.sigma_max = s.at("sigma_max").get<double>();
    ck.schedule.rho = s.at("rho").get<double>();
    ck.schedule.sigma_data = s.at("sigma_data").get<double>();
    ck.schedule.validate();
    ck.normalizer.mean = j.at("normalizer").at("mean").get<std::vector<double>>();
    ck.normalizer.std = j.at("normalizer").at("std").get<std::vector<double>>();
    ck.window = j.at("window").get<std::size_t>();
    if (j.contains("extra")) ck.extra = j.at("extra");
    const Model<T> model(ck.model);
    const auto specs = model.specs();
    const auto& stored = j.at("params");
    if (stored.size() != specs.size())
      throw CheckpointError("checkpoint has " + std::to_string(stored.size()) + " tensors, model expects " +
                            std::to_string(specs.size()));
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& e = stored[i];
      const auto path = e.at("path").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      if (path != specs[i].path || shape != specs[i].shape)
        throw CheckpointError("checkpoint tensor '" + path + "' does not match model layer '" + specs[i].path + "'");
      const auto values = e.at("values").get<std::vector<double>>();
      std::vector<T> data(values.begin(), values.end());
      if (data.size() != shape_numel(shape)) throw CheckpointError("tensor '" + path + "' has wrong value count");
      ck.params.add(path, Tensor<T>(shape, std::move(data), true));
    }
    ck.params.set_seed(j.at("seed").get<std::uint64_t>());
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

/// 64-bit FNV-1a digest as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes the checkpoint and returns the digest of the written bytes.
template <typename T>
std::string save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
  const std::string text = checkpoint_to_json(ck).dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  return fnv1a_hex(text);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": " + e.what());
  }
  return checkpoint_from_json<T>(j);
}

}  // namespace costi
