#pragma once

// Flat JSON run configuration shared by the command-line tool.

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "costi/checkpoint.hpp"
#include "costi/data.hpp"
#include "costi/network.hpp"
#include "costi/sampling.hpp"
#include "costi/training.hpp"

namespace costi {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model{};
  TrainConfig train{};
  SamplerConfig sampler{};
  std::size_t window = 24;
  std::size_t train_stride = 1;
  std::size_t nodes = 8;          // synthetic data
  std::size_t synth_steps = 2000;
  std::uint64_t seed = 0;
};

namespace config_detail {

using Setter = std::function<void(RunConfig&, const nlohmann::json&)>;

template <typename V>
V as(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> m;
#define COSTI_FIELD(name, type, target) \
  m[name] = [](RunConfig& c, const nlohmann::json& v) { c.target = as<type>(v, name); };
    COSTI_FIELD("channels", std::size_t, model.channels)
    COSTI_FIELD("heads", std::size_t, model.heads)
    COSTI_FIELD("nem_layers", std::size_t, model.nem_layers)
    COSTI_FIELD("f_t", std::size_t, model.f_t)
    COSTI_FIELD("f_s", std::size_t, model.f_s)
    COSTI_FIELD("dropout", double, model.dropout)
    COSTI_FIELD("use_cond", bool, model.use_cond)
    COSTI_FIELD("use_stfem", bool, model.use_stfem)
    COSTI_FIELD("use_nem", bool, model.use_nem)
    COSTI_FIELD("use_self_attention", bool, model.use_self_attention)
    COSTI_FIELD("embedding_frequencies", std::size_t, model.embedding_frequencies)
    COSTI_FIELD("batch_size", std::size_t, train.batch_size)
    COSTI_FIELD("steps", std::size_t, train.total_steps)
    COSTI_FIELD("learning_rate", double, train.learning_rate)
    COSTI_FIELD("weight_decay", double, train.weight_decay)
    COSTI_FIELD("s0", std::size_t, train.curriculum.s0)
    COSTI_FIELD("s1", std::size_t, train.curriculum.s1)
    COSTI_FIELD("pretrain_fraction", double, train.curriculum.pretrain_fraction)
    COSTI_FIELD("pseudo_huber_coef", double, train.pseudo_huber_coef)
    COSTI_FIELD("val_every", std::size_t, train.val_every)
    COSTI_FIELD("val_samples", std::size_t, train.val_samples)
    COSTI_FIELD("val_point_rate", double, train.val_point_rate)
    COSTI_FIELD("n_samples", std::size_t, sampler.n_samples)
    COSTI_FIELD("sigmas", std::vector<double>, sampler.sigmas)
    COSTI_FIELD("sampler_batch", std::size_t, sampler.batch)
    COSTI_FIELD("threads", std::size_t, sampler.threads)
    COSTI_FIELD("window", std::size_t, window)
    COSTI_FIELD("train_stride", std::size_t, train_stride)
    COSTI_FIELD("nodes", std::size_t, nodes)
    COSTI_FIELD("synth_steps", std::size_t, synth_steps)
    COSTI_FIELD("seed", std::uint64_t, seed)
#undef COSTI_FIELD
    auto parsed = [](auto parse) {
      return [parse](RunConfig& c, const nlohmann::json& v, const std::string& key) {
        try {
          parse(c, as<std::string>(v, key));
        } catch (const ConfigError&) {
          throw;
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      };
    };
    auto bind = [&](const std::string& key, auto fn) {
      m[key] = [fn, key](RunConfig& c, const nlohmann::json& v) { fn(c, v, key); };
    };
    bind("temporal_mixer", parsed([](RunConfig& c, const std::string& s) { c.model.temporal_mixer = parse_temporal_mixer(s); }));
    bind("optimizer", parsed([](RunConfig& c, const std::string& s) { c.train.optimizer = parse_optimizer(s); }));
    bind("curriculum", parsed([](RunConfig& c, const std::string& s) { c.train.curriculum.kind = parse_curriculum(s); }));
    bind("mask_strategy", parsed([](RunConfig& c, const std::string& s) { c.train.mask_strategy = parse_mask_strategy(s); }));
    return m;
  }();
  return table;
}

}  // namespace config_detail

/// Names accepted by apply_config.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : config_detail::setters()) keys.push_back(k);
  return keys;
}

/// Overwrites fields named in a flat JSON object; unknown keys are rejected.
inline void apply_config(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& table = config_detail::setters();
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(c, value);
  }
}

inline RunConfig load_config(const std::string& path) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  apply_config(c, j);
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {{"channels", c.model.channels},
          {"heads", c.model.heads},
          {"nem_layers", c.model.nem_layers},
          {"f_t", c.model.f_t},
          {"f_s", c.model.f_s},
          {"dropout", c.model.dropout},
          {"temporal_mixer", std::string(to_string(c.model.temporal_mixer))},
          {"use_cond", c.model.use_cond},
          {"use_stfem", c.model.use_stfem},
          {"use_nem", c.model.use_nem},
          {"use_self_attention", c.model.use_self_attention},
          {"embedding_frequencies", c.model.embedding_frequencies},
          {"batch_size", c.train.batch_size},
          {"steps", c.train.total_steps},
          {"optimizer", std::string(to_string(c.train.optimizer))},
          {"learning_rate", c.train.learning_rate},
          {"weight_decay", c.train.weight_decay},
          {"curriculum", std::string(to_string(c.train.curriculum.kind))},
          {"s0", c.train.curriculum.s0},
          {"s1", c.train.curriculum.s1},
          {"pretrain_fraction", c.train.curriculum.pretrain_fraction},
          {"mask_strategy", std::string(to_string(c.train.mask_strategy))},
          {"pseudo_huber_coef", c.train.pseudo_huber_coef},
          {"val_every", c.train.val_every},
          {"val_samples", c.train.val_samples},
          {"val_point_rate", c.train.val_point_rate},
          {"n_samples", c.sampler.n_samples},
          {"sigmas", c.sampler.sigmas},
          {"sampler_batch", c.sampler.batch},
          {"threads", c.sampler.threads},
          {"window", c.window},
          {"train_stride", c.train_stride},
          {"nodes", c.nodes},
          {"synth_steps", c.synth_steps},
          {"seed", c.seed}};
}

inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(config_to_json(c).dump()); }

}  // namespace costi
