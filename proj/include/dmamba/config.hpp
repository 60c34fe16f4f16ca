#pragma once

#include "dmamba/eval.hpp"
#include "json.hpp"

namespace dmamba {

// Configuration / usage problems map to exit code 2 in the CLI; everything
// else is a runtime failure (exit 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Flat-keyed run configuration: CLI flags override file values, which
// override these defaults. The desk defaults scale the reference recipe
// (1e5 updates, K = 20..30, D = 128+) down by roughly 20x for single-core
// runs; the warmup keeps the reference 1:10 warmup-to-updates ratio.
struct RunConfig {
  TrainConfig train;
  std::string env = "densechain:n=6,H=10";
  std::string dataset_path;
  std::string out_dir = "out";
  std::string checkpoint_path;
  // Snapshot-only fields, written by training so evaluation can rebuild the
  // model and its input normalization without the dataset.
  std::vector<double> state_mean, state_std;
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
};

inline void expect(bool ok, const std::string& key, const char* what) {
  if (!ok) throw ConfigError("config key '" + key + "' expects " + what);
}

template <class Get, class Set>
ConfigField make_field(std::string key, Get get, Set set) {
  ConfigField f;
  f.key = key;
  f.get = get;
  f.set = set;
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  auto str = [](std::string key, auto member) {
    return make_field(
        key, [member](const RunConfig& c) { return nlohmann::json(c.*member); },
        [member, key](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_string(), key, "a string");
          c.*member = v.get<std::string>();
        });
  };

  static const std::vector<ConfigField> fields = [&] {
    std::vector<ConfigField> f;
    // model
    f.push_back(make_field(
        "n_layers", [](const RunConfig& c) { return nlohmann::json(c.train.model.n_layers); },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_number_integer(), "n_layers", "an integer");
          c.train.model.n_layers = v.get<int64_t>();
        }));
    auto model_i64 = [&f](const std::string& key, int64_t DecisionMambaConfig::*m) {
      f.push_back(make_field(
          key, [m](const RunConfig& c) { return nlohmann::json(c.train.model.*m); },
          [m, key](RunConfig& c, const nlohmann::json& v) {
            expect(v.is_number_integer(), key, "an integer");
            c.train.model.*m = v.get<int64_t>();
          }));
    };
    model_i64("embed_dim", &DecisionMambaConfig::embed_dim);
    model_i64("ssm_state", &DecisionMambaConfig::ssm_state);
    model_i64("expand", &DecisionMambaConfig::expand);
    model_i64("conv_kernel", &DecisionMambaConfig::conv_kernel);
    model_i64("context_length", &DecisionMambaConfig::context_length);
    model_i64("max_timestep", &DecisionMambaConfig::max_timestep);
    model_i64("state_dim", &DecisionMambaConfig::state_dim);
    f.push_back(make_field(
        "dropout_p", [](const RunConfig& c) { return nlohmann::json(c.train.model.dropout_p); },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_number(), "dropout_p", "a number");
          c.train.model.dropout_p = v.get<double>();
        }));
    f.push_back(make_field(
        "use_channel_mlp",
        [](const RunConfig& c) { return nlohmann::json(c.train.model.use_channel_mlp); },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_boolean(), "use_channel_mlp", "a boolean");
          c.train.model.use_channel_mlp = v.get<bool>();
        }));
    f.push_back(make_field(
        "scan_mode",
        [](const RunConfig& c) {
          return nlohmann::json(c.train.model.scan_mode == ScanMode::sequential ? "sequential"
                                                                                : "parallel");
        },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_string(), "scan_mode", "\"sequential\" or \"parallel\"");
          const std::string s = v.get<std::string>();
          if (s == "sequential")
            c.train.model.scan_mode = ScanMode::sequential;
          else if (s == "parallel")
            c.train.model.scan_mode = ScanMode::parallel;
          else
            throw ConfigError("config key 'scan_mode' expects \"sequential\" or \"parallel\"");
        }));
    f.push_back(make_field(
        "action_space",
        [](const RunConfig& c) {
          return nlohmann::json(action_space_str(c.train.model.action_space));
        },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_string(), "action_space", "e.g. \"discrete:2\"");
          c.train.model.action_space = parse_action_space(v.get<std::string>());
        }));

    // training
    auto train_i64 = [&f](const std::string& key, int64_t TrainConfig::*m) {
      f.push_back(make_field(
          key, [m](const RunConfig& c) { return nlohmann::json(c.train.*m); },
          [m, key](RunConfig& c, const nlohmann::json& v) {
            expect(v.is_number_integer(), key, "an integer");
            c.train.*m = v.get<int64_t>();
          }));
    };
    auto train_num = [&f](const std::string& key, double TrainConfig::*m) {
      f.push_back(make_field(
          key, [m](const RunConfig& c) { return nlohmann::json(c.train.*m); },
          [m, key](RunConfig& c, const nlohmann::json& v) {
            expect(v.is_number(), key, "a number");
            c.train.*m = v.get<double>();
          }));
    };
    train_i64("batch_size", &TrainConfig::batch_size);
    train_num("learning_rate", &TrainConfig::learning_rate);
    train_num("weight_decay", &TrainConfig::weight_decay);
    train_i64("warmup_steps", &TrainConfig::warmup_steps);
    train_i64("total_updates", &TrainConfig::total_updates);
    train_num("grad_clip", &TrainConfig::grad_clip);
    train_num("beta1", &TrainConfig::beta1);
    train_num("beta2", &TrainConfig::beta2);
    train_num("adam_eps", &TrainConfig::adam_eps);
    train_num("rtg_scale", &TrainConfig::rtg_scale);
    train_num("target_rtg", &TrainConfig::target_rtg);
    train_i64("eval_episodes", &TrainConfig::eval_episodes);
    train_num("eval_temperature", &TrainConfig::eval_temperature);
    f.push_back(make_field(
        "lr_decay",
        [](const RunConfig& c) {
          return nlohmann::json(c.train.lr_decay == LrDecay::linear_warmup ? "linear_warmup"
                                                                           : "warmup_cosine");
        },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_string(), "lr_decay", "\"linear_warmup\" or \"warmup_cosine\"");
          const std::string s = v.get<std::string>();
          if (s == "linear_warmup")
            c.train.lr_decay = LrDecay::linear_warmup;
          else if (s == "warmup_cosine")
            c.train.lr_decay = LrDecay::warmup_cosine;
          else
            throw ConfigError("config key 'lr_decay' expects \"linear_warmup\" or \"warmup_cosine\"");
        }));
    f.push_back(make_field(
        "seed", [](const RunConfig& c) { return nlohmann::json(c.train.seed); },
        [](RunConfig& c, const nlohmann::json& v) {
          expect(v.is_number_integer() || v.is_number_unsigned(), "seed", "an integer");
          c.train.seed = v.get<uint64_t>();
        }));

    // paths and environment
    f.push_back(str("env", &RunConfig::env));
    f.push_back(str("dataset_path", &RunConfig::dataset_path));
    f.push_back(str("out_dir", &RunConfig::out_dir));
    f.push_back(str("checkpoint_path", &RunConfig::checkpoint_path));

    // snapshot-only state statistics
    auto vec = [&f](const std::string& key, std::vector<double> RunConfig::*m) {
      f.push_back(make_field(
          key, [m](const RunConfig& c) { return nlohmann::json(c.*m); },
          [m, key](RunConfig& c, const nlohmann::json& v) {
            expect(v.is_array(), key, "an array of numbers");
            c.*m = v.get<std::vector<double>>();
          }));
    };
    vec("state_mean", &RunConfig::state_mean);
    vec("state_std", &RunConfig::state_std);
    return f;
  }();
  return fields;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace detail

inline bool is_config_key(const std::string& key) { return detail::find_field(key) != nullptr; }

// Applies a flat JSON object; unknown keys and type errors are all collected
// and reported together.
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& j, const std::string& source) {
  require(j.is_object(), "config ", source, " must be a JSON object");
  std::vector<std::string> errors;
  for (const auto& [key, value] : j.items()) {
    const detail::ConfigField* f = detail::find_field(key);
    if (!f) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    try {
      f->set(cfg, value);
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid config (" + source + "):";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  apply_config_json(cfg, j, path);
}

// key=value override; the value is parsed as a JSON literal, falling back to
// a bare string.
inline void apply_config_override(RunConfig& cfg, const std::string& key,
                                  const std::string& value) {
  const detail::ConfigField* f = detail::find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  nlohmann::json v;
  try {
    v = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    v = value;
  }
  f->set(cfg, v);
}

// Every key materialized, suitable as a reproducible run snapshot.
inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::config_fields()) j[f.key] = f.get(cfg);
  return j;
}

}  // namespace dmamba
