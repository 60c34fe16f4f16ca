#pragma once

#include <filesystem>
#include <iomanip>
#include <optional>

#include "dmamba/checkpoint.hpp"
#include "dmamba/config.hpp"

namespace dmamba {

namespace fs = std::filesystem;

namespace detail {
inline std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// train: dataset -> checkpoint.dmck + metrics.csv + config.json snapshot
// ---------------------------------------------------------------------------

struct TrainArtifacts {
  fs::path checkpoint, metrics, snapshot;
  TrainResult result;
};

// The snapshot materializes every config key, including the model fields
// resolved against the dataset, so a later run (or eval) can rebuild the
// exact same model without the dataset.
inline nlohmann::json resolved_snapshot(const RunConfig& cfg, const TrainResult& res,
                                        const std::string& env_spec) {
  RunConfig out = cfg;
  out.train.model = res.model_cfg;
  out.state_mean = res.stats.mean;
  out.state_std = res.stats.stddev;
  out.env = env_spec;
  return config_to_json(out);
}

inline TrainArtifacts pipeline_train(const RunConfig& cfg,
                                     const std::function<void(const MetricsRow&)>& on_metrics = {}) {
  require(!cfg.dataset_path.empty(), "no dataset_path configured");
  Dataset ds = load_dataset(cfg.dataset_path);
  fs::create_directories(cfg.out_dir);

  TrainArtifacts art;
  art.checkpoint = fs::path(cfg.out_dir) / "checkpoint.dmck";
  art.metrics = fs::path(cfg.out_dir) / "metrics.csv";
  art.snapshot = fs::path(cfg.out_dir) / "config.json";

  std::ofstream metrics(art.metrics);
  require(static_cast<bool>(metrics), "cannot open metrics file: ", art.metrics.string());
  metrics << "step,loss,grad_norm,lr\n";
  art.result = train(cfg.train, ds, [&](const MetricsRow& row) {
    metrics << row.step << ',' << detail::csv_num(row.loss) << ','
            << detail::csv_num(row.grad_norm) << ',' << detail::csv_num(row.lr) << '\n';
    if (on_metrics) on_metrics(row);
  });
  metrics.close();

  save_checkpoint(art.checkpoint.string(), named_params(art.result.params));
  std::ofstream snap(art.snapshot);
  require(static_cast<bool>(snap), "cannot open snapshot file: ", art.snapshot.string());
  snap << resolved_snapshot(cfg, art.result, ds.env_spec).dump(2) << '\n';
  return art;
}

// ---------------------------------------------------------------------------
// eval: checkpoint + snapshot -> eval.csv + summary
// ---------------------------------------------------------------------------

struct EvalArtifacts {
  EvalSummary summary;
  std::optional<double> normalized;  // set when random/expert baselines given
  fs::path csv;
};

inline DecisionMambaParams load_model(const RunConfig& cfg) {
  require(!cfg.checkpoint_path.empty(), "no checkpoint_path configured");
  auto rng = substream(0, "load");  // values are overwritten by the checkpoint
  DecisionMambaParams params = init_params(cfg.train.model, rng);
  load_checkpoint(cfg.checkpoint_path, named_params(params));
  return params;
}

inline StateStats snapshot_stats(const RunConfig& cfg) {
  StateStats st;
  st.mean = cfg.state_mean;
  st.stddev = cfg.state_std;
  require(st.mean.size() == st.stddev.size(), "state_mean and state_std lengths differ");
  return st;
}

inline EvalArtifacts pipeline_eval(const RunConfig& cfg,
                                   std::optional<double> random_baseline = {},
                                   std::optional<double> expert_baseline = {},
                                   const fs::path& csv_path = {}) {
  DecisionMambaParams params = load_model(cfg);
  auto env = make_env(cfg.env);
  require(env->state_dim() == cfg.train.model.state_dim, "env state_dim ", env->state_dim(),
          " does not match model state_dim ", cfg.train.model.state_dim);

  Actor actor = make_model_actor(params, cfg.train.model, snapshot_stats(cfg),
                                 cfg.train.rtg_scale, cfg.train.eval_temperature);
  auto rng = substream(cfg.train.seed, "eval");
  auto episodes = rollout(*env, actor, cfg.train.target_rtg, cfg.train.eval_episodes, rng);

  EvalArtifacts art;
  art.summary = EvalSummary::from(episodes);
  if (random_baseline && expert_baseline)
    art.normalized = normalized_score(art.summary.mean, *random_baseline, *expert_baseline);

  if (!csv_path.empty()) {
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    std::ofstream os(csv_path);
    require(static_cast<bool>(os), "cannot open eval csv: ", csv_path.string());
    os << "episode,return,normalized\n";
    for (size_t i = 0; i < art.summary.returns.size(); ++i) {
      os << i << ',' << detail::csv_num(art.summary.returns[i]) << ',';
      if (random_baseline && expert_baseline)
        os << detail::csv_num(
            normalized_score(art.summary.returns[i], *random_baseline, *expert_baseline));
      os << '\n';
    }
    art.csv = csv_path;
  }
  return art;
}

// ---------------------------------------------------------------------------
// sweep: one training+eval run per value of a single config key
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string value;
  double mean_return, std_return, final_loss;
};

struct SweepArtifacts {
  fs::path summary;
  std::vector<SweepRow> rows;
};

inline SweepArtifacts pipeline_sweep(const RunConfig& base, const std::string& key,
                                     const std::vector<std::string>& values) {
  if (!is_config_key(key)) throw ConfigError("unknown config key '" + key + "'");
  require(!values.empty(), "sweep needs at least one value");
  fs::create_directories(base.out_dir);

  SweepArtifacts art;
  for (const std::string& value : values) {
    RunConfig run = base;
    apply_config_override(run, key, value);
    run.out_dir = (fs::path(base.out_dir) / (key + "=" + value)).string();
    TrainArtifacts t = pipeline_train(run);

    RunConfig eval_cfg = run;
    load_config_file(eval_cfg, t.snapshot.string());
    eval_cfg.checkpoint_path = t.checkpoint.string();
    EvalArtifacts e = pipeline_eval(eval_cfg, {}, {}, fs::path(run.out_dir) / "eval.csv");

    const double final_loss = t.result.metrics.empty() ? 0.0 : t.result.metrics.back().loss;
    art.rows.push_back(SweepRow{value, e.summary.mean, e.summary.stddev, final_loss});
  }

  art.summary = fs::path(base.out_dir) / "sweep_summary.csv";
  std::ofstream os(art.summary);
  require(static_cast<bool>(os), "cannot open sweep summary: ", art.summary.string());
  os << "key,value,mean_return,std_return,final_loss\n";
  for (const auto& row : art.rows)
    os << key << ',' << row.value << ',' << detail::csv_num(row.mean_return) << ','
       << detail::csv_num(row.std_return) << ',' << detail::csv_num(row.final_loss) << '\n';
  return art;
}

}  // namespace dmamba
