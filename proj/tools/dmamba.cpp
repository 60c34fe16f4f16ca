#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "dmamba/dmamba.hpp"

namespace dm = dmamba;

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::optional<uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_config = true) {
  if (with_config) cmd->add_option("--config", f.config_path, "JSON config file (flat keys)");
  cmd->add_option("--set", f.overrides, "config override key=value (repeatable)");
  cmd->add_option("--seed", f.seed, "master seed; all randomness derives from it");
  cmd->add_option("--out", f.out, "output directory or file");
}

dm::RunConfig build_config(const CommonFlags& f) {
  dm::RunConfig cfg;
  if (!f.config_path.empty()) dm::load_config_file(cfg, f.config_path);
  for (const std::string& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw dm::ConfigError("--set expects key=value, got '" + kv + "'");
    dm::apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.train.seed = *f.seed;
  if (!f.out.empty()) cfg.out_dir = f.out;
  return cfg;
}

int cmd_gen_data(const std::string& env_spec, const std::string& policy_spec, int64_t episodes,
                 uint64_t seed, const std::string& out) {
  std::unique_ptr<dm::EnvInterface> env;
  dm::Policy policy;
  try {
    env = dm::make_env(env_spec);
    policy = dm::make_policy(*env, policy_spec);
  } catch (const dm::Error& e) {
    throw dm::ConfigError(e.what());
  }
  auto rng = dm::substream(seed, "gen-data");
  dm::Dataset ds = dm::gen_dataset(*env, policy, episodes, rng, policy_spec);
  ds.seed = seed;
  dm::save_dataset(out, ds);

  double mean = 0, mn = 0, mx = 0;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const double r = dm::episode_return(ds.trajectories[i]);
    mean += r;
    mn = i == 0 ? r : std::min(mn, r);
    mx = i == 0 ? r : std::max(mx, r);
  }
  if (!ds.trajectories.empty()) mean /= static_cast<double>(ds.trajectories.size());
  std::cout << "wrote " << out << ": " << ds.trajectories.size() << " episodes (env "
            << env->spec() << ", policy " << policy_spec << ")\n";
  if (!ds.trajectories.empty())
    std::cout << "returns: mean " << mean << ", min " << mn << ", max " << mx << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& dataset_flag) {
  dm::RunConfig cfg = build_config(flags);
  if (!dataset_flag.empty()) cfg.dataset_path = dataset_flag;
  int64_t last_print = 0;
  dm::TrainArtifacts art = dm::pipeline_train(cfg, [&](const dm::MetricsRow& row) {
    if (row.step - last_print >= 500 || row.step == 1) {
      std::cout << "step " << row.step << " loss " << row.loss << " grad_norm " << row.grad_norm
                << " lr " << row.lr << "\n";
      last_print = row.step;
    }
  });
  std::cout << "checkpoint: " << art.checkpoint.string() << "\n"
            << "metrics: " << art.metrics.string() << "\n"
            << "config snapshot: " << art.snapshot.string() << "\n";
  if (!art.result.metrics.empty())
    std::cout << "final loss: " << art.result.metrics.back().loss << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint,
             const std::string& env_override, std::optional<double> target_rtg,
             std::optional<int64_t> episodes, std::optional<double> temperature,
             std::optional<double> random_baseline, std::optional<double> expert_baseline) {
  dm::RunConfig cfg;
  std::string config_path = flags.config_path;
  if (config_path.empty() && !checkpoint.empty()) {
    const auto sibling = dm::fs::path(checkpoint).parent_path() / "config.json";
    if (dm::fs::exists(sibling)) config_path = sibling.string();
  }
  if (config_path.empty())
    throw dm::ConfigError("eval needs --config or a config.json next to the checkpoint");
  dm::load_config_file(cfg, config_path);
  for (const std::string& kv : flags.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw dm::ConfigError("--set expects key=value, got '" + kv + "'");
    dm::apply_config_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
  if (!env_override.empty()) cfg.env = env_override;
  if (flags.seed) cfg.train.seed = *flags.seed;
  if (target_rtg) cfg.train.target_rtg = *target_rtg;
  if (episodes) cfg.train.eval_episodes = *episodes;
  if (temperature) cfg.train.eval_temperature = *temperature;

  dm::fs::path csv = flags.out.empty()
                         ? dm::fs::path(cfg.checkpoint_path).parent_path() / "eval.csv"
                         : dm::fs::path(flags.out);
  dm::EvalArtifacts art = dm::pipeline_eval(cfg, random_baseline, expert_baseline, csv);
  std::cout << "env " << cfg.env << ", target_rtg " << cfg.train.target_rtg << ", episodes "
            << cfg.train.eval_episodes << ", seed " << cfg.train.seed << "\n";
  std::cout << "return: " << art.summary.mean << " +/- " << art.summary.stddev << "\n";
  if (art.normalized) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", *art.normalized);
    std::cout << "normalized score: " << buf << "\n";
  }
  std::cout << "eval csv: " << art.csv.string() << "\n";
  return 0;
}

int cmd_score(double raw, double random_baseline, double expert_baseline) {
  if (expert_baseline == random_baseline)
    throw dm::ConfigError("expert and random baselines must differ");
  std::printf("%.1f\n", dm::normalized_score(raw, random_baseline, expert_baseline));
  return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& key,
              const std::vector<std::string>& values) {
  dm::RunConfig cfg = build_config(flags);
  dm::SweepArtifacts art = dm::pipeline_sweep(cfg, key, values);
  std::cout << "sweep summary: " << art.summary.string() << "\n";
  for (const auto& row : art.rows)
    std::cout << key << "=" << row.value << ": mean_return " << row.mean_return
              << ", final_loss " << row.final_loss << "\n";
  return 0;
}

std::string defaults_footer() {
  std::string s = "Config keys and defaults (JSON file via --config, overrides via --set):\n";
  s += dm::config_to_json(dm::RunConfig{}).dump(2);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decision Mamba: selective state-space sequence modeling for offline RL"};
  app.require_subcommand(1);
  app.footer(defaults_footer());

  std::function<int()> run;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "roll out a behavior policy into a JSONL dataset");
  std::string gen_env = "densechain:n=6,H=10", gen_policy = "epsilon:0.3",
              gen_out = "dataset.jsonl";
  int64_t gen_episodes = 1000;
  uint64_t gen_seed = 0;
  gen->add_option("--env", gen_env, "environment spec, e.g. densechain:n=6,H=10")
      ->capture_default_str();
  gen->add_option("--policy", gen_policy, "optimal | random | epsilon:<p>")
      ->capture_default_str();
  gen->add_option("--episodes", gen_episodes, "number of episodes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "rng seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output JSONL path")->capture_default_str();
  gen->callback([&] {
    run = [&] { return cmd_gen_data(gen_env, gen_policy, gen_episodes, gen_seed, gen_out); };
  });

  // train
  auto* tr = app.add_subcommand("train", "train from a JSONL dataset; writes checkpoint, "
                                         "metrics.csv and a resolved config snapshot");
  static CommonFlags tr_flags;
  std::string tr_dataset;
  add_common(tr, tr_flags);
  tr->add_option("--dataset", tr_dataset, "dataset JSONL (overrides dataset_path)");
  tr->callback([&] { run = [&] { return cmd_train(tr_flags, tr_dataset); }; });

  // eval
  auto* ev = app.add_subcommand("eval", "roll out a trained checkpoint and report returns");
  static CommonFlags ev_flags;
  std::string ev_checkpoint, ev_env;
  std::optional<double> ev_rtg, ev_temp, ev_random, ev_expert;
  std::optional<int64_t> ev_episodes;
  add_common(ev, ev_flags);
  ev->add_option("--checkpoint", ev_checkpoint, "DMCK checkpoint path");
  ev->add_option("--env", ev_env, "environment override");
  ev->add_option("--target-rtg", ev_rtg, "conditioning return-to-go");
  ev->add_option("--episodes", ev_episodes, "evaluation episodes");
  ev->add_option("--temperature", ev_temp, "discrete action sampling temperature (0 = argmax)");
  ev->add_option("--random", ev_random, "random-policy baseline score");
  ev->add_option("--expert", ev_expert, "expert baseline score");
  ev->callback([&] {
    run = [&] {
      return cmd_eval(ev_flags, ev_checkpoint, ev_env, ev_rtg, ev_episodes, ev_temp, ev_random,
                      ev_expert);
    };
  });

  // score
  auto* sc = app.add_subcommand("score", "normalized score from raw/random/expert");
  double sc_raw = 0, sc_random = 0, sc_expert = 0;
  sc->add_option("raw", sc_raw, "raw score")->required();
  sc->add_option("random", sc_random, "random baseline")->required();
  sc->add_option("expert", sc_expert, "expert baseline")->required();
  sc->callback([&] { run = [&] { return cmd_score(sc_raw, sc_random, sc_expert); }; });

  // sweep
  auto* sw = app.add_subcommand("sweep", "train/eval once per value of one config key");
  static CommonFlags sw_flags;
  std::string sw_key;
  std::vector<std::string> sw_values;
  add_common(sw, sw_flags);
  sw->add_option("--key", sw_key, "config key to sweep")->required();
  sw->add_option("--values", sw_values, "values to sweep over")->required();
  sw->callback([&] { run = [&] { return cmd_sweep(sw_flags, sw_key, sw_values); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    return run();
  } catch (const dm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
