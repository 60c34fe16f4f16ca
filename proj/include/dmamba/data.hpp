#pragma once

#include <fstream>

#include "dmamba/envs.hpp"
#include "json.hpp"

namespace dmamba {

struct Trajectory {
  std::vector<std::vector<double>> observations;  // [T][S]
  std::vector<std::vector<double>> cont_actions;  // [T][A], continuous spaces
  std::vector<int64_t> disc_actions;              // [T], discrete spaces
  std::vector<double> rewards;                    // [T]

  int64_t length() const { return static_cast<int64_t>(rewards.size()); }

  void validate(const ActionSpace& space) const {
    const size_t t = rewards.size();
    const size_t na = space.continuous() ? cont_actions.size() : disc_actions.size();
    require(na == t, "trajectory has ", na, " actions but ", t, " rewards");
    require(observations.size() >= t, "trajectory has ", observations.size(),
            " observations for ", t, " steps");
  }
};

struct Dataset {
  std::string env_spec;
  int64_t state_dim = 0;
  ActionSpace action_space;
  std::string generator;
  uint64_t seed = 0;
  std::vector<Trajectory> trajectories;

  bool empty() const { return trajectories.empty(); }
  int64_t max_length() const {
    int64_t m = 0;
    for (const auto& t : trajectories) m = std::max(m, t.length());
    return m;
  }
};

// R-hat_i = sum_{i' >= i} r_{i'}: suffix sums, length preserved.
inline std::vector<double> compute_rtg(const std::vector<double>& rewards) {
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

inline double episode_return(const Trajectory& t) {
  double acc = 0.0;
  for (double r : t.rewards) acc += r;
  return acc;
}

// ---------------------------------------------------------------------------
// Dataset generation and JSONL serialization
// ---------------------------------------------------------------------------

inline Dataset gen_dataset(EnvInterface& env, const Policy& policy, int64_t episodes,
                           std::mt19937_64& rng, const std::string& generator_name = "") {
  Dataset ds;
  ds.env_spec = env.spec();
  ds.state_dim = env.state_dim();
  ds.action_space = env.action_space();
  ds.generator = generator_name;
  for (int64_t e = 0; e < episodes; ++e) {
    Trajectory traj;
    std::vector<double> state = env.reset(rng);
    for (int64_t t = 0;; ++t) {
      traj.observations.push_back(state);
      const Action a = policy(state, t, rng);
      const StepResult sr = env.step(a);
      if (env.action_space().continuous())
        traj.cont_actions.push_back(a.cont);
      else
        traj.disc_actions.push_back(a.disc);
      traj.rewards.push_back(sr.reward);
      state = sr.state;
      if (sr.done) break;
    }
    ds.trajectories.push_back(std::move(traj));
  }
  return ds;
}

inline std::string action_space_str(const ActionSpace& s) {
  return (s.continuous() ? "continuous:" : "discrete:") + std::to_string(s.dim);
}

inline ActionSpace parse_action_space(const std::string& s) {
  const auto colon = s.find(':');
  require(colon != std::string::npos, "bad action_space '", s, "'");
  const std::string kind = s.substr(0, colon);
  ActionSpace out;
  out.dim = std::stoll(s.substr(colon + 1));
  if (kind == "continuous")
    out.kind = ActionSpace::Kind::continuous;
  else if (kind == "discrete")
    out.kind = ActionSpace::Kind::discrete;
  else
    fail("bad action_space kind '", kind, "'");
  return out;
}

// UTF-8 JSON-Lines: first line is a metadata object, then one trajectory per
// line: {"observations": [[...],...], "actions": ..., "rewards": [...]}.
inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  require(static_cast<bool>(os), "cannot open dataset for writing: ", path);
  nlohmann::json meta{{"env", ds.env_spec},
                      {"state_dim", ds.state_dim},
                      {"action_space", action_space_str(ds.action_space)},
                      {"generator", ds.generator},
                      {"seed", ds.seed}};
  os << meta.dump() << '\n';
  for (const Trajectory& t : ds.trajectories) {
    nlohmann::json line;
    line["observations"] = t.observations;
    if (ds.action_space.continuous())
      line["actions"] = t.cont_actions;
    else
      line["actions"] = t.disc_actions;
    line["rewards"] = t.rewards;
    os << line.dump() << '\n';
  }
  require(static_cast<bool>(os), "dataset write failed: ", path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open dataset: ", path);
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "dataset missing metadata line: ", path);
  nlohmann::json meta = nlohmann::json::parse(line);
  Dataset ds;
  ds.env_spec = meta.at("env").get<std::string>();
  ds.state_dim = meta.at("state_dim").get<int64_t>();
  ds.action_space = parse_action_space(meta.at("action_space").get<std::string>());
  ds.generator = meta.value("generator", std::string{});
  ds.seed = meta.value("seed", uint64_t{0});
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Trajectory t;
    t.observations = j.at("observations").get<std::vector<std::vector<double>>>();
    if (ds.action_space.continuous())
      t.cont_actions = j.at("actions").get<std::vector<std::vector<double>>>();
    else
      t.disc_actions = j.at("actions").get<std::vector<int64_t>>();
    t.rewards = j.at("rewards").get<std::vector<double>>();
    t.validate(ds.action_space);
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Per-dimension state statistics for standardization (continuous envs only).
struct StateStats {
  std::vector<double> mean, stddev;

  bool enabled() const { return !mean.empty(); }
  double normalize(double v, size_t d) const { return (v - mean[d]) / stddev[d]; }
};

inline StateStats compute_state_stats(const Dataset& ds) {
  StateStats st;
  const size_t s = static_cast<size_t>(ds.state_dim);
  st.mean.assign(s, 0.0);
  st.stddev.assign(s, 0.0);
  int64_t count = 0;
  for (const auto& t : ds.trajectories)
    for (const auto& obs : t.observations) {
      for (size_t d = 0; d < s; ++d) st.mean[d] += obs[d];
      ++count;
    }
  require(count > 0, "cannot compute state statistics of an empty dataset");
  for (size_t d = 0; d < s; ++d) st.mean[d] /= static_cast<double>(count);
  for (const auto& t : ds.trajectories)
    for (const auto& obs : t.observations)
      for (size_t d = 0; d < s; ++d) {
        const double c = obs[d] - st.mean[d];
        st.stddev[d] += c * c;
      }
  for (size_t d = 0; d < s; ++d)
    st.stddev[d] = std::max(std::sqrt(st.stddev[d] / static_cast<double>(count)), 1e-6);
  return st;
}

// Samples trajectories with probability proportional to length and a uniform
// start offset; windows shorter than K are left-padded with zeros and masked.
inline Batch make_batch(const Dataset& ds, int64_t K, int64_t batch_size, std::mt19937_64& rng,
                        const StateStats& stats = {}, double rtg_scale = 1.0) {
  require(!ds.empty(), "cannot sample batches from an empty dataset");
  require(K >= 1 && batch_size >= 1, "make_batch needs K >= 1 and batch_size >= 1");
  const int64_t S = ds.state_dim;
  const bool cont = ds.action_space.continuous();
  const int64_t A = ds.action_space.dim;

  std::vector<int64_t> cumlen;
  int64_t total = 0;
  for (const auto& t : ds.trajectories) {
    total += t.length();
    cumlen.push_back(total);
  }
  require(total > 0, "dataset contains only empty trajectories");

  Batch b;
  b.rtg = Tensor::zeros({batch_size, K, 1});
  b.states = Tensor::zeros({batch_size, K, S});
  if (cont) b.cont_actions = Tensor::zeros({batch_size, K, A});
  b.disc_actions = ITensor::zeros({batch_size, K});
  b.timesteps = ITensor::zeros({batch_size, K});
  b.mask = Tensor::zeros({batch_size, K});

  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  for (int64_t i = 0; i < batch_size; ++i) {
    const int64_t u = pick(rng);
    const size_t ti = static_cast<size_t>(
        std::upper_bound(cumlen.begin(), cumlen.end(), u) - cumlen.begin());
    const Trajectory& traj = ds.trajectories[ti];
    const int64_t T = traj.length();
    std::uniform_int_distribution<int64_t> offset(0, T - 1);
    const int64_t si = offset(rng);
    const int64_t len = std::min(K, T - si);
    const int64_t pad = K - len;

    const auto rtg = compute_rtg(traj.rewards);
    for (int64_t j = 0; j < len; ++j) {
      const int64_t src = si + j, dst = pad + j;
      b.rtg.at({i, dst, 0}) = rtg[static_cast<size_t>(src)] / rtg_scale;
      for (int64_t d = 0; d < S; ++d) {
        const double v = traj.observations[static_cast<size_t>(src)][static_cast<size_t>(d)];
        b.states.at({i, dst, d}) =
            stats.enabled() ? stats.normalize(v, static_cast<size_t>(d)) : v;
      }
      if (cont)
        for (int64_t d = 0; d < A; ++d)
          b.cont_actions.at({i, dst, d}) =
              traj.cont_actions[static_cast<size_t>(src)][static_cast<size_t>(d)];
      else
        b.disc_actions.v[static_cast<size_t>(i * K + dst)] =
            traj.disc_actions[static_cast<size_t>(src)];
      b.timesteps.v[static_cast<size_t>(i * K + dst)] = src;
      b.mask.at({i, dst}) = 1.0;
    }
  }
  b.action_valid = b.mask;
  return b;
}

}  // namespace dmamba
