#pragma once

#include "dmamba/train.hpp"

namespace dmamba {

// Expert-normalized score: 100 * (raw - random) / (expert - random), no
// clamping.
inline double normalized_score(double raw, double random_score, double expert_score) {
  require(expert_score != random_score,
          "normalized score undefined: expert and random baselines are both ", expert_score);
  return 100.0 * (raw - random_score) / (expert_score - random_score);
}

// Running view of the episode so far; the action for the newest state is not
// yet chosen.
struct EpisodeContext {
  std::vector<double> rtgs;                 // R-hat_0..i, unscaled
  std::vector<std::vector<double>> states;  // s_0..i
  std::vector<Action> actions;              // a_0..i-1

  int64_t t() const { return static_cast<int64_t>(states.size()) - 1; }
};

using Actor = std::function<Action(const EpisodeContext&, std::mt19937_64&)>;

struct RolloutEpisode {
  double ret = 0.0;
  std::vector<double> rewards;
  std::vector<double> rtgs;  // R-hat stream actually fed to the actor
};

// Return-conditioned evaluation: start from target_rtg and subtract each
// observed reward from the previous step's RTG.
inline std::vector<RolloutEpisode> rollout(EnvInterface& env, const Actor& actor,
                                           double target_rtg, int64_t episodes,
                                           std::mt19937_64& rng) {
  std::vector<RolloutEpisode> out;
  for (int64_t e = 0; e < episodes; ++e) {
    EpisodeContext ctx;
    ctx.states.push_back(env.reset(rng));
    ctx.rtgs.push_back(target_rtg);
    RolloutEpisode ep;
    while (true) {
      const Action a = actor(ctx, rng);
      const StepResult sr = env.step(a);
      ctx.actions.push_back(a);
      ep.rewards.push_back(sr.reward);
      ep.ret += sr.reward;
      if (sr.done) break;
      ctx.states.push_back(sr.state);
      ctx.rtgs.push_back(ctx.rtgs.back() - sr.reward);
    }
    ep.rtgs = ctx.rtgs;
    out.push_back(std::move(ep));
  }
  return out;
}

// Wraps the network as an actor: feeds the most recent <= K steps with the
// current action slot zeroed, then reads the prediction for the newest step.
// Discrete actions take the argmax of the logits, or a temperature sample
// when temperature > 0.
inline Actor make_model_actor(const DecisionMambaParams& params, const DecisionMambaConfig& cfg,
                              const StateStats& stats, double rtg_scale,
                              double temperature = 0.0) {
  const DecisionMambaParams* p = &params;
  DecisionMambaConfig c = cfg;
  StateStats st = stats;
  return [p, c, st, rtg_scale, temperature](const EpisodeContext& ctx, std::mt19937_64& rng) {
    const int64_t have = static_cast<int64_t>(ctx.states.size());
    const int64_t K = std::min<int64_t>(c.context_length, have);
    const int64_t first = have - K;
    const int64_t S = c.state_dim;
    const bool cont = c.action_space.continuous();

    Batch b;
    b.rtg = Tensor::zeros({1, K, 1});
    b.states = Tensor::zeros({1, K, S});
    if (cont) b.cont_actions = Tensor::zeros({1, K, c.action_space.dim});
    b.disc_actions = ITensor::zeros({1, K});
    b.timesteps = ITensor::zeros({1, K});
    b.mask = Tensor::full({1, K}, 1.0);
    b.action_valid = Tensor::full({1, K}, 1.0);
    b.action_valid.at({0, K - 1}) = 0.0;  // the current action is unknown

    for (int64_t j = 0; j < K; ++j) {
      const int64_t src = first + j;
      b.rtg.at({0, j, 0}) = ctx.rtgs[static_cast<size_t>(src)] / rtg_scale;
      for (int64_t d = 0; d < S; ++d) {
        const double v = ctx.states[static_cast<size_t>(src)][static_cast<size_t>(d)];
        b.states.at({0, j, d}) = st.enabled() ? st.normalize(v, static_cast<size_t>(d)) : v;
      }
      b.timesteps.v[static_cast<size_t>(j)] = src;
      if (src < static_cast<int64_t>(ctx.actions.size())) {
        if (cont)
          for (int64_t d = 0; d < c.action_space.dim; ++d)
            b.cont_actions.at({0, j, d}) = ctx.actions[static_cast<size_t>(src)].cont[static_cast<size_t>(d)];
        else
          b.disc_actions.v[static_cast<size_t>(j)] = ctx.actions[static_cast<size_t>(src)].disc;
      }
    }

    std::mt19937_64 unused(0);  // eval mode draws nothing from dropout
    Tensor pred = forward(b, *p, c, Mode::eval, unused);

    Action a;
    if (cont) {
      for (int64_t d = 0; d < c.action_space.dim; ++d) a.cont.push_back(pred.at({0, K - 1, d}));
      return a;
    }
    const int64_t n = c.action_space.dim;
    std::vector<double> logits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) logits[static_cast<size_t>(i)] = pred.at({0, K - 1, i});
    if (temperature <= 0.0) {
      a.disc = static_cast<int64_t>(
          std::max_element(logits.begin(), logits.end()) - logits.begin());
      return a;
    }
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    std::vector<double> w(static_cast<size_t>(n));
    double z = 0;
    for (int64_t i = 0; i < n; ++i) {
      w[static_cast<size_t>(i)] = std::exp((logits[static_cast<size_t>(i)] - m) / temperature);
      z += w[static_cast<size_t>(i)];
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double cut = u(rng) * z, acc = 0;
    a.disc = n - 1;
    for (int64_t i = 0; i < n; ++i) {
      acc += w[static_cast<size_t>(i)];
      if (cut <= acc) {
        a.disc = i;
        break;
      }
    }
    return a;
  };
}

struct EvalSummary {
  std::vector<double> returns;
  double mean = 0.0, stddev = 0.0;

  static EvalSummary from(const std::vector<RolloutEpisode>& eps) {
    EvalSummary s;
    for (const auto& e : eps) s.returns.push_back(e.ret);
    if (s.returns.empty()) return s;
    for (double r : s.returns) s.mean += r;
    s.mean /= static_cast<double>(s.returns.size());
    for (double r : s.returns) s.stddev += (r - s.mean) * (r - s.mean);
    s.stddev = std::sqrt(s.stddev / static_cast<double>(s.returns.size()));
    return s;
  }
};

}  // namespace dmamba
