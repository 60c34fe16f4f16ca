#pragma once

#include "dmamba/data.hpp"

namespace dmamba {

enum class LrDecay { linear_warmup, warmup_cosine };

struct TrainConfig {
  DecisionMambaConfig model;
  int64_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 500;
  int64_t total_updates = 5000;
  double grad_clip = 0.25;
  LrDecay lr_decay = LrDecay::linear_warmup;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double rtg_scale = 1.0;
  double target_rtg = 0.0;
  int64_t eval_episodes = 20;
  double eval_temperature = 0.0;  // 0 = argmax for discrete actions
  uint64_t seed = 0;

  void validate() const {
    model.validate();
    require(batch_size >= 1 && total_updates >= 0 && warmup_steps >= 0 && eval_episodes >= 0,
            "train config counts must be non-negative (batch_size positive)");
    require(learning_rate > 0 && grad_clip > 0 && rtg_scale != 0, "learning_rate and grad_clip ",
            "must be positive, rtg_scale nonzero");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam betas must lie in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

namespace detail {
inline Tensor masked_step_mean(const Tensor& per_step, const Tensor& mask) {
  double count = 0.0;
  for (int64_t i = 0; i < mask.numel(); ++i) count += mask.data()[i];
  require(count > 0.0, "action loss over an all-masked batch");
  return mul_scalar(sum(mul(per_step, mask)), 1.0 / count);
}
}  // namespace detail

// Mean squared error per step (averaged over action dims), then averaged over
// unmasked steps only.
inline Tensor action_loss_mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  require(pred.shape() == target.shape(), "mse shapes differ: ", shape_str(pred.shape()), " vs ",
          shape_str(target.shape()));
  Tensor e = sub(pred, target);
  Tensor per_step = mean(mul(e, e), {pred.dim() - 1});
  return detail::masked_step_mean(per_step, mask);
}

// Cross-entropy of logits against class ids, averaged over unmasked steps.
inline Tensor action_loss_ce(const Tensor& logits, const ITensor& target, const Tensor& mask) {
  Tensor nll = neg(gather_index(log_softmax(logits), target));
  return detail::masked_step_mean(nll, mask);
}

inline Tensor action_loss(const Tensor& pred, const Batch& batch, const ActionSpace& space) {
  return space.continuous() ? action_loss_mse(pred, batch.cont_actions, batch.mask)
                            : action_loss_ce(pred, batch.disc_actions, batch.mask);
}

// ---------------------------------------------------------------------------
// Optimizer: global-norm clipping + decoupled weight decay Adam
// ---------------------------------------------------------------------------

// step is 1-based. Linear warmup to base, optionally followed by a cosine
// decay to 10% of base at total_updates.
inline double lr_at(const TrainConfig& cfg, int64_t step) {
  const double base = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (cfg.lr_decay == LrDecay::linear_warmup) return base;
  const double span = static_cast<double>(std::max<int64_t>(cfg.total_updates - cfg.warmup_steps, 1));
  const double progress =
      std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
  constexpr double kPi = 3.14159265358979323846;
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(kPi * progress)));
}

// Scales all gradients so the global norm does not exceed max_norm; returns
// the pre-clip norm.
inline double clip_grad_norm(const NamedParams& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    const double* g = t.grad_or_null();
    if (!g) continue;
    for (int64_t i = 0; i < t.numel(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& [name, t] : params) {
      Tensor tt = t;
      double* g = tt.grad_or_null() ? tt.grad() : nullptr;
      if (!g) continue;
      for (int64_t i = 0; i < tt.numel(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

struct AdamState {
  std::vector<std::vector<double>> m, v;

  void init(const NamedParams& params) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : params) {
      m.emplace_back(static_cast<size_t>(t.numel()), 0.0);
      v.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    }
  }
};

inline void optimizer_step(const NamedParams& params, AdamState& state, const TrainConfig& cfg,
                           int64_t step) {
  require(!state.m.empty() || params.empty(), "optimizer state not initialized");
  const double lr = lr_at(cfg, step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].second;
    const double* g = t.grad_or_null();
    if (!g) continue;
    double* p = t.data();
    double* m = state.m[pi].data();
    double* v = state.v[pi].data();
    for (int64_t i = 0; i < t.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[i]);
    }
  }
}

inline void zero_grads(const NamedParams& params) {
  for (const auto& [name, t] : params) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRow {
  int64_t step;
  double loss, grad_norm, lr;
};

struct TrainResult {
  DecisionMambaParams params;
  DecisionMambaConfig model_cfg;  // resolved against the dataset
  StateStats stats;               // empty unless states are standardized
  std::vector<MetricsRow> metrics;
};

// Resolves state_dim / action_space / max_timestep against the dataset.
inline DecisionMambaConfig resolve_model_config(const TrainConfig& cfg, const Dataset& ds) {
  DecisionMambaConfig m = cfg.model;
  m.state_dim = ds.state_dim;
  m.action_space = ds.action_space;
  m.max_timestep = std::max(m.max_timestep, ds.max_length() + 1);
  return m;
}

inline TrainResult train(const TrainConfig& cfg, const Dataset& ds,
                         const std::function<void(const MetricsRow&)>& on_metrics = {}) {
  cfg.validate();
  require(!ds.empty(), "training requires a non-empty dataset");

  TrainResult res;
  res.model_cfg = resolve_model_config(cfg, ds);

  auto rng_init = substream(cfg.seed, "init");
  auto rng_data = substream(cfg.seed, "data");
  auto rng_drop = substream(cfg.seed, "dropout");
  res.params = init_params(res.model_cfg, rng_init);

  const auto env = make_env(ds.env_spec);
  if (env->continuous_states()) res.stats = compute_state_stats(ds);

  NamedParams named = named_params(res.params);
  AdamState adam;
  adam.init(named);

  const int64_t K = res.model_cfg.context_length;
  for (int64_t step = 1; step <= cfg.total_updates; ++step) {
    Batch batch = make_batch(ds, K, cfg.batch_size, rng_data, res.stats, cfg.rtg_scale);
    double loss_val = 0.0;
    {
      Tape tape;
      Tensor pred = forward(batch, res.params, res.model_cfg, Mode::train, rng_drop);
      Tensor loss = action_loss(pred, batch, res.model_cfg.action_space);
      loss_val = loss.item();
      tape.backward(loss);
    }
    const double gnorm = clip_grad_norm(named, cfg.grad_clip);
    optimizer_step(named, adam, cfg, step);
    zero_grads(named);

    MetricsRow row{step, loss_val, gnorm, lr_at(cfg, step)};
    res.metrics.push_back(row);
    if (on_metrics) on_metrics(row);
  }
  return res;
}

}  // namespace dmamba
