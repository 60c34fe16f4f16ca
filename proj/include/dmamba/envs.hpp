#pragma once

#include <functional>
#include <limits>
#include <map>
#include <memory>

#include "dmamba/model.hpp"

namespace dmamba {

struct Action {
  std::vector<double> cont;  // continuous spaces
  int64_t disc = 0;          // discrete spaces
};

struct StepResult {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
};

class EnvInterface {
 public:
  virtual ~EnvInterface() = default;
  virtual std::vector<double> reset(std::mt19937_64& rng) = 0;
  virtual StepResult step(const Action& a) = 0;
  virtual int64_t state_dim() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual int64_t horizon() const = 0;
  virtual bool continuous_states() const = 0;
  virtual std::string spec() const = 0;  // canonical "name:k=v,..." string
};

// ---------------------------------------------------------------------------
// Discrete chain toys
// ---------------------------------------------------------------------------

// Shared deterministic chain dynamics: states 0..n-1 one-hot, actions
// {0 = left, 1 = right}, moves clamp at the edges, fixed start at 0.
class ChainEnvBase : public EnvInterface {
 public:
  ChainEnvBase(int64_t n, int64_t h) : n_(n), h_(h) {
    require(n >= 2, "chain env needs n >= 2, got ", n);
    require(h >= 1, "chain env needs horizon >= 1, got ", h);
  }

  std::vector<double> reset(std::mt19937_64&) override {
    pos_ = 0;
    steps_ = 0;
    done_ = false;
    return one_hot(pos_);
  }

  StepResult step(const Action& a) override {
    require(!done_, "step() after episode end");
    require(a.disc == 0 || a.disc == 1, "chain action must be 0 (left) or 1 (right), got ",
            a.disc);
    const int64_t next = a.disc == 1 ? std::min(pos_ + 1, n_ - 1) : std::max(pos_ - 1, int64_t{0});
    ++steps_;
    done_ = steps_ >= h_;
    const double r = reward(pos_, a.disc, next, steps_ - 1);
    pos_ = next;
    return StepResult{one_hot(pos_), r, done_};
  }

  int64_t state_dim() const override { return n_; }
  ActionSpace action_space() const override {
    return ActionSpace{ActionSpace::Kind::discrete, 2};
  }
  int64_t horizon() const override { return h_; }
  bool continuous_states() const override { return false; }

  int64_t n_states() const { return n_; }
  // Deterministic (state, action, step) -> (next state, reward), for the DP solver.
  std::pair<int64_t, double> transition(int64_t s, int64_t a, int64_t t) const {
    const int64_t next = a == 1 ? std::min(s + 1, n_ - 1) : std::max(s - 1, int64_t{0});
    return {next, reward(s, a, next, t)};
  }

 protected:
  virtual double reward(int64_t pos, int64_t action, int64_t next, int64_t t) const = 0;

  std::vector<double> one_hot(int64_t pos) const {
    std::vector<double> s(static_cast<size_t>(n_), 0.0);
    s[static_cast<size_t>(pos)] = 1.0;
    return s;
  }

  int64_t n_, h_;
  int64_t pos_ = 0, steps_ = 0;
  bool done_ = true;
};

// Dense shaping: 1.0 for a rightward move taken at the right edge, 0.1 for
// any other rightward move, 0 for left.
class DenseChainEnv : public ChainEnvBase {
 public:
  using ChainEnvBase::ChainEnvBase;
  std::string spec() const override {
    return "densechain:n=" + std::to_string(n_) + ",H=" + std::to_string(h_);
  }

 protected:
  double reward(int64_t pos, int64_t action, int64_t, int64_t) const override {
    if (action != 1) return 0.0;
    return pos == n_ - 1 ? 1.0 : 0.1;
  }
};

// All reward withheld until the final step, paid as terminal position/(n-1):
// the long-horizon credit-assignment variant.
class DelayedCatchEnv : public ChainEnvBase {
 public:
  using ChainEnvBase::ChainEnvBase;
  std::string spec() const override {
    return "delayedcatch:n=" + std::to_string(n_) + ",H=" + std::to_string(h_);
  }

 protected:
  double reward(int64_t, int64_t, int64_t next, int64_t t) const override {
    if (t != h_ - 1) return 0.0;
    return static_cast<double>(next) / static_cast<double>(n_ - 1);
  }
};

// Continuous regulator: x in [-1,1], a in [-1,1], x <- clip(x + 0.1 a),
// reward -x^2 evaluated after the move. Start position is uniform in [-1,1].
class Point1dEnv : public EnvInterface {
 public:
  explicit Point1dEnv(int64_t h) : h_(h) { require(h >= 1, "point1d needs horizon >= 1"); }

  std::vector<double> reset(std::mt19937_64& rng) override {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    return reset_to(u(rng));
  }

  std::vector<double> reset_to(double x) {
    x_ = x;
    steps_ = 0;
    done_ = false;
    return {x_};
  }

  StepResult step(const Action& a) override {
    require(!done_, "step() after episode end");
    require(a.cont.size() == 1, "point1d action must be 1-dimensional");
    const double u = std::clamp(a.cont[0], -1.0, 1.0);
    x_ = std::clamp(x_ + 0.1 * u, -1.0, 1.0);
    ++steps_;
    done_ = steps_ >= h_;
    return StepResult{{x_}, -x_ * x_, done_};
  }

  int64_t state_dim() const override { return 1; }
  ActionSpace action_space() const override {
    return ActionSpace{ActionSpace::Kind::continuous, 1};
  }
  int64_t horizon() const override { return h_; }
  bool continuous_states() const override { return true; }
  std::string spec() const override { return "point1d:H=" + std::to_string(h_); }

 private:
  int64_t h_;
  double x_ = 0.0;
  int64_t steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// Exhaustive dynamic programming over (state, step) for the chain toys
// ---------------------------------------------------------------------------

struct DpSolution {
  double optimal_return = 0.0;
  int64_t n_states = 0, horizon = 0;
  std::vector<int64_t> best_action;  // [horizon][n_states]

  int64_t action_at(int64_t state, int64_t t) const {
    return best_action[static_cast<size_t>(t * n_states + state)];
  }
};

inline DpSolution dp_solve(const ChainEnvBase& env) {
  const int64_t S = env.n_states(), H = env.horizon();
  DpSolution sol;
  sol.n_states = S;
  sol.horizon = H;
  sol.best_action.assign(static_cast<size_t>(S * H), 0);
  std::vector<double> value(static_cast<size_t>(S), 0.0), next_value(static_cast<size_t>(S));
  for (int64_t t = H - 1; t >= 0; --t) {
    next_value = value;
    for (int64_t s = 0; s < S; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t best_a = 0;
      for (int64_t a = 0; a < 2; ++a) {
        const auto [s2, r] = env.transition(s, a, t);
        const double v = r + next_value[static_cast<size_t>(s2)];
        if (v > best) {
          best = v;
          best_a = a;
        }
      }
      value[static_cast<size_t>(s)] = best;
      sol.best_action[static_cast<size_t>(t * S + s)] = best_a;
    }
  }
  sol.optimal_return = value[0];  // fixed start at state 0
  return sol;
}

// ---------------------------------------------------------------------------
// Behavior policies for dataset generation
// ---------------------------------------------------------------------------

using Policy = std::function<Action(const std::vector<double>& state, int64_t t,
                                    std::mt19937_64& rng)>;

inline int64_t chain_position(const std::vector<double>& one_hot) {
  int64_t best = 0;
  for (size_t i = 1; i < one_hot.size(); ++i)
    if (one_hot[i] > one_hot[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

inline Policy optimal_policy(const EnvInterface& env) {
  if (const auto* chain = dynamic_cast<const ChainEnvBase*>(&env)) {
    auto dp = std::make_shared<DpSolution>(dp_solve(*chain));
    return [dp](const std::vector<double>& s, int64_t t, std::mt19937_64&) {
      return Action{{}, dp->action_at(chain_position(s), t)};
    };
  }
  // point1d: drive x straight to 0, the per-step-cost minimizer
  return [](const std::vector<double>& s, int64_t, std::mt19937_64&) {
    return Action{{std::clamp(-s[0] / 0.1, -1.0, 1.0)}, 0};
  };
}

inline Policy random_policy(const EnvInterface& env) {
  if (env.action_space().continuous()) {
    const int64_t dim = env.action_space().dim;
    return [dim](const std::vector<double>&, int64_t, std::mt19937_64& rng) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      Action a;
      for (int64_t i = 0; i < dim; ++i) a.cont.push_back(u(rng));
      return a;
    };
  }
  const int64_t count = env.action_space().dim;
  return [count](const std::vector<double>&, int64_t, std::mt19937_64& rng) {
    std::uniform_int_distribution<int64_t> u(0, count - 1);
    return Action{{}, u(rng)};
  };
}

// Optimal action with probability 1-p, uniform otherwise.
inline Policy epsilon_policy(const EnvInterface& env, double p) {
  require(p >= 0.0 && p <= 1.0, "epsilon must lie in [0,1], got ", p);
  Policy opt = optimal_policy(env);
  Policy rnd = random_policy(env);
  return [opt, rnd, p](const std::vector<double>& s, int64_t t, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng) < p ? rnd(s, t, rng) : opt(s, t, rng);
  };
}

// ---------------------------------------------------------------------------
// Spec-string factories: "densechain:n=6,H=10" / "epsilon:0.3"
// ---------------------------------------------------------------------------

namespace detail {
inline std::map<std::string, std::string> parse_kv(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    require(eq != std::string::npos, "expected key=value, got '", item, "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}
inline int64_t kv_int(const std::map<std::string, std::string>& kv, const std::string& key,
                      int64_t fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : std::stoll(it->second);
}
}  // namespace detail

inline std::unique_ptr<EnvInterface> make_env(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  const auto kv =
      colon == std::string::npos ? std::map<std::string, std::string>{}
                                 : detail::parse_kv(spec.substr(colon + 1));
  if (name == "densechain")
    return std::make_unique<DenseChainEnv>(detail::kv_int(kv, "n", 6), detail::kv_int(kv, "H", 10));
  if (name == "delayedcatch")
    return std::make_unique<DelayedCatchEnv>(detail::kv_int(kv, "n", 6),
                                             detail::kv_int(kv, "H", 12));
  if (name == "point1d") return std::make_unique<Point1dEnv>(detail::kv_int(kv, "H", 20));
  fail("unknown environment '", name, "' (expected densechain, delayedcatch, or point1d)");
}

inline Policy make_policy(const EnvInterface& env, const std::string& spec) {
  if (spec == "optimal") return optimal_policy(env);
  if (spec == "random") return random_policy(env);
  if (spec.rfind("epsilon:", 0) == 0) return epsilon_policy(env, std::stod(spec.substr(8)));
  fail("unknown policy '", spec, "' (expected optimal, random, or epsilon:<p>)");
}

}  // namespace dmamba
