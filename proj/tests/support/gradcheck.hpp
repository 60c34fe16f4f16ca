#pragma once

#include <functional>

#include "dmamba/ops.hpp"

namespace testsupport {

// Central finite differences (step h) against the tape's analytic gradients.
// The numeric side re-runs the forward function with perturbed inputs and no
// tape, so it is independent of every backward rule it checks.
struct GradCheck {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

inline GradCheck gradcheck(const std::vector<dmamba::Tensor>& inputs,
                           const std::function<dmamba::Tensor()>& f, double h = 1e-6) {
  using dmamba::Tape;
  using dmamba::Tensor;

  for (const Tensor& tin : inputs) {
    Tensor t = tin;
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  for (const Tensor& tin : inputs) {
    Tensor t = tin;
    analytic.emplace_back(t.grad(), t.grad() + t.numel());
    t.zero_grad();
  }

  GradCheck res;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = f().item();
      t.data()[i] = orig - h;
      const double down = f().item();
      t.data()[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double g = analytic[k][static_cast<size_t>(i)];
      const double abs_err = std::abs(fd - g);
      const double rel = abs_err / std::max({std::abs(fd), std::abs(g), 1e-2});
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  return res;
}

// Scalar loss from an arbitrary tensor: fixed-weight contraction so every
// output element influences the loss.
inline dmamba::Tensor weighted_loss(const dmamba::Tensor& y, const dmamba::Tensor& w) {
  return dmamba::sum(dmamba::mul(y, w));
}

inline dmamba::Tensor loss_weights(const dmamba::Shape& shape, uint64_t seed = 7) {
  auto rng = dmamba::substream(seed, "loss-weights");
  std::uniform_real_distribution<double> u(0.5, 1.5);
  dmamba::Tensor w = dmamba::Tensor::uninit(shape);
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = u(rng);
  return w;
}

}  // namespace testsupport
