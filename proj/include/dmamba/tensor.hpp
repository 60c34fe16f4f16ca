#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <unordered_map>
#include <utility>

#include "dmamba/base.hpp"
#include "dmamba/prof.hpp"

namespace dmamba {

namespace detail {
// 64-byte aligned uninitialized buffers keep SIMD kernels on one code path
// regardless of where the allocator lands, which keeps transcendental ops
// bit-reproducible across runs. Large buffers are recycled through a
// per-thread pool: training reallocates the same multi-megabyte activation
// shapes every step, and fresh mmap-backed pages would fault on first touch.
class BufferPool {
 public:
  static constexpr size_t kMinPooledBytes = 1 << 20;        // 1 MB
  static constexpr size_t kMaxPooledBytes = size_t(3) << 30;  // 3 GB per thread

  static BufferPool& local() {
    thread_local BufferPool pool;
    return pool;
  }

  double* take(size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      double* p = it->second.back();
      it->second.pop_back();
      held_ -= n * sizeof(double);
      return p;
    }
    return raw_alloc(n);
  }

  void give(double* p, size_t n) {
    const size_t bytes = n * sizeof(double);
    if (bytes < kMinPooledBytes || held_ + bytes > kMaxPooledBytes) {
      raw_free(p);
      return;
    }
    free_[n].push_back(p);
    held_ += bytes;
  }

  ~BufferPool() {
    for (auto& [n, v] : free_)
      for (double* p : v) raw_free(p);
  }

 private:
  static double* raw_alloc(size_t n) {
    return static_cast<double*>(::operator new[](n * sizeof(double), std::align_val_t(64)));
  }
  static void raw_free(double* p) { ::operator delete[](p, std::align_val_t(64)); }

  std::unordered_map<size_t, std::vector<double*>> free_;
  size_t held_ = 0;
};

struct AlignedFree {
  size_t n = 0;
  void operator()(double* p) const { BufferPool::local().give(p, n); }
};
using AlignedBuf = std::unique_ptr<double[], AlignedFree>;

inline AlignedBuf aligned_alloc_doubles(int64_t n) {
  const size_t un = static_cast<size_t>(n);
  return AlignedBuf(BufferPool::local().take(un), AlignedFree{un});
}
}  // namespace detail

// Dense 64-bit real tensor with an optional gradient buffer. Copies share the
// underlying node (torch-style handle semantics); the value buffer is
// allocated uninitialized and every op writes it in full.
class Tensor {
  struct Node {
    Shape shape;
    int64_t size = 0;
    detail::AlignedBuf val;
    detail::AlignedBuf grad;  // lazily allocated, zero-filled
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  static Tensor uninit(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->size = dmamba::numel(t.n_->shape);
    require(t.n_->size >= 0, "negative extent in shape ", shape_str(t.n_->shape));
    t.n_->val = detail::aligned_alloc_doubles(t.n_->size);
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape));
    std::fill_n(t.data(), t.numel(), 0.0);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(Shape shape, double v) {
    Tensor t = uninit(std::move(shape));
    std::fill_n(t.data(), t.numel(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> vals, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape));
    require(static_cast<int64_t>(vals.size()) == t.numel(), "value count ", vals.size(),
            " does not match shape ", shape_str(t.shape()));
    std::copy(vals.begin(), vals.end(), t.data());
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double v) { return full({}, v); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t dim() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t extent(int64_t i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return n_->size; }

  double* data() { return n_->val.get(); }
  const double* data() const { return n_->val.get(); }

  double item() const {
    require(numel() == 1, "item() on tensor of shape ", shape_str(shape()));
    return data()[0];
  }

  double& at(std::initializer_list<int64_t> idx) {
    const auto st = row_major_strides(shape());
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) flat += v * st[i++];
    return data()[flat];
  }
  double at(std::initializer_list<int64_t> idx) const {
    return const_cast<Tensor*>(this)->at(idx);
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool grad_allocated() const { return n_->grad != nullptr; }
  double* grad() {
    if (!n_->grad) {
      n_->grad = detail::aligned_alloc_doubles(n_->size);
      std::fill_n(n_->grad.get(), n_->size, 0.0);
    }
    return n_->grad.get();
  }
  // For backward rules that overwrite the whole gradient buffer on first
  // touch instead of accumulating onto zeros.
  double* grad_uninit() {
    if (!n_->grad) n_->grad = detail::aligned_alloc_doubles(n_->size);
    return n_->grad.get();
  }
  const double* grad_or_null() const { return n_->grad.get(); }

  void zero_grad() {
    if (n_->grad) std::fill_n(n_->grad.get(), n_->size, 0.0);
  }

  Tensor grad_tensor() const {
    Tensor g = uninit(shape());
    if (n_->grad)
      std::copy_n(n_->grad.get(), n_->size, g.data());
    else
      std::fill_n(g.data(), n_->size, 0.0);
    return g;
  }

  // Identity of the underlying node; used to de-duplicate tape leaves.
  const void* node_id() const { return n_.get(); }

 private:
  std::shared_ptr<Node> n_;
};

// Integer tensor for ids (timesteps, discrete actions, embedding lookups).
struct ITensor {
  Shape shape;
  std::vector<int64_t> v;

  ITensor() = default;
  ITensor(Shape s, std::vector<int64_t> vals) : shape(std::move(s)), v(std::move(vals)) {
    require(static_cast<int64_t>(v.size()) == dmamba::numel(shape), "id count ", v.size(),
            " does not match shape ", shape_str(shape));
  }
  static ITensor zeros(Shape s) {
    const size_t n = static_cast<size_t>(dmamba::numel(s));
    return ITensor(std::move(s), std::vector<int64_t>(n));
  }
  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  bool empty() const { return v.empty(); }
};

// Ordered record of executed operations. Ops append a backward rule while the
// tape is active on the current thread; replaying the rules in reverse order
// propagates gradients from a scalar loss to every requires_grad leaf.
class Tape {
 public:
  Tape() : prev_(tls()) { tls() = this; }
  ~Tape() { tls() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return tls(); }

  void record(const char* name, std::vector<Tensor> outputs,
              std::function<void()> backward_rule) {
    steps_.push_back(Step{name, std::move(outputs), std::move(backward_rule)});
  }
  void record(std::vector<Tensor> outputs, std::function<void()> backward_rule) {
    record("op", std::move(outputs), std::move(backward_rule));
  }

  void backward(Tensor loss) {
    require(loss.defined() && loss.numel() == 1, "backward expects a scalar loss, got shape ",
            loss.defined() ? shape_str(loss.shape()) : "<undefined>");
    loss.grad()[0] += 1.0;
    const bool prof = detail::Prof::enabled();
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      bool touched = false;
      for (const auto& o : it->outputs)
        if (o.grad_allocated()) touched = true;
      if (!touched) continue;
      if (prof) {
        const auto t0 = std::chrono::steady_clock::now();
        it->backward_rule();
        detail::Prof::add(
            it->name,
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      } else {
        it->backward_rule();
      }
    }
  }

  size_t size() const { return steps_.size(); }

 private:
  struct Step {
    const char* name;
    std::vector<Tensor> outputs;
    std::function<void()> backward_rule;
  };

  static Tape*& tls() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<Step> steps_;
  Tape* prev_ = nullptr;
};

// True when the op must register a backward rule for these inputs.
inline bool grad_needed(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace dmamba
