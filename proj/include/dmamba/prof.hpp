#pragma once

#include <chrono>
#include <map>
#include <string>

namespace dmamba {
namespace detail {

// Opt-in per-op wall-clock accounting, keyed by static name strings. Off by
// default; a disabled timer costs one thread-local load per op.
struct Prof {
  static bool& enabled() {
    thread_local bool on = false;
    return on;
  }
  static std::map<std::string, double>& table() {
    thread_local std::map<std::string, double> t;
    return t;
  }
  static void add(const char* name, double seconds) { table()[name] += seconds; }
};

class OpTimer {
 public:
  explicit OpTimer(const char* name) : name_(name), on_(Prof::enabled()) {
    if (on_) start_ = std::chrono::steady_clock::now();
  }
  ~OpTimer() {
    if (on_)
      Prof::add(name_, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
                           .count());
  }
  OpTimer(const OpTimer&) = delete;

 private:
  const char* name_;
  bool on_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

inline void profiling_enable(bool on) { detail::Prof::enabled() = on; }
inline std::map<std::string, double> profiling_snapshot(bool reset = true) {
  auto copy = detail::Prof::table();
  if (reset) detail::Prof::table().clear();
  return copy;
}

}  // namespace dmamba
