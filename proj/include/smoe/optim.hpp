#pragma once

#include <cmath>
#include <map>
#include <string>

#include "smoe/matrix.hpp"
#include "smoe/rng.hpp"

namespace smoe {

struct Param {
  RealMatrix value;
  RealMatrix grad;   // accumulator, same shape as value
  RealMatrix adam_m;
  RealMatrix adam_v;
};

// Named parameters plus their gradient accumulators and Adam moment buffers.
// std::map keeps iteration order stable so updates are bit-deterministic.
class ParameterStore {
 public:
  Param& create(const std::string& name, RealMatrix init) {
    require(!params_.contains(name), "parameter already exists: " + name);
    Param p;
    p.grad = RealMatrix(init.rows, init.cols);
    p.adam_m = RealMatrix(init.rows, init.cols);
    p.adam_v = RealMatrix(init.rows, init.cols);
    p.value = std::move(init);
    auto [it, ok] = params_.emplace(name, std::move(p));
    return it->second;
  }

  bool has(const std::string& name) const { return params_.contains(name); }

  Param& at(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }
  const Param& at(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "unknown parameter: " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.grad.fill(0.0);
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& [name, p] : params_)
      for (double g : p.grad.data) s += g * g;
    return std::sqrt(s);
  }

  long step() const { return step_; }
  void set_step(long s) { step_ = s; }

  // Standard Adam with bias correction, weight decay 0.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-8) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (auto& [name, p] : params_) {
      for (std::size_t i = 0; i < p.value.data.size(); ++i) {
        const double g = p.grad.data[i];
        double& m = p.adam_m.data[i];
        double& v = p.adam_v.data[i];
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        p.value.data[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
      }
    }
  }

  std::map<std::string, Param>& params() { return params_; }
  const std::map<std::string, Param>& params() const { return params_; }

  long total_values() const {
    long n = 0;
    for (const auto& [name, p] : params_) n += static_cast<long>(p.value.data.size());
    return n;
  }

 private:
  std::map<std::string, Param> params_;
  long step_ = 0;
};

// Linear warmup to peak_lr, then peak_lr * sqrt(warmup / step).
inline double inverse_sqrt_lr(long step, long warmup, double peak_lr) {
  require(step >= 1, "inverse_sqrt_lr: step must be >= 1");
  if (step <= warmup) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return peak_lr * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

inline RealMatrix xavier_uniform(int rows, int cols, Rng& rng) {
  RealMatrix m(rows, cols);
  const double bound = std::sqrt(6.0 / (rows + cols));
  for (double& v : m.data) v = rng.uniform(-bound, bound);
  return m;
}

}  // namespace smoe
