#ifndef VOLMIL_OPTIM_HPP_
#define VOLMIL_OPTIM_HPP_

#include "volmil/errors.hpp"
#include "volmil/parameters.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_map>

namespace volmil {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 coefficient added to the gradient (coupled weight decay).
  double weight_decay = 0.0;
};

struct LRSchedule {
  double base_lr = 1e-3;
  double min_lr = 0.0;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
};

/// Cosine annealing from base_lr to min_lr with an optional linear warmup.
/// Steps past total_steps stay at min_lr.
inline double cosine_lr(const LRSchedule& s, std::int64_t step) {
  if (s.total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (s.min_lr < 0.0 || s.min_lr > s.base_lr) throw std::invalid_argument("cosine_lr: need 0 <= min_lr <= base_lr");
  if (step < 0) step = 0;
  if (step >= s.total_steps) return s.min_lr;
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(step - s.warmup_steps) / span;
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// SGD with momentum or Adam over the trainable entries of a store.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }

  /// Applies one update at learning rate `lr`, then zeroes all gradients.
  /// A non-finite gradient leaves every parameter untouched.
  void step(ParameterStore<T>& store, double lr) {
    for (const Parameter<T>* p : store.parameters())
      if (p->trainable && !p->grad.all_finite())
        throw NumericalError("non-finite gradient in parameter '" + p->name + "' at step " +
                             std::to_string(step_ + 1));
    ++step_;
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T rate = static_cast<T>(lr);
    for (Parameter<T>* p : store.parameters()) {
      if (!p->trainable) continue;
      State& st = state_[p->name];
      ColVector<T> g = p->grad.vec();
      if (wd != T(0)) g += wd * p->value.vec();
      if (cfg_.kind == OptimizerKind::sgd_momentum) {
        if (st.m.size() == 0) st.m = ColVector<T>::Zero(g.size());
        st.m = static_cast<T>(cfg_.momentum) * st.m + g;
        p->value.vec() -= rate * st.m;
      } else {
        if (st.m.size() == 0) {
          st.m = ColVector<T>::Zero(g.size());
          st.v = ColVector<T>::Zero(g.size());
        }
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        st.m = b1 * st.m + (T(1) - b1) * g;
        st.v = b2 * st.v + (T(1) - b2) * g.cwiseProduct(g);
        const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(step_)));
        const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(step_)));
        const T eps = static_cast<T>(cfg_.epsilon);
        p->value.vec().array() -= rate * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps);
      }
    }
    store.zero_grad();
  }

 private:
  struct State {
    ColVector<T> m, v;
  };
  OptimizerConfig cfg_;
  std::int64_t step_ = 0;
  std::unordered_map<std::string, State> state_;
};

}  // namespace volmil

#endif  // VOLMIL_OPTIM_HPP_
