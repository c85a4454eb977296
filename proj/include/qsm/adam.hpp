#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

// Adam with bias correction, shared by the variational fit and network
// training.  Moments live here; the learning rate is passed per step so
// callers can apply schedules.

namespace qsm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  explicit AdamState(std::size_t n_params, AdamConfig cfg = {})
      : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {}

  std::size_t size() const { return m_.size(); }
  long step_count() const { return step_; }

  // In-place parameter update from gradients; params and grads must both
  // have exactly size() elements.
  template <class Params, class Grads>
  void update(Params& params, const Grads& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw std::invalid_argument("AdamState::update size mismatch");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const double g = grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace qsm
