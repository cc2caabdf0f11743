#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fxmm/error.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam over a fixed parameter list. A parameter whose
// gradient was never allocated this step is treated as having a zero
// gradient, so its moments still decay (momentum carries over sparse steps).
template <class S>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<S>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(validated(cfg)) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      if (!p.defined()) throw state_error("optimizer given an undefined parameter");
      m_.emplace_back(p.numel(), S(0));
      v_.emplace_back(p.numel(), S(0));
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  std::int64_t step_count() const noexcept { return t_; }
  const std::vector<Tensor<S>>& params() const noexcept { return params_; }
  const std::vector<std::vector<S>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<S>>& second_moments() const noexcept { return v_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].data();
      const auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const S g = grad.empty() ? S(0) : grad[j];
        m[j] = b1 * m[j] + (S(1) - b1) * g;
        v[j] = b2 * v[j] + (S(1) - b2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        data[j] -= static_cast<S>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  // Reinstalls serialized state; moment shapes must match the parameter list.
  void restore(std::int64_t step_count, std::vector<std::vector<S>> m,
               std::vector<std::vector<S>> v) {
    if (step_count < 0) throw state_error("negative optimizer step count");
    if (m.size() != params_.size() || v.size() != params_.size())
      throw shape_error("optimizer state covers " + std::to_string(m.size()) + "/" +
                        std::to_string(v.size()) + " parameters, expected " +
                        std::to_string(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel())
        throw shape_error("optimizer moment size mismatch for " + params_[i].name());
    t_ = step_count;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  static AdamConfig validated(const AdamConfig& cfg) {
    if (!(cfg.lr > 0)) throw config_error("learning rate must be positive");
    if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
      throw config_error("Adam betas must lie in [0, 1)");
    if (!(cfg.eps > 0)) throw config_error("Adam epsilon must be positive");
    return cfg;
  }

  std::vector<Tensor<S>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<S>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace fxmm
