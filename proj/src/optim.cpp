#include "flownav/optim.hpp"

#include <cmath>
#include <string>

#include "flownav/errors.hpp"

namespace flownav::optim {

Kind parse_kind(std::string_view s) {
  if (s == "adam") return Kind::adam;
  if (s == "adamw") return Kind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam|adamw)");
}

std::string_view to_string(Kind k) { return k == Kind::adam ? "adam" : "adamw"; }

double grad_norm(const std::vector<ad::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (const double g : p.grad()) sq += g * g;
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<ad::Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (auto& g : p.node()->grad) g *= s;
  }
  return norm;
}

Adam::Adam(std::vector<ad::Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const bool decoupled = cfg_.kind == Kind::adamw && cfg_.weight_decay != 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto g = p.grad();
    if (g.empty()) continue;
    auto x = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      if (decoupled) x[j] -= cfg_.learning_rate * cfg_.weight_decay * x[j];
      x[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace flownav::optim
