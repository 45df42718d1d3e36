#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "flownav/autodiff.hpp"

namespace flownav::optim {

enum class Kind : std::uint8_t { adam, adamw };

Kind parse_kind(std::string_view s);  // throws ConfigError
std::string_view to_string(Kind k);

struct AdamConfig {
  Kind kind = Kind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; ignored by plain Adam
};

// Global L2 norm over the gradients of `params` (tensors without a gradient
// count as zero).
double grad_norm(const std::vector<ad::Tensor>& params);
// Rescales all gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(const std::vector<ad::Tensor>& params, double max_norm);

class Adam {
 public:
  Adam(std::vector<ad::Tensor> params, AdamConfig cfg);

  // One update of every parameter that received a gradient. Parameters
  // without a gradient keep their values and moments.
  void step();
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  void set_learning_rate(double lr) noexcept { cfg_.learning_rate = lr; }

 private:
  std::vector<ad::Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace flownav::optim
