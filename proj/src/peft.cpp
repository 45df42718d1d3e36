#include "flownav/peft.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "flownav/errors.hpp"

namespace flownav::peft {

namespace {

ad::Tensor normal(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  auto t = ad::Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

void check_dim(std::size_t value, std::size_t limit, const char* what) {
  if (value == 0 || value > limit) {
    throw ConfigError(std::string(what) + " must be in [1, " + std::to_string(limit) + "], got " + std::to_string(value));
  }
}

}  // namespace

void attach_lora(model::Model& m, std::size_t rank, double alpha, std::uint64_t seed) {
  const auto d = m.config.d_model;
  check_dim(rank, d, "lora rank");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("lora alpha must be positive");
  std::mt19937_64 rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(rank));
  model::LoraParams lp{rank, alpha, {}};
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    auto qa = normal({d, rank}, sd, rng);
    auto va = normal({d, rank}, sd, rng);
    lp.layers.push_back({qa, ad::Tensor::zeros({rank, d}), va, ad::Tensor::zeros({rank, d})});
  }
  m.lora = std::move(lp);
}

void attach_prefix(model::Model& m, std::size_t n_virtual, std::uint64_t seed) {
  const auto d = m.config.d_model;
  check_dim(n_virtual, m.config.max_seq_len, "prefix length");
  std::mt19937_64 rng(seed);
  model::PrefixParams pp{n_virtual, {}};
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    auto k = normal({n_virtual, d}, 0.02, rng);
    auto v = normal({n_virtual, d}, 0.02, rng);
    pp.layers.push_back({k, v});
  }
  m.prefix = std::move(pp);
}

void attach_adapter(model::Model& m, std::size_t bottleneck, std::uint64_t seed) {
  const auto d = m.config.d_model;
  check_dim(bottleneck, d, "adapter bottleneck");
  std::mt19937_64 rng(seed);
  model::AdapterParams ap{bottleneck, {}};
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    model::Linear down{normal({d, bottleneck}, 0.02, rng), ad::Tensor::zeros({bottleneck})};
    model::Linear up{ad::Tensor::zeros({bottleneck, d}), ad::Tensor::zeros({d})};
    ap.layers.push_back({down, up});
  }
  m.adapter = std::move(ap);
}

std::size_t matched_prefix_tokens(const model::ModelConfig& cfg, gnn::Kind kind) {
  const double per_token = 2.0 * static_cast<double>(cfg.n_layers * cfg.d_model);
  const double n = std::round(static_cast<double>(gnn::GnnParams::expected_count(kind, cfg.d_model)) / per_token);
  return std::max<std::size_t>(1, static_cast<std::size_t>(n));
}

}  // namespace flownav::peft
