#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "flownav/autodiff.hpp"
#include "flownav/model.hpp"

namespace flownav::testing {

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                                bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of `loss` (a scalar built from `inputs`)
// against central differences. Every `stride`-th coordinate is probed.
inline GradCheck check_gradients(const std::vector<ad::Tensor>& inputs, const std::function<ad::Tensor()>& loss,
                                 double h = 1e-4, std::size_t stride = 1) {
  for (const auto& t : inputs) t.node()->grad.clear();
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backward(loss());
  }
  GradCheck out;
  for (auto t : inputs) {
    const auto g = t.grad();
    const std::vector<double> analytic(g.begin(), g.end());
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); i += stride) {
      ad::NoGradGuard no_grad;
      const double x = d[i];
      d[i] = x + h;
      const double up = loss().item();
      d[i] = x - h;
      const double down = loss().item();
      d[i] = x;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      out.max_rel_err = std::max(out.max_rel_err, rel_err(a, numeric));
      ++out.checked;
    }
  }
  return out;
}

inline bool bitwise_equal(const ad::Tensor& a, const ad::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data();
  const auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(),
                    [](double p, double q) { return std::memcmp(&p, &q, sizeof(double)) == 0; });
}

// Small randomly initialized model. `gain` rescales every weight so that
// gradients are far from zero in finite-difference checks.
inline model::Model tiny_model(std::size_t n_layers = 2, std::size_t d_model = 8, std::size_t n_heads = 2,
                               std::size_t vocab = 11, std::uint64_t seed = 3, double gain = 10.0) {
  model::ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.d_model = d_model;
  cfg.d_ff = 2 * d_model;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 16;
  cfg.gnn_insert_layer = n_layers - 1;
  model::Model m;
  m.config = cfg;
  m.backbone = model::TransformerParams::init(cfg, seed);
  for (auto& [name, t] : m.backbone.named())
    if (name.find("gamma") == std::string::npos)
      for (auto& v : t.mutable_data()) v *= gain;
  return m;
}

using Mat = std::vector<std::vector<double>>;

inline Mat affine(const Mat& x, const ad::Tensor& w, const ad::Tensor& b) {
  Mat out(x.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.cols(); ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < w.rows(); ++k) s += x[i][k] * w.at(k, o);
      out[i][o] = s;
    }
  return out;
}

inline Mat norm_rows(const Mat& x, const ad::Tensor& g, const ad::Tensor& b) {
  Mat out = x;
  for (auto& row : out) {
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
    double var = 0.0;
    for (const double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

// Called with (layer, head, matrix) after each softmax; may edit the matrix.
using AttentionHook = std::function<void(std::size_t, std::size_t, Mat&)>;

// Plain loop implementation of the decoder, used as an oracle.
inline std::vector<double> reference_logits(const model::Model& m, const std::vector<TokenId>& ids,
                                            const AttentionHook& hook = {}) {
  const auto& cfg = m.config;
  const auto& p = m.backbone;
  const auto n = ids.size(), d = cfg.d_model, dh = d / cfg.n_heads;
  Mat x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i][j] = p.token_embedding.at(static_cast<std::size_t>(ids[i]), j) + p.position_embedding.at(i, j);
  for (std::size_t layer = 0; layer < p.layers.size(); ++layer) {
    const auto& lp = p.layers[layer];
    const auto a = norm_rows(x, lp.ln1_gamma, lp.ln1_beta);
    const auto q = affine(a, lp.query.weight, lp.query.bias);
    const auto k = affine(a, lp.key.weight, lp.key.bias);
    const auto v = affine(a, lp.value.weight, lp.value.bias);
    Mat ctx(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Mat att(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j) att[i][j] = s[j] / z;
      }
      if (hook) hook(layer, h, att);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < dh; ++c) ctx[i][h * dh + c] += att[i][j] * v[j][h * dh + c];
    }
    const auto o = affine(ctx, lp.output.weight, lp.output.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    auto f = affine(norm_rows(x, lp.ln2_gamma, lp.ln2_beta), lp.fc.weight, lp.fc.bias);
    for (auto& row : f)
      for (auto& u : row) u = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (u + 0.044715 * u * u * u)));
    const auto mo = affine(f, lp.proj.weight, lp.proj.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += mo[i][j];
  }
  const auto last = norm_rows({x.back()}, p.lnf_gamma, p.lnf_beta)[0];
  const auto& head = cfg.tie_lm_head ? p.token_embedding : p.lm_head;
  std::vector<double> logits(cfg.vocab_size, 0.0);
  for (std::size_t t = 0; t < cfg.vocab_size; ++t)
    for (std::size_t j = 0; j < d; ++j) logits[t] += last[j] * head.at(t, j);
  return logits;
}

}  // namespace flownav::testing
