#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "flownav/errors.hpp"
#include "flownav/gnnlayer.hpp"
#include "support.hpp"

using namespace flownav;
using flownav::testing::bitwise_equal;
using flownav::testing::random_tensor;

namespace {

double activate(gnn::Activation a, double x) {
  switch (a) {
    case gnn::Activation::relu: return std::max(0.0, x);
    case gnn::Activation::tanh: return std::tanh(x);
    case gnn::Activation::identity: return x;
  }
  return x;
}

// Per-node loop implementation of both update rules.
std::vector<double> naive_update(const ad::Tensor& h, const FlowGraph& g, const gnn::GnnParams& p,
                                 const gnn::GnnConfig& cfg) {
  const std::size_t n = h.shape()[0];
  const std::size_t d = h.shape()[1];
  const auto H = h.data();
  const auto W = p.weight.data();
  const auto b = p.bias.data();
  std::vector<double> out(H.begin(), H.end());
  for (std::size_t v = 0; v < n; ++v) {
    std::vector<std::size_t> nbrs;
    for (const auto& e : g.edges)
      if (e.dst == v) nbrs.push_back(e.src);
    if (nbrs.empty()) continue;
    std::vector<double> mean(d, 0.0);
    for (const auto u : nbrs)
      for (std::size_t j = 0; j < d; ++j) mean[j] += H[u * d + j];
    for (auto& m : mean) m /= static_cast<double>(nbrs.size());
    std::vector<double> input;
    if (cfg.kind == gnn::Kind::sage) input.assign(H.begin() + v * d, H.begin() + (v + 1) * d);
    input.insert(input.end(), mean.begin(), mean.end());
    for (std::size_t j = 0; j < d; ++j) {
      double z = b[j];
      for (std::size_t i = 0; i < input.size(); ++i) z += input[i] * W[i * d + j];
      const double a = activate(cfg.activation, z);
      out[v * d + j] = cfg.update_mode == gnn::UpdateMode::residual_add ? H[v * d + j] + a : a;
    }
  }
  return out;
}

FlowGraph random_flow_graph(std::size_t n, std::mt19937_64& rng) {
  PromptLayout l;
  std::size_t at = 0;
  std::uniform_int_distribution<std::size_t> len(1, 6);
  while (true) {
    const auto size = len(rng);
    if (at + size + 1 >= n) break;
    std::uniform_int_distribution<std::size_t> off(0, size - 1);
    l.demo_spans.push_back({at, at + size});
    l.label_positions.push_back(at + off(rng));
    at += size;
  }
  l.query_span = {at, n};
  l.token_ids.assign(n, 0);
  l.final_index = n - 1;
  return build_graph(l);
}

gnn::GnnParams params_from(gnn::Kind kind, std::size_t d, std::vector<double> w, std::vector<double> b) {
  gnn::GnnParams p;
  p.kind = kind;
  const std::size_t rows = kind == gnn::Kind::sage ? 2 * d : d;
  p.weight = ad::Tensor::from({rows, d}, std::move(w), true);
  p.bias = ad::Tensor::from({d}, std::move(b), true);
  return p;
}

std::vector<double> identity_block(std::size_t d, std::size_t rows, std::size_t offset) {
  std::vector<double> w(rows * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) w[(offset + i) * d + i] = 1.0;
  return w;
}

gnn::GnnConfig identity_cfg(gnn::Kind kind) {
  gnn::GnnConfig c;
  c.kind = kind;
  c.activation = gnn::Activation::identity;
  return c;
}

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(gnn::GnnParams::expected_count(gnn::Kind::gcn, 1600) == 2'561'600);
  CHECK(gnn::GnnParams::expected_count(gnn::Kind::sage, 1600) == 5'121'600);
  CHECK(gnn::GnnParams::expected_count(gnn::Kind::gcn, 4096) == 16'781'312);
  CHECK(gnn::GnnParams::expected_count(gnn::Kind::sage, 4096) == 33'558'528);
  std::mt19937_64 rng(1);
  const auto p = gnn::GnnParams::init(gnn::Kind::sage, 16, rng);
  CHECK(p.parameter_count() == 2 * 16 * 16 + 16);
  CHECK(p.weight.shape() == ad::Shape{32, 16});
  for (const auto x : p.bias.data()) CHECK(x == 0.0);
  const double limit = std::sqrt(6.0 / (32 + 16));
  for (const auto x : p.weight.data()) CHECK(std::abs(x) <= limit);
}

TEST_CASE("GCN with identity weight averages neighbours") {
  // Nodes 0,1 -> 2 (label), 2 -> 3 (final).
  const FlowGraph g{4, {{0, 2, Relation::aggregate}, {1, 2, Relation::aggregate}, {2, 3, Relation::distribute}}};
  const auto h = ad::Tensor::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto p = params_from(gnn::Kind::gcn, 2, identity_block(2, 2, 0), {0, 0});
  const auto out = gnn::apply_gnn(h, g, p, identity_cfg(gnn::Kind::gcn));
  const std::vector<double> expected{1, 2, 3, 4, 2, 3, 5, 6};
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) == expected);
}

TEST_CASE("SAGE with [I|0] keeps self features and with [0|I] takes the mean") {
  const FlowGraph g{3, {{0, 1, Relation::aggregate}, {1, 2, Relation::distribute}, {0, 2, Relation::distribute}}};
  const auto h = ad::Tensor::from({3, 2}, {1, -1, 3, 5, -2, 4});
  const auto self = params_from(gnn::Kind::sage, 2, identity_block(2, 4, 0), {0, 0});
  const auto kept = gnn::apply_gnn(h, g, self, identity_cfg(gnn::Kind::sage));
  CHECK(bitwise_equal(kept, h));
  const auto nbr = params_from(gnn::Kind::sage, 2, identity_block(2, 4, 2), {0, 0});
  const auto mean = gnn::apply_gnn(h, g, nbr, identity_cfg(gnn::Kind::sage));
  const std::vector<double> expected{1, -1, 1, -1, 2, 2};
  CHECK(std::vector<double>(mean.data().begin(), mean.data().end()) == expected);
}

TEST_CASE("updates equal a per-node loop implementation") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> n_dist(2, 64);
  std::uniform_int_distribution<std::size_t> d_dist(1, 16);
  for (int trial = 0; trial < 60; ++trial) {
    const auto n = n_dist(rng);
    const auto d = d_dist(rng);
    const auto g = random_flow_graph(n, rng);
    const auto h = random_tensor({n, d}, rng, 1.0, false);
    for (const auto kind : {gnn::Kind::gcn, gnn::Kind::sage})
      for (const auto act : {gnn::Activation::tanh, gnn::Activation::relu, gnn::Activation::identity})
        for (const auto mode : {gnn::UpdateMode::replace, gnn::UpdateMode::residual_add}) {
          auto p = gnn::GnnParams::init(kind, d, rng);
          for (auto& b : p.bias.mutable_data()) b = std::normal_distribution<double>(0, 0.3)(rng);
          gnn::GnnConfig cfg{kind, act, mode};
          const auto out = gnn::apply_gnn(h, g, p, cfg);
          const auto ref = naive_update(h, g, p, cfg);
          double err = 0.0;
          for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(out.data()[i] - ref[i]));
          CHECK(err < 1e-12);
        }
  }
}

TEST_CASE("weight and input gradients match finite differences") {
  std::mt19937_64 rng(5);
  const std::size_t n = 9;
  const std::size_t d = 4;
  const FlowGraph g = random_flow_graph(n, rng);
  REQUIRE(!g.edges.empty());
  const auto target = random_tensor({n, d}, rng, 1.0, false);
  for (const auto kind : {gnn::Kind::gcn, gnn::Kind::sage}) {
    auto p = gnn::GnnParams::init(kind, d, rng);
    for (auto& b : p.bias.mutable_data()) b = 0.1;
    p.weight.set_requires_grad(true);
    p.bias.set_requires_grad(true);
    const auto h = random_tensor({n, d}, rng, 1.0, true);
    gnn::GnnConfig cfg;
    cfg.kind = kind;
    const auto res = flownav::testing::check_gradients(
        {p.weight, p.bias, h}, [&] { return ad::sum(ad::mul(gnn::apply_gnn(h, g, p, cfg), target)); }, 1e-6);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("edge order does not change the output") {
  std::mt19937_64 rng(8);
  const std::size_t n = 30;
  const std::size_t d = 6;
  auto g = random_flow_graph(n, rng);
  const auto h = random_tensor({n, d}, rng, 1.0, false);
  for (const auto kind : {gnn::Kind::gcn, gnn::Kind::sage}) {
    const auto p = gnn::GnnParams::init(kind, d, rng);
    gnn::GnnConfig cfg;
    cfg.kind = kind;
    const auto base = gnn::apply_gnn(h, g, p, cfg);
    for (int shuffle = 0; shuffle < 10; ++shuffle) {
      std::shuffle(g.edges.begin(), g.edges.end(), rng);
      CHECK(bitwise_equal(gnn::apply_gnn(h, g, p, cfg), base));
    }
  }
}

TEST_CASE("only label rows and the final row change") {
  std::mt19937_64 rng(3);
  const std::size_t n = 25;
  const std::size_t d = 5;
  const auto g = random_flow_graph(n, rng);
  const auto h = random_tensor({n, d}, rng, 1.0, false);
  const auto p = gnn::GnnParams::init(gnn::Kind::sage, d, rng);
  const auto out = gnn::apply_gnn(h, g, p, {});
  std::vector<bool> has_in(n, false);
  for (const auto& e : g.edges) has_in[e.dst] = true;
  for (std::size_t v = 0; v < n; ++v) {
    bool same = true;
    for (std::size_t j = 0; j < d; ++j) same = same && out.data()[v * d + j] == h.data()[v * d + j];
    CHECK(same == !has_in[v]);
  }
}

TEST_CASE("a node's output depends only on itself and its in-neighbours") {
  std::mt19937_64 rng(4);
  const std::size_t n = 20;
  const std::size_t d = 3;
  const auto g = random_flow_graph(n, rng);
  const auto p = gnn::GnnParams::init(gnn::Kind::sage, d, rng);
  const auto nbrs = g.in_neighbors();
  const auto h = random_tensor({n, d}, rng, 1.0, false);
  const auto base = gnn::apply_gnn(h, g, p, {});
  for (std::size_t u = 0; u < n; ++u) {
    auto h2 = h.clone();
    for (std::size_t j = 0; j < d; ++j) h2.mutable_data()[u * d + j] += 1.0;
    const auto out = gnn::apply_gnn(h2, g, p, {});
    for (std::size_t v = 0; v < n; ++v) {
      const bool may_change = v == u || std::binary_search(nbrs[v].begin(), nbrs[v].end(), u);
      if (may_change) continue;
      for (std::size_t j = 0; j < d; ++j) CHECK(out.data()[v * d + j] == base.data()[v * d + j]);
    }
  }
}

TEST_CASE("residual mode adds the update to updated rows") {
  const FlowGraph g{3, {{0, 1, Relation::aggregate}, {1, 2, Relation::distribute}}};
  const auto h = ad::Tensor::from({3, 1}, {2, 3, 5});
  const auto p = params_from(gnn::Kind::gcn, 1, {1}, {0});
  gnn::GnnConfig cfg = identity_cfg(gnn::Kind::gcn);
  cfg.update_mode = gnn::UpdateMode::residual_add;
  const auto out = gnn::apply_gnn(h, g, p, cfg);
  const std::vector<double> expected{2, 5, 8};
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) == expected);
}

TEST_CASE("shape and kind errors") {
  std::mt19937_64 rng(2);
  const FlowGraph g{4, {{0, 3, Relation::distribute}}};
  const auto p = gnn::GnnParams::init(gnn::Kind::sage, 3, rng);
  CHECK_THROWS_AS(gnn::apply_gnn(random_tensor({5, 3}, rng), g, p, {}), ShapeError);
  CHECK_THROWS_AS(gnn::apply_gnn(random_tensor({4, 2}, rng), g, p, {}), ShapeError);
  const FlowGraph bad{4, {{0, 7, Relation::distribute}}};
  CHECK_THROWS_AS(gnn::apply_gnn(random_tensor({4, 3}, rng), bad, p, {}), ShapeError);
  gnn::GnnConfig gcn;
  gcn.kind = gnn::Kind::gcn;
  CHECK_THROWS_AS(gnn::apply_gnn(random_tensor({4, 3}, rng), g, p, gcn), ConfigError);
  CHECK_THROWS_AS(gnn::parse_kind("gat"), ConfigError);
  CHECK(gnn::parse_kind("gcn") == gnn::Kind::gcn);
  CHECK(gnn::parse_activation("relu") == gnn::Activation::relu);
  CHECK(gnn::parse_update_mode("residual_add") == gnn::UpdateMode::residual_add);
}
