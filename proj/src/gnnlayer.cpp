#include "flownav/gnnlayer.hpp"

#include <cmath>

#include "flownav/errors.hpp"

namespace flownav::gnn {

namespace {

ad::Tensor activate(const ad::Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
    case Activation::identity: return x;
  }
  throw ConfigError("unknown activation");
}

struct Aggregation {
  std::vector<std::size_t> nodes;  // nodes with at least one in-neighbour, ascending
  ad::Tensor mean_operator;        // [|nodes| × n], row r averages the in-neighbours of nodes[r]
};

Aggregation mean_aggregation(const FlowGraph& graph) {
  Aggregation agg;
  const auto nbrs = graph.in_neighbors();
  for (std::size_t v = 0; v < nbrs.size(); ++v)
    if (!nbrs[v].empty()) agg.nodes.push_back(v);
  std::vector<double> op(agg.nodes.size() * graph.n_nodes, 0.0);
  for (std::size_t r = 0; r < agg.nodes.size(); ++r) {
    const auto& list = nbrs[agg.nodes[r]];
    const double w = 1.0 / static_cast<double>(list.size());
    for (const auto u : list) op[r * graph.n_nodes + u] = w;
  }
  agg.mean_operator = ad::Tensor::from({agg.nodes.size(), graph.n_nodes}, std::move(op));
  return agg;
}

void check_inputs(const ad::Tensor& h, const FlowGraph& graph, const GnnParams& params, Kind kind) {
  if (h.rank() != 2) throw ShapeError("gnn: hidden states must be [n×d], got " + ad::shape_str(h.shape()));
  if (graph.n_nodes != h.rows()) {
    throw ShapeError("graph-shape error: graph has " + std::to_string(graph.n_nodes) + " nodes but hidden states have " +
                     std::to_string(h.rows()) + " rows");
  }
  for (const auto& e : graph.edges) {
    if (e.src >= graph.n_nodes || e.dst >= graph.n_nodes) {
      throw ShapeError("graph-shape error: edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                       ") outside " + std::to_string(graph.n_nodes) + " nodes");
    }
  }
  if (params.kind != kind) throw ConfigError("gnn: parameter kind does not match the requested update");
  const auto d = h.cols();
  const auto in = kind == Kind::gcn ? d : 2 * d;
  if (params.weight.shape() != ad::Shape{in, d} || params.bias.shape() != ad::Shape{d}) {
    throw ShapeError("gnn: weight " + ad::shape_str(params.weight.shape()) + " / bias " +
                     ad::shape_str(params.bias.shape()) + " incompatible with hidden width " + std::to_string(d));
  }
}

ad::Tensor finish(const ad::Tensor& h, const Aggregation& agg, const ad::Tensor& features, const GnnParams& params,
                  const GnnConfig& cfg) {
  const auto updated = activate(ad::add_bias(ad::matmul(features, params.weight), params.bias), cfg.activation);
  return ad::scatter_rows(h, agg.nodes, updated, cfg.update_mode == UpdateMode::residual_add);
}

}  // namespace

GnnParams GnnParams::init(Kind kind, std::size_t d_model, std::mt19937_64& rng) {
  const auto in = kind == Kind::gcn ? d_model : 2 * d_model;
  const double bound = std::sqrt(6.0 / static_cast<double>(in + d_model));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * d_model);
  for (auto& v : w) v = dist(rng);
  GnnParams p;
  p.kind = kind;
  p.weight = ad::Tensor::from({in, d_model}, std::move(w));
  p.bias = ad::Tensor::zeros({d_model});
  return p;
}

std::size_t GnnParams::expected_count(Kind kind, std::size_t d_model) {
  return (kind == Kind::gcn ? 1 : 2) * d_model * d_model + d_model;
}

ad::Tensor gcn_update(const ad::Tensor& h, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg) {
  check_inputs(h, graph, params, Kind::gcn);
  const auto agg = mean_aggregation(graph);
  if (agg.nodes.empty()) return h;
  return finish(h, agg, ad::matmul(agg.mean_operator, h), params, cfg);
}

ad::Tensor sage_update(const ad::Tensor& h, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg) {
  check_inputs(h, graph, params, Kind::sage);
  const auto agg = mean_aggregation(graph);
  if (agg.nodes.empty()) return h;
  const auto self = ad::gather_rows(h, agg.nodes);
  return finish(h, agg, ad::concat_features(self, ad::matmul(agg.mean_operator, h)), params, cfg);
}

ad::Tensor apply_gnn(const ad::Tensor& hidden, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg) {
  switch (cfg.kind) {
    case Kind::gcn: return gcn_update(hidden, graph, params, cfg);
    case Kind::sage: return sage_update(hidden, graph, params, cfg);
  }
  throw ConfigError("unknown gnn kind");
}

std::string_view to_string(Kind k) { return k == Kind::gcn ? "gcn" : "sage"; }

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

std::string_view to_string(UpdateMode m) { return m == UpdateMode::replace ? "replace" : "residual_add"; }

Kind parse_kind(std::string_view s) {
  if (s == "gcn") return Kind::gcn;
  if (s == "sage") return Kind::sage;
  throw ConfigError("unknown gnn kind '" + std::string(s) + "' (expected gcn|sage)");
}

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu|tanh|identity)");
}

UpdateMode parse_update_mode(std::string_view s) {
  if (s == "replace") return UpdateMode::replace;
  if (s == "residual_add") return UpdateMode::residual_add;
  throw ConfigError("unknown update mode '" + std::string(s) + "' (expected replace|residual_add)");
}

}  // namespace flownav::gnn
