#pragma once

// The navigation layer inserted between two decoder layers. Node features
// are token hidden states; messages travel along FlowGraph edges.
//
//   GCN:  h'_v = act( mean_{u in N(v)} h_u · W + b )              W: [d×d]
//   SAGE: h'_v = act( [h_v ⊕ mean_{u in N(v)} h_u] · W + b )      W: [2d×d]
//
// Row-vector convention: the first d rows of the SAGE weight act on the
// node's own features, the last d rows on the neighbour mean. Nodes without
// in-neighbours pass through unchanged. No self loops are added for GCN.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "flownav/autodiff.hpp"
#include "flownav/promptgraph.hpp"

namespace flownav::gnn {

enum class Kind : std::uint8_t { gcn, sage };
enum class Activation : std::uint8_t { relu, tanh, identity };
enum class UpdateMode : std::uint8_t { replace, residual_add };
enum class UntouchedNodeRule : std::uint8_t { pass_through };

struct GnnConfig {
  Kind kind = Kind::sage;
  Activation activation = Activation::tanh;
  UpdateMode update_mode = UpdateMode::replace;
  UntouchedNodeRule untouched_node_rule = UntouchedNodeRule::pass_through;
};

struct GnnParams {
  Kind kind = Kind::sage;
  ad::Tensor weight;  // [d×d] (gcn) or [2d×d] (sage)
  ad::Tensor bias;    // [d]

  // Glorot-uniform weight, zero bias.
  static GnnParams init(Kind kind, std::size_t d_model, std::mt19937_64& rng);
  static std::size_t expected_count(Kind kind, std::size_t d_model);

  std::size_t d_model() const { return bias.numel(); }
  std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
};

ad::Tensor gcn_update(const ad::Tensor& h, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg);
ad::Tensor sage_update(const ad::Tensor& h, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg);
// Dispatches on cfg.kind; the params must be of the same kind.
ad::Tensor apply_gnn(const ad::Tensor& hidden, const FlowGraph& graph, const GnnParams& params, const GnnConfig& cfg);

std::string_view to_string(Kind k);
std::string_view to_string(Activation a);
std::string_view to_string(UpdateMode m);
Kind parse_kind(std::string_view s);
Activation parse_activation(std::string_view s);
UpdateMode parse_update_mode(std::string_view s);

}  // namespace flownav::gnn
