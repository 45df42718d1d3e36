#pragma once

// Pre-norm decoder-only transformer with learned absolute positions, GELU
// MLP, optional tied LM head, per-layer attention capture and a hook that
// runs the navigation layer on the hidden states after one decoder layer.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flownav/autodiff.hpp"
#include "flownav/gnnlayer.hpp"
#include "flownav/promptgraph.hpp"

namespace flownav::model {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 256;
  std::size_t gnn_insert_layer = 3;  // 0-based; the layer runs after this decoder layer
  bool tie_lm_head = true;

  // floor(0.875 · n_layers), clamped into range: a last-quarter placement.
  static std::size_t default_insert_layer(std::size_t n_layers);
  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

struct Linear {
  ad::Tensor weight;  // [in×out]
  ad::Tensor bias;    // [out]
};

struct LayerParams {
  ad::Tensor ln1_gamma, ln1_beta;
  Linear query, key, value, output;
  ad::Tensor ln2_gamma, ln2_beta;
  Linear fc, proj;
};

using NamedTensor = std::pair<std::string, ad::Tensor>;

struct TransformerParams {
  ad::Tensor token_embedding;     // [V×d]
  ad::Tensor position_embedding;  // [T×d]
  std::vector<LayerParams> layers;
  ad::Tensor lnf_gamma, lnf_beta;
  ad::Tensor lm_head;  // [V×d]; undefined when tied to token_embedding

  static TransformerParams init(const ModelConfig& cfg, std::uint64_t seed);
  // Exact parameter count implied by a configuration.
  static std::size_t count_for(const ModelConfig& cfg);

  std::vector<NamedTensor> named() const;
  std::size_t parameter_count() const;
};

// Low-rank updates on the query and value projections: x·W + (alpha/r)·x·A·B.
struct LoraLayer {
  ad::Tensor q_a, q_b, v_a, v_b;  // A: [d×r], B: [r×d]
};
struct LoraParams {
  std::size_t rank = 0;
  double alpha = 0.0;
  std::vector<LoraLayer> layers;
};

// Virtual key/value rows prepended at every layer.
struct PrefixLayer {
  ad::Tensor keys, values;  // [p×d]
};
struct PrefixParams {
  std::size_t n_virtual = 0;
  std::vector<PrefixLayer> layers;
};

// Bottleneck adapter after each feed-forward sub-layer: m + up(gelu(down(m))).
struct AdapterLayer {
  Linear down, up;
};
struct AdapterParams {
  std::size_t bottleneck = 0;
  std::vector<AdapterLayer> layers;
};

struct Model {
  ModelConfig config;
  TransformerParams backbone;
  std::optional<LoraParams> lora;
  std::optional<PrefixParams> prefix;
  std::optional<AdapterParams> adapter;

  std::vector<NamedTensor> named_parameters() const;  // backbone then attachments
  std::vector<NamedTensor> attachment_parameters() const;
};

struct GnnHook {
  const gnn::GnnParams* params = nullptr;
  const FlowGraph* graph = nullptr;
  gnn::GnnConfig config;
};

struct ForwardOptions {
  bool capture_attention = false;
  // Attention matrices are made gradient-tracked so that backward() fills
  // their .grad (implies capture_attention).
  bool track_attention_grad = false;
  bool all_logits = false;
  bool capture_hidden = false;
};

struct ForwardArtifacts {
  ad::Tensor logits;      // [V] at the final position
  ad::Tensor all_logits;  // [n×V] when requested
  // attention[layer][head] : [n × (prefix+n)] row-stochastic, causal.
  std::vector<std::vector<ad::Tensor>> attention;
  // hidden[0] = embeddings, hidden[l+1] = output of decoder layer l (before any GNN).
  std::vector<ad::Tensor> hidden;
  // Hidden states right after the navigation layer, when it ran.
  ad::Tensor gnn_output;
};

ForwardArtifacts forward(const Model& model, std::span<const TokenId> tokens, const GnnHook* gnn = nullptr,
                         const ForwardOptions& options = {});

// Hidden states after decoder layer `through_layer`, computed without a tape.
ad::Tensor encode_through(const Model& model, std::span<const TokenId> tokens, std::size_t through_layer);

// Continues a forward pass from hidden states produced by decoder layer
// `after_layer` (as returned by encode_through). Bitwise identical to the
// corresponding tail of forward().
ForwardArtifacts forward_from(const Model& model, const ad::Tensor& hidden, std::size_t after_layer,
                              const GnnHook* gnn = nullptr, const ForwardOptions& options = {});

enum class Method : std::uint8_t { gnnavi, fpft, lora, prefix, adapter, icl };

Method parse_method(std::string_view s);  // throws ConfigError
std::string_view to_string(Method m);

// Parameters an optimizer may update for `method`.
std::vector<ad::Tensor> trainable_mask(const Model& model, const gnn::GnnParams* gnn_params, Method method);
std::size_t count_parameters(std::span<const ad::Tensor> tensors);

// Argmax of the final-position logits over the verbalizer's first-subtoken
// ids; ties go to the lowest class id.
int predict_label(const ForwardArtifacts& artifacts, const Verbalizer& verbalizer);
int predict_label(std::span<const double> logits, const Verbalizer& verbalizer);
// Unrestricted argmax over the whole vocabulary (lowest id on ties).
TokenId predict_token(const ForwardArtifacts& artifacts);

}  // namespace flownav::model
