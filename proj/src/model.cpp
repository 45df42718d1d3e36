#include "flownav/model.hpp"

#include <cmath>
#include <random>

#include "flownav/errors.hpp"

namespace flownav::model {

namespace {

ad::Tensor normal_tensor(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor::from(std::move(shape), std::move(v));
}

Linear make_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng) {
  return {normal_tensor({in, out}, stddev, rng), ad::Tensor::zeros({out})};
}

ad::Tensor apply(const Linear& lin, const ad::Tensor& x) { return ad::add_bias(ad::matmul(x, lin.weight), lin.bias); }

ad::Tensor lora_delta(const ad::Tensor& x, const ad::Tensor& a, const ad::Tensor& b, double scaling) {
  return ad::scale(ad::matmul(ad::matmul(x, a), b), scaling);
}

struct Runner {
  const Model& model;
  const GnnHook* gnn;
  const ForwardOptions& options;
  ForwardArtifacts& out;

  ad::Tensor block(std::size_t l, const ad::Tensor& h, const ad::Mask& mask) const {
    const auto& cfg = model.config;
    const auto& p = model.backbone.layers[l];
    const auto a = ad::layer_norm(h, p.ln1_gamma, p.ln1_beta);
    auto q = apply(p.query, a);
    auto k = apply(p.key, a);
    auto v = apply(p.value, a);
    if (model.lora) {
      const auto& lp = model.lora->layers[l];
      const double s = model.lora->alpha / static_cast<double>(model.lora->rank);
      q = ad::add(q, lora_delta(a, lp.q_a, lp.q_b, s));
      v = ad::add(v, lora_delta(a, lp.v_a, lp.v_b, s));
    }
    if (model.prefix) {
      k = ad::concat_rows(model.prefix->layers[l].keys, k);
      v = ad::concat_rows(model.prefix->layers[l].values, v);
    }
    const auto dh = cfg.d_model / cfg.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Tensor> heads;
    heads.reserve(cfg.n_heads);
    const bool capture = options.capture_attention || options.track_attention_grad;
    if (capture) out.attention.emplace_back();
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const auto qh = ad::slice_cols(q, hd * dh, dh);
      const auto kh = ad::slice_cols(k, hd * dh, dh);
      const auto vh = ad::slice_cols(v, hd * dh, dh);
      auto att = ad::softmax_rows(ad::scale(ad::matmul_bt(qh, kh), inv_sqrt), &mask);
      if (options.track_attention_grad) att = ad::watch(att);
      if (capture) out.attention.back().push_back(att);
      heads.push_back(ad::matmul(att, vh));
    }
    auto x = ad::add(h, apply(p.output, ad::concat_cols(heads)));
    auto m = apply(p.proj, ad::gelu(apply(p.fc, ad::layer_norm(x, p.ln2_gamma, p.ln2_beta))));
    if (model.adapter) {
      const auto& ap = model.adapter->layers[l];
      m = ad::add(m, apply(ap.up, ad::gelu(apply(ap.down, m))));
    }
    return ad::add(x, m);
  }

  ad::Tensor maybe_gnn(std::size_t l, const ad::Tensor& h) const {
    if (!gnn || l != model.config.gnn_insert_layer) return h;
    auto g = gnn::apply_gnn(h, *gnn->graph, *gnn->params, gnn->config);
    out.gnn_output = g;
    return g;
  }

  // `h` is the output of decoder layer `after` (or the embeddings when after == npos).
  void run(ad::Tensor h, std::size_t after) const {
    const auto& cfg = model.config;
    const auto n = h.rows();
    const auto mask = ad::Mask::causal(n, model.prefix ? model.prefix->n_virtual : 0);
    std::size_t first = 0;
    if (after != npos) {
      h = maybe_gnn(after, h);
      first = after + 1;
    }
    for (std::size_t l = first; l < cfg.n_layers; ++l) {
      h = block(l, h, mask);
      if (options.capture_hidden) out.hidden.push_back(h);
      h = maybe_gnn(l, h);
    }
    const auto& bb = model.backbone;
    const auto& head = cfg.tie_lm_head ? bb.token_embedding : bb.lm_head;
    const std::size_t last[] = {n - 1};
    const auto final_row = ad::layer_norm(ad::gather_rows(h, last), bb.lnf_gamma, bb.lnf_beta);
    out.logits = ad::reshape(ad::matmul_bt(final_row, head), {cfg.vocab_size});
    if (options.all_logits) out.all_logits = ad::matmul_bt(ad::layer_norm(h, bb.lnf_gamma, bb.lnf_beta), head);
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

ad::Tensor embed(const Model& model, std::span<const TokenId> tokens) {
  const auto& cfg = model.config;
  if (tokens.empty()) throw ShapeError("sequence-length error: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw ShapeError("sequence-length error: " + std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  std::vector<std::int32_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i);
  return ad::add(ad::embedding_lookup(model.backbone.token_embedding, tokens),
                 ad::embedding_lookup(model.backbone.position_embedding, positions));
}

void check_hook(const Model& model, std::size_t n, const GnnHook* gnn) {
  if (!gnn) return;
  if (!gnn->params || !gnn->graph) throw ConfigError("gnn hook requires params and graph");
  if (gnn->graph->n_nodes != n) {
    throw ShapeError("graph-shape error: graph has " + std::to_string(gnn->graph->n_nodes) + " nodes for " +
                     std::to_string(n) + " tokens");
  }
  if (gnn->params->d_model() != model.config.d_model) throw ShapeError("gnn width does not match d_model");
}

}  // namespace

std::size_t ModelConfig::default_insert_layer(std::size_t n_layers) {
  if (n_layers == 0) return 0;
  const auto l = static_cast<std::size_t>(std::floor(0.875 * static_cast<double>(n_layers)));
  return std::min(l, n_layers - 1);
}

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (gnn_insert_layer >= n_layers) {
    throw ConfigError("gnn_insert_layer " + std::to_string(gnn_insert_layer) + " must be < n_layers " +
                      std::to_string(n_layers));
  }
}

TransformerParams TransformerParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = cfg.d_model;
  const double std_w = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  TransformerParams p;
  p.token_embedding = normal_tensor({cfg.vocab_size, d}, std_w, rng);
  p.position_embedding = normal_tensor({cfg.max_seq_len, d}, 0.01, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gamma = ad::Tensor::full({d}, 1.0);
    lp.ln1_beta = ad::Tensor::zeros({d});
    lp.query = make_linear(d, d, std_w, rng);
    lp.key = make_linear(d, d, std_w, rng);
    lp.value = make_linear(d, d, std_w, rng);
    lp.output = make_linear(d, d, std_resid, rng);
    lp.ln2_gamma = ad::Tensor::full({d}, 1.0);
    lp.ln2_beta = ad::Tensor::zeros({d});
    lp.fc = make_linear(d, cfg.d_ff, std_w, rng);
    lp.proj = make_linear(cfg.d_ff, d, std_resid, rng);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_gamma = ad::Tensor::full({d}, 1.0);
  p.lnf_beta = ad::Tensor::zeros({d});
  if (!cfg.tie_lm_head) p.lm_head = normal_tensor({cfg.vocab_size, d}, std_w, rng);
  return p;
}

std::size_t TransformerParams::count_for(const ModelConfig& cfg) {
  const auto d = cfg.d_model, f = cfg.d_ff;
  const auto per_layer = 4 * d                 // two layer norms
                         + 4 * (d * d + d)     // q, k, v, o
                         + (d * f + f) + (f * d + d);
  return cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + 2 * d +
         (cfg.tie_lm_head ? 0 : cfg.vocab_size * d);
}

std::vector<NamedTensor> TransformerParams::named() const {
  std::vector<NamedTensor> out;
  out.emplace_back("tok_emb", token_embedding);
  out.emplace_back("pos_emb", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto pre = "layers." + std::to_string(l) + ".";
    const auto& lp = layers[l];
    out.emplace_back(pre + "ln1.gamma", lp.ln1_gamma);
    out.emplace_back(pre + "ln1.beta", lp.ln1_beta);
    out.emplace_back(pre + "attn.q.weight", lp.query.weight);
    out.emplace_back(pre + "attn.q.bias", lp.query.bias);
    out.emplace_back(pre + "attn.k.weight", lp.key.weight);
    out.emplace_back(pre + "attn.k.bias", lp.key.bias);
    out.emplace_back(pre + "attn.v.weight", lp.value.weight);
    out.emplace_back(pre + "attn.v.bias", lp.value.bias);
    out.emplace_back(pre + "attn.o.weight", lp.output.weight);
    out.emplace_back(pre + "attn.o.bias", lp.output.bias);
    out.emplace_back(pre + "ln2.gamma", lp.ln2_gamma);
    out.emplace_back(pre + "ln2.beta", lp.ln2_beta);
    out.emplace_back(pre + "mlp.fc.weight", lp.fc.weight);
    out.emplace_back(pre + "mlp.fc.bias", lp.fc.bias);
    out.emplace_back(pre + "mlp.proj.weight", lp.proj.weight);
    out.emplace_back(pre + "mlp.proj.bias", lp.proj.bias);
  }
  out.emplace_back("lnf.gamma", lnf_gamma);
  out.emplace_back("lnf.beta", lnf_beta);
  if (lm_head.defined()) out.emplace_back("lm_head", lm_head);
  return out;
}

std::size_t TransformerParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

std::vector<NamedTensor> Model::attachment_parameters() const {
  std::vector<NamedTensor> out;
  if (lora) {
    for (std::size_t l = 0; l < lora->layers.size(); ++l) {
      const auto pre = "lora." + std::to_string(l) + ".";
      const auto& lp = lora->layers[l];
      out.emplace_back(pre + "q.a", lp.q_a);
      out.emplace_back(pre + "q.b", lp.q_b);
      out.emplace_back(pre + "v.a", lp.v_a);
      out.emplace_back(pre + "v.b", lp.v_b);
    }
  }
  if (prefix) {
    for (std::size_t l = 0; l < prefix->layers.size(); ++l) {
      const auto pre = "prefix." + std::to_string(l) + ".";
      out.emplace_back(pre + "keys", prefix->layers[l].keys);
      out.emplace_back(pre + "values", prefix->layers[l].values);
    }
  }
  if (adapter) {
    for (std::size_t l = 0; l < adapter->layers.size(); ++l) {
      const auto pre = "adapter." + std::to_string(l) + ".";
      const auto& ap = adapter->layers[l];
      out.emplace_back(pre + "down.weight", ap.down.weight);
      out.emplace_back(pre + "down.bias", ap.down.bias);
      out.emplace_back(pre + "up.weight", ap.up.weight);
      out.emplace_back(pre + "up.bias", ap.up.bias);
    }
  }
  return out;
}

std::vector<NamedTensor> Model::named_parameters() const {
  auto out = backbone.named();
  auto extra = attachment_parameters();
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

ForwardArtifacts forward(const Model& model, std::span<const TokenId> tokens, const GnnHook* gnn,
                         const ForwardOptions& options) {
  check_hook(model, tokens.size(), gnn);
  ForwardArtifacts out;
  const auto h = embed(model, tokens);
  if (options.capture_hidden) out.hidden.push_back(h);
  Runner{model, gnn, options, out}.run(h, Runner::npos);
  return out;
}

ad::Tensor encode_through(const Model& model, std::span<const TokenId> tokens, std::size_t through_layer) {
  if (through_layer >= model.config.n_layers) throw ConfigError("encode_through: layer out of range");
  ad::NoGradGuard no_grad;
  ForwardOptions opts;
  ForwardArtifacts scratch;
  Runner runner{model, nullptr, opts, scratch};
  auto h = embed(model, tokens);
  const auto mask = ad::Mask::causal(h.rows(), model.prefix ? model.prefix->n_virtual : 0);
  for (std::size_t l = 0; l <= through_layer; ++l) h = runner.block(l, h, mask);
  return h;
}

ForwardArtifacts forward_from(const Model& model, const ad::Tensor& hidden, std::size_t after_layer, const GnnHook* gnn,
                              const ForwardOptions& options) {
  if (after_layer >= model.config.n_layers) throw ConfigError("forward_from: layer out of range");
  check_hook(model, hidden.rows(), gnn);
  ForwardArtifacts out;
  Runner{model, gnn, options, out}.run(hidden, after_layer);
  return out;
}

Method parse_method(std::string_view s) {
  if (s == "gnnavi") return Method::gnnavi;
  if (s == "fpft") return Method::fpft;
  if (s == "lora") return Method::lora;
  if (s == "prefix") return Method::prefix;
  if (s == "adapter") return Method::adapter;
  if (s == "icl") return Method::icl;
  throw ConfigError("unknown method '" + std::string(s) + "' (expected gnnavi|fpft|lora|prefix|adapter|icl)");
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::gnnavi: return "gnnavi";
    case Method::fpft: return "fpft";
    case Method::lora: return "lora";
    case Method::prefix: return "prefix";
    case Method::adapter: return "adapter";
    case Method::icl: return "icl";
  }
  return "?";
}

std::vector<ad::Tensor> trainable_mask(const Model& model, const gnn::GnnParams* gnn_params, Method method) {
  std::vector<ad::Tensor> out;
  auto take_prefixed = [&](std::string_view prefix) {
    for (const auto& [name, t] : model.attachment_parameters())
      if (name.starts_with(prefix)) out.push_back(t);
  };
  switch (method) {
    case Method::gnnavi:
      if (!gnn_params) throw ConfigError("gnnavi requires navigation-layer parameters");
      out = {gnn_params->weight, gnn_params->bias};
      break;
    case Method::fpft:
      for (const auto& [name, t] : model.backbone.named()) out.push_back(t);
      break;
    case Method::icl:
      break;
    case Method::lora:
      if (!model.lora) throw ConfigError("lora parameters not attached");
      take_prefixed("lora.");
      break;
    case Method::prefix:
      if (!model.prefix) throw ConfigError("prefix parameters not attached");
      take_prefixed("prefix.");
      break;
    case Method::adapter:
      if (!model.adapter) throw ConfigError("adapter parameters not attached");
      take_prefixed("adapter.");
      break;
  }
  return out;
}

std::size_t count_parameters(std::span<const ad::Tensor> tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

int predict_label(std::span<const double> logits, const Verbalizer& verbalizer) {
  if (verbalizer.size() == 0) throw ConfigError("predict_label: empty verbalizer");
  int best = 0;
  for (std::size_t c = 0; c < verbalizer.size(); ++c) {
    const auto id = static_cast<std::size_t>(verbalizer.first_subtoken[c]);
    if (id >= logits.size()) throw IndexError("predict_label: verbalizer token outside logits");
    if (logits[id] > logits[static_cast<std::size_t>(verbalizer.first_subtoken[static_cast<std::size_t>(best)])]) {
      best = static_cast<int>(c);
    }
  }
  return best;
}

int predict_label(const ForwardArtifacts& artifacts, const Verbalizer& verbalizer) {
  return predict_label(artifacts.logits.data(), verbalizer);
}

TokenId predict_token(const ForwardArtifacts& artifacts) {
  const auto logits = artifacts.logits.data();
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return static_cast<TokenId>(best);
}

}  // namespace flownav::model
