#include "flownav/flowprobe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "flownav/errors.hpp"

namespace flownav::probe {

namespace {

std::optional<double> mean_over(const ad::Tensor& m, const IndexSet& set) {
  if (set.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& [i, j] : set) s += m.at(i, j);
  return s / static_cast<double>(set.size());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

// Restores requires_grad flags on scope exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<ad::Tensor> ts) : tensors_(std::move(ts)) {
    for (auto& t : tensors_) {
      flags_.push_back(t.requires_grad());
      t.node()->requires_grad = false;
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < tensors_.size(); ++i) tensors_[i].node()->requires_grad = flags_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<ad::Tensor> tensors_;
  std::vector<bool> flags_;
};

}  // namespace

std::vector<SaliencyMatrix> saliency_from(const model::ForwardArtifacts& artifacts, TokenId target,
                                          std::size_t prefix_rows) {
  if (artifacts.attention.empty()) throw PreconditionError("probe-precondition error: attention was not captured");
  for (const auto& layer : artifacts.attention)
    for (const auto& a : layer)
      if (!a.requires_grad()) {
        throw PreconditionError("probe-precondition error: attention captured without gradient tracking");
      }
  ad::backward(ad::cross_entropy(artifacts.logits, target));
  std::vector<SaliencyMatrix> out;
  for (std::size_t l = 0; l < artifacts.attention.size(); ++l) {
    const auto& heads = artifacts.attention[l];
    const auto n = heads.front().rows();
    const auto cols = heads.front().cols();
    if (cols != n + prefix_rows) throw ShapeError("saliency: attention width does not match prefix length");
    auto I = ad::Tensor::zeros({n, n});
    auto dst = I.mutable_data();
    for (const auto& a : heads) {
      const auto g = a.grad();
      if (g.empty()) continue;  // no gradient reached this head
      const auto v = a.data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const auto k = i * cols + prefix_rows + j;
          dst[i * n + j] += std::abs(v[k] * g[k]);
        }
    }
    out.push_back({l, I});
  }
  return out;
}

std::vector<SaliencyMatrix> saliency(const model::Model& m, const model::GnnHook* gnn, const PromptLayout& layout,
                                     TokenId target) {
  std::vector<ad::Tensor> params;
  for (const auto& [name, t] : m.named_parameters()) params.push_back(t);
  if (gnn && gnn->params) {
    params.push_back(gnn->params->weight);
    params.push_back(gnn->params->bias);
  }
  FreezeGuard freeze(std::move(params));
  ad::Tape tape;
  ad::TapeScope scope(tape);
  model::ForwardOptions opts;
  opts.track_attention_grad = true;
  const auto art = model::forward(m, layout.token_ids, gnn, opts);
  return saliency_from(art, target, m.prefix ? m.prefix->n_virtual : 0);
}

IndexSets index_sets(const PromptLayout& layout) {
  const auto n = layout.size();
  const auto f = layout.final_index;
  std::vector<std::uint8_t> is_label(n, 0);
  for (const auto p : layout.label_positions) is_label[p] = 1;
  IndexSets s;
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      if (is_label[i]) s.context_to_label.emplace_back(i, j);
      else if (i == f && is_label[j]) s.label_to_final.emplace_back(i, j);
      else s.rest.emplace_back(i, j);
    }
  return s;
}

FlowScores flow_scores(const std::vector<SaliencyMatrix>& saliency, const PromptLayout& layout) {
  const auto sets = index_sets(layout);
  FlowScores out;
  for (const auto& s : saliency) {
    if (s.values.rank() != 2 || s.values.rows() != layout.size() || s.values.cols() != layout.size()) {
      throw ShapeError("flow_scores: saliency " + ad::shape_str(s.values.shape()) + " does not match layout of " +
                       std::to_string(layout.size()) + " tokens");
    }
    out.layers.push_back({s.layer, mean_over(s.values, sets.context_to_label), mean_over(s.values, sets.label_to_final),
                          mean_over(s.values, sets.rest)});
  }
  return out;
}

FlowScores mean_scores(const std::vector<FlowScores>& per_prompt) {
  FlowScores out;
  if (per_prompt.empty()) return out;
  const auto L = per_prompt.front().layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    auto avg = [&](std::optional<double> LayerScores::*field) -> std::optional<double> {
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& p : per_prompt) {
        if (p.layers.size() != L) throw ShapeError("mean_scores: prompts disagree on layer count");
        if (const auto& v = p.layers[l].*field) {
          s += *v;
          ++n;
        }
      }
      if (n == 0) return std::nullopt;
      return s / static_cast<double>(n);
    };
    out.layers.push_back({per_prompt.front().layers[l].layer, avg(&LayerScores::s_agg), avg(&LayerScores::s_dist),
                          avg(&LayerScores::s_rest)});
  }
  return out;
}

void write_probe_csv(const std::filesystem::path& path, const FlowScores& scores) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kProbeHeader << '\n';
  for (const auto& l : scores.layers)
    out << l.layer << ',' << fmt(l.s_agg) << ',' << fmt(l.s_dist) << ',' << fmt(l.s_rest) << '\n';
}

std::vector<SweepRow> position_sweep(const model::Model& pretrained, const tasks::TaskSpec& task,
                                     const Tokenizer& tokenizer, const trainer::TrainConfig& cfg,
                                     const std::vector<std::size_t>& positions,
                                     const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (cfg.method != model::Method::gnnavi) throw ConfigError("position sweep trains the navigation layer only");
  for (const auto p : positions)
    if (p >= pretrained.config.n_layers) {
      throw ConfigError("sweep position " + std::to_string(p) + " outside [0, " +
                        std::to_string(pretrained.config.n_layers) + ")");
    }
  std::vector<SweepRow> rows;
  for (const auto p : positions) {
    auto m = pretrained;  // shares storage; train() works on its own copy
    m.config.gnn_insert_layer = p;
    SweepRow row;
    row.position = p;
    for (const auto& r : trainer::run_seeds(m, task, tokenizer, cfg, seeds, jobs)) row.accuracies.push_back(r.test_accuracy);
    row.summary = trainer::summarize(row.accuracies);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kSweepHeader << '\n';
  for (const auto& r : rows)
    out << r.position << ',' << fmt(r.summary.mean) << ',' << fmt(r.summary.stdev) << ',' << r.summary.n << '\n';
}

std::vector<AblationRow> path_ablation(const model::Model& pretrained, const tasks::TaskSpec& task,
                                       const Tokenizer& tokenizer, const trainer::TrainConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (cfg.method != model::Method::gnnavi) throw ConfigError("path ablation trains the navigation layer only");
  std::vector<AblationRow> rows = {{"full", {true, true}, {}, {}, 0.0},
                                   {"-aggregation", {false, true}, {}, {}, 0.0},
                                   {"-distribution", {true, false}, {}, {}, 0.0},
                                   {"-both", {false, false}, {}, {}, 0.0}};
  for (auto& row : rows) {
    auto c = cfg;
    c.paths = row.paths;
    for (const auto& r : trainer::run_seeds(pretrained, task, tokenizer, c, seeds, jobs))
      row.accuracies.push_back(r.test_accuracy);
    row.summary = trainer::summarize(row.accuracies);
  }
  for (auto& row : rows) row.delta_vs_full = row.summary.mean - rows.front().summary.mean;
  return rows;
}

nlohmann::json ablation_json(const std::string& task, const std::vector<std::uint64_t>& seeds,
                             const std::vector<AblationRow>& rows) {
  nlohmann::json js = nlohmann::json::array();
  for (const auto& r : rows) {
    js.push_back({{"variant", r.variant},
                  {"include_aggregation", r.paths.include_aggregation},
                  {"include_distribution", r.paths.include_distribution},
                  {"accuracies", r.accuracies},
                  {"mean_accuracy", r.summary.mean},
                  {"stdev", r.summary.stdev},
                  {"delta_vs_full", r.delta_vs_full}});
  }
  return {{"task", task}, {"seeds", seeds}, {"rows", js}};
}

}  // namespace flownav::probe
