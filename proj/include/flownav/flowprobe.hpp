#pragma once

// Attention-saliency flow analysis and the two ablation drivers (insertion
// position sweep, path removal).
//
// Per layer l: I_l = sum over heads of |A ⊙ ∂L/∂A|, with L the cross-entropy
// of the final-position logits against a target token. Flow scores average
// I_l over three disjoint index sets of the strict lower triangle:
//   C_tl = {(p_k, j) : j < p_k}   context -> label word
//   C_lf = {(f, p_k)}             label word -> final token
//   C_tt = everything else

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flownav/model.hpp"
#include "flownav/promptgraph.hpp"
#include "flownav/tasks.hpp"
#include "flownav/trainer.hpp"

namespace flownav::probe {

struct SaliencyMatrix {
  std::size_t layer = 0;
  ad::Tensor values;  // [n×n], token columns only (prefix rows are dropped)
};

// Runs a gradient-tracked forward and backward on a private tape. Parameter
// gradients are neither computed nor disturbed.
std::vector<SaliencyMatrix> saliency(const model::Model& m, const model::GnnHook* gnn, const PromptLayout& layout,
                                     TokenId target);

// From a forward that ran with track_attention_grad on the active tape.
// Throws PreconditionError when attention was not captured with gradients.
std::vector<SaliencyMatrix> saliency_from(const model::ForwardArtifacts& artifacts, TokenId target,
                                          std::size_t prefix_rows = 0);

using IndexSet = std::vector<std::pair<std::size_t, std::size_t>>;  // (row i, column j), j < i

struct IndexSets {
  IndexSet context_to_label;  // C_tl
  IndexSet label_to_final;    // C_lf
  IndexSet rest;              // C_tt
};

IndexSets index_sets(const PromptLayout& layout);

struct LayerScores {
  std::size_t layer = 0;
  std::optional<double> s_agg;   // null when C_tl is empty
  std::optional<double> s_dist;  // null when C_lf is empty
  std::optional<double> s_rest;  // null when C_tt is empty
};

struct FlowScores {
  std::vector<LayerScores> layers;
};

FlowScores flow_scores(const std::vector<SaliencyMatrix>& saliency, const PromptLayout& layout);

// Per-layer mean over prompts; a score is null only if it is null for every prompt.
FlowScores mean_scores(const std::vector<FlowScores>& per_prompt);

inline constexpr const char* kProbeHeader = "layer,s_agg,s_dist,s_rest";
// Null scores are written as empty fields.
void write_probe_csv(const std::filesystem::path& path, const FlowScores& scores);

struct SweepRow {
  std::size_t position = 0;
  std::vector<double> accuracies;  // seed order
  trainer::SeedSummary summary;
};

// Trains the navigation layer once per (position, seed).
std::vector<SweepRow> position_sweep(const model::Model& pretrained, const tasks::TaskSpec& task,
                                     const Tokenizer& tokenizer, const trainer::TrainConfig& cfg,
                                     const std::vector<std::size_t>& positions,
                                     const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

inline constexpr const char* kSweepHeader = "position,mean_accuracy,stdev,n_seeds";
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

struct AblationRow {
  std::string variant;  // full, -aggregation, -distribution, -both (empty graph control)
  PathConfig paths;
  std::vector<double> accuracies;
  trainer::SeedSummary summary;
  double delta_vs_full = 0.0;
};

std::vector<AblationRow> path_ablation(const model::Model& pretrained, const tasks::TaskSpec& task,
                                       const Tokenizer& tokenizer, const trainer::TrainConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

nlohmann::json ablation_json(const std::string& task, const std::vector<std::uint64_t>& seeds,
                             const std::vector<AblationRow>& rows);

}  // namespace flownav::probe
