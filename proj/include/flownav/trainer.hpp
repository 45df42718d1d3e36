#pragma once

// Prompt-based fine-tuning: the navigation layer and the baselines, backbone
// pretraining, evaluation and the multi-seed harness.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flownav/gnnlayer.hpp"
#include "flownav/model.hpp"
#include "flownav/optim.hpp"
#include "flownav/promptgraph.hpp"
#include "flownav/tasks.hpp"
#include "flownav/tokenizer.hpp"

namespace flownav::trainer {

struct TrainConfig {
  model::Method method = model::Method::gnnavi;
  double learning_rate = 1e-2;
  optim::Kind optimizer = optim::Kind::adam;
  double weight_decay = 0.01;  // adamw only
  std::size_t max_epochs = 50;
  std::size_t early_stop_patience = 15;
  std::uint64_t seed = 0;
  std::size_t k_per_class = 5;
  std::size_t batch_size = 1;
  std::size_t validation_size = 200;
  double grad_clip = 1.0;
  std::optional<std::uint64_t> demo_order_seed;  // unset: ascending class order

  gnn::GnnConfig gnn;
  PathConfig paths;

  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t prefix_tokens = 0;  // 0: match the navigation layer's parameter count
  std::size_t adapter_bottleneck = 16;

  // Per-method learning rate and optimizer (lr 1e-2 Adam for gnnavi and prefix,
  // 5e-4 AdamW for lora, 5e-5 AdamW for adapter and fpft).
  static TrainConfig defaults_for(model::Method method);
  void validate() const;  // throws ConfigError
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double validation_accuracy = 0.0;
};

struct RunResult {
  std::string method;
  std::string task;
  std::size_t k_per_class = 0;
  std::uint64_t seed = 0;
  double best_validation_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 0: the untrained model (icl)
  double test_accuracy = 0.0;
  std::vector<EpochRecord> history;
  std::size_t trainable_param_count = 0;
  std::size_t optimizer_steps = 0;
  double wall_time_seconds = 0.0;

  nlohmann::json to_json() const;
  static RunResult from_json(const nlohmann::json& j);
};

// One prompt with its anchor graph, ready for repeated forwards.
struct PreparedExample {
  PromptLayout layout;
  FlowGraph graph;
  int class_id = 0;
};

std::vector<PreparedExample> prepare_examples(const std::vector<tasks::LabeledExample>& examples,
                                              const std::vector<tasks::LabeledExample>& demos,
                                              const PromptTemplate& tmpl, const Verbalizer& verbalizer,
                                              const Tokenizer& tokenizer, const PathConfig& paths);

// Deep copy: the result shares no storage with `m`.
model::Model clone_model(const model::Model& m);

// FNV-1a over names, shapes and raw value bytes.
std::uint64_t parameter_hash(const std::vector<model::NamedTensor>& tensors);

// Fraction of examples whose restricted argmax matches the class; runs without a tape.
double evaluate(const model::Model& m, const gnn::GnnParams* gnn_params, const gnn::GnnConfig& gnn_cfg,
                const std::vector<PreparedExample>& examples, const Verbalizer& verbalizer);

struct TrainOutput {
  RunResult result;
  model::Model model;  // best checkpoint, including attachments
  std::optional<gnn::GnnParams> gnn;
};

// Fine-tunes a private copy of `pretrained`; `pretrained` is never modified.
TrainOutput train(const model::Model& pretrained, const tasks::TaskSpec& task, const Tokenizer& tokenizer,
                  const TrainConfig& cfg);

struct PretrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_streams = 8;
  std::size_t corpus_streams = 4000;
  double learning_rate = 3e-3;  // peak, after linear warmup; cosine decay to 10% by the last step
  std::size_t warmup_steps = 100;
  // Strong decay keeps hidden-state magnitudes small enough that a tanh
  // navigation layer starts outside saturation.
  double weight_decay = 0.5;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

// Learning rate used at 1-based `step`.
double pretrain_learning_rate(const PretrainConfig& pcfg, std::size_t step);

struct PretrainResult {
  model::TransformerParams params;
  std::vector<double> step_loss;  // mean next-token loss of each step's batch
};

using PretrainCallback = std::function<void(std::size_t step, const model::TransformerParams&)>;

// Next-token training of a freshly initialized backbone on `corpus`. The
// callback, if any, fires after every optimizer step.
PretrainResult pretrain_backbone(const model::ModelConfig& cfg, const std::vector<std::vector<TokenId>>& corpus,
                                 const PretrainConfig& pcfg, const PretrainCallback& callback = {});

// exp(mean next-token loss) over `streams`.
double perplexity(const model::Model& m, const std::vector<std::vector<TokenId>>& streams);

struct SeedSummary {
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t n = 0;
};

SeedSummary summarize(const std::vector<double>& values);

// Runs one training per seed; with jobs > 1 seeds run on separate threads,
// each with its own copy of the model. Results come back in seed order.
std::vector<RunResult> run_seeds(const model::Model& pretrained, const tasks::TaskSpec& task,
                                 const Tokenizer& tokenizer, const TrainConfig& cfg,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

inline constexpr const char* kLeaderboardHeader = "method,task,k,seed,test_accuracy,params,wall_time";
void append_leaderboard(const std::filesystem::path& csv, const RunResult& r);

}  // namespace flownav::trainer
