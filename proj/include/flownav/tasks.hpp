#pragma once

// Few-shot classification tasks: ingestion, synthetic generation and the
// sampling protocol (one demonstration per class, k training examples per
// class, validation carved from the remaining training data).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flownav/promptgraph.hpp"
#include "flownav/tokenizer.hpp"

namespace flownav::tasks {

inline constexpr std::array<std::uint64_t, 8> kSeedPool = {0, 42, 312, 411, 412, 421, 520, 1218};

struct LabeledExample {
  std::string text;
  int class_id = 0;
  bool operator==(const LabeledExample&) const = default;
};

struct TaskSpec {
  std::string name;
  std::vector<std::string> label_words;  // class id -> label word
  std::string template_text;
  PromptTemplate prompt;
  std::filesystem::path vocab_path;  // empty: the bundled vocabulary
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;  // optional; carved from train when empty
  std::vector<LabeledExample> test;

  std::size_t n_classes() const noexcept { return label_words.size(); }
  void validate() const;  // class ids in range, template parses
};

struct DemoSelection {
  std::vector<LabeledExample> demos;  // one per class, ascending class id
  std::vector<LabeledExample> remaining;
};

DemoSelection sample_demonstrations(const std::vector<LabeledExample>& train, std::size_t n_classes,
                                    std::uint64_t seed);

// Exactly k examples of every class, returned in input order.
std::vector<LabeledExample> sample_training(const std::vector<LabeledExample>& remaining, std::size_t n_classes,
                                            std::size_t k_per_class, std::uint64_t seed);

struct FewShotSplit {
  std::vector<LabeledExample> demos;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
  std::vector<LabeledExample> test;
};

// Demonstrations, k-per-class training subset and a validation set of up to
// `validation_size` examples from what remains; all pairwise disjoint. A task
// that ships its own validation split keeps it. Demonstrations come in
// ascending class order unless `demo_order_seed` requests a shuffle.
FewShotSplit make_protocol_split(const TaskSpec& task, std::size_t k_per_class, std::size_t validation_size,
                                 std::uint64_t seed, std::optional<std::uint64_t> demo_order_seed = std::nullopt);

enum class SyntheticKind { keyword_sentiment, topic_4way, pattern_6way };

SyntheticKind parse_synthetic_kind(std::string_view s);  // throws ConfigError
std::string_view to_string(SyntheticKind k);

inline constexpr std::size_t kMinSyntheticPerClass = 210;
inline constexpr std::size_t kSyntheticTestSize = 200;

// `size_per_class` training examples per class (>= 210) and a balanced test
// split of 200. Every text carries 2-3 signature keywords of its class mixed
// with shared filler words; signature vocabularies are disjoint.
TaskSpec make_synthetic(SyntheticKind kind, std::size_t size_per_class, std::uint64_t seed);

// Signature keyword lists, indexed by class id.
const std::vector<std::vector<std::string>>& signature_keywords(SyntheticKind kind);
const std::vector<std::string>& filler_words();

// Counts signature keywords per class and returns the argmax (lowest id on ties).
int keyword_count_classify(std::string_view text, SyntheticKind kind);

// Vocabulary covering every synthetic task, template and label word.
std::vector<std::string> bundled_vocabulary();
Tokenizer bundled_tokenizer();

// Template-format token streams used for backbone pretraining. Each label slot
// holds either a signature keyword of the text's class or a label word drawn
// independently of the text, so the backbone learns the prompt format and a
// content summary at the label slot but never the label-word mapping.
std::vector<std::vector<TokenId>> make_pretraining_corpus(const Tokenizer& tokenizer, std::size_t n_streams,
                                                          std::uint64_t seed);

std::vector<LabeledExample> load_jsonl(const std::filesystem::path& path, const std::vector<std::string>& label_words);
void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples,
                 const std::vector<std::string>& label_words);

// Task manifest (key = value): name, template, label_words, train, test,
// optional validation and vocab. Paths are relative to the manifest.
TaskSpec load_task_manifest(const std::filesystem::path& path);

}  // namespace flownav::tasks
