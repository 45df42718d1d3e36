#pragma once

// Prompt construction over demonstration templates and the token-level
// information-flow graph (context -> label word -> final token).

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flownav/tokenizer.hpp"

namespace flownav {

// A demonstration pattern with [S] (text) and [L] (label word) slots, plus the
// query pattern that ends right where the query's label would go.
//
// Accepted text forms (newlines inside the template collapse to spaces):
//   "Review: [S] Sentiment: [L]"
//   "Review:\n[S]\nSentiment:\n[L]\nReview:\n[S_i]\nSentiment:"
struct PromptTemplate {
  std::string demo_pattern;
  std::string query_pattern;

  static PromptTemplate parse(std::string_view text);
  static PromptTemplate load(const std::filesystem::path& path);
};

struct Verbalizer {
  std::vector<std::string> label_words;  // indexed by class id
  std::vector<TokenId> first_subtoken;   // indexed by class id

  // Throws ConfigError when empty or when two classes share a first subtoken.
  static Verbalizer build(std::vector<std::string> words, const Tokenizer& tokenizer);
  std::size_t size() const noexcept { return label_words.size(); }
};

struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  bool contains(std::size_t i) const noexcept { return i >= start && i < end; }
  std::size_t size() const noexcept { return end - start; }
  bool operator==(const TokenSpan&) const = default;
};

struct Demonstration {
  std::string text;
  int class_id = 0;
};

struct PromptLayout {
  std::vector<TokenId> token_ids;
  std::vector<TokenSpan> demo_spans;
  std::vector<std::size_t> label_positions;
  std::size_t final_index = 0;
  TokenSpan query_span;

  std::size_t size() const noexcept { return token_ids.size(); }
  // Throws PreconditionError naming the first violated layout invariant.
  void validate() const;
};

// Concatenates one filled demonstration pattern per demo (newline separated)
// followed by the query pattern. Label positions mark the first subtoken of
// each label word.
PromptLayout build_prompt(const PromptTemplate& tmpl, const std::vector<Demonstration>& demos,
                          std::string_view query_text, const Verbalizer& verbalizer,
                          const Tokenizer& tokenizer);

enum class Relation : std::uint8_t { aggregate, distribute };

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  Relation relation = Relation::aggregate;
  auto operator<=>(const Edge&) const = default;
};

struct FlowGraph {
  std::size_t n_nodes = 0;
  std::vector<Edge> edges;

  // In-neighbours per node, each list sorted ascending.
  std::vector<std::vector<std::size_t>> in_neighbors() const;
  std::size_t count(Relation r) const;
};

struct PathConfig {
  bool include_aggregation = true;
  bool include_distribution = true;
};

FlowGraph build_graph(const PromptLayout& layout, PathConfig paths = {});

const char* relation_name(Relation r);

}  // namespace flownav
