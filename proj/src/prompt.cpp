#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "flownav/errors.hpp"
#include "flownav/promptgraph.hpp"

namespace flownav {

namespace {

constexpr std::string_view kTextSlot = "[S]";
constexpr std::string_view kQuerySlot = "[S_i]";
constexpr std::string_view kLabelSlot = "[L]";

std::string collapse_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

std::size_t count_of(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(' ');
  return std::string(s.substr(b, e - b + 1));
}

void append(std::vector<TokenId>& dst, const std::vector<TokenId>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

}  // namespace

PromptTemplate PromptTemplate::parse(std::string_view raw) {
  const std::string text = collapse_whitespace(raw);
  const auto label_at = text.find(kLabelSlot);
  if (label_at == std::string::npos) throw TemplateError("label slot [L] absent from template '" + text + "'");

  PromptTemplate t;
  t.demo_pattern = trim(std::string_view(text).substr(0, label_at + kLabelSlot.size()));
  if (text.find(kQuerySlot) != std::string::npos) {
    std::string query = trim(std::string_view(text).substr(label_at + kLabelSlot.size()));
    if (count_of(query, kQuerySlot) != 1) throw TemplateError("query part must contain exactly one [S_i]");
    query.replace(query.find(kQuerySlot), kQuerySlot.size(), kTextSlot);
    t.query_pattern = std::move(query);
  } else {
    t.query_pattern = trim(std::string_view(text).substr(0, label_at));
  }
  if (count_of(t.demo_pattern, kTextSlot) != 1) throw TemplateError("demonstration pattern needs exactly one [S]");
  if (count_of(t.demo_pattern, kLabelSlot) != 1) throw TemplateError("demonstration pattern needs exactly one [L]");
  if (t.demo_pattern.find(kTextSlot) > t.demo_pattern.find(kLabelSlot)) {
    throw TemplateError("[S] must precede [L] in the demonstration pattern");
  }
  if (count_of(t.query_pattern, kTextSlot) != 1) throw TemplateError("query pattern needs exactly one text slot");
  if (t.query_pattern.find(kLabelSlot) != std::string::npos) throw TemplateError("query pattern must not contain [L]");
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open template file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

Verbalizer Verbalizer::build(std::vector<std::string> words, const Tokenizer& tokenizer) {
  if (words.empty()) throw ConfigError("verbalizer has no label words");
  Verbalizer v;
  std::set<TokenId> seen;
  for (const auto& w : words) {
    const auto ids = tokenizer.encode(w);
    if (ids.empty()) throw ConfigError("label word '" + w + "' produced no tokens");
    if (ids.front() == tokenizer.unk_id()) throw TokenizationError("label word '" + w + "' is out of vocabulary");
    if (!seen.insert(ids.front()).second) {
      throw ConfigError("label word '" + w + "' shares its first subtoken with another class");
    }
    v.first_subtoken.push_back(ids.front());
  }
  v.label_words = std::move(words);
  return v;
}

void PromptLayout::validate() const {
  if (token_ids.empty()) throw PreconditionError("prompt layout is empty");
  if (final_index != token_ids.size() - 1) throw PreconditionError("final_index must be the last token");
  if (label_positions.size() != demo_spans.size()) throw PreconditionError("one label position per demonstration");
  for (std::size_t i = 0; i < label_positions.size(); ++i) {
    if (i > 0 && label_positions[i] <= label_positions[i - 1]) {
      throw PreconditionError("label positions must be strictly increasing");
    }
    if (!demo_spans[i].contains(label_positions[i])) throw PreconditionError("label position outside its demonstration");
    if (label_positions[i] >= final_index) throw PreconditionError("label position at or after the final token");
  }
}

PromptLayout build_prompt(const PromptTemplate& tmpl, const std::vector<Demonstration>& demos, std::string_view query_text,
                          const Verbalizer& verbalizer, const Tokenizer& tokenizer) {
  const std::string_view demo = tmpl.demo_pattern;
  const auto s_at = demo.find(kTextSlot);
  const auto l_at = demo.find(kLabelSlot);
  if (s_at == std::string_view::npos || l_at == std::string_view::npos) {
    throw TemplateError("label word absent from template expansion: demonstration pattern lacks [S] or [L]");
  }
  const auto before_text = tokenizer.encode(demo.substr(0, s_at));
  const auto before_label = tokenizer.encode(demo.substr(s_at + kTextSlot.size(), l_at - s_at - kTextSlot.size()));
  const auto after_label = tokenizer.encode(demo.substr(l_at + kLabelSlot.size()));

  PromptLayout layout;
  auto& ids = layout.token_ids;
  for (const auto& d : demos) {
    if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= verbalizer.size()) {
      throw IndexError("demonstration class " + std::to_string(d.class_id) + " outside verbalizer of " +
                       std::to_string(verbalizer.size()));
    }
    const auto start = ids.size();
    append(ids, before_text);
    append(ids, tokenizer.encode(d.text));
    append(ids, before_label);
    const auto label_tokens = tokenizer.encode(verbalizer.label_words[static_cast<std::size_t>(d.class_id)]);
    if (label_tokens.empty() || label_tokens.front() == tokenizer.unk_id()) {
      throw TokenizationError("label word '" + verbalizer.label_words[static_cast<std::size_t>(d.class_id)] +
                              "' cannot be tokenized");
    }
    layout.label_positions.push_back(ids.size());
    append(ids, label_tokens);
    append(ids, after_label);
    layout.demo_spans.push_back({start, ids.size()});
    ids.push_back(tokenizer.newline_id());
  }

  const std::string_view query = tmpl.query_pattern;
  const auto q_at = query.find(kTextSlot);
  if (q_at == std::string_view::npos) throw TemplateError("query pattern lacks a text slot");
  append(ids, tokenizer.encode(query.substr(0, q_at)));
  const auto q_start = ids.size();
  append(ids, tokenizer.encode(query_text));
  layout.query_span = {q_start, ids.size()};
  append(ids, tokenizer.encode(query.substr(q_at + kTextSlot.size())));
  if (ids.empty()) throw TemplateError("prompt expands to no tokens");
  layout.final_index = ids.size() - 1;
  layout.validate();
  return layout;
}

std::vector<std::vector<std::size_t>> FlowGraph::in_neighbors() const {
  std::vector<std::vector<std::size_t>> nbrs(n_nodes);
  for (const auto& e : edges) nbrs[e.dst].push_back(e.src);
  for (auto& list : nbrs) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }
  return nbrs;
}

std::size_t FlowGraph::count(Relation r) const {
  return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [r](const Edge& e) { return e.relation == r; }));
}

FlowGraph build_graph(const PromptLayout& layout, PathConfig paths) {
  layout.validate();
  FlowGraph g;
  g.n_nodes = layout.size();
  if (paths.include_aggregation) {
    for (const auto p : layout.label_positions)
      for (std::size_t j = 0; j < p; ++j) g.edges.push_back({j, p, Relation::aggregate});
  }
  if (paths.include_distribution) {
    for (const auto p : layout.label_positions) g.edges.push_back({p, layout.final_index, Relation::distribute});
  }
  return g;
}

const char* relation_name(Relation r) { return r == Relation::aggregate ? "aggregate" : "distribute"; }

}  // namespace flownav
