#include "flownav/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flownav/errors.hpp"
#include "flownav/manifest.hpp"

namespace flownav::tasks {

namespace {

using Words = std::vector<std::string>;

const Words kSpecial = {"<unk>", "<nl>", ":", ",", ".", "?", "!", ";"};
const Words kTemplateWords = {"Review", "Sentiment", "Article", "Answer", "Question", "Type", "Dialogue", "Emotion"};
// "Abbreviation" is deliberately absent as a whole word: it tokenizes as
// Abbrev + ##iation, which exercises the first-subtoken rule.
const Words kLabelPieces = {"Positive", "Negative", "World",   "Sports",   "Business", "Technology",
                            "Abbrev",   "##iation", "Entity", "Description", "Person", "Location",
                            "Number",   "Happy",    "Sad",    "Angry",       "Others"};

const std::vector<Words> kSentiment = {
    {"good", "great", "excellent", "wonderful", "superb", "brilliant", "delightful", "lovely", "charming", "enjoyable",
     "fantastic", "amazing", "pleasant", "moving", "touching", "beautiful", "clever", "witty", "fun", "joyful",
     "terrific", "splendid", "stunning", "uplifting"},
    {"bad", "awful", "terrible", "horrible", "dreadful", "boring", "dull", "tedious", "poor", "weak", "messy", "clumsy",
     "annoying", "painful", "bland", "lifeless", "stale", "sloppy", "ugly", "disappointing", "pointless", "tiresome",
     "mediocre", "worst"},
};

const std::vector<Words> kTopic = {
    {"government", "minister", "election", "president", "parliament", "treaty", "embassy", "war", "peace", "diplomat",
     "border", "refugees", "protest", "military", "summit", "nation", "capital", "policy", "united", "rebels",
     "ceasefire", "vote", "regime", "sanctions"},
    {"game", "team", "match", "season", "coach", "player", "score", "league", "championship", "tournament", "goal",
     "victory", "defeat", "stadium", "olympic", "medal", "striker", "pitcher", "inning", "playoff", "racing", "tennis",
     "soccer", "baseball"},
    {"company", "market", "stocks", "shares", "profit", "revenue", "investors", "earnings", "bank", "economy", "trade",
     "merger", "deal", "sales", "growth", "quarter", "prices", "oil", "firm", "ceo", "retail", "inflation", "interest",
     "dollar"},
    {"software", "computer", "internet", "online", "google", "microsoft", "apple", "chip", "data", "network", "digital",
     "wireless", "mobile", "phone", "device", "users", "web", "browser", "server", "code", "robot", "laptop",
     "satellite", "research"},
};

const std::vector<Words> kPattern = {
    {"acronym", "initials", "stands", "shorthand", "abbreviated", "expansion", "letters", "monogram", "contraction",
     "truncated", "clipped", "shortened"},
    {"animal", "plant", "instrument", "color", "food", "vehicle", "disease", "currency", "language", "religion",
     "product", "substance"},
    {"definition", "meaning", "explain", "describe", "reason", "why", "how", "cause", "purpose", "origin", "process",
     "difference"},
    {"who", "inventor", "author", "actor", "singer", "founder", "painter", "scientist", "leader", "poet", "composer",
     "explorer"},
    {"where", "city", "country", "river", "mountain", "continent", "island", "ocean", "desert", "province", "lake",
     "region"},
    {"many", "much", "year", "date", "population", "distance", "percent", "temperature", "age", "speed", "cost",
     "height"},
};

const Words kFiller = {
    "the",     "a",       "an",      "of",      "to",      "in",      "on",      "at",      "for",     "with",
    "by",      "from",    "about",   "as",      "into",    "over",    "after",   "before",  "under",   "between",
    "through", "during",  "without", "within",  "along",   "across",  "behind",  "beyond",  "near",    "this",
    "that",    "these",   "those",   "it",      "its",     "they",    "them",    "their",   "he",      "she",
    "his",     "her",     "we",      "our",     "you",     "your",    "i",       "my",      "me",      "is",
    "was",     "are",     "were",    "be",      "been",    "being",   "has",     "have",    "had",     "do",
    "does",    "did",     "will",    "would",   "can",     "could",   "should",  "may",     "might",   "must",
    "just",    "also",    "very",    "really",  "quite",   "rather",  "still",   "even",    "only",    "then",
    "than",    "so",      "too",     "again",   "always",  "never",   "often",   "sometimes", "usually", "here",
    "there",   "now",     "today",   "yesterday", "tomorrow", "later", "soon",   "first",   "last",    "next",
    "other",   "another", "each",    "every",   "some",    "any",     "more",    "most",    "less",    "few",
    "several", "all",     "both",    "either",  "neither", "such",    "same",    "different", "new",   "old",
    "big",     "small",   "long",    "high",    "low",     "early",   "late",    "young",   "little",  "own",
    "right",   "left",    "whole",   "full",    "empty",   "open",    "close",   "part",    "place",   "time",
    "day",     "week",    "month",   "night",   "morning", "evening", "thing",   "things",  "way",     "people",
    "man",     "woman",   "child",   "story",   "film",    "movie",   "book",    "song",    "show",    "page",
    "line",    "word",    "words",   "house",   "room",    "door",    "window",  "street",  "road",    "car",
    "train",   "table",   "chair",   "paper",   "water",   "light",   "sound",   "voice",   "hand",    "eyes",
    "face",    "head",    "friend",  "family",  "group",   "member",  "number",  "point",   "side",    "case",
    "fact",    "idea",    "work",    "job",     "life",    "end",     "start",   "home",    "school",  "office",
    "said",    "says",    "told",    "asked",   "made",    "make",    "took",    "take",    "gave",    "give",
    "came",    "come",    "went",    "go",      "saw",     "see",     "knew",    "know",    "thought", "think",
    "looked",  "look",    "wanted",  "want",    "used",    "use",     "found",   "find",    "felt",    "feel",
    "stayed",  "kept",    "keep",    "seemed",  "seem",    "turned",  "turn",    "became",  "become",  "put",
    "and",     "or",      "but",     "if",      "because", "while",   "when",    "what",    "which",   "not",
};

const std::map<SyntheticKind, std::pair<std::string, Words>> kTemplates = {
    {SyntheticKind::keyword_sentiment, {"Review:\n[S]\nSentiment:\n[L]\nReview:\n[S_i]\nSentiment:", {"Positive", "Negative"}}},
    {SyntheticKind::topic_4way,
     {"Article:\n[S]\nAnswer:\n[L]\nArticle:\n[S_i]\nAnswer:", {"World", "Sports", "Business", "Technology"}}},
    {SyntheticKind::pattern_6way,
     {"Question:\n[S]\nAnswer Type:\n[L]\nQuestion:\n[S_i]\nAnswer Type:",
      {"Abbreviation", "Entity", "Description", "Person", "Location", "Number"}}},
};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// 6-10 words, of which min_sig..max_sig are signature keywords.
std::string make_text(const Words& signature, std::mt19937_64& rng, int min_sig = 2, int max_sig = 3) {
  std::uniform_int_distribution<int> length(6, 10);
  std::uniform_int_distribution<int> n_sig(min_sig, max_sig);
  const auto n = static_cast<std::size_t>(length(rng));
  const auto k = std::min(n, static_cast<std::size_t>(n_sig(rng)));
  std::vector<std::size_t> slots(n);
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  std::vector<std::string> words(n);
  std::uniform_int_distribution<std::size_t> pick_filler(0, kFiller.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_sig(0, signature.size() - 1);
  for (std::size_t i = 0; i < n; ++i) words[i] = kFiller[pick_filler(rng)];
  for (std::size_t i = 0; i < k; ++i) words[slots[i]] = signature[pick_sig(rng)];
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::vector<std::size_t> indices_of_class(const std::vector<LabeledExample>& xs, int c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (xs[i].class_id == c) out.push_back(i);
  return out;
}

constexpr double kPretrainKeywordRate = 0.7;
// Pretraining texts are keyword-dense so the backbone learns to pool content.
constexpr int kPretrainMinKeywords = 4;
constexpr int kPretrainMaxKeywords = 7;

}  // namespace

void TaskSpec::validate() const {
  if (label_words.empty()) throw ConfigError("task '" + name + "' has no label words");
  auto check = [&](const std::vector<LabeledExample>& xs, const char* split) {
    for (const auto& x : xs) {
      if (x.class_id < 0 || static_cast<std::size_t>(x.class_id) >= n_classes()) {
        throw DataError("task '" + name + "' " + split + " split has class id " + std::to_string(x.class_id) +
                        " outside " + std::to_string(n_classes()) + " classes");
      }
    }
  };
  check(train, "train");
  check(validation, "validation");
  check(test, "test");
  PromptTemplate::parse(template_text);
}

DemoSelection sample_demonstrations(const std::vector<LabeledExample>& train, std::size_t n_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> taken(train.size(), 0);
  DemoSelection out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const auto idx = indices_of_class(train, static_cast<int>(c));
    if (idx.empty()) throw InsufficientDataError("class " + std::to_string(c) + " has no training example for a demonstration");
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    const auto chosen = idx[pick(rng)];
    taken[chosen] = 1;
    out.demos.push_back(train[chosen]);
  }
  for (std::size_t i = 0; i < train.size(); ++i)
    if (!taken[i]) out.remaining.push_back(train[i]);
  return out;
}

std::vector<LabeledExample> sample_training(const std::vector<LabeledExample>& remaining, std::size_t n_classes,
                                            std::size_t k_per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::uint8_t> chosen(remaining.size(), 0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto idx = indices_of_class(remaining, static_cast<int>(c));
    if (idx.size() < k_per_class) {
      throw InsufficientDataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                  " examples, need " + std::to_string(k_per_class));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < k_per_class; ++i) chosen[idx[i]] = 1;
  }
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < remaining.size(); ++i)
    if (chosen[i]) out.push_back(remaining[i]);
  return out;
}

FewShotSplit make_protocol_split(const TaskSpec& task, std::size_t k_per_class, std::size_t validation_size,
                                 std::uint64_t seed, std::optional<std::uint64_t> demo_order_seed) {
  task.validate();
  FewShotSplit split;
  auto demos = sample_demonstrations(task.train, task.n_classes(), seed);
  split.demos = std::move(demos.demos);
  if (demo_order_seed) {
    std::mt19937_64 order(*demo_order_seed);
    std::shuffle(split.demos.begin(), split.demos.end(), order);
  }

  std::mt19937_64 rng(seed ^ 0x51ed2701a3c9be45ULL);
  const auto& rest = demos.remaining;
  // Indices rather than examples, so the validation draw never reuses a training row.
  std::vector<std::uint8_t> used(rest.size(), 0);
  for (std::size_t c = 0; c < task.n_classes(); ++c) {
    auto idx = indices_of_class(rest, static_cast<int>(c));
    if (idx.size() < k_per_class) {
      throw InsufficientDataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                  " examples after demonstrations, need " + std::to_string(k_per_class));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < k_per_class; ++i) used[idx[i]] = 1;
  }
  for (std::size_t i = 0; i < rest.size(); ++i)
    if (used[i]) split.train.push_back(rest[i]);

  if (!task.validation.empty()) {
    split.validation = task.validation;
  } else {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < rest.size(); ++i)
      if (!used[i]) pool.push_back(i);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(pool.size(), validation_size));
    std::sort(pool.begin(), pool.end());
    for (const auto i : pool) split.validation.push_back(rest[i]);
  }
  split.test = task.test;
  return split;
}

SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "keyword_sentiment") return SyntheticKind::keyword_sentiment;
  if (s == "topic_4way") return SyntheticKind::topic_4way;
  if (s == "pattern_6way") return SyntheticKind::pattern_6way;
  throw ConfigError("unknown synthetic task '" + std::string(s) + "' (expected keyword_sentiment|topic_4way|pattern_6way)");
}

std::string_view to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::keyword_sentiment: return "keyword_sentiment";
    case SyntheticKind::topic_4way: return "topic_4way";
    case SyntheticKind::pattern_6way: return "pattern_6way";
  }
  return "?";
}

const std::vector<std::vector<std::string>>& signature_keywords(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::keyword_sentiment: return kSentiment;
    case SyntheticKind::topic_4way: return kTopic;
    case SyntheticKind::pattern_6way: return kPattern;
  }
  throw ConfigError("unknown synthetic kind");
}

const std::vector<std::string>& filler_words() { return kFiller; }

TaskSpec make_synthetic(SyntheticKind kind, std::size_t size_per_class, std::uint64_t seed) {
  if (size_per_class < kMinSyntheticPerClass) {
    throw ConfigError("synthetic tasks need at least " + std::to_string(kMinSyntheticPerClass) +
                      " examples per class, got " + std::to_string(size_per_class));
  }
  const auto& sig = signature_keywords(kind);
  const auto& [tmpl, labels] = kTemplates.at(kind);
  TaskSpec task;
  task.name = std::string(to_string(kind));
  task.label_words = labels;
  task.template_text = tmpl;
  task.prompt = PromptTemplate::parse(tmpl);

  std::mt19937_64 rng(seed);
  std::set<std::string> seen;
  auto fresh = [&](std::size_t c) {
    for (;;) {
      auto text = make_text(sig[c], rng);
      if (seen.insert(text).second) return text;
    }
  };
  const auto n = sig.size();
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t i = 0; i < size_per_class; ++i) task.train.push_back({fresh(c), static_cast<int>(c)});
  // Interleave classes so that file order carries no label signal.
  std::shuffle(task.train.begin(), task.train.end(), rng);
  for (std::size_t i = 0; i < kSyntheticTestSize; ++i) {
    const auto c = i % n;
    task.test.push_back({fresh(c), static_cast<int>(c)});
  }
  return task;
}

int keyword_count_classify(std::string_view text, SyntheticKind kind) {
  const auto& sig = signature_keywords(kind);
  std::vector<int> counts(sig.size(), 0);
  for (const auto& w : split_words(text))
    for (std::size_t c = 0; c < sig.size(); ++c)
      if (std::find(sig[c].begin(), sig[c].end(), w) != sig[c].end()) ++counts[c];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::vector<std::string> bundled_vocabulary() {
  std::vector<std::string> vocab;
  std::set<std::string> seen;
  auto add = [&](const Words& ws) {
    for (const auto& w : ws)
      if (seen.insert(w).second) vocab.push_back(w);
  };
  add(kSpecial);
  add(kTemplateWords);
  add(kLabelPieces);
  for (const auto* group : {&kSentiment, &kTopic, &kPattern})
    for (const auto& ws : *group) add(ws);
  add(kFiller);
  return vocab;
}

Tokenizer bundled_tokenizer() { return Tokenizer(bundled_vocabulary()); }

std::vector<std::vector<TokenId>> make_pretraining_corpus(const Tokenizer& tokenizer, std::size_t n_streams,
                                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const SyntheticKind kinds[] = {SyntheticKind::keyword_sentiment, SyntheticKind::topic_4way, SyntheticKind::pattern_6way};
  std::uniform_int_distribution<std::size_t> pick_kind(0, 2);
  std::uniform_int_distribution<std::size_t> pick_len(1, 4);
  std::bernoulli_distribution use_keyword(kPretrainKeywordRate);
  std::bernoulli_distribution coherent(0.5);
  std::vector<std::vector<TokenId>> corpus;
  corpus.reserve(n_streams);
  for (std::size_t s = 0; s < n_streams; ++s) {
    const auto kind = kinds[pick_kind(rng)];
    const auto& sig = signature_keywords(kind);
    const auto& [tmpl, labels] = kTemplates.at(kind);
    const auto pattern = PromptTemplate::parse(tmpl).demo_pattern;
    std::uniform_int_distribution<std::size_t> pick_class(0, sig.size() - 1);
    // Half of the streams stay on one class throughout.
    const bool one_class = coherent(rng);
    const auto stream_class = pick_class(rng);
    std::vector<TokenId> stream;
    const auto n_patterns = pick_len(rng);
    for (std::size_t p = 0; p < n_patterns; ++p) {
      const auto c = one_class ? stream_class : pick_class(rng);
      // The label slot holds either a keyword of the text's own class or a
      // label word chosen independently of the text.
      std::string label;
      if (use_keyword(rng)) {
        std::uniform_int_distribution<std::size_t> pick(0, sig[c].size() - 1);
        label = sig[c][pick(rng)];
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, labels.size() - 1);
        label = labels[pick(rng)];
      }
      std::string filled = pattern;
      filled.replace(filled.find("[S]"), 3, make_text(sig[c], rng, kPretrainMinKeywords, kPretrainMaxKeywords));
      filled.replace(filled.find("[L]"), 3, label);
      const auto ids = tokenizer.encode(filled);
      if (!stream.empty()) stream.push_back(tokenizer.newline_id());
      stream.insert(stream.end(), ids.begin(), ids.end());
    }
    corpus.push_back(std::move(stream));
  }
  return corpus;
}

std::vector<LabeledExample> load_jsonl(const std::filesystem::path& path, const std::vector<std::string>& label_words) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string(), line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("label") || !obj["text"].is_string() ||
        !obj["label"].is_string()) {
      throw ParseError(path.string(), line_no, "expected an object with string fields \"text\" and \"label\"");
    }
    const auto label = obj["label"].get<std::string>();
    const auto it = std::find(label_words.begin(), label_words.end(), label);
    if (it == label_words.end()) throw ParseError(path.string(), line_no, "unknown label '" + label + "'");
    out.push_back({obj["text"].get<std::string>(), static_cast<int>(it - label_words.begin())});
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples,
                 const std::vector<std::string>& label_words) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& x : examples) {
    if (x.class_id < 0 || static_cast<std::size_t>(x.class_id) >= label_words.size()) {
      throw DataError("class id " + std::to_string(x.class_id) + " has no label word");
    }
    out << nlohmann::json{{"text", x.text}, {"label", label_words[static_cast<std::size_t>(x.class_id)]}}.dump() << '\n';
  }
}

TaskSpec load_task_manifest(const std::filesystem::path& path) {
  const auto kv = KeyValueFile::load(path);
  for (const auto& k : kv.unknown_keys({"name", "template", "label_words", "train", "validation", "test", "vocab"}))
    kv.fail(k, "unknown task manifest key");
  const auto base = path.parent_path();
  auto require = [&](const std::string& key) {
    auto v = kv.get(key);
    if (!v) throw ConfigError(path.string() + ": missing required key '" + key + "'");
    return *v;
  };
  TaskSpec task;
  task.name = kv.get("name").value_or(path.stem().string());
  if (auto v = kv.get_list("label_words")) task.label_words = std::move(*v);
  else throw ConfigError(path.string() + ": missing required key 'label_words'");
  {
    const auto tpath = base / require("template");
    std::ifstream in(tpath);
    if (!in) kv.fail("template", "cannot open " + tpath.string());
    std::stringstream ss;
    ss << in.rdbuf();
    task.template_text = ss.str();
    task.prompt = PromptTemplate::parse(task.template_text);
  }
  if (auto v = kv.get("vocab")) task.vocab_path = base / *v;
  task.train = load_jsonl(base / require("train"), task.label_words);
  task.test = load_jsonl(base / require("test"), task.label_words);
  if (auto v = kv.get("validation")) task.validation = load_jsonl(base / *v, task.label_words);
  task.validate();
  return task;
}

}  // namespace flownav::tasks
