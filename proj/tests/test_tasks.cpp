#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "flownav/errors.hpp"
#include "flownav/tasks.hpp"

using namespace flownav;
using namespace flownav::tasks;

namespace {

// n examples per class with unique texts "c<class>_<i>".
std::vector<LabeledExample> numbered(std::size_t n_classes, std::size_t n) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < n_classes; ++c)
      out.push_back({"c" + std::to_string(c) + "_" + std::to_string(i), static_cast<int>(c)});
  return out;
}

TaskSpec numbered_task(std::size_t n_classes, std::size_t n) {
  TaskSpec t;
  t.name = "numbered";
  for (std::size_t c = 0; c < n_classes; ++c) t.label_words.push_back("L" + std::to_string(c));
  t.template_text = "Text: [S] Label: [L]";
  t.prompt = PromptTemplate::parse(t.template_text);
  t.train = numbered(n_classes, n);
  t.test = numbered(n_classes, 3);
  return t;
}

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::set<std::string> texts(const std::vector<LabeledExample>& xs) {
  std::set<std::string> out;
  for (const auto& x : xs) out.insert(x.text);
  return out;
}

}  // namespace

TEST_CASE("seed pool and defaults") {
  CHECK(kSeedPool == std::array<std::uint64_t, 8>{0, 42, 312, 411, 412, 421, 520, 1218});
}

TEST_CASE("protocol split: one demonstration per class, k per class, disjoint sets") {
  const auto task = numbered_task(3, 120);
  for (const auto seed : kSeedPool) {
    const auto split = make_protocol_split(task, 5, 200, seed);
    REQUIRE(split.demos.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) CHECK(split.demos[c].class_id == static_cast<int>(c));
    std::map<int, int> per_class;
    for (const auto& x : split.train) ++per_class[x.class_id];
    CHECK(per_class == std::map<int, int>{{0, 5}, {1, 5}, {2, 5}});
    CHECK(split.validation.size() == 200);
    const auto d = texts(split.demos);
    const auto t = texts(split.train);
    const auto v = texts(split.validation);
    CHECK(d.size() + t.size() + v.size() == 3 + 15 + 200);
    std::set<std::string> all = d;
    all.insert(t.begin(), t.end());
    all.insert(v.begin(), v.end());
    CHECK(all.size() == d.size() + t.size() + v.size());
    CHECK(split.test == task.test);
    // Same seed, same split.
    const auto again = make_protocol_split(task, 5, 200, seed);
    CHECK(again.demos == split.demos);
    CHECK(again.train == split.train);
    CHECK(again.validation == split.validation);
  }
  CHECK(make_protocol_split(task, 5, 200, 0).train != make_protocol_split(task, 5, 200, 42).train);
}

TEST_CASE("validation is capped by what remains and a shipped validation split is kept") {
  auto task = numbered_task(2, 20);
  auto split = make_protocol_split(task, 5, 200, 0);
  CHECK(split.validation.size() == 40 - 2 - 10);
  task.validation = {{"held", 1}};
  split = make_protocol_split(task, 5, 200, 0);
  CHECK(split.validation == task.validation);
}

TEST_CASE("demonstration draws are uniform within each class") {
  const std::size_t n = 10;
  const auto train = numbered(2, n);
  std::map<std::string, int> hits;
  const int draws = 4000;
  for (int s = 0; s < draws; ++s) {
    const auto sel = sample_demonstrations(train, 2, static_cast<std::uint64_t>(s));
    REQUIRE(sel.demos.size() == 2);
    CHECK(sel.remaining.size() == train.size() - 2);
    ++hits[sel.demos[0].text];
  }
  CHECK(hits.size() == n);
  // Expected 400 per example; bounds are about five standard deviations.
  for (const auto& [text, count] : hits) {
    CHECK(count > 300);
    CHECK(count < 500);
  }
}

TEST_CASE("training draws are uniform and keep input order") {
  const auto pool = numbered(2, 8);
  std::map<std::string, int> hits;
  const int draws = 4000;
  for (int s = 0; s < draws; ++s) {
    const auto sub = sample_training(pool, 2, 2, static_cast<std::uint64_t>(s));
    REQUIRE(sub.size() == 4);
    std::vector<std::size_t> positions;
    for (const auto& x : sub) {
      positions.push_back(static_cast<std::size_t>(std::find(pool.begin(), pool.end(), x) - pool.begin()));
      ++hits[x.text];
    }
    CHECK(std::is_sorted(positions.begin(), positions.end()));
  }
  // Each example is chosen with probability 2/8: expected 1000.
  for (const auto& [text, count] : hits) {
    CHECK(count > 850);
    CHECK(count < 1150);
  }
}

TEST_CASE("insufficient data is reported") {
  const auto task = numbered_task(2, 4);
  CHECK_THROWS_AS(make_protocol_split(task, 5, 10, 0), InsufficientDataError);
  std::vector<LabeledExample> one_class{{"a", 0}, {"b", 0}};
  CHECK_THROWS_AS(sample_demonstrations(one_class, 2, 0), InsufficientDataError);
  CHECK_THROWS_AS(sample_training(one_class, 1, 3, 0), InsufficientDataError);
}

TEST_CASE("demonstration order shuffle is a permutation") {
  const auto task = numbered_task(6, 30);
  const auto sorted = make_protocol_split(task, 2, 50, 7);
  bool any_reordered = false;
  for (std::uint64_t order = 0; order < 10; ++order) {
    const auto shuffled = make_protocol_split(task, 2, 50, 7, order);
    CHECK(texts(shuffled.demos) == texts(sorted.demos));
    CHECK(shuffled.train == sorted.train);
    CHECK(shuffled.validation == sorted.validation);
    any_reordered = any_reordered || shuffled.demos != sorted.demos;
  }
  CHECK(any_reordered);
}

TEST_CASE("synthetic tasks: shape, determinism and keyword oracle") {
  for (const auto kind : {SyntheticKind::keyword_sentiment, SyntheticKind::topic_4way, SyntheticKind::pattern_6way}) {
    const auto task = make_synthetic(kind, 210, 1);
    const auto n = signature_keywords(kind).size();
    CHECK(task.n_classes() == n);
    CHECK(task.train.size() == 210 * n);
    CHECK(task.test.size() == kSyntheticTestSize);
    CHECK_NOTHROW(task.validate());
    std::map<int, int> test_counts;
    for (const auto& x : task.test) ++test_counts[x.class_id];
    for (const auto& [c, count] : test_counts) CHECK(std::abs(count - static_cast<int>(kSyntheticTestSize / n)) <= 1);

    const auto again = make_synthetic(kind, 210, 1);
    CHECK(again.train == task.train);
    CHECK(again.test == task.test);
    CHECK(make_synthetic(kind, 210, 2).train != task.train);

    // Signature vocabularies are disjoint and the keyword counter recovers every label.
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& words : signature_keywords(kind)) {
      seen.insert(words.begin(), words.end());
      total += words.size();
    }
    CHECK(seen.size() == total);
    for (const auto& w : filler_words()) CHECK(!seen.contains(w));
    std::size_t correct = 0;
    for (const auto& x : task.test) correct += keyword_count_classify(x.text, kind) == x.class_id;
    CHECK(correct == task.test.size());

    // Every text has 2-3 signature keywords and all of them belong to its class.
    const auto& sig = signature_keywords(kind);
    for (const auto& x : task.train) {
      std::istringstream words(x.text);
      std::string w;
      int own = 0;
      while (words >> w) {
        for (std::size_t c = 0; c < sig.size(); ++c)
          if (std::find(sig[c].begin(), sig[c].end(), w) != sig[c].end()) {
            CHECK(static_cast<int>(c) == x.class_id);
            ++own;
          }
      }
      CHECK(own >= 2);
      CHECK(own <= 3);
    }
  }
  CHECK_THROWS_AS(make_synthetic(SyntheticKind::keyword_sentiment, 209, 0), ConfigError);
  CHECK_THROWS_AS(parse_synthetic_kind("news"), ConfigError);
  CHECK(parse_synthetic_kind("topic_4way") == SyntheticKind::topic_4way);
}

TEST_CASE("synthetic texts and label words tokenize without unknown tokens") {
  const auto tok = bundled_tokenizer();
  for (const auto kind : {SyntheticKind::keyword_sentiment, SyntheticKind::topic_4way, SyntheticKind::pattern_6way}) {
    const auto task = make_synthetic(kind, 210, 3);
    for (const auto& x : task.test)
      for (const auto id : tok.encode(x.text)) CHECK(id != tok.unk_id());
    for (const auto& w : task.label_words)
      for (const auto id : tok.encode(w)) CHECK(id != tok.unk_id());
    CHECK_NOTHROW(Verbalizer::build(task.label_words, tok));
  }
}

TEST_CASE("pretraining corpus is deterministic and in vocabulary") {
  const auto tok = bundled_tokenizer();
  const auto a = make_pretraining_corpus(tok, 20, 4);
  const auto b = make_pretraining_corpus(tok, 20, 4);
  CHECK(a == b);
  CHECK(a.size() == 20);
  for (const auto& stream : a) {
    CHECK(!stream.empty());
    for (const auto id : stream) CHECK(id != tok.unk_id());
  }
  CHECK(make_pretraining_corpus(tok, 20, 5) != a);
}

TEST_CASE("JSONL round trip") {
  const std::vector<std::string> labels{"Negative", "Positive"};
  const std::vector<LabeledExample> xs{{"great film", 1}, {"with \"quotes\" and\nnewline", 0}, {"", 1}};
  const auto path = temp_path("flownav_roundtrip.jsonl");
  write_jsonl(path, xs, labels);
  CHECK(load_jsonl(path, labels) == xs);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(write_jsonl(path, {{"x", 2}}, labels), DataError);
}

TEST_CASE("JSONL errors carry the line number") {
  const std::vector<std::string> labels{"Negative", "Positive"};
  const auto path = temp_path("flownav_bad.jsonl");
  const auto expect_line = [&](const std::string& body, std::size_t line) {
    std::ofstream(path) << body;
    try {
      load_jsonl(path, labels);
      FAIL("no error raised");
    } catch (const ParseError& e) {
      CHECK(e.line() == line);
      CHECK(std::string(e.what()).find(":" + std::to_string(line) + ":") != std::string::npos);
    }
  };
  expect_line("{\"text\":\"a\",\"label\":\"Positive\"}\n{\"text\":\"b\",\"label\":\n", 2);
  expect_line("{\"text\":\"a\",\"label\":\"Positive\"}\n\n{\"text\":\"a\",\"label\":\"Maybe\"}\n", 3);
  expect_line("[1,2]\n", 1);
  expect_line("{\"text\":3,\"label\":\"Positive\"}\n", 1);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_jsonl(temp_path("flownav_missing.jsonl"), labels), DataError);
}

TEST_CASE("bundled task manifest loads") {
  const auto task = load_task_manifest(FLOWNAV_DATA_DIR "/tasks/keyword_sentiment_jsonl/task.manifest");
  CHECK(task.label_words == std::vector<std::string>{"Negative", "Positive"});
  CHECK(task.train.size() == 500);
  CHECK(task.test.size() == 200);
  CHECK_NOTHROW(task.validate());
  CHECK(!task.vocab_path.empty());
  // Class ids follow the manifest's label order, which differs from the generator's.
  const auto synthetic_labels = make_synthetic(SyntheticKind::keyword_sentiment, 210, 0).label_words;
  std::size_t correct = 0;
  for (const auto& x : task.test) {
    const auto predicted = keyword_count_classify(x.text, SyntheticKind::keyword_sentiment);
    correct += synthetic_labels[static_cast<std::size_t>(predicted)] == task.label_words[static_cast<std::size_t>(x.class_id)];
  }
  CHECK(correct == task.test.size());
}

TEST_CASE("task manifest errors") {
  const auto dir = temp_path("flownav_manifest_test");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "train.jsonl") << "{\"text\":\"a\",\"label\":\"Yes\"}\n";
  std::ofstream(dir / "good.txt") << "Q: [S] A: [L]";
  std::ofstream(dir / "bad.txt") << "Q: [S] A:";
  std::ofstream(dir / "task.manifest") << "name = t\ntemplate = good.txt\ntrain = train.jsonl\ntest = train.jsonl\n";
  CHECK_THROWS_AS(load_task_manifest(dir / "task.manifest"), ConfigError);
  std::ofstream(dir / "task.manifest") << "name = t\ntemplate = bad.txt\nlabel_words = Yes, No\ntrain = train.jsonl\n"
                                          "test = train.jsonl\n";
  CHECK_THROWS_AS(load_task_manifest(dir / "task.manifest"), TemplateError);
  std::ofstream(dir / "task.manifest") << "name = t\ntemplate = good.txt\nlabel_words = Yes, No\n"
                                          "train = train.jsonl\ntest = train.jsonl\n";
  std::ofstream(dir / "task.manifest") << "name = t\ntemplate = missing.txt\nlabel_words = Yes, No\n"
                                          "train = train.jsonl\ntest = train.jsonl\n";
  CHECK_THROWS_AS(load_task_manifest(dir / "task.manifest"), ConfigError);
  std::ofstream(dir / "task.manifest") << "name = t\ntemplate = good.txt\nlabel_words = Yes, No\n"
                                          "train = train.jsonl\ntest = train.jsonl\n";
  const auto ok = load_task_manifest(dir / "task.manifest");
  CHECK(ok.train == std::vector<LabeledExample>{{"a", 0}});
  std::filesystem::remove_all(dir);
}

TEST_CASE("task validation rejects out-of-range class ids") {
  auto task = numbered_task(2, 3);
  task.test.push_back({"bad", 5});
  CHECK_THROWS_AS(task.validate(), DataError);
}
