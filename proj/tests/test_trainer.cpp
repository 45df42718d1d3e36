#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "flownav/errors.hpp"
#include "flownav/peft.hpp"
#include "flownav/trainer.hpp"
#include "support.hpp"

using namespace flownav;
using flownav::testing::bitwise_equal;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.vocab_size = tasks::bundled_vocabulary().size();
  cfg.max_seq_len = 256;
  cfg.gnn_insert_layer = 1;
  return cfg;
}

model::Model small_model(std::uint64_t seed = 1) {
  model::Model m;
  m.config = small_config();
  m.backbone = model::TransformerParams::init(m.config, seed);
  return m;
}

tasks::TaskSpec small_task() {
  auto task = tasks::make_synthetic(tasks::SyntheticKind::keyword_sentiment, 210, 9);
  task.test.resize(30);
  return task;
}

trainer::TrainConfig quick(model::Method method) {
  auto cfg = trainer::TrainConfig::defaults_for(method);
  cfg.max_epochs = 3;
  cfg.early_stop_patience = 2;
  cfg.validation_size = 12;
  cfg.k_per_class = 2;
  return cfg;
}

std::vector<double> logits_of(const model::Model& m, const std::vector<TokenId>& ids) {
  ad::NoGradGuard no_grad;
  const auto out = model::forward(m, ids);
  return {out.logits.data().begin(), out.logits.data().end()};
}

nlohmann::json without_wall_time(const trainer::RunResult& r) {
  auto j = r.to_json();
  j.erase("wall_time_seconds");
  return j;
}

}  // namespace

TEST_CASE("per-method defaults") {
  using model::Method;
  const auto g = trainer::TrainConfig::defaults_for(Method::gnnavi);
  CHECK(g.learning_rate == 1e-2);
  CHECK(g.optimizer == optim::Kind::adam);
  CHECK(g.max_epochs == 50);
  CHECK(g.early_stop_patience == 15);
  CHECK(g.batch_size == 1);
  CHECK(g.grad_clip == 1.0);
  CHECK(g.gnn.kind == gnn::Kind::sage);
  CHECK(g.gnn.activation == gnn::Activation::tanh);
  CHECK(g.gnn.update_mode == gnn::UpdateMode::replace);
  CHECK(trainer::TrainConfig::defaults_for(Method::prefix).learning_rate == 1e-2);
  CHECK(trainer::TrainConfig::defaults_for(Method::lora).learning_rate == 5e-4);
  CHECK(trainer::TrainConfig::defaults_for(Method::lora).optimizer == optim::Kind::adamw);
  CHECK(trainer::TrainConfig::defaults_for(Method::adapter).learning_rate == 5e-5);
  CHECK(trainer::TrainConfig::defaults_for(Method::fpft).learning_rate == 5e-5);
  CHECK(trainer::TrainConfig::defaults_for(Method::fpft).optimizer == optim::Kind::adamw);
  auto bad = g;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.k_per_class = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("Adam and AdamW steps match a hand computation") {
  for (const auto kind : {optim::Kind::adam, optim::Kind::adamw}) {
    auto w = ad::Tensor::from({2}, {1.0, -2.0}, true);
    const std::vector<std::vector<double>> grads{{0.5, -3.0}, {-1.0, 2.0}};
    optim::AdamConfig cfg{kind, 0.1, 0.9, 0.999, 1e-8, 0.2};
    optim::Adam opt({w}, cfg);
    std::vector<double> x{1.0, -2.0}, m{0, 0}, v{0, 0};
    for (std::size_t t = 1; t <= grads.size(); ++t) {
      opt.zero_grad();
      {
        ad::Tape tape;
        ad::TapeScope scope(tape);
        ad::backward(ad::sum(ad::mul(w, ad::Tensor::from({2}, grads[t - 1]))));
      }
      opt.step();
      for (std::size_t j = 0; j < 2; ++j) {
        const double g = grads[t - 1][j];
        m[j] = 0.9 * m[j] + 0.1 * g;
        v[j] = 0.999 * v[j] + 0.001 * g * g;
        const double mhat = m[j] / (1 - std::pow(0.9, t));
        const double vhat = v[j] / (1 - std::pow(0.999, t));
        if (kind == optim::Kind::adamw) x[j] -= 0.1 * 0.2 * x[j];
        x[j] -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
      }
      for (std::size_t j = 0; j < 2; ++j) CHECK(w.data()[j] == doctest::Approx(x[j]).epsilon(1e-14));
    }
    CHECK(opt.steps() == 2);
  }
}

TEST_CASE("parameters without a gradient are left alone") {
  auto a = ad::Tensor::from({1}, {1.0}, true);
  auto b = ad::Tensor::from({1}, {5.0}, true);
  optim::Adam opt({a, b}, {optim::Kind::adamw, 0.1, 0.9, 0.999, 1e-8, 0.5});
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backward(ad::sum(a));
  }
  opt.step();
  CHECK(a.data()[0] != 1.0);
  CHECK(b.data()[0] == 5.0);
}

TEST_CASE("gradient clipping") {
  auto a = ad::Tensor::from({2}, {0, 0}, true);
  auto b = ad::Tensor::from({1}, {0}, true);
  const auto set_grads = [&] {
    a.zero_grad();
    b.zero_grad();
    ad::Tape tape;
    ad::TapeScope scope(tape);
    ad::backward(ad::add(ad::sum(ad::mul(a, ad::Tensor::from({2}, {3, 0}))), ad::sum(ad::scale(b, 4))));
  };
  set_grads();
  CHECK(optim::grad_norm({a, b}) == doctest::Approx(5.0));
  CHECK(optim::clip_grad_norm({a, b}, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  set_grads();
  optim::clip_grad_norm({a, b}, 10.0);
  CHECK(a.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 4.0);
  CHECK_THROWS_AS(optim::parse_kind("sgd"), ConfigError);
}

TEST_CASE("seed summary uses the sample standard deviation") {
  const auto s = trainer::summarize({1, 2, 3, 4});
  CHECK(s.n == 4);
  CHECK(s.mean == doctest::Approx(2.5));
  CHECK(s.stdev == doctest::Approx(std::sqrt(5.0 / 3.0)));
  const auto one = trainer::summarize({0.7});
  CHECK(one.mean == 0.7);
  CHECK(one.stdev == 0.0);
}

TEST_CASE("baseline attachments start as no-ops") {
  const auto base = small_model();
  const auto tok = tasks::bundled_tokenizer();
  const auto ids = tok.encode("Review: good film Sentiment: Positive\nReview: bad day Sentiment:");
  const auto ref = logits_of(base, ids);
  auto lora = trainer::clone_model(base);
  peft::attach_lora(lora, 4, 8.0, 3);
  CHECK(logits_of(lora, ids) == ref);
  auto adapter = trainer::clone_model(base);
  peft::attach_adapter(adapter, 8, 3);
  CHECK(logits_of(adapter, ids) == ref);
  auto prefix = trainer::clone_model(base);
  peft::attach_prefix(prefix, 3, 3);
  CHECK(logits_of(prefix, ids) != ref);
}

TEST_CASE("prefix size is matched to the navigation layer") {
  model::ModelConfig cfg;
  cfg.vocab_size = 499;
  for (const auto kind : {gnn::Kind::sage, gnn::Kind::gcn}) {
    const auto target = static_cast<double>(gnn::GnnParams::expected_count(kind, cfg.d_model));
    const auto n = peft::matched_prefix_tokens(cfg, kind);
    const double per_token = 2.0 * static_cast<double>(cfg.n_layers * cfg.d_model);
    CHECK(std::abs(n * per_token - target) <= std::abs((n + 1) * per_token - target));
    CHECK(std::abs(n * per_token - target) <= std::abs((n - 1) * per_token - target));
    model::Model m;
    m.config = cfg;
    m.backbone = model::TransformerParams::init(cfg, 0);
    peft::attach_prefix(m, n, 0);
    std::size_t count = 0;
    for (const auto& [name, t] : m.attachment_parameters()) count += t.numel();
    CHECK(count == static_cast<std::size_t>(n * per_token));
  }
  CHECK(peft::matched_prefix_tokens(cfg, gnn::Kind::sage) == 16);
}

TEST_CASE("navigation training leaves the backbone bitwise unchanged") {
  const auto base = small_model();
  const auto before = trainer::parameter_hash(base.backbone.named());
  const auto out = trainer::train(base, small_task(), tasks::bundled_tokenizer(), quick(model::Method::gnnavi));
  CHECK(trainer::parameter_hash(base.backbone.named()) == before);
  CHECK(trainer::parameter_hash(out.model.backbone.named()) == before);
  REQUIRE(out.gnn.has_value());
  CHECK(out.result.trainable_param_count == out.gnn->parameter_count());
  CHECK(out.result.optimizer_steps > 0);
  CHECK(!out.model.lora);
  CHECK(!out.model.prefix);
  CHECK(!out.model.adapter);
}

TEST_CASE("full fine-tuning changes the backbone but not the caller's copy") {
  const auto base = small_model();
  const auto before = trainer::parameter_hash(base.backbone.named());
  const auto out = trainer::train(base, small_task(), tasks::bundled_tokenizer(), quick(model::Method::fpft));
  CHECK(trainer::parameter_hash(base.backbone.named()) == before);
  CHECK(trainer::parameter_hash(out.model.backbone.named()) != before);
  CHECK(out.result.trainable_param_count == model::count_parameters(model::trainable_mask(base, nullptr, model::Method::fpft)));
}

TEST_CASE("in-context baseline makes no updates and matches direct evaluation") {
  const auto base = small_model();
  const auto task = small_task();
  const auto tok = tasks::bundled_tokenizer();
  const auto cfg = quick(model::Method::icl);
  const auto out = trainer::train(base, task, tok, cfg);
  CHECK(out.result.optimizer_steps == 0);
  CHECK(out.result.best_epoch == 0);
  CHECK(out.result.trainable_param_count == 0);
  CHECK(trainer::parameter_hash(out.model.named_parameters()) == trainer::parameter_hash(base.named_parameters()));
  const auto split = tasks::make_protocol_split(task, cfg.k_per_class, cfg.validation_size, cfg.seed);
  const auto verb = Verbalizer::build(task.label_words, tok);
  const auto test = trainer::prepare_examples(split.test, split.demos, task.prompt, verb, tok, cfg.paths);
  CHECK(out.result.test_accuracy == trainer::evaluate(base, nullptr, cfg.gnn, test, verb));
}

TEST_CASE("best checkpoint, early stopping and reported accuracy agree") {
  const auto base = small_model();
  const auto task = small_task();
  const auto tok = tasks::bundled_tokenizer();
  auto cfg = quick(model::Method::gnnavi);
  cfg.max_epochs = 8;
  cfg.early_stop_patience = 1;
  const auto out = trainer::train(base, task, tok, cfg);
  const auto& r = out.result;
  REQUIRE(!r.history.empty());
  CHECK(r.best_epoch >= 1);
  CHECK(r.history.size() == std::min<std::size_t>(cfg.max_epochs, r.best_epoch + cfg.early_stop_patience));
  // The best epoch is the first one reaching the maximum validation accuracy.
  double best = -1;
  std::size_t best_epoch = 0;
  for (const auto& e : r.history)
    if (e.validation_accuracy > best) {
      best = e.validation_accuracy;
      best_epoch = e.epoch;
    }
  CHECK(r.best_epoch == best_epoch);
  CHECK(r.best_validation_accuracy == best);
  for (std::size_t i = 0; i < r.history.size(); ++i) CHECK(r.history[i].epoch == i + 1);

  const auto split = tasks::make_protocol_split(task, cfg.k_per_class, cfg.validation_size, cfg.seed);
  const auto verb = Verbalizer::build(task.label_words, tok);
  const auto test = trainer::prepare_examples(split.test, split.demos, task.prompt, verb, tok, cfg.paths);
  CHECK(trainer::evaluate(out.model, &*out.gnn, cfg.gnn, test, verb) == r.test_accuracy);
  // One optimizer step per training example per epoch at batch size 1.
  CHECK(r.optimizer_steps == r.history.size() * cfg.k_per_class * task.n_classes());
}

TEST_CASE("training is deterministic and parallel seeds equal serial seeds") {
  const auto base = small_model();
  const auto task = small_task();
  const auto tok = tasks::bundled_tokenizer();
  const auto cfg = quick(model::Method::gnnavi);
  const std::vector<std::uint64_t> seeds{0, 42, 312};
  const auto serial = trainer::run_seeds(base, task, tok, cfg, seeds, 1);
  const auto parallel = trainer::run_seeds(base, task, tok, cfg, seeds, 3);
  REQUIRE(serial.size() == 3);
  REQUIRE(parallel.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(serial[i].seed == seeds[i]);
    CHECK(without_wall_time(serial[i]) == without_wall_time(parallel[i]));
  }
}

TEST_CASE("run results round-trip through JSON") {
  trainer::RunResult r;
  r.method = "gnnavi";
  r.task = "keyword_sentiment";
  r.k_per_class = 5;
  r.seed = 42;
  r.best_validation_accuracy = 0.875;
  r.best_epoch = 3;
  r.test_accuracy = 0.1 + 0.2;
  r.history = {{1, 0.7, 0.5}, {2, 0.3, 0.875}};
  r.trainable_param_count = 8256;
  r.optimizer_steps = 20;
  r.wall_time_seconds = 1.5;
  const auto back = trainer::RunResult::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back.to_json() == r.to_json());
  CHECK(back.test_accuracy == r.test_accuracy);
}

TEST_CASE("leaderboard rows") {
  const auto path = std::filesystem::temp_directory_path() / "flownav_leaderboard.csv";
  std::filesystem::remove(path);
  trainer::RunResult r;
  r.method = "gnnavi";
  r.task = "t";
  r.k_per_class = 5;
  r.test_accuracy = 0.5;
  trainer::append_leaderboard(path, r);
  trainer::append_leaderboard(path, r);
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == trainer::kLeaderboardHeader);
  CHECK(lines[1] == lines[2]);
  CHECK(lines[1].rfind("gnnavi,t,5,0,", 0) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("pretraining learning-rate schedule") {
  trainer::PretrainConfig p;
  p.steps = 1000;
  p.warmup_steps = 100;
  p.learning_rate = 3e-3;
  CHECK(trainer::pretrain_learning_rate(p, 1) == doctest::Approx(3e-5));
  CHECK(trainer::pretrain_learning_rate(p, 100) == doctest::Approx(3e-3));
  CHECK(trainer::pretrain_learning_rate(p, 1000) == doctest::Approx(3e-4));
  double prev = trainer::pretrain_learning_rate(p, 100);
  for (std::size_t s = 101; s <= 1000; ++s) {
    const double lr = trainer::pretrain_learning_rate(p, s);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("zero pretraining steps return the initialization") {
  const auto cfg = small_config();
  trainer::PretrainConfig p;
  p.steps = 0;
  p.seed = 6;
  const auto out = trainer::pretrain_backbone(cfg, {}, p);
  CHECK(trainer::parameter_hash(out.params.named()) ==
        trainer::parameter_hash(model::TransformerParams::init(cfg, 6).named()));
  CHECK(out.step_loss.empty());
}

TEST_CASE("pretraining lowers held-out perplexity") {
  auto cfg = small_config();
  const auto tok = tasks::bundled_tokenizer();
  const auto corpus = tasks::make_pretraining_corpus(tok, 400, 1);
  const auto held_out = tasks::make_pretraining_corpus(tok, 20, 99);
  trainer::PretrainConfig p;
  p.steps = 200;
  p.batch_streams = 4;
  p.warmup_steps = 20;
  p.seed = 2;
  model::Model probe;
  probe.config = cfg;
  std::vector<double> ppl;
  probe.backbone = model::TransformerParams::init(cfg, p.seed);
  ppl.push_back(trainer::perplexity(probe, held_out));
  const auto out = trainer::pretrain_backbone(cfg, corpus, p, [&](std::size_t step, const model::TransformerParams& params) {
    if (step % 50 != 0) return;
    probe.backbone = params;
    ppl.push_back(trainer::perplexity(probe, held_out));
  });
  REQUIRE(ppl.size() == 5);
  for (std::size_t i = 1; i < ppl.size(); ++i) CHECK(ppl[i] < ppl[i - 1]);
  // Untrained perplexity is near the vocabulary size.
  CHECK(ppl.front() > 0.5 * static_cast<double>(cfg.vocab_size));
  CHECK(ppl.back() < 0.5 * ppl.front());
  CHECK(out.step_loss.size() == 200);
  for (const auto l : out.step_loss) CHECK(std::isfinite(l));
}
