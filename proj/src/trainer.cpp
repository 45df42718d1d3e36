#include "flownav/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <numbers>
#include <random>
#include <thread>

#include "flownav/errors.hpp"
#include "flownav/peft.hpp"

namespace flownav::trainer {

namespace {

constexpr std::uint64_t kGnnStream = 0x6a09e667f3bcc908ULL;
constexpr std::uint64_t kAttachStream = 0xbb67ae8584caa73bULL;
constexpr std::uint64_t kOrderStream = 0x3c6ef372fe94f82bULL;

ad::Tensor copy_of(const ad::Tensor& t) { return t.defined() ? t.clone() : ad::Tensor{}; }

model::Linear copy_of(const model::Linear& l) { return {copy_of(l.weight), copy_of(l.bias)}; }

void copy_values(const ad::Tensor& from, ad::Tensor to) {
  std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
}

bool all_finite(const ad::Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

// Forward state for one example: either the full prompt or, when the
// backbone is frozen below the navigation layer, its cached hidden states.
struct Runner {
  const model::Model& m;
  const gnn::GnnParams* gnn_params;
  gnn::GnnConfig gnn_cfg;
  bool cached;

  ad::Tensor logits(const PreparedExample& ex, const ad::Tensor* cache) const {
    model::GnnHook hook{gnn_params, &ex.graph, gnn_cfg};
    const auto* h = gnn_params ? &hook : nullptr;
    if (cached) return model::forward_from(m, *cache, m.config.gnn_insert_layer, h).logits;
    return model::forward(m, ex.layout.token_ids, h).logits;
  }
};

std::vector<ad::Tensor> encode_all(const model::Model& m, const std::vector<PreparedExample>& xs) {
  std::vector<ad::Tensor> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(model::encode_through(m, x.layout.token_ids, m.config.gnn_insert_layer));
  return out;
}

double accuracy(const Runner& run, const std::vector<PreparedExample>& xs, const std::vector<ad::Tensor>& cache,
                const Verbalizer& verbalizer) {
  if (xs.empty()) throw PreconditionError("evaluate: empty split");
  ad::NoGradGuard no_grad;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto logits = run.logits(xs[i], run.cached ? &cache[i] : nullptr);
    if (model::predict_label(logits.data(), verbalizer) == xs[i].class_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(xs.size());
}

double next_token_loss(const model::Model& m, std::span<const TokenId> stream) {
  model::ForwardOptions opts;
  opts.all_logits = true;
  const auto n = stream.size();
  const auto art = model::forward(m, stream, nullptr, opts);
  std::vector<std::size_t> rows(n - 1);
  std::iota(rows.begin(), rows.end(), 0);
  const auto logits = ad::gather_rows(art.all_logits, rows);
  return ad::cross_entropy_rows(logits, stream.subspan(1)).item();
}

}  // namespace

TrainConfig TrainConfig::defaults_for(model::Method method) {
  TrainConfig c;
  c.method = method;
  switch (method) {
    case model::Method::gnnavi:
    case model::Method::prefix:
    case model::Method::icl:
      c.learning_rate = 1e-2;
      c.optimizer = optim::Kind::adam;
      break;
    case model::Method::lora:
      c.learning_rate = 5e-4;
      c.optimizer = optim::Kind::adamw;
      break;
    case model::Method::adapter:
    case model::Method::fpft:
      c.learning_rate = 5e-5;
      c.optimizer = optim::Kind::adamw;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (early_stop_patience > max_epochs) throw ConfigError("early_stop_patience exceeds max_epochs");
  if (batch_size != 1) throw ConfigError("batch_size must be 1");
  if (k_per_class == 0) throw ConfigError("k_per_class must be at least 1");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
}

nlohmann::json RunResult::to_json() const {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : history)
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_accuracy", e.validation_accuracy}});
  return {{"method", method},
          {"task", task},
          {"k_per_class", k_per_class},
          {"seed", seed},
          {"best_validation_accuracy", best_validation_accuracy},
          {"best_epoch", best_epoch},
          {"test_accuracy", test_accuracy},
          {"history", hist},
          {"trainable_param_count", trainable_param_count},
          {"optimizer_steps", optimizer_steps},
          {"wall_time_seconds", wall_time_seconds}};
}

RunResult RunResult::from_json(const nlohmann::json& j) {
  RunResult r;
  try {
    r.method = j.at("method").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.k_per_class = j.at("k_per_class").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.best_validation_accuracy = j.at("best_validation_accuracy").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    for (const auto& e : j.at("history"))
      r.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                           e.at("validation_accuracy").get<double>()});
    r.trainable_param_count = j.at("trainable_param_count").get<std::size_t>();
    r.optimizer_steps = j.value("optimizer_steps", std::size_t{0});
    r.wall_time_seconds = j.at("wall_time_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed run result: ") + e.what());
  }
  return r;
}

std::vector<PreparedExample> prepare_examples(const std::vector<tasks::LabeledExample>& examples,
                                              const std::vector<tasks::LabeledExample>& demos,
                                              const PromptTemplate& tmpl, const Verbalizer& verbalizer,
                                              const Tokenizer& tokenizer, const PathConfig& paths) {
  std::vector<Demonstration> ds;
  for (const auto& d : demos) ds.push_back({d.text, d.class_id});
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& x : examples) {
    PreparedExample p;
    p.layout = build_prompt(tmpl, ds, x.text, verbalizer, tokenizer);
    p.graph = build_graph(p.layout, paths);
    p.class_id = x.class_id;
    out.push_back(std::move(p));
  }
  return out;
}

model::Model clone_model(const model::Model& m) {
  model::Model c;
  c.config = m.config;
  const auto& b = m.backbone;
  auto& o = c.backbone;
  o.token_embedding = copy_of(b.token_embedding);
  o.position_embedding = copy_of(b.position_embedding);
  for (const auto& l : b.layers) {
    o.layers.push_back({copy_of(l.ln1_gamma), copy_of(l.ln1_beta), copy_of(l.query), copy_of(l.key), copy_of(l.value),
                        copy_of(l.output), copy_of(l.ln2_gamma), copy_of(l.ln2_beta), copy_of(l.fc), copy_of(l.proj)});
  }
  o.lnf_gamma = copy_of(b.lnf_gamma);
  o.lnf_beta = copy_of(b.lnf_beta);
  o.lm_head = copy_of(b.lm_head);
  if (m.lora) {
    model::LoraParams lp{m.lora->rank, m.lora->alpha, {}};
    for (const auto& l : m.lora->layers) lp.layers.push_back({copy_of(l.q_a), copy_of(l.q_b), copy_of(l.v_a), copy_of(l.v_b)});
    c.lora = std::move(lp);
  }
  if (m.prefix) {
    model::PrefixParams pp{m.prefix->n_virtual, {}};
    for (const auto& l : m.prefix->layers) pp.layers.push_back({copy_of(l.keys), copy_of(l.values)});
    c.prefix = std::move(pp);
  }
  if (m.adapter) {
    model::AdapterParams ap{m.adapter->bottleneck, {}};
    for (const auto& l : m.adapter->layers) ap.layers.push_back({copy_of(l.down), copy_of(l.up)});
    c.adapter = std::move(ap);
  }
  return c;
}

std::uint64_t parameter_hash(const std::vector<model::NamedTensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    for (const auto d : t.shape()) mix(&d, sizeof(d));
    mix(t.data().data(), t.numel() * sizeof(double));
  }
  return h;
}

double evaluate(const model::Model& m, const gnn::GnnParams* gnn_params, const gnn::GnnConfig& gnn_cfg,
                const std::vector<PreparedExample>& examples, const Verbalizer& verbalizer) {
  const Runner run{m, gnn_params, gnn_cfg, false};
  return accuracy(run, examples, {}, verbalizer);
}

TrainOutput train(const model::Model& pretrained, const tasks::TaskSpec& task, const Tokenizer& tokenizer,
                  const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = tasks::make_protocol_split(task, cfg.k_per_class, cfg.validation_size, cfg.seed, cfg.demo_order_seed);
  const auto verbalizer = Verbalizer::build(task.label_words, tokenizer);
  const auto train_set = prepare_examples(split.train, split.demos, task.prompt, verbalizer, tokenizer, cfg.paths);
  const auto val_set = prepare_examples(split.validation, split.demos, task.prompt, verbalizer, tokenizer, cfg.paths);
  const auto test_set = prepare_examples(split.test, split.demos, task.prompt, verbalizer, tokenizer, cfg.paths);
  if (val_set.empty() || test_set.empty()) throw InsufficientDataError("validation and test splits must be non-empty");

  TrainOutput out;
  out.model = clone_model(pretrained);
  auto& m = out.model;
  for (auto& [name, t] : m.named_parameters()) t.set_requires_grad(false);

  const auto method = cfg.method;
  switch (method) {
    case model::Method::gnnavi: {
      std::mt19937_64 rng(cfg.seed ^ kGnnStream);
      auto gp = gnn::GnnParams::init(cfg.gnn.kind, m.config.d_model, rng);
      out.gnn = std::move(gp);
      break;
    }
    case model::Method::lora: peft::attach_lora(m, cfg.lora_rank, cfg.lora_alpha, cfg.seed ^ kAttachStream); break;
    case model::Method::prefix: {
      const auto p = cfg.prefix_tokens ? cfg.prefix_tokens : peft::matched_prefix_tokens(m.config, cfg.gnn.kind);
      peft::attach_prefix(m, p, cfg.seed ^ kAttachStream);
      break;
    }
    case model::Method::adapter: peft::attach_adapter(m, cfg.adapter_bottleneck, cfg.seed ^ kAttachStream); break;
    case model::Method::fpft:
    case model::Method::icl: break;
  }
  const gnn::GnnParams* gp = out.gnn ? &*out.gnn : nullptr;
  const auto trainable = model::trainable_mask(m, gp, method);
  for (auto t : trainable) t.set_requires_grad(true);

  // Below the navigation layer nothing trains, so those activations are fixed.
  const bool cached = method == model::Method::gnnavi;
  const Runner run{m, gp, cfg.gnn, cached};
  std::vector<ad::Tensor> train_cache, val_cache, test_cache;
  if (cached) {
    train_cache = encode_all(m, train_set);
    val_cache = encode_all(m, val_set);
    test_cache = encode_all(m, test_set);
  }

  RunResult& r = out.result;
  r.method = std::string(model::to_string(method));
  r.task = task.name;
  r.k_per_class = cfg.k_per_class;
  r.seed = cfg.seed;
  r.trainable_param_count = model::count_parameters(trainable);

  if (method == model::Method::icl) {
    r.best_validation_accuracy = accuracy(run, val_set, val_cache, verbalizer);
    r.test_accuracy = accuracy(run, test_set, test_cache, verbalizer);
    r.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  optim::Adam opt(trainable, {cfg.optimizer, cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 order_rng(cfg.seed ^ kOrderStream);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<ad::Tensor> best;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < order.size(); ++s) {
      const auto i = order[s];
      ad::Tape tape;
      ad::TapeScope scope(tape);
      const auto logits = run.logits(train_set[i], cached ? &train_cache[i] : nullptr);
      const auto loss = ad::cross_entropy(logits, verbalizer.first_subtoken[static_cast<std::size_t>(train_set[i].class_id)]);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(s + 1) +
                           " (global step " + std::to_string(opt.steps() + 1) + ")");
      }
      loss_sum += loss.item();
      // An empty graph leaves no trainable parameter on the loss path.
      if (!loss.requires_grad()) continue;
      ad::backward(loss);
      optim::clip_grad_norm(trainable, cfg.grad_clip);
      opt.step();
      opt.zero_grad();
      for (const auto& t : trainable) {
        if (!all_finite(t)) {
          throw NumericError("non-finite parameters after epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(s + 1));
        }
      }
    }
    const double val = accuracy(run, val_set, val_cache, verbalizer);
    r.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val});
    if (val > best_acc) {
      best_acc = val;
      r.best_epoch = epoch;
      best.clear();
      for (const auto& t : trainable) best.push_back(t.clone());
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < best.size(); ++i) copy_values(best[i], trainable[i]);
  for (auto t : trainable) t.set_requires_grad(false);
  r.optimizer_steps = opt.steps();
  r.best_validation_accuracy = std::max(best_acc, 0.0);
  r.test_accuracy = accuracy(run, test_set, test_cache, verbalizer);
  r.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

double pretrain_learning_rate(const PretrainConfig& pcfg, std::size_t step) {
  if (step <= pcfg.warmup_steps) return pcfg.learning_rate * static_cast<double>(step) / static_cast<double>(pcfg.warmup_steps);
  const double span = static_cast<double>(std::max<std::size_t>(pcfg.steps, pcfg.warmup_steps + 1) - pcfg.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - pcfg.warmup_steps) / span);
  return pcfg.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
}

PretrainResult pretrain_backbone(const model::ModelConfig& cfg, const std::vector<std::vector<TokenId>>& corpus,
                                 const PretrainConfig& pcfg, const PretrainCallback& callback) {
  cfg.validate();
  if (corpus.empty() && pcfg.steps > 0) throw DataError("pretraining corpus is empty");
  if (pcfg.batch_streams == 0) throw ConfigError("batch_streams must be at least 1");
  model::Model m;
  m.config = cfg;
  m.backbone = model::TransformerParams::init(cfg, pcfg.seed);
  PretrainResult out;
  if (pcfg.steps == 0) {
    out.params = std::move(m.backbone);
    return out;
  }
  std::vector<ad::Tensor> params;
  for (auto& [name, t] : m.backbone.named()) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  optim::Adam opt(params, {optim::Kind::adamw, pcfg.learning_rate, 0.9, 0.999, 1e-8, pcfg.weight_decay});
  std::mt19937_64 rng(pcfg.seed ^ kOrderStream);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  const double inv_batch = 1.0 / static_cast<double>(pcfg.batch_streams);
  for (std::size_t step = 1; step <= pcfg.steps; ++step) {
    opt.set_learning_rate(pretrain_learning_rate(pcfg, step));
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < pcfg.batch_streams; ++b) {
      const auto& full = corpus[pick(rng)];
      const auto n = std::min(full.size(), cfg.max_seq_len);
      if (n < 2) continue;
      const std::span<const TokenId> stream(full.data(), n);
      ad::Tape tape;
      ad::TapeScope scope(tape);
      model::ForwardOptions opts;
      opts.all_logits = true;
      const auto art = model::forward(m, stream, nullptr, opts);
      std::vector<std::size_t> rows(n - 1);
      std::iota(rows.begin(), rows.end(), 0);
      const auto loss = ad::cross_entropy_rows(ad::gather_rows(art.all_logits, rows), stream.subspan(1));
      if (!std::isfinite(loss.item())) throw NumericError("non-finite pretraining loss at step " + std::to_string(step));
      batch_loss += loss.item() * inv_batch;
      ad::backward(ad::scale(loss, inv_batch));
    }
    optim::clip_grad_norm(params, pcfg.grad_clip);
    opt.step();
    opt.zero_grad();
    out.step_loss.push_back(batch_loss);
    if (callback) callback(step, m.backbone);
  }
  for (auto& t : params) t.set_requires_grad(false);
  out.params = std::move(m.backbone);
  return out;
}

double perplexity(const model::Model& m, const std::vector<std::vector<TokenId>>& streams) {
  ad::NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : streams) {
    const auto n = std::min(s.size(), m.config.max_seq_len);
    if (n < 2) continue;
    total += next_token_loss(m, std::span<const TokenId>(s.data(), n)) * static_cast<double>(n - 1);
    count += n - 1;
  }
  if (count == 0) throw DegenerateError("perplexity: no predictable tokens");
  return std::exp(total / static_cast<double>(count));
}

SeedSummary summarize(const std::vector<double>& values) {
  SeedSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double sq = 0.0;
    for (const double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stdev = std::sqrt(sq / static_cast<double>(s.n - 1));
  }
  return s;
}

std::vector<RunResult> run_seeds(const model::Model& pretrained, const tasks::TaskSpec& task,
                                 const Tokenizer& tokenizer, const TrainConfig& cfg,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  std::vector<RunResult> results(seeds.size());
  auto one = [&](std::size_t i) {
    auto c = cfg;
    c.seed = seeds[i];
    results[i] = train(pretrained, task, tokenizer, c).result;
  };
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, seeds.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) one(i);
    return results;
  }
  // Workers only read the shared pretrained model; train() clones it first.
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < seeds.size(); i = next++) {
        try {
          one(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

void append_leaderboard(const std::filesystem::path& csv, const RunResult& r) {
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  std::ofstream out(csv, std::ios::app);
  if (!out) throw DataError("cannot append to " + csv.string());
  if (fresh) out << kLeaderboardHeader << '\n';
  char acc[32], wall[32];
  std::snprintf(acc, sizeof(acc), "%.6f", r.test_accuracy);
  std::snprintf(wall, sizeof(wall), "%.3f", r.wall_time_seconds);
  out << r.method << ',' << r.task << ',' << r.k_per_class << ',' << r.seed << ',' << acc << ','
      << r.trainable_param_count << ',' << wall << '\n';
}

}  // namespace flownav::trainer
