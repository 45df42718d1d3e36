#include "flownav/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "flownav/checkpoint.hpp"
#include "flownav/errors.hpp"
#include "flownav/flowprobe.hpp"

namespace flownav::cli {

namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

fs::path relative_to(const fs::path& manifest, const std::string& value) {
  const fs::path p(value);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// The run directory always starts with the manifest exactly as read.
void prepare_run_dir(const RunSetup& s, const CommonOptions& opts) {
  fs::create_directories(s.run_dir);
  write_text(s.run_dir / "manifest.txt", s.manifest.text());
  if (!opts.overrides.empty() || opts.seed) {
    std::ostringstream o;
    for (const auto& kv : opts.overrides) o << kv << '\n';
    if (opts.seed) o << "seed=" << *opts.seed << '\n';
    write_text(s.run_dir / "overrides.txt", o.str());
  }
}

std::vector<std::uint64_t> parse_seeds(const KeyValueFile& kv) {
  std::vector<std::uint64_t> out;
  if (const auto list = kv.get_list("seeds")) {
    for (const auto& s : *list) {
      try {
        std::size_t used = 0;
        out.push_back(std::stoull(s, &used));
        if (used != s.size()) throw std::invalid_argument(s);
      } catch (const std::logic_error&) {
        kv.fail("seeds", "expected unsigned integers, got '" + s + "'");
      }
    }
    if (out.empty()) kv.fail("seeds", "empty seed list");
    return out;
  }
  if (const auto s = kv.get_size("seed")) return {*s};
  return {tasks::kSeedPool.begin(), tasks::kSeedPool.begin() + 5};
}

std::map<std::string, std::string> run_metadata(const RunSetup& s, std::uint64_t seed) {
  const auto& t = s.train;
  std::map<std::string, std::string> out = {
      {"task", s.task.name},
      {"method", std::string(model::to_string(t.method))},
      {"seed", std::to_string(seed)},
      {"k_per_class", std::to_string(t.k_per_class)},
      {"validation_size", std::to_string(t.validation_size)},
      {"gnn.activation", std::string(gnn::to_string(t.gnn.activation))},
      {"gnn.update", std::string(gnn::to_string(t.gnn.update_mode))},
      {"paths.aggregation", t.paths.include_aggregation ? "1" : "0"},
      {"paths.distribution", t.paths.include_distribution ? "1" : "0"}};
  if (t.demo_order_seed) out["demo_order_seed"] = std::to_string(*t.demo_order_seed);
  return out;
}

std::optional<std::uint64_t> demo_order_of(const Checkpoint& c) {
  const auto it = c.metadata.find("demo_order_seed");
  if (it == c.metadata.end()) return std::nullopt;
  return std::stoull(it->second);
}

const std::string& meta(const Checkpoint& c, const std::string& key) {
  const auto it = c.metadata.find(key);
  if (it == c.metadata.end()) throw DataError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

std::vector<trainer::RunResult> collect_results(const fs::path& dir) {
  std::vector<std::pair<fs::path, trainer::RunResult>> found;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() != "result.json") continue;
    std::ifstream in(e.path());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& err) {
      throw DataError(e.path().string() + ": " + err.what());
    }
    found.emplace_back(e.path(), trainer::RunResult::from_json(j));
  }
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<trainer::RunResult> out;
  for (auto& [p, r] : found) out.push_back(std::move(r));
  return out;
}

// Enum-valued keys report failures at the manifest line that set them.
template <class Parse>
auto parse_key(const KeyValueFile& kv, const std::string& key, const std::string& value, Parse parse) {
  try {
    return parse(value);
  } catch (const ConfigError& e) {
    kv.fail(key, e.what());
  }
}

}  // namespace

const std::vector<std::string>& manifest_keys() {
  static const std::vector<std::string> keys = {
      "task", "synthetic_size", "synthetic_seed", "checkpoint",
      "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "gnn_insert_layer",
      "pretrain_steps", "pretrain_batch", "pretrain_streams", "pretrain_lr", "pretrain_warmup", "pretrain_weight_decay",
      "pretrain_seed",
      "method", "learning_rate", "optimizer", "weight_decay", "max_epochs", "early_stop_patience", "k_per_class",
      "batch_size", "validation_size", "grad_clip", "demo_order_seed",
      "gnn_kind", "gnn_activation", "gnn_update", "include_aggregation", "include_distribution",
      "lora_rank", "lora_alpha", "prefix_tokens", "adapter_bottleneck",
      "seed", "seeds", "positions", "probe_prompts", "out", "run_id"};
  return keys;
}

fs::path output_root(const CommonOptions& opts) {
  if (opts.out) return *opts.out;
  if (const char* env = std::getenv("FLOWNAV_OUT"); env && *env) return env;
  return "runs";
}

RunSetup resolve(const CommonOptions& opts, const std::string& command) {
  RunSetup s;
  s.manifest_path = opts.manifest;
  s.manifest = KeyValueFile::load(opts.manifest);
  auto& kv = s.manifest;
  for (const auto& o : opts.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (opts.seed) kv.set("seeds", std::to_string(*opts.seed));
  for (const auto& k : kv.unknown_keys(manifest_keys())) kv.fail(k, "unknown manifest key");

  // Task and tokenizer.
  const auto task_ref = kv.get("task");
  if (!task_ref) throw ConfigError(opts.manifest.string() + ": missing required key 'task'");
  std::optional<tasks::SyntheticKind> kind;
  try {
    kind = tasks::parse_synthetic_kind(*task_ref);
  } catch (const ConfigError&) {
  }
  if (kind) {
    s.task = tasks::make_synthetic(*kind, kv.get_size("synthetic_size").value_or(250),
                                   kv.get_size("synthetic_seed").value_or(1234));
  } else {
    const auto path = relative_to(opts.manifest, *task_ref);
    if (!fs::exists(path)) kv.fail("task", "neither a synthetic task name nor an existing task manifest: " + path.string());
    s.task = tasks::load_task_manifest(path);
  }
  s.tokenizer = s.task.vocab_path.empty() ? tasks::bundled_tokenizer() : Tokenizer::load(s.task.vocab_path);

  // Backbone.
  if (const auto c = kv.get("checkpoint")) {
    s.checkpoint = relative_to(opts.manifest, *c);
    if (!fs::exists(*s.checkpoint)) kv.fail("checkpoint", "no such file " + s.checkpoint->string());
  }
  auto& mc = s.model_config;
  mc.n_layers = kv.get_size("n_layers").value_or(mc.n_layers);
  mc.n_heads = kv.get_size("n_heads").value_or(mc.n_heads);
  mc.d_model = kv.get_size("d_model").value_or(mc.d_model);
  mc.d_ff = kv.get_size("d_ff").value_or(mc.d_ff);
  mc.max_seq_len = kv.get_size("max_seq_len").value_or(mc.max_seq_len);
  mc.vocab_size = s.tokenizer.size();
  mc.gnn_insert_layer = kv.get_size("gnn_insert_layer").value_or(model::ModelConfig::default_insert_layer(mc.n_layers));
  try {
    mc.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(opts.manifest.string() + ": " + e.what());
  }

  auto& p = s.pretrain;
  p.steps = kv.get_size("pretrain_steps").value_or(p.steps);
  p.batch_streams = kv.get_size("pretrain_batch").value_or(p.batch_streams);
  p.corpus_streams = kv.get_size("pretrain_streams").value_or(p.corpus_streams);
  p.learning_rate = kv.get_double("pretrain_lr").value_or(p.learning_rate);
  p.warmup_steps = kv.get_size("pretrain_warmup").value_or(p.warmup_steps);
  p.weight_decay = kv.get_double("pretrain_weight_decay").value_or(p.weight_decay);
  p.seed = kv.get_size("pretrain_seed").value_or(p.seed);

  // Training: method defaults first, then explicit keys.
  const auto method = parse_key(kv, "method", kv.get("method").value_or("gnnavi"), model::parse_method);
  auto& t = s.train;
  t = trainer::TrainConfig::defaults_for(method);
  t.learning_rate = kv.get_double("learning_rate").value_or(t.learning_rate);
  if (const auto o = kv.get("optimizer")) t.optimizer = parse_key(kv, "optimizer", *o, optim::parse_kind);
  t.weight_decay = kv.get_double("weight_decay").value_or(t.weight_decay);
  t.max_epochs = kv.get_size("max_epochs").value_or(t.max_epochs);
  t.early_stop_patience = kv.get_size("early_stop_patience").value_or(t.early_stop_patience);
  t.k_per_class = kv.get_size("k_per_class").value_or(t.k_per_class);
  t.batch_size = kv.get_size("batch_size").value_or(t.batch_size);
  t.validation_size = kv.get_size("validation_size").value_or(t.validation_size);
  t.grad_clip = kv.get_double("grad_clip").value_or(t.grad_clip);
  if (const auto v = kv.get_size("demo_order_seed")) t.demo_order_seed = *v;
  if (const auto v = kv.get("gnn_kind")) t.gnn.kind = parse_key(kv, "gnn_kind", *v, gnn::parse_kind);
  if (const auto v = kv.get("gnn_activation")) t.gnn.activation = parse_key(kv, "gnn_activation", *v, gnn::parse_activation);
  if (const auto v = kv.get("gnn_update")) t.gnn.update_mode = parse_key(kv, "gnn_update", *v, gnn::parse_update_mode);
  t.paths.include_aggregation = kv.get_bool("include_aggregation").value_or(true);
  t.paths.include_distribution = kv.get_bool("include_distribution").value_or(true);
  t.lora_rank = kv.get_size("lora_rank").value_or(t.lora_rank);
  t.lora_alpha = kv.get_double("lora_alpha").value_or(t.lora_alpha);
  t.prefix_tokens = kv.get_size("prefix_tokens").value_or(t.prefix_tokens);
  t.adapter_bottleneck = kv.get_size("adapter_bottleneck").value_or(t.adapter_bottleneck);
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(opts.manifest.string() + ": " + e.what());
  }

  s.seeds = parse_seeds(kv);
  t.seed = s.seeds.front();
  if (const auto list = kv.get_list("positions")) {
    for (const auto& v : *list) {
      std::size_t pos = 0;
      try {
        pos = std::stoul(v);
      } catch (const std::logic_error&) {
        kv.fail("positions", "expected layer indices, got '" + v + "'");
      }
      if (pos >= mc.n_layers) kv.fail("positions", "layer " + v + " outside [0, " + std::to_string(mc.n_layers) + ")");
      s.positions.push_back(pos);
    }
  } else {
    for (std::size_t l = 0; l < mc.n_layers; ++l) s.positions.push_back(l);
  }
  s.probe_prompts = kv.get_size("probe_prompts").value_or(s.probe_prompts);

  CommonOptions o = opts;
  if (!o.out) {
    if (const auto v = kv.get("out")) o.out = relative_to(opts.manifest, *v);
  }
  std::string id;
  if (opts.run_id) id = *opts.run_id;
  else if (const auto v = kv.get("run_id")) id = *v;
  else {
    std::string key = kv.text();
    for (const auto& ov : opts.overrides) key += "\n" + ov;
    if (opts.seed) key += "\nseed=" + std::to_string(*opts.seed);
    id = command + "-" + s.task.name + "-" + hex64(fnv(key)).substr(0, 8);
  }
  s.run_dir = output_root(o) / id;
  return s;
}

model::Model load_backbone(const RunSetup& s) {
  model::Model m;
  if (s.checkpoint) {
    m = model_from_checkpoint(load_checkpoint(*s.checkpoint));
    m.lora.reset();
    m.prefix.reset();
    m.adapter.reset();
    if (m.config.vocab_size != s.tokenizer.size()) {
      throw ConfigError("checkpoint vocabulary of " + std::to_string(m.config.vocab_size) + " does not match the task's " +
                        std::to_string(s.tokenizer.size()));
    }
    if (s.manifest.has("gnn_insert_layer")) m.config.gnn_insert_layer = s.model_config.gnn_insert_layer;
    m.config.validate();
    return m;
  }
  const auto corpus = tasks::make_pretraining_corpus(s.tokenizer, s.pretrain.corpus_streams, s.pretrain.seed);
  m.config = s.model_config;
  m.backbone = trainer::pretrain_backbone(s.model_config, corpus, s.pretrain).params;
  return m;
}

fs::path cmd_pretrain(const CommonOptions& opts, std::ostream& log) {
  auto s = resolve(opts, "pretrain");
  prepare_run_dir(s, opts);
  const auto corpus = tasks::make_pretraining_corpus(s.tokenizer, s.pretrain.corpus_streams, s.pretrain.seed);
  auto res = trainer::pretrain_backbone(s.model_config, corpus, s.pretrain);
  model::Model m;
  m.config = s.model_config;
  m.backbone = std::move(res.params);
  save_checkpoint(s.run_dir / "backbone.ckpt",
                  make_checkpoint(m, nullptr, {{"pretrain.steps", std::to_string(s.pretrain.steps)},
                                               {"pretrain.seed", std::to_string(s.pretrain.seed)}}));
  std::ofstream csv(s.run_dir / "pretrain_loss.csv");
  csv << "step,loss\n";
  for (std::size_t i = 0; i < res.step_loss.size(); ++i) csv << i + 1 << ',' << fmt(res.step_loss[i]) << '\n';
  log << "pretrained " << s.pretrain.steps << " steps -> " << (s.run_dir / "backbone.ckpt").string() << '\n';
  return s.run_dir;
}

fs::path cmd_train(const CommonOptions& opts, std::ostream& log) {
  auto s = resolve(opts, "train");
  const auto backbone = load_backbone(s);
  prepare_run_dir(s, opts);
  // Seeds are independent; run_seeds would discard the trained weights, so
  // train directly and keep each output.
  for (std::size_t i = 0; i < s.seeds.size(); ++i) {
    auto cfg = s.train;
    cfg.seed = s.seeds[i];
    auto out = trainer::train(backbone, s.task, s.tokenizer, cfg);
    const auto dir = s.run_dir / ("seed_" + std::to_string(cfg.seed));
    fs::create_directories(dir);
    write_text(dir / "result.json", out.result.to_json().dump(2) + "\n");
    save_checkpoint(dir / "model.ckpt",
                    make_checkpoint(out.model, out.gnn ? &*out.gnn : nullptr, run_metadata(s, cfg.seed)));
    trainer::append_leaderboard(s.run_dir / "leaderboard.csv", out.result);
    log << out.result.method << " seed " << cfg.seed << ": test accuracy " << out.result.test_accuracy
        << " (best validation " << out.result.best_validation_accuracy << " at epoch " << out.result.best_epoch << ")\n";
  }
  return s.run_dir;
}

double cmd_eval(const CommonOptions& opts, const fs::path& checkpoint, std::ostream& log) {
  auto s = resolve(opts, "eval");
  const auto ckpt = load_checkpoint(checkpoint);
  const auto m = model_from_checkpoint(ckpt);
  const auto gp = gnn_from_checkpoint(ckpt);
  if (meta(ckpt, "task") != s.task.name) {
    throw ConfigError("checkpoint was trained on '" + meta(ckpt, "task") + "', manifest names '" + s.task.name + "'");
  }
  const auto seed = std::stoull(meta(ckpt, "seed"));
  const auto k = std::stoull(meta(ckpt, "k_per_class"));
  const auto val_size = std::stoull(meta(ckpt, "validation_size"));
  gnn::GnnConfig gcfg;
  PathConfig paths{meta(ckpt, "paths.aggregation") == "1", meta(ckpt, "paths.distribution") == "1"};
  if (gp) {
    gcfg.kind = gp->kind;
    gcfg.activation = gnn::parse_activation(meta(ckpt, "gnn.activation"));
    gcfg.update_mode = gnn::parse_update_mode(meta(ckpt, "gnn.update"));
  }
  const auto split = tasks::make_protocol_split(s.task, k, val_size, seed, demo_order_of(ckpt));
  const auto verbalizer = Verbalizer::build(s.task.label_words, s.tokenizer);
  const auto test = trainer::prepare_examples(split.test, split.demos, s.task.prompt, verbalizer, s.tokenizer, paths);
  const double acc = trainer::evaluate(m, gp ? &*gp : nullptr, gcfg, test, verbalizer);
  log << "test accuracy " << fmt(acc) << '\n';
  return acc;
}

fs::path cmd_sweep(const CommonOptions& opts, const std::optional<std::vector<std::size_t>>& positions,
                   std::ostream& log) {
  auto s = resolve(opts, "sweep");
  if (positions) {
    for (const auto p : *positions)
      if (p >= s.model_config.n_layers) throw ConfigError("--positions: layer " + std::to_string(p) + " out of range");
    s.positions = *positions;
  }
  if (s.train.method != model::Method::gnnavi) throw ConfigError("method: sweep requires method = gnnavi");
  const auto backbone = load_backbone(s);
  prepare_run_dir(s, opts);
  const auto rows = probe::position_sweep(backbone, s.task, s.tokenizer, s.train, s.positions, s.seeds, opts.jobs);
  probe::write_sweep_csv(s.run_dir / "sweep.csv", rows);
  for (const auto& r : rows) log << "position " << r.position << ": mean " << r.summary.mean << " ± " << r.summary.stdev << '\n';
  return s.run_dir;
}

fs::path cmd_ablate(const CommonOptions& opts, std::ostream& log) {
  auto s = resolve(opts, "ablate");
  if (s.train.method != model::Method::gnnavi) throw ConfigError("method: ablate requires method = gnnavi");
  const auto backbone = load_backbone(s);
  prepare_run_dir(s, opts);
  const auto rows = probe::path_ablation(backbone, s.task, s.tokenizer, s.train, s.seeds, opts.jobs);
  write_text(s.run_dir / "ablation.json", probe::ablation_json(s.task.name, s.seeds, rows).dump(2) + "\n");
  for (const auto& r : rows) log << r.variant << ": mean " << r.summary.mean << " (delta " << r.delta_vs_full << ")\n";
  return s.run_dir;
}

fs::path cmd_probe(const CommonOptions& opts, const fs::path& checkpoint, std::ostream& log) {
  auto s = resolve(opts, "probe");
  const auto ckpt = load_checkpoint(checkpoint);
  const auto m = model_from_checkpoint(ckpt);
  const auto gp = gnn_from_checkpoint(ckpt);
  gnn::GnnConfig gcfg;
  PathConfig paths;
  std::uint64_t seed = s.seeds.front();
  if (const auto it = ckpt.metadata.find("seed"); it != ckpt.metadata.end()) seed = std::stoull(it->second);
  if (gp) {
    gcfg.kind = gp->kind;
    gcfg.activation = gnn::parse_activation(meta(ckpt, "gnn.activation"));
    gcfg.update_mode = gnn::parse_update_mode(meta(ckpt, "gnn.update"));
    paths = {meta(ckpt, "paths.aggregation") == "1", meta(ckpt, "paths.distribution") == "1"};
  }
  if (s.probe_prompts == 0) throw ConfigError("probe_prompts must be at least 1");
  auto order = demo_order_of(ckpt);
  if (!order) order = s.train.demo_order_seed;
  const auto split = tasks::make_protocol_split(s.task, s.train.k_per_class, s.train.validation_size, seed,
                                                order);
  const auto verbalizer = Verbalizer::build(s.task.label_words, s.tokenizer);
  std::vector<tasks::LabeledExample> chosen(split.test.begin(),
                                            split.test.begin() + static_cast<std::ptrdiff_t>(std::min(s.probe_prompts, split.test.size())));
  const auto prompts = trainer::prepare_examples(chosen, split.demos, s.task.prompt, verbalizer, s.tokenizer, paths);
  prepare_run_dir(s, opts);
  fs::create_directories(s.run_dir / "prompts");
  std::vector<probe::FlowScores> all;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    model::GnnHook hook{gp ? &*gp : nullptr, &p.graph, gcfg};
    const auto sal = probe::saliency(m, gp ? &hook : nullptr, p.layout,
                                     verbalizer.first_subtoken[static_cast<std::size_t>(p.class_id)]);
    all.push_back(probe::flow_scores(sal, p.layout));
    char name[32];
    std::snprintf(name, sizeof(name), "prompt_%03zu.csv", i);
    probe::write_probe_csv(s.run_dir / "prompts" / name, all.back());
  }
  probe::write_probe_csv(s.run_dir / "probe.csv", probe::mean_scores(all));
  log << "probed " << prompts.size() << " prompts -> " << (s.run_dir / "probe.csv").string() << '\n';
  return s.run_dir;
}

fs::path cmd_report(const fs::path& run_dir, std::ostream& log) {
  if (!fs::is_directory(run_dir)) throw ConfigError("report: no such directory " + run_dir.string());
  const auto results = collect_results(run_dir);
  if (results.empty()) throw DataError("report: no result.json below " + run_dir.string());
  const auto board = run_dir / "report_leaderboard.csv";
  fs::remove(board);
  for (const auto& r : results) trainer::append_leaderboard(board, r);

  std::map<std::tuple<std::string, std::string, std::size_t>, std::vector<const trainer::RunResult*>> groups;
  for (const auto& r : results) groups[{r.method, r.task, r.k_per_class}].push_back(&r);
  std::ofstream summary(run_dir / "summary.csv", std::ios::trunc);
  summary << "method,task,k,n_seeds,mean_test_accuracy,stdev_test_accuracy\n";
  std::ofstream series(run_dir / "series.csv", std::ios::trunc);
  series << "method,task,k,seed,epoch,train_loss,validation_accuracy\n";
  for (const auto& [key, rs] : groups) {
    std::vector<double> acc;
    for (const auto* r : rs) acc.push_back(r->test_accuracy);
    const auto sm = trainer::summarize(acc);
    const auto& [method, task, k] = key;
    summary << method << ',' << task << ',' << k << ',' << sm.n << ',' << fmt(sm.mean) << ',' << fmt(sm.stdev) << '\n';
    log << method << ' ' << task << " k=" << k << ": " << sm.mean << " ± " << sm.stdev << " over " << sm.n << " seeds\n";
    for (const auto* r : rs)
      for (const auto& e : r->history)
        series << method << ',' << task << ',' << k << ',' << r->seed << ',' << e.epoch << ',' << fmt(e.train_loss) << ','
               << fmt(e.validation_accuracy) << '\n';
  }
  return run_dir / "summary.csv";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  return 1;
}

}  // namespace flownav::cli
