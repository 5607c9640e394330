#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>

#include "ramp/checkpoint.hpp"
#include "ramp/corpus.hpp"
#include "ramp/error.hpp"
#include "ramp/evaluation.hpp"
#include "ramp/run_config.hpp"
#include "ramp/training.hpp"

namespace ramp::cli {

namespace fs = std::filesystem;

namespace {

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_input(const std::string& key, const std::string& path) {
  if (path.empty()) throw MissingInput("no input given for " + key);
  if (!fs::is_regular_file(path)) throw MissingInput(key + ": no such file '" + path + "'");
}

struct Command {
  RunConfig cfg;
  unsigned workers = 1;
  std::ostream* out = nullptr;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  fs::path dir() const { return cfg.paths.out; }

  void dump_config(const std::string& stem) const {
    fs::create_directories(dir());
    std::ofstream f(dir() / (stem + ".config.ini"), std::ios::binary);
    f << cfg.to_ini();
    if (!f) fail(ErrorKind::io, "cannot write " + (dir() / (stem + ".config.ini")).string());
  }

  void publish(EvalReport& r, const std::string& stem) const {
    r.fingerprint = cfg.fingerprint();
    // Commands without their own clock report the whole command's wall time.
    if (r.wall_seconds == 0.0) {
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    write_report(r, dir(), stem);
    dump_config(stem);
    *out << (dir() / (stem + ".json")).string() << "\n";
  }

  TextRichGraph graph() const { return load_graph(cfg.paths.graph); }

  std::vector<std::string> ids(Split which) const { return split_ids(load_split(cfg.paths.split), which); }

  /// Decoder and ramp settings come from the checkpoint; the effective
  /// config is updated to match so the dump describes what actually ran.
  Decoder load_model(const std::string& path, CheckpointData* data_out = nullptr) {
    CheckpointData data = read_checkpoint(path);
    cfg.decoder = get_decoder_config(data.metadata);
    cfg.ramp = get_ramp_config(data.metadata);
    Decoder dec = restore_decoder(data);
    if (data_out) *data_out = std::move(data);
    return dec;
  }

  void save_model(const Decoder& dec, const AdamW& opt, const std::string& stem, Stage stage,
                  const std::vector<std::string>& labels = {}) const {
    CheckpointData data = checkpoint_of(dec);
    opt.save_state(data);
    put_ramp_config(data.metadata, cfg.ramp);
    data.metadata["run.fingerprint"] = cfg.fingerprint();
    data.metadata["run.stage"] = stage_name(stage);
    if (!labels.empty()) data.metadata["task.labels"] = nlohmann::json(labels).dump();
    fs::create_directories(dir());
    write_checkpoint(dir() / (stem + ".ckpt"), data);
    dump_config(stem);
    *out << (dir() / (stem + ".ckpt")).string() << "\n";
  }
};

std::vector<std::string> task_labels(const CheckpointData& data, const TextRichGraph& graph) {
  const auto it = data.metadata.find("task.labels");
  if (it == data.metadata.end()) return graph_labels(graph);
  try {
    return nlohmann::json::parse(it->second).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::validation, "checkpoint metadata 'task.labels' is malformed");
  }
}

std::string model_fingerprint(const CheckpointData& data) {
  const auto it = data.metadata.find("run.fingerprint");
  return it == data.metadata.end() ? "" : it->second;
}

// ---- subcommands ------------------------------------------------------------

void gen_corpus(Command& c) {
  CorpusSpec spec = c.cfg.corpus;
  spec.seed = c.cfg.seeds.corpus;
  const Corpus corpus = generate_corpus(spec);
  fs::create_directories(c.dir());
  save_graph(corpus.graph, c.dir() / "graph.jsonl");
  save_split(corpus.split, c.dir() / "split.json");
  *c.out << (c.dir() / "graph.jsonl").string() << "\n" << (c.dir() / "split.json").string() << "\n";

  const SignalAudit audit = signal_audit(corpus.graph);
  EvalReport r;
  r.metric = "no_signal_majority_accuracy";
  r.value = audit.no_signal_majority_accuracy();
  r.samples = corpus.graph.node_count();
  r.seed = spec.seed;
  r.details = {{"nodes", corpus.graph.node_count()},
               {"edges", corpus.graph.edge_count()},
               {"same_class_edges", corpus.same_class_edges},
               {"with_self_signal", audit.with_self_signal},
               {"without_self_signal", audit.without_self_signal},
               {"majority_accuracy", audit.majority_accuracy()},
               {"labels", corpus.labels},
               {"train", split_ids(corpus.split, Split::train).size()},
               {"val", split_ids(corpus.split, Split::val).size()},
               {"test", split_ids(corpus.split, Split::test).size()}};
  c.publish(r, "corpus");
}

void pretrain_cmd(Command& c) {
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  if (!c.cfg.paths.checkpoint.empty()) require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  const TextRichGraph g = c.graph();
  const auto train = c.ids(Split::train);

  const RampConfig ramp = c.cfg.ramp;
  Decoder dec = c.cfg.paths.checkpoint.empty() ? Decoder(c.cfg.decoder, c.cfg.seeds.init)
                                                : c.load_model(c.cfg.paths.checkpoint);
  c.cfg.ramp = ramp;
  TrainConfig tc = c.cfg.pretrain;
  tc.stage = Stage::pretrain;
  tc.seed = c.cfg.seeds.pretrain;
  AdamConfig ac = c.cfg.adam;
  ac.learning_rate = tc.learning_rate;
  AdamW opt(dec, ac, tc.steps);

  fs::create_directories(c.dir());
  std::ofstream log_file(c.dir() / "pretrain.log.jsonl");
  TrainLog log(&log_file);
  const PretrainResult res = pretrain(dec, g, train, c.cfg.ramp, tc, opt, &log);
  c.save_model(dec, opt, "pretrain", Stage::pretrain);

  const std::size_t tail = std::min<std::size_t>(20, res.step_losses.size());
  double recent = 0.0;
  for (std::size_t k = res.step_losses.size() - tail; k < res.step_losses.size(); ++k) recent += res.step_losses[k];
  EvalReport r;
  r.metric = "pretrain_recent_loss";
  r.value = recent / static_cast<double>(tail);
  r.samples = res.step_losses.size();
  r.seed = tc.seed;
  r.details = {{"self_tasks", res.self_tasks}, {"nbr_tasks", res.nbr_tasks}, {"step_losses", res.step_losses}};
  c.publish(r, "pretrain");
}

void finetune_cmd(Command& c) {
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  if (!c.cfg.paths.checkpoint.empty()) require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  const TextRichGraph g = c.graph();
  const auto train = c.ids(Split::train);
  const auto val = c.ids(Split::val);

  // Fine-tuning picks its own message-passing settings; only the weights and
  // the architecture come from the pre-trained checkpoint.
  const RampConfig ramp = c.cfg.ramp;
  Decoder dec = c.cfg.paths.checkpoint.empty() ? Decoder(c.cfg.decoder, c.cfg.seeds.init)
                                                : c.load_model(c.cfg.paths.checkpoint);
  c.cfg.ramp = ramp;
  TrainConfig tc = c.cfg.finetune;
  tc.stage = Stage::finetune;
  tc.seed = c.cfg.seeds.finetune;
  AdamConfig ac = c.cfg.adam;
  ac.learning_rate = tc.learning_rate;
  AdamW opt(dec, ac, finetune_total_steps(train.size(), tc));
  const ClassificationTask task{graph_labels(g)};

  fs::create_directories(c.dir());
  std::ofstream log_file(c.dir() / "finetune.log.jsonl");
  TrainLog log(&log_file);
  const FinetuneResult res = finetune(dec, g, train, val, task, c.cfg.ramp, tc, opt, &log);
  c.save_model(dec, opt, "finetune", Stage::finetune, task.labels);

  EvalReport r;
  r.metric = "best_val_accuracy";
  r.value = res.best_val_accuracy;
  r.samples = val.size();
  r.seed = tc.seed;
  r.details = {{"best_epoch", res.best_epoch},
               {"epoch_losses", res.epoch_losses},
               {"val_accuracy", res.val_accuracy},
               {"mp_rounds", c.cfg.ramp.mp_rounds}};
  c.publish(r, "finetune");
}

void eval_ppl(Command& c, const std::string& mode, const std::string& split) {
  require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  if (mode != "raw") parse_ppl_mode(mode);
  CheckpointData data;
  const Decoder dec = c.load_model(c.cfg.paths.checkpoint, &data);
  const TextRichGraph g = c.graph();
  const auto ids = c.ids(parse_split(split));
  EvalReport r = mode == "raw" ? raw_lm_perplexity(dec, g, ids)
                               : perplexity(dec, g, ids, parse_ppl_mode(mode), c.cfg.ramp,
                                            c.cfg.pretrain.ego_max_size, c.cfg.seeds.eval);
  r.seed = c.cfg.seeds.eval;
  r.details["split"] = split;
  r.details["model_fingerprint"] = model_fingerprint(data);
  c.publish(r, "ppl_" + mode);
}

void classify_cmd(Command& c, const std::string& split) {
  require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  CheckpointData data;
  const Decoder dec = c.load_model(c.cfg.paths.checkpoint, &data);
  const TextRichGraph g = c.graph();
  const ClassificationTask task{task_labels(data, g)};
  EvalReport r = classify_accuracy(dec, g, c.ids(parse_split(split)), task, c.cfg.ramp, c.cfg.finetune,
                                   c.cfg.seeds.eval);
  r.details["split"] = split;
  r.details["model_fingerprint"] = model_fingerprint(data);
  c.publish(r, "classify");
}

void shuffle_cmd(Command& c, const std::string& kind, const std::string& split) {
  require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  const ShuffleKind k = parse_shuffle_kind(kind);
  CheckpointData data;
  const Decoder dec = c.load_model(c.cfg.paths.checkpoint, &data);
  const TextRichGraph g = c.graph();
  const ClassificationTask task{task_labels(data, g)};
  EvalReport r = shuffle_experiment(dec, g, c.ids(parse_split(split)), task, c.cfg.ramp, c.cfg.finetune, k,
                                    c.cfg.eval.shuffle_seeds, c.cfg.seeds.eval);
  r.details["split"] = split;
  r.details["model_fingerprint"] = model_fingerprint(data);
  c.publish(r, "shuffle_" + kind);
}

void ablation_cmd(Command& c, const std::vector<std::string>& checkpoints, const std::string& split) {
  for (const auto& p : checkpoints) require_input("--checkpoints", p);
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  std::vector<Decoder> decoders;
  std::vector<CheckpointData> datas(checkpoints.size());
  std::vector<RampConfig> ramps;
  decoders.reserve(checkpoints.size());
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    decoders.push_back(c.load_model(checkpoints[k], &datas[k]));
    ramps.push_back(c.cfg.ramp);
  }
  std::vector<AblationEntry> entries;
  for (std::size_t k = 0; k < decoders.size(); ++k) entries.push_back({&decoders[k], ramps[k]});
  const TextRichGraph g = c.graph();
  const ClassificationTask task{task_labels(datas.front(), g)};
  for (const auto& d : datas) {
    if (task_labels(d, g) != task.labels) fail(ErrorKind::validation, "checkpoints disagree on task labels");
  }
  EvalReport r = mp_ablation(entries, g, c.ids(parse_split(split)), task, c.cfg.finetune, c.cfg.seeds.eval);
  r.details["split"] = split;
  nlohmann::json fps = nlohmann::json::array();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t k = 0; k < datas.size(); ++k) {
    fps.push_back(model_fingerprint(datas[k]));
    const auto& row = r.details.at("rows").at(k);
    rows.push_back({std::to_string(row.at("mp_rounds").get<int>()), row.at("accuracy").dump()});
  }
  r.details["model_fingerprints"] = fps;
  // The dumped ramp section is the last entry's; mp_rounds varies per row.
  c.publish(r, "mp_ablation");
  write_csv(c.dir() / "mp_ablation.csv", {"mp_rounds", "accuracy"}, rows);
  *c.out << (c.dir() / "mp_ablation.csv").string() << "\n";
}

void bench_cmd(Command& c, const std::string& split, bool plot_data) {
  require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  require_input("paths.graph", c.cfg.paths.graph);
  require_input("paths.split", c.cfg.paths.split);
  CheckpointData data;
  const Decoder dec = c.load_model(c.cfg.paths.checkpoint, &data);
  const TextRichGraph g = c.graph();
  const ClassificationTask task{task_labels(data, g)};
  ScalingOptions opts;
  opts.samples_per_bucket = c.cfg.eval.scale_samples;
  opts.reps = c.cfg.eval.scale_reps;
  EvalReport r = scaling_benchmark(dec, g, c.ids(parse_split(split)), task, c.cfg.ramp, opts, c.cfg.seeds.eval);
  r.details["split"] = split;
  r.details["model_fingerprint"] = model_fingerprint(data);
  c.publish(r, "bench_scale");
  if (plot_data) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& t : r.timing.at("buckets")) {
      auto cell = [&](const char* key) { return t.contains(key) ? t.at(key).dump() : std::string(); };
      rows.push_back({t.at("bucket").get<std::string>(), cell("ramp_median"), cell("ramp_normalized"),
                      cell("baseline_median"), cell("baseline_normalized")});
    }
    write_csv(c.dir() / "bench_scale.csv",
              {"bucket", "ramp_median_s", "ramp_normalized", "baseline_median_s", "baseline_normalized"}, rows);
    *c.out << (c.dir() / "bench_scale.csv").string() << "\n";
  }
}

void reify_cmd(Command& c) {
  require_input("paths.graph", c.cfg.paths.graph);
  const TextRichGraph g = c.graph();
  const TextRichGraph h = reify_edges(g);
  fs::create_directories(c.dir());
  save_graph(h, c.dir() / "reified.jsonl");
  *c.out << (c.dir() / "reified.jsonl").string() << "\n";
  EvalReport r;
  r.metric = "reified_nodes";
  r.value = static_cast<double>(h.node_count());
  r.samples = g.edge_count();
  r.details = {{"nodes_before", g.node_count()},
               {"edges_before", g.edge_count()},
               {"nodes_after", h.node_count()},
               {"edges_after", h.edge_count()}};
  c.publish(r, "reify");
}

void peek_cmd(Command& c, const std::string& node, bool dump) {
  require_input("paths.checkpoint", c.cfg.paths.checkpoint);
  require_input("paths.graph", c.cfg.paths.graph);
  CheckpointData data;
  const Decoder dec = c.load_model(c.cfg.paths.checkpoint, &data);
  const TextRichGraph g = c.graph();
  const EgoSubgraph sub = reconstruction_subgraph(g, node, c.cfg.ramp, c.cfg.pretrain.ego_max_size,
                                                  node_seed(c.cfg.seeds.eval, node));
  const MemoryTable memory = propagate_all(dec, sub, c.cfg.ramp, c.workers);
  const Tokens query{kEosToken};
  const std::size_t max_new = sub.tokens[0].size() + 8;
  nlohmann::json rounds = nlohmann::json::array();
  std::size_t exact = 0;
  for (int round = 0; round <= c.cfg.ramp.mp_rounds; ++round) {
    const std::string text = round_peek(dec, memory, round, 0, query, max_new);
    exact += text == g.node(node).text;
    rounds.push_back({{"round", round}, {"text", text}, {"exact", text == g.node(node).text}});
  }
  EvalReport r;
  r.metric = "round_peek_exact";
  r.value = static_cast<double>(exact);
  r.samples = rounds.size();
  r.seed = c.cfg.seeds.eval;
  r.details = {{"node", node},
               {"original", g.node(node).text},
               {"members", sub.members.size()},
               {"rounds", rounds},
               {"model_fingerprint", model_fingerprint(data)}};
  c.publish(r, "round_peek");
  if (dump) {
    dump_memory(memory, sub, c.dir() / "round_peek.mem");
    *c.out << (c.dir() / "round_peek.mem").string() << "\n";
  }
}

int exit_code_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return kUsage;
    case ErrorKind::capacity: return kCapacity;
    case ErrorKind::parse:
    case ErrorKind::validation:
    case ErrorKind::integrity:
    case ErrorKind::lookup: return kBadData;
    case ErrorKind::numeric: return kNumeric;
    default: return kFailure;
  }
}

int report_error(std::ostream& err, const std::string& kind, const std::string& message, int code) {
  err << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"RAMP: summary-token message passing over text-rich graphs", "ramp"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  unsigned workers = 1;
  app.add_option("--config", config_path, "INI file with [section] key = value entries");
  app.add_option("--workers", workers, "threads for inference rounds (round-peek)")->check(CLI::Range(1u, 64u));

  const auto keys = RunConfig::keys();
  std::map<std::string, std::string> overrides;
  std::vector<CLI::Option*> key_options;
  for (const auto& key : keys) {
    key_options.push_back(app.add_option("--" + key, overrides[key])
                              ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
                              ->group("Settings (override the config file)"));
  }

  std::string mode = "self", split = "test", kind, node;
  std::vector<std::string> checkpoints;
  bool plot_data = false, dump_mem = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic labeled graph and its split");
  auto* pre = app.add_subcommand("pretrain", "reconstruction pre-training");
  auto* fin = app.add_subcommand("finetune", "generative node classification fine-tuning");
  auto* ppl = app.add_subcommand("eval-ppl", "reconstruction perplexity");
  ppl->add_option("--mode", mode, "self | nbr | raw")->check(CLI::IsMember({"self", "nbr", "raw"}));
  ppl->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  auto* cls = app.add_subcommand("classify", "classification accuracy");
  cls->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  auto* shf = app.add_subcommand("shuffle-test", "accuracy under neighbor-order or cross-node shuffles");
  shf->add_option("--kind", kind, "neighbor-order | cross-node")
      ->required()
      ->check(CLI::IsMember({"neighbor-order", "cross-node"}));
  shf->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  auto* abl = app.add_subcommand("mp-ablation", "accuracy per fine-tuned checkpoint, ordered by mp_rounds");
  abl->add_option("--checkpoints", checkpoints)->required()->delimiter(',')->expected(2, 16);
  abl->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  auto* bench = app.add_subcommand("bench-scale", "latency against a flat graph-to-text baseline");
  bench->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  bench->add_flag("--emit-plot-data", plot_data, "also write bench_scale.csv");
  auto* reify = app.add_subcommand("reify-edges", "turn every edge into a node");
  auto* peek = app.add_subcommand("round-peek", "decode a node's text from each round's summaries");
  peek->add_option("--node", node)->required();
  peek->add_flag("--dump-memory", dump_mem, "also write the summary states");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return report_error(err, "usage", e.what(), kUsage);
  }

  Command c;
  c.workers = workers;
  c.out = &out;
  try {
    if (!config_path.empty()) {
      if (!fs::is_regular_file(config_path)) throw MissingInput("--config: no such file '" + config_path + "'");
      apply_ini_file(c.cfg, config_path);
    }
    for (std::size_t k = 0; k < keys.size(); ++k) {
      if (key_options[k]->count() > 0) c.cfg.set(keys[k], overrides[keys[k]]);
    }
    c.cfg.validate();

    if (gen->parsed()) gen_corpus(c);
    else if (pre->parsed()) pretrain_cmd(c);
    else if (fin->parsed()) finetune_cmd(c);
    else if (ppl->parsed()) eval_ppl(c, mode, split);
    else if (cls->parsed()) classify_cmd(c, split);
    else if (shf->parsed()) shuffle_cmd(c, kind, split);
    else if (abl->parsed()) ablation_cmd(c, checkpoints, split);
    else if (bench->parsed()) bench_cmd(c, split, plot_data);
    else if (reify->parsed()) reify_cmd(c);
    else if (peek->parsed()) peek_cmd(c, node, dump_mem);
    return kOk;
  } catch (const MissingInput& e) {
    return report_error(err, "missing_input", e.what(), kMissingInput);
  } catch (const Error& e) {
    return report_error(err, to_string(e.kind()), e.what(), exit_code_of(e.kind()));
  } catch (const std::exception& e) {
    return report_error(err, "internal", e.what(), kFailure);
  }
}

}  // namespace ramp::cli
