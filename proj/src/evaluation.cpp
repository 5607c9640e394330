#include "ramp/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "ramp/error.hpp"

namespace ramp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
}

}  // namespace

nlohmann::json report_json(const EvalReport& r) {
  return nlohmann::json{{"metric", r.metric},           {"value", r.value},
                        {"samples", r.samples},         {"seed", r.seed},
                        {"fingerprint", r.fingerprint}, {"details", r.details}};
}

nlohmann::json timing_json(const EvalReport& r) {
  nlohmann::json j = r.timing;
  j["metric"] = r.metric;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  const std::string& stem) {
  // Generated text from a weak model need not be valid UTF-8.
  auto pretty = [](const nlohmann::json& j) {
    return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  };
  std::filesystem::create_directories(dir);
  write_text(dir / (stem + ".json"), pretty(report_json(report)));
  write_text(dir / (stem + ".timing.json"), pretty(timing_json(report)));
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  auto line = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) s += ',';
      if (cells[k].find_first_of(",\"\n") != std::string::npos) {
        std::string quoted = "\"";
        for (char c : cells[k]) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
        s += quoted + "\"";
      } else {
        s += cells[k];
      }
    }
    return s + "\n";
  };
  std::string text = line(header);
  for (const auto& r : rows) text += line(r);
  write_text(path, text);
}

std::string ppl_mode_name(PplMode m) { return m == PplMode::self ? "self" : "nbr"; }

PplMode parse_ppl_mode(const std::string& s) {
  if (s == "self") return PplMode::self;
  if (s == "nbr") return PplMode::nbr;
  fail(ErrorKind::config, "unknown perplexity mode '" + s + "' (self|nbr)");
}

EvalReport perplexity(const Decoder& decoder, const TextRichGraph& graph,
                      std::span<const std::string> ids, PplMode mode, const RampConfig& ramp,
                      std::size_t ego_max_size, std::uint64_t seed) {
  const auto start = Clock::now();
  double weighted = 0.0;
  std::size_t tokens = 0, used = 0, skipped = 0;
  for (const auto& id : ids) {
    const EgoSubgraph sub =
        reconstruction_subgraph(graph, id, ramp, ego_max_size, node_seed(seed, id));
    if (mode == PplMode::nbr && reconstruction_neighbors(sub).empty()) {
      ++skipped;
      continue;
    }
    const Tensor loss = mode == PplMode::self ? self_recon_loss(decoder, sub, ramp)
                                              : nbr_recon_loss(decoder, sub, ramp);
    const std::size_t n = sub.tokens[0].size() + 1;
    weighted += loss.item() * static_cast<double>(n);
    tokens += n;
    ++used;
  }
  if (used == 0) fail(ErrorKind::contract, "perplexity: empty evaluation set");
  EvalReport r;
  r.metric = "ppl_" + ppl_mode_name(mode);
  r.value = std::exp(weighted / static_cast<double>(tokens));
  r.samples = used;
  r.seed = seed;
  r.details = {{"mean_loss", weighted / static_cast<double>(tokens)},
               {"tokens", tokens},
               {"skipped_isolated", skipped},
               {"mp_rounds", ramp.mp_rounds},
               {"compact", ramp.compact}};
  r.wall_seconds = seconds_since(start);
  return r;
}

EvalReport raw_lm_perplexity(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> ids) {
  const auto start = Clock::now();
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& id : ids) {
    const Tokens& text = graph.node(id).tokens;
    const Tensor loss = reconstruction_loss(decoder, KVCache{}, text);
    weighted += loss.item() * static_cast<double>(text.size() + 1);
    tokens += text.size() + 1;
  }
  if (ids.empty()) fail(ErrorKind::contract, "raw perplexity: empty evaluation set");
  EvalReport r;
  r.metric = "ppl_raw";
  r.value = std::exp(weighted / static_cast<double>(tokens));
  r.samples = ids.size();
  r.details = {{"mean_loss", weighted / static_cast<double>(tokens)}, {"tokens", tokens}};
  r.wall_seconds = seconds_since(start);
  return r;
}

EvalReport classify_accuracy(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> ids, const ClassificationTask& task,
                             const RampConfig& ramp, const TrainConfig& cfg, std::uint64_t seed) {
  const auto start = Clock::now();
  const AccuracyCount c = classification_accuracy(decoder, graph, ids, task, ramp, cfg, seed);
  EvalReport r;
  r.metric = "accuracy";
  r.value = c.accuracy();
  r.samples = c.total;
  r.seed = seed;
  r.details = {{"correct", c.correct},
               {"overflow", c.overflow},
               {"mean_answer_loss", c.mean_loss},
               {"mp_rounds", ramp.mp_rounds}};
  r.wall_seconds = seconds_since(start);
  return r;
}

std::string shuffle_kind_name(ShuffleKind k) {
  return k == ShuffleKind::neighbor_order ? "neighbor-order" : "cross-node";
}

ShuffleKind parse_shuffle_kind(const std::string& s) {
  if (s == "neighbor-order") return ShuffleKind::neighbor_order;
  if (s == "cross-node") return ShuffleKind::cross_node;
  fail(ErrorKind::config, "unknown shuffle kind '" + s + "' (neighbor-order|cross-node)");
}

EvalReport shuffle_experiment(const Decoder& decoder, const TextRichGraph& graph,
                              std::span<const std::string> ids, const ClassificationTask& task,
                              const RampConfig& ramp, const TrainConfig& cfg, ShuffleKind kind,
                              std::span<const std::uint64_t> shuffle_seeds, std::uint64_t seed,
                              bool identity) {
  if (shuffle_seeds.empty()) fail(ErrorKind::precondition, "shuffle_experiment: no seeds");
  const auto start = Clock::now();
  const AccuracyCount base = classification_accuracy(decoder, graph, ids, task, ramp, cfg, seed);
  std::vector<double> runs;
  std::size_t warnings = 0;
  for (std::uint64_t s : shuffle_seeds) {
    SubgraphTransform transform = [&](const EgoSubgraph& sub, const std::string& id) {
      const PermutationSource perms =
          identity ? identity_permutations() : seeded_permutations(node_seed(s, id));
      if (kind == ShuffleKind::neighbor_order) return shuffle_neighbor_order(sub, perms);
      CrossShuffleResult shuffled = cross_node_shuffle(sub, perms);
      warnings += shuffled.warning;
      return shuffled.subgraph;
    };
    runs.push_back(
        classification_accuracy(decoder, graph, ids, task, ramp, cfg, seed, transform).accuracy());
  }
  double mean = 0.0;
  for (double a : runs) mean += a;
  mean /= static_cast<double>(runs.size());
  double var = 0.0;
  for (double a : runs) var += (a - mean) * (a - mean);
  const double stddev =
      runs.size() > 1 ? std::sqrt(var / static_cast<double>(runs.size() - 1)) : 0.0;

  EvalReport r;
  r.metric = "shuffle_" + shuffle_kind_name(kind);
  r.value = mean;
  r.samples = base.total;
  r.seed = seed;
  r.details = {{"kind", shuffle_kind_name(kind)},
               {"runs", runs},
               {"shuffle_seeds", std::vector<std::uint64_t>(shuffle_seeds.begin(), shuffle_seeds.end())},
               {"mean", mean},
               {"stddev", stddev},
               {"unshuffled", base.accuracy()},
               {"delta", mean - base.accuracy()},
               {"identity_permutations", identity},
               {"too_small_warnings", warnings}};
  r.wall_seconds = seconds_since(start);
  return r;
}

EvalReport mp_ablation(std::span<const AblationEntry> entries, const TextRichGraph& graph,
                       std::span<const std::string> ids, const ClassificationTask& task,
                       const TrainConfig& cfg, std::uint64_t seed) {
  if (entries.empty()) fail(ErrorKind::precondition, "mp_ablation: no checkpoints");
  const auto start = Clock::now();
  for (const auto& e : entries) {
    RampConfig a = e.ramp, b = entries[0].ramp;
    a.mp_rounds = b.mp_rounds = 0;
    if (!(a == b) || !(e.decoder->config() == entries[0].decoder->config())) {
      fail(ErrorKind::contract, "mp_ablation: settings differ beyond mp_rounds");
    }
  }
  nlohmann::json rows = nlohmann::json::array();
  std::size_t total = 0;
  double first = 0.0, last = 0.0;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const AccuracyCount c = classification_accuracy(*entries[k].decoder, graph, ids, task,
                                                    entries[k].ramp, cfg, seed);
    rows.push_back({{"mp_rounds", entries[k].ramp.mp_rounds},
                    {"accuracy", c.accuracy()},
                    {"correct", c.correct},
                    {"total", c.total},
                    {"mean_answer_loss", c.mean_loss}});
    if (k == 0) first = c.accuracy();
    last = c.accuracy();
    total = c.total;
  }
  EvalReport r;
  r.metric = "mp_ablation";
  r.value = last - first;
  r.samples = total;
  r.seed = seed;
  r.details = {{"rows", rows}};
  r.wall_seconds = seconds_since(start);
  return r;
}

Tokens serialize_subgraph(const EgoSubgraph& sub, std::span<const int> query) {
  std::string text;
  const std::size_t m = sub.members.size();
  for (std::size_t k = 0; k < m; ++k) {
    text += "[" + std::to_string(k) + "] " + detokenize(sub.tokens[k]) + "\n";
  }
  text += "edges:";
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j : sub.neighbors[i]) {
      if (i < j && j < m) text += " " + std::to_string(i) + "-" + std::to_string(j);
    }
  }
  text += "\n";
  Tokens out = tokenize(text);
  out.insert(out.end(), query.begin(), query.end());
  return out;
}

BaselineAnswer graph_to_text_baseline(const Decoder& decoder, const EgoSubgraph& sub,
                                      std::span<const int> query, std::size_t max_new) {
  const auto start = Clock::now();
  const Tokens prompt = serialize_subgraph(sub, query);
  BaselineAnswer a;
  a.sequence_length = prompt.size();
  if (prompt.size() > static_cast<std::size_t>(decoder.config().max_positions)) {
    fail(ErrorKind::capacity, "graph-to-text: serialized subgraph of " +
                                  std::to_string(prompt.size()) + " tokens exceeds " +
                                  std::to_string(decoder.config().max_positions) + " positions");
  }
  a.answer = detokenize(decoder.generate(KVCache{}, prompt, max_new));
  a.wall_seconds = seconds_since(start);
  return a;
}

std::string Bucket::name() const {
  return lo <= 1 ? "<=" + std::to_string(hi) : std::to_string(lo) + "-" + std::to_string(hi);
}

std::vector<Bucket> default_buckets() { return {{1, 5}, {6, 10}, {11, 20}, {21, 40}}; }

double median(std::vector<double> values) {
  if (values.empty()) fail(ErrorKind::precondition, "median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

EvalReport scaling_benchmark(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> candidates,
                             const ClassificationTask& task, const RampConfig& ramp,
                             const ScalingOptions& opts, std::uint64_t seed) {
  const auto start = Clock::now();
  const Tokens query = task.query_tokens();
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json timing_rows = nlohmann::json::array();
  std::optional<double> ramp_base, text_base;
  std::size_t total_samples = 0;

  for (const Bucket& bucket : opts.buckets) {
    std::vector<EgoSubgraph> subs;
    std::vector<std::string> labels;
    for (const auto& id : candidates) {
      if (subs.size() >= opts.samples_per_bucket) break;
      for (int hops = 1; hops <= 4; ++hops) {
        EgoOptions eo;
        eo.hops = hops;
        eo.max_size = bucket.hi;
        eo.seed = node_seed(seed, id);
        eo.prompt_text = task.query_text();
        EgoSubgraph sub = ego_subgraph(graph, id, eo);
        if (sub.members.size() >= bucket.lo && sub.members.size() <= bucket.hi) {
          subs.push_back(std::move(sub));
          labels.push_back(graph.node(id).label.value_or(""));
          break;
        }
        if (sub.members.size() > bucket.hi) break;
      }
    }
    nlohmann::json row = {{"bucket", bucket.name()}, {"samples", subs.size()}};
    if (subs.empty()) {
      row["notice"] = "no subgraph in range; skipped";
      rows.push_back(row);
      continue;
    }
    total_samples += subs.size();

    std::size_t correct = 0, members = 0, serialized = 0, capacity_failures = 0;
    std::vector<bool> baseline_ok(subs.size(), true);
    for (std::size_t k = 0; k < subs.size(); ++k) {
      const auto answer = answer_generate(decoder, node_context(decoder, subs[k], ramp), query,
                                          task.max_new());
      correct += label_matches(answer, labels[k]);
      members += subs[k].members.size();
      const std::size_t len = serialize_subgraph(subs[k], query).size();
      serialized += len;
      if (len > static_cast<std::size_t>(decoder.config().max_positions)) {
        baseline_ok[k] = false;
        ++capacity_failures;
      }
    }

    auto time_ramp = [&] {
      const auto t0 = Clock::now();
      for (const auto& sub : subs) {
        answer_generate(decoder, node_context(decoder, sub, ramp), query, task.max_new());
      }
      return seconds_since(t0);
    };
    auto time_text = [&] {
      const auto t0 = Clock::now();
      for (std::size_t k = 0; k < subs.size(); ++k) {
        if (baseline_ok[k]) graph_to_text_baseline(decoder, subs[k], query, task.max_new());
      }
      return seconds_since(t0);
    };
    std::vector<double> ramp_times, text_times;
    time_ramp();
    time_text();
    for (std::size_t rep = 0; rep < opts.reps; ++rep) {
      ramp_times.push_back(time_ramp());
      text_times.push_back(time_text());
    }
    const double ramp_med = median(ramp_times);
    const bool text_any = capacity_failures < subs.size();
    row["mean_members"] = static_cast<double>(members) / static_cast<double>(subs.size());
    row["mean_serialized_tokens"] = static_cast<double>(serialized) / static_cast<double>(subs.size());
    row["ramp_accuracy"] = static_cast<double>(correct) / static_cast<double>(subs.size());
    row["baseline_capacity_failures"] = capacity_failures;
    rows.push_back(row);

    if (!ramp_base) ramp_base = ramp_med;
    nlohmann::json t = {{"bucket", bucket.name()},
                        {"ramp_seconds", ramp_times},
                        {"ramp_median", ramp_med},
                        {"ramp_normalized", ramp_med / *ramp_base}};
    if (text_any) {
      const double text_med = median(text_times);
      if (!text_base) text_base = text_med;
      t["baseline_seconds"] = text_times;
      t["baseline_median"] = text_med;
      t["baseline_normalized"] = text_med / *text_base;
    }
    timing_rows.push_back(t);
  }

  EvalReport r;
  r.metric = "scaling";
  r.samples = total_samples;
  r.seed = seed;
  r.details = {{"buckets", rows}, {"reps", opts.reps}};
  r.timing = {{"buckets", timing_rows}};
  r.wall_seconds = seconds_since(start);
  return r;
}

}  // namespace ramp
