// Acceptance run: one PASS/FAIL line per criterion. Criteria 4-9 drive the
// `ramp` command line on the default configuration; criterion 10 repeats
// that pipeline and compares every report byte for byte.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "ramp/checkpoint.hpp"
#include "ramp/engine.hpp"
#include "ramp/graph.hpp"
#include "ramp/random.hpp"
#include "ramp/run_config.hpp"
#include "ramp/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace ramp;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds) {
  failures += !o.pass;
  std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), seconds);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing artifact " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// ---- oracle criteria ----------------------------------------------------------

Outcome gradient_check() {
  DecoderConfig c = test::tiny_config(259);
  c.max_positions = 128;
  Decoder dec(c, 5);
  TextRichGraph g;
  g.add_node("a", "red fox");
  g.add_node("b", "blue jay");
  g.add_node("c", "grey owl");
  g.add_edge("a", "b");
  g.add_edge("b", "c");
  g.add_edge("a", "c");
  const RampConfig ramp{0.25, 1};
  const EgoSubgraph sub = reconstruction_subgraph(g, "a", ramp, 20, 1);
  auto loss_fn = [&] { return add(self_recon_loss(dec, sub, ramp), nbr_recon_loss(dec, sub, ramp)); };
  {
    Tape tape;
    tape.backward(loss_fn());
  }
  Rng rng(6);
  auto& params = dec.parameters();
  double worst = 0.0;
  const int samples = 40;
  for (int k = 0; k < samples; ++k) {
    auto& p = params[rng.below(params.size())];
    std::size_t idx = rng.below(p.tensor.size());
    // Embedding rows of bytes absent from the text have no gradient; sample a used one.
    if (p.name == "tok_emb") idx = static_cast<std::size_t>('r' + kReservedTokens) * c.d_model + rng.below(c.d_model);
    const double numeric = test::central_difference5(p.tensor, idx, [&] { return loss_fn().item(); });
    worst = std::max(worst, test::GradSample{p.tensor.grad()[idx], numeric}.relative_error());
  }
  return {worst < 1e-4, fmt("%d coordinates, worst relative error %.2e", samples, worst)};
}

Outcome causality_and_cache() {
  Rng rng(2);
  auto random_tokens = [&](std::size_t n, int vocab) {
    std::vector<int> ids(n);
    for (int& id : ids) id = kReservedTokens + static_cast<int>(rng.below(vocab - kReservedTokens));
    return ids;
  };
  bool causal = true;
  {
    Decoder dec(test::tiny_config(), 9);
    for (int trial = 0; trial < 10; ++trial) {
      auto ids = random_tokens(12, 64);
      const std::size_t j = 1 + rng.below(ids.size() - 1);
      InputSequence a, b;
      a.append_tokens(ids);
      ids[j] = ids[j] == 10 ? 11 : 10;
      b.append_tokens(ids);
      const auto ha = dec.forward(a).hidden, hb = dec.forward(b).hidden;
      for (std::size_t t = 0; t < j; ++t) {
        for (std::size_t col = 0; col < ha.cols(); ++col) causal &= ha.at(t, col) == hb.at(t, col);
      }
    }
  }
  int identical = 0;
  const int cases = 24;
  for (int trial = 0; trial < cases; ++trial) {
    Decoder dec(test::tiny_config(16), 100 + trial);
    for (auto& p : dec.parameters()) {
      if (p.name == "w_out") {
        for (double& x : p.tensor.leaf_data()) x *= 40.0;
      }
    }
    const auto ctx = random_tokens(1 + rng.below(6), 16);
    const auto prompt = random_tokens(1 + rng.below(3), 16);
    InputSequence seq;
    seq.append_tokens(ctx);
    std::vector<std::size_t> all(ctx.size());
    for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
    const auto got = dec.generate(dec.extract_kv(seq, all), prompt, 10);
    std::vector<test::RefItem> ref;
    for (int id : ctx) ref.push_back({id, {}});
    identical += got == test::reference_generate(dec, ref, prompt, 10);
  }
  return {causal && identical == cases,
          fmt("perturbation %s; %d/%d cached generations token-identical", causal ? "clean" : "leaks", identical,
              cases)};
}

Outcome compression_law() {
  Rng rng(11);
  int checked = 0, wrong = 0;
  auto check = [&](double rho, std::size_t L, std::size_t expect) {
    ++checked;
    wrong += compression_count(rho, L) != expect;
  };
  for (int k = 0; k < 1000; ++k) {
    // rho = p/q with the ceiling computed in integers.
    const std::size_t q = 1 + rng.below(64), p = 1 + rng.below(q), L = 1 + rng.below(2000);
    check(static_cast<double>(p) / static_cast<double>(q), L, (p * L + q - 1) / q);
  }
  for (std::size_t L = 1; L <= 200; ++L) check(1.0, L, L);
  for (int k = 0; k < 200; ++k) check(rng.uniform() * 0.999 + 0.001, 1, 1);
  return {wrong == 0, fmt("%d pairs, %d mismatches", checked, wrong)};
}

Outcome reification() {
  Rng rng(17);
  int graphs = 0, bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    TextRichGraph g;
    const std::size_t n = 2 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) g.add_node("v" + std::to_string(i), "text " + std::to_string(i));
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t k = 0; k < 3 * n; ++k) {
      std::size_t a = rng.below(n), b = rng.below(n);
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      if (!pairs.insert({a, b}).second) continue;
      g.add_edge("v" + std::to_string(a), "v" + std::to_string(b), "rel " + std::to_string(k));
    }
    const TextRichGraph h = reify_edges(g);
    const std::size_t E = g.edge_count();
    bool ok = h.node_count() == g.node_count() + E && h.edge_count() == 2 * E;
    for (const auto& [a, b] : pairs) {
      const auto& nb = h.neighbors("v" + std::to_string(a));
      ok &= std::find(nb.begin(), nb.end(), "v" + std::to_string(b)) == nb.end();
    }
    ++graphs;
    bad += !ok;
  }
  return {bad == 0, fmt("%d random graphs, %d violations", graphs, bad)};
}

// ---- pipeline criteria ----------------------------------------------------------

struct Step {
  std::string name;
  double seconds = 0.0;
};

class Pipeline {
 public:
  Pipeline(fs::path dir, int pretrain_mp) : dir_(std::move(dir)), pretrain_mp_(pretrain_mp) {}

  /// Runs one CLI command; throws with the structured error on failure.
  double cli(std::vector<std::string> args, const std::string& out) {
    args.push_back("--paths.out");
    args.push_back((dir_ / out).string());
    std::ostringstream o, e;
    const auto t = Clock::now();
    const int code = cli::run(args, o, e);
    if (code != 0) throw std::runtime_error(args.front() + " exited " + std::to_string(code) + ": " + e.str());
    return since(t);
  }

  std::vector<std::string> inputs() const {
    return {"--paths.graph", (dir_ / "corpus/graph.jsonl").string(), "--paths.split",
            (dir_ / "corpus/split.json").string()};
  }

  std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) const {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  std::string ckpt(const std::string& rel) const { return (dir_ / rel).string(); }

  double corpus() { return cli({"gen-corpus"}, "corpus"); }

  /// Untrained reference: the same initialization the pretrain command starts from.
  void untrained() {
    RunConfig cfg;
    cfg.ramp.mp_rounds = pretrain_mp_;
    CheckpointData data = checkpoint_of(Decoder(cfg.decoder, cfg.seeds.init));
    put_ramp_config(data.metadata, cfg.ramp);
    fs::create_directories(dir_ / "untrained");
    write_checkpoint(dir_ / "untrained/untrained.ckpt", data);
  }

  double pretrain(bool compact, const std::string& out) {
    return cli(with(with({"pretrain"}, inputs()),
                    {"--ramp.mp_rounds", std::to_string(pretrain_mp_), "--ramp.compact", compact ? "true" : "false"}),
               out);
  }

  double ppl(const std::string& mode, const std::string& checkpoint, const std::string& out) {
    return cli(with(with({"eval-ppl", "--mode", mode}, inputs()), {"--paths.checkpoint", ckpt(checkpoint)}), out);
  }

  double finetune(int mp) {
    return cli(with(with({"finetune"}, inputs()),
                    {"--ramp.mp_rounds", std::to_string(mp), "--paths.checkpoint", ckpt("pretrain/pretrain.ckpt")}),
               "ft_mp" + std::to_string(mp));
  }

  double ablation() {
    return cli(with(with({"mp-ablation"}, inputs()),
                    {"--checkpoints", ckpt("ft_mp0/finetune.ckpt") + "," + ckpt("ft_mp1/finetune.ckpt") + "," +
                                          ckpt("ft_mp2/finetune.ckpt")}),
               "ablation");
  }

  double shuffle(const std::string& kind) {
    return cli(with(with({"shuffle-test", "--kind", kind}, inputs()),
                    {"--paths.checkpoint", ckpt("ft_mp2/finetune.ckpt")}),
               "shuffle");
  }

  double bench() {
    return cli(with(with({"bench-scale", "--emit-plot-data"}, inputs()),
                    {"--paths.checkpoint", ckpt("ft_mp2/finetune.ckpt")}),
               "bench");
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  int pretrain_mp_;
};

struct Timings {
  double corpus = 0, pretrain = 0, pretrain_compact = 0, ppl_fidelity = 0, ppl_compact = 0;
  double finetune = 0, ablation = 0, shuffle = 0, bench = 0;
};

Timings run_pipeline(Pipeline& p) {
  Timings t;
  t.corpus = p.corpus();
  p.untrained();
  t.pretrain = p.pretrain(false, "pretrain");
  t.ppl_fidelity += p.ppl("self", "untrained/untrained.ckpt", "untrained");
  t.ppl_fidelity += p.ppl("nbr", "untrained/untrained.ckpt", "untrained");
  t.ppl_fidelity += p.ppl("self", "pretrain/pretrain.ckpt", "trained");
  t.ppl_fidelity += p.ppl("nbr", "pretrain/pretrain.ckpt", "trained");
  t.pretrain_compact = p.pretrain(true, "pretrain_compact");
  t.ppl_compact = p.ppl("self", "pretrain_compact/pretrain.ckpt", "compact");
  for (int mp : {0, 1, 2}) t.finetune += p.finetune(mp);
  t.ablation = p.ablation();
  t.shuffle += p.shuffle("neighbor-order");
  t.shuffle += p.shuffle("cross-node");
  t.bench = p.bench();
  return t;
}

double value(const fs::path& p) { return read_json(p).at("value").get<double>(); }

/// Judges one criterion; a missing or malformed report fails only that one.
template <class F>
void judged(int id, const std::string& name, double seconds, F f) {
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  report(id, name, o, seconds);
}

void judge_pipeline(const fs::path& d, const Timings& t) {
  const double fid_time = t.pretrain + t.ppl_fidelity;
  judged(4, "fidelity direction", fid_time, [&] {
    const double u = value(d / "untrained/ppl_self.json"), tr = value(d / "trained/ppl_self.json");
    const double rel = 1.0 - tr / u;
    return Outcome{rel >= 0.20 && fid_time <= 600,
                   fmt("PPL_self %.3f untrained -> %.3f trained, %.1f%% lower", u, tr, 100 * rel)};
  });

  const double anchor_time = t.pretrain + t.pretrain_compact + t.ppl_fidelity / 4 + t.ppl_compact;
  judged(5, "anchor ablation direction", anchor_time, [&] {
    const double a = value(d / "trained/ppl_self.json"), c = value(d / "compact/ppl_self.json");
    return Outcome{a < c && anchor_time <= 900, fmt("PPL_self anchored %.3f vs compact %.3f", a, c)};
  });

  judged(6, "communicability", fid_time, [&] {
    const double u = value(d / "untrained/ppl_nbr.json"), tr = value(d / "trained/ppl_nbr.json");
    return Outcome{tr < u && fid_time <= 600, fmt("PPL_nbr %.3f untrained -> %.3f trained", u, tr)};
  });

  const double ft_time = t.finetune + t.ablation;
  judged(7, "propagation helps", ft_time, [&] {
    const auto rows = read_json(d / "ablation/mp_ablation.json").at("details").at("rows");
    const double a0 = rows.at(0).at("accuracy"), a1 = rows.at(1).at("accuracy"), a2 = rows.at(2).at("accuracy");
    // Accuracies are multiples of 1/60; compare in tenths of a point to keep
    // the -1 point tolerance exact.
    const long p0 = std::lround(1000 * a0), p1 = std::lround(1000 * a1), p2 = std::lround(1000 * a2);
    const bool ordered = p2 >= p1 - 10 && p1 >= p0 - 10 && p2 - p0 >= 50 - 10;
    return Outcome{ordered && ft_time <= 1200,
                   fmt("accuracy mp0 %.4f, mp1 %.4f, mp2 %.4f (mp2 - mp0 = %+.1f points)", a0, a1, a2,
                       100 * (a2 - a0))};
  });

  judged(8, "shuffle ordering", t.shuffle, [&] {
    const auto nbr = read_json(d / "shuffle/shuffle_neighbor-order.json").at("details");
    const auto cross = read_json(d / "shuffle/shuffle_cross-node.json").at("details");
    const double dn = nbr.at("delta"), dc = cross.at("delta");
    return Outcome{std::abs(dn) < std::abs(dc) && dc < 0 && t.shuffle <= 600,
                   fmt("delta neighbor-order %+.4f (sd %.4f), cross-node %+.4f (sd %.4f)", dn,
                       nbr.at("stddev").get<double>(), dc, cross.at("stddev").get<double>())};
  });

  judged(9, "scaling ordering", t.bench, [&] {
    const auto buckets = read_json(d / "bench/bench_scale.timing.json").at("buckets");
    const auto& first = buckets.front();
    const auto& last = buckets.back();
    const bool base_one = first.at("ramp_normalized") == 1.0 && first.value("baseline_normalized", 0.0) == 1.0;
    const double r_last = last.at("ramp_normalized"), b_last = last.value("baseline_normalized", NAN);
    return Outcome{base_one && r_last < b_last && t.bench <= 600,
                   fmt("largest bucket %s: RAMP %.2fx vs graph-to-text %.2fx; smallest bucket %s both 1.0",
                       last.at("bucket").get<std::string>().c_str(), r_last, b_last, base_one ? "is" : "is NOT")};
  });
}

/// Every deterministic artifact: reports without their timing twins, and checkpoints.
std::set<std::string> comparable(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const std::string name = e.path().filename().string();
    const bool report_file = e.path().extension() == ".json" && name.find(".timing.") == std::string::npos;
    if (e.is_regular_file() && (report_file || e.path().extension() == ".ckpt")) {
      out.insert(fs::relative(e.path(), root).string());
    }
  }
  return out;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  const auto fa = comparable(a), fb = comparable(b);
  if (fa != fb) return {false, "the two runs produced different artifact sets"};
  std::size_t reports = 0, checkpoints = 0;
  for (const auto& f : fa) {
    if (slurp(a / f) != slurp(b / f)) return {false, f + " differs"};
    (f.ends_with(".ckpt") ? checkpoints : reports) += 1;
  }
  return {true, fmt("%zu reports and %zu checkpoints byte-identical", reports, checkpoints)};
}

template <class F>
void timed(int id, const std::string& name, F f) {
  const auto t = Clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  report(id, name, o, since(t));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-11"};
  std::string out = "acceptance_out";
  int pretrain_mp = 1;
  app.add_option("--out", out, "scratch directory (recreated)");
  app.add_option("--pretrain-mp", pretrain_mp, "message-passing rounds used during pre-training");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(out);
  fs::remove_all(root);
  fs::create_directories(root);

  timed(1, "gradient correctness", gradient_check);
  timed(2, "causality and cache equivalence", causality_and_cache);
  timed(3, "compression law", compression_law);

  Pipeline first(root / "run1", pretrain_mp);
  Pipeline second(root / "run2", pretrain_mp);
  bool ran = false;
  try {
    const Timings t = run_pipeline(first);
    ran = true;
    judge_pipeline(first.dir(), t);
  } catch (const std::exception& e) {
    for (int id = 4; id <= 9; ++id) report(id, "pipeline", {false, std::string("error: ") + e.what()}, 0.0);
  }
  timed(10, "determinism", [&] {
    if (!ran) return Outcome{false, "first run did not complete"};
    run_pipeline(second);
    return determinism(first.dir(), second.dir());
  });
  timed(11, "edge reification", reification);

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
