#include "ramp/engine.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "ramp/binary_io.hpp"
#include "ramp/error.hpp"
#include "ramp/random.hpp"

namespace ramp {

void RampConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) fail(ErrorKind::config, "rho must lie in (0, 1]");
  if (mp_rounds < 0) fail(ErrorKind::config, "mp_rounds must be >= 0");
}

std::size_t compression_count(double rho, std::size_t length) {
  if (length < 1) fail(ErrorKind::precondition, "compression needs at least one token");
  if (!(rho > 0.0 && rho <= 1.0)) fail(ErrorKind::config, "rho must lie in (0, 1]");
  // rho * L carries up to one ulp of error, e.g. 0.07 * 100 = 7.000000000000001.
  const double exact = rho * static_cast<double>(length);
  const auto n = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::max<std::size_t>(n, 1);
}

// ---- memory table ---------------------------------------------------------

bool MemoryTable::has(int round, std::size_t local) const {
  return round >= 0 && round < rounds() && local < nodes_ && rounds_[round][local].defined();
}

const Tensor& MemoryTable::at(int round, std::size_t local) const {
  if (!has(round, local)) {
    fail(ErrorKind::contract, "memory has no entry for node " + std::to_string(local) +
                                  " at round " + std::to_string(round));
  }
  return rounds_[round][local];
}

void MemoryTable::put(int round, std::size_t local, Tensor vectors) {
  if (round < 0 || local >= nodes_) fail(ErrorKind::index, "memory slot out of range");
  while (rounds() <= round) rounds_.emplace_back(nodes_);
  rounds_[round][local] = std::move(vectors);
}

bool MemoryTable::complete(int round) const {
  if (round < 0 || round >= rounds()) return false;
  return std::all_of(rounds_[round].begin(), rounds_[round].end(),
                     [](const Tensor& t) { return t.defined(); });
}

std::vector<SummaryState> MemoryTable::states(const EgoSubgraph& sub) const {
  std::vector<SummaryState> out;
  for (int r = 0; r < rounds(); ++r) {
    for (std::size_t i = 0; i < nodes_; ++i) {
      if (has(r, i)) out.push_back(SummaryState{sub.id_of(i), r, rounds_[r][i]});
    }
  }
  return out;
}

// ---- input assembly -------------------------------------------------------

namespace {

std::vector<int> placeholders(std::size_t n) { return std::vector<int>(n, kSummaryToken); }

std::size_t summary_count(const EgoSubgraph& sub, std::size_t local, const RampConfig& cfg) {
  return compression_count(cfg.rho, sub.tokens.at(local).size());
}

template <class Fn>
Tensor with_node_context(const EgoSubgraph& sub, std::size_t local, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::capacity) throw;
    fail(ErrorKind::capacity, "node '" + sub.id_of(local) + "': " + e.what());
  }
}

Tensor run_update(const Decoder& decoder, const InputSequence& items, std::size_t n) {
  ForwardResult r = decoder.forward(items, ForwardOptions{.logits = false});
  return slice_rows(r.hidden, items.length() - n, n);
}

// Runs fn(local) for each local, on up to `workers` threads when no tape is
// recording. Results land in `out` by position.
template <class Fn>
void run_nodes(std::span<const std::size_t> locals, std::vector<Tensor>& out, unsigned workers,
               Fn&& fn) {
  out.assign(locals.size(), Tensor{});
  const unsigned threads =
      Tape::active() ? 1u : std::min<unsigned>(std::max(workers, 1u), locals.size());
  if (threads <= 1) {
    for (std::size_t k = 0; k < locals.size(); ++k) out[k] = fn(locals[k]);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < locals.size(); k += threads) out[k] = fn(locals[k]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::size_t> all_locals(const EgoSubgraph& sub) {
  std::vector<std::size_t> v(sub.node_count());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

InputSequence compression_input(std::span<const int> tokens, const RampConfig& cfg) {
  if (tokens.empty()) fail(ErrorKind::precondition, "cannot compress an empty text");
  InputSequence items;
  items.append_tokens(tokens);
  items.append_tokens(placeholders(compression_count(cfg.rho, tokens.size())));
  return items;
}

std::vector<std::size_t> neighbor_order(const EgoSubgraph& sub, std::size_t local, int round,
                                        const RampConfig& cfg) {
  std::vector<std::size_t> order = sub.neighbors.at(local);
  if (cfg.neighbor_order == NeighborOrder::seeded_shuffle) {
    Rng rng(derive_seed(cfg.order_seed, (static_cast<std::uint64_t>(round) << 32) ^ local));
    rng.shuffle(order);
  }
  return order;
}

InputSequence assemble_input(const EgoSubgraph& sub, std::size_t local, const MemoryTable& memory,
                             int round, const RampConfig& cfg) {
  if (local >= sub.node_count()) fail(ErrorKind::index, "local node outside subgraph");
  InputSequence items;
  for (std::size_t j : neighbor_order(sub, local, round, cfg)) {
    items.append_vectors(memory.at(round, j));
  }
  if (!cfg.compact) items.append_tokens(sub.tokens[local]);
  items.append_vectors(memory.at(round, local));
  items.append_tokens(placeholders(summary_count(sub, local, cfg)));
  return items;
}

Tensor init_summaries(const Decoder& decoder, std::span<const int> tokens, const RampConfig& cfg) {
  InputSequence items = compression_input(tokens, cfg);
  return run_update(decoder, items, compression_count(cfg.rho, tokens.size()));
}

void init_round(const Decoder& decoder, const EgoSubgraph& sub, MemoryTable& memory,
                const RampConfig& cfg, std::span<const std::size_t> locals) {
  std::vector<std::size_t> every;
  if (locals.empty()) {
    every = all_locals(sub);
    locals = every;
  }
  for (std::size_t i : locals) {
    memory.put(0, i, with_node_context(sub, i, [&] {
                 return init_summaries(decoder, sub.tokens.at(i), cfg);
               }));
  }
}

namespace {

void advance(const Decoder& decoder, const EgoSubgraph& sub, MemoryTable& memory, int round,
             const RampConfig& cfg, std::span<const std::size_t> locals, unsigned workers) {
  std::vector<Tensor> fresh;
  run_nodes(locals, fresh, workers, [&](std::size_t i) {
    return with_node_context(sub, i, [&] {
      InputSequence items = assemble_input(sub, i, memory, round, cfg);
      return run_update(decoder, items, summary_count(sub, i, cfg));
    });
  });
  // Barrier: round+1 becomes visible only after every forward finished.
  for (std::size_t k = 0; k < locals.size(); ++k) memory.put(round + 1, locals[k], fresh[k]);
}

}  // namespace

void mp_round(const Decoder& decoder, const EgoSubgraph& sub, MemoryTable& memory, int round,
              const RampConfig& cfg, unsigned workers) {
  if (!memory.complete(round)) {
    fail(ErrorKind::contract, "round " + std::to_string(round) + " is incomplete");
  }
  const auto locals = all_locals(sub);
  advance(decoder, sub, memory, round, cfg, locals, workers);
}

MemoryTable propagate_all(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg,
                          unsigned workers) {
  cfg.validate();
  MemoryTable memory(sub.node_count());
  init_round(decoder, sub, memory, cfg);
  for (int r = 0; r < cfg.mp_rounds; ++r) mp_round(decoder, sub, memory, r, cfg, workers);
  return memory;
}

MemoryTable propagate_for(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg,
                          std::span<const std::size_t> targets, int final_round) {
  cfg.validate();
  if (final_round < 0) fail(ErrorKind::precondition, "final round must be >= 0");
  std::vector<std::set<std::size_t>> need(final_round + 1);
  for (std::size_t t : targets) {
    if (t >= sub.node_count()) fail(ErrorKind::index, "target outside subgraph");
    need[final_round].insert(t);
  }
  for (int r = final_round; r > 0; --r) {
    need[r - 1] = need[r];
    for (std::size_t i : need[r]) {
      for (std::size_t j : sub.neighbors[i]) need[r - 1].insert(j);
    }
  }
  MemoryTable memory(sub.node_count());
  const std::vector<std::size_t> first(need[0].begin(), need[0].end());
  init_round(decoder, sub, memory, cfg, first);
  for (int r = 0; r < final_round; ++r) {
    const std::vector<std::size_t> next(need[r + 1].begin(), need[r + 1].end());
    advance(decoder, sub, memory, r, cfg, next, 1);
  }
  return memory;
}

// ---- materialization and answers -----------------------------------------

KVCache materialize_kv(const Decoder& decoder, const MemoryTable& memory, int round,
                       std::span<const std::size_t> locals) {
  std::vector<KVCache> parts;
  parts.reserve(locals.size());
  for (std::size_t i : locals) {
    const Tensor& s = memory.at(round, i);
    InputSequence items;
    items.append_vectors(s);
    std::vector<std::size_t> positions(s.rows());
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    parts.push_back(decoder.extract_kv(items, positions));
  }
  return KVCache::concat(parts);
}

KVCache node_context(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg) {
  const std::size_t target = 0;
  MemoryTable memory = propagate_for(decoder, sub, cfg, std::span(&target, 1), cfg.mp_rounds);
  return materialize_kv(decoder, memory, cfg.mp_rounds, std::span(&target, 1));
}

KVCache graph_context(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg) {
  std::vector<std::size_t> members(sub.members.size());
  std::iota(members.begin(), members.end(), std::size_t{0});
  MemoryTable memory = propagate_for(decoder, sub, cfg, members, cfg.mp_rounds);
  return materialize_kv(decoder, memory, cfg.mp_rounds, members);
}

Tensor answer_loss(const Decoder& decoder, const KVCache& kv, std::span<const int> query,
                   std::span<const int> answer) {
  if (answer.empty()) fail(ErrorKind::precondition, "answer_loss: empty answer");
  if (query.empty()) fail(ErrorKind::precondition, "answer_loss: empty query");
  InputSequence items;
  items.append_tokens(query);
  items.append_tokens(answer.first(answer.size() - 1));
  ForwardResult r =
      decoder.forward_with_context(kv, items, ForwardOptions{.logits_from = query.size() - 1});
  return cross_entropy(r.logits, answer);
}

std::string answer_generate(const Decoder& decoder, const KVCache& kv, std::span<const int> query,
                            std::size_t max_new) {
  if (max_new == 0) return {};
  return detokenize(decoder.generate(kv, query, max_new));
}

std::string round_peek(const Decoder& decoder, const MemoryTable& memory, int round,
                       std::size_t target, std::span<const int> query, std::size_t max_new) {
  if (!memory.has(round, target)) {
    fail(ErrorKind::contract, "round " + std::to_string(round) + " not computed for the target");
  }
  return answer_generate(decoder, materialize_kv(decoder, memory, round, std::span(&target, 1)),
                         query, max_new);
}

void dump_memory(const MemoryTable& memory, const EgoSubgraph& sub,
                 const std::filesystem::path& path) {
  const auto states = memory.states(sub);
  io::Writer w;
  w.raw("RAMPMEM1", 8);
  w.u32(static_cast<std::uint32_t>(states.size()));
  for (const auto& s : states) {
    w.u32(static_cast<std::uint32_t>(s.round));
    w.str(s.node_id);
    w.u32(static_cast<std::uint32_t>(s.vectors.rows()));
    w.u32(static_cast<std::uint32_t>(s.vectors.cols()));
    for (double v : s.vectors.data()) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write memory dump " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
}

}  // namespace ramp
