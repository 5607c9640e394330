#pragma once

// Summary-token message passing over an ego subgraph. Every node keeps a
// matrix of summary vectors; each round re-reads the node's raw text next to
// its neighbors' previous summaries and emits fresh ones.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ramp/decoder.hpp"
#include "ramp/graph.hpp"
#include "ramp/tensor.hpp"

namespace ramp {

enum class NeighborOrder { as_stored, seeded_shuffle };

struct RampConfig {
  double rho = 0.125;
  int mp_rounds = 2;
  bool compact = false;  // drop the raw text after round 0
  NeighborOrder neighbor_order = NeighborOrder::as_stored;
  std::uint64_t order_seed = 0;

  void validate() const;
  friend bool operator==(const RampConfig&, const RampConfig&) = default;
};

/// ceil(rho * length), computed so that products landing exactly on an
/// integer are not pushed up by rounding. Requires length >= 1.
std::size_t compression_count(double rho, std::size_t length);

struct SummaryState {
  std::string node_id;
  int round = 0;
  Tensor vectors;  // [n x d_model]
};

/// Summary states per round per local subgraph node.
class MemoryTable {
 public:
  explicit MemoryTable(std::size_t node_count = 0) : nodes_(node_count) {}

  std::size_t node_count() const noexcept { return nodes_; }
  /// One past the highest round holding any entry.
  int rounds() const noexcept { return static_cast<int>(rounds_.size()); }
  bool has(int round, std::size_t local) const;
  const Tensor& at(int round, std::size_t local) const;
  void put(int round, std::size_t local, Tensor vectors);
  bool complete(int round) const;
  std::vector<SummaryState> states(const EgoSubgraph& sub) const;

 private:
  std::size_t nodes_;
  std::vector<std::vector<Tensor>> rounds_;
};

/// Round-0 input for one node: its tokens followed by n placeholders.
InputSequence compression_input(std::span<const int> tokens, const RampConfig& cfg);

/// Round ell -> ell+1 input for local node i: neighbor summaries, the raw
/// tokens (unless compact), the node's own summary, then n placeholders.
InputSequence assemble_input(const EgoSubgraph& sub, std::size_t local, const MemoryTable& memory,
                             int round, const RampConfig& cfg);

/// Neighbor list of `local` as consumed at `round` under cfg.neighbor_order.
std::vector<std::size_t> neighbor_order(const EgoSubgraph& sub, std::size_t local, int round,
                                        const RampConfig& cfg);

/// Round-0 state of a single node.
Tensor init_summaries(const Decoder& decoder, std::span<const int> tokens, const RampConfig& cfg);

/// Fills round 0 for the given local nodes (all when `locals` is empty).
void init_round(const Decoder& decoder, const EgoSubgraph& sub, MemoryTable& memory,
                const RampConfig& cfg, std::span<const std::size_t> locals = {});

/// Computes round+1 for every node from round `round`. States are written
/// after all forwards finish. workers > 1 runs inference forwards on threads;
/// while a tape is active the round runs on the calling thread.
void mp_round(const Decoder& decoder, const EgoSubgraph& sub, MemoryTable& memory, int round,
              const RampConfig& cfg, unsigned workers = 1);

/// Runs round 0 and cfg.mp_rounds full rounds.
MemoryTable propagate_all(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg,
                          unsigned workers = 1);

/// Computes only the states the final round of `targets` depends on.
/// Final-round states equal those of propagate_all.
MemoryTable propagate_for(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg,
                          std::span<const std::size_t> targets, int final_round);

/// KV rows of a forward over each node's injected summaries at `round`,
/// concatenated in the given order.
KVCache materialize_kv(const Decoder& decoder, const MemoryTable& memory, int round,
                       std::span<const std::size_t> locals);

/// Node-level context: the target's final-round cache.
KVCache node_context(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg);
/// Graph-level context: every member's final-round cache in member order.
KVCache graph_context(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& cfg);

/// Mean teacher-forced cross-entropy of `answer` after cache and query.
Tensor answer_loss(const Decoder& decoder, const KVCache& kv, std::span<const int> query,
                   std::span<const int> answer);

std::string answer_generate(const Decoder& decoder, const KVCache& kv, std::span<const int> query,
                            std::size_t max_new);

/// Generation from an earlier round's states of `target`.
std::string round_peek(const Decoder& decoder, const MemoryTable& memory, int round,
                       std::size_t target, std::span<const int> query, std::size_t max_new);

/// Binary dump: magic, entry count, then per entry (round, node id, rows,
/// cols, little-endian doubles).
void dump_memory(const MemoryTable& memory, const EgoSubgraph& sub,
                 const std::filesystem::path& path);

}  // namespace ramp
