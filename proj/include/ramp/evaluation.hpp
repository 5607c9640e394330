#pragma once

// Measurement protocol: reconstruction perplexity, classification accuracy,
// shuffle probes, the mp-round ablation, and the scaling benchmark against a
// flat graph-to-text serialization.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramp/decoder.hpp"
#include "ramp/engine.hpp"
#include "ramp/graph.hpp"
#include "ramp/training.hpp"

namespace ramp {

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string fingerprint;
  double wall_seconds = 0.0;
  nlohmann::json details = nlohmann::json::object();
  nlohmann::json timing = nlohmann::json::object();  // wall-clock measurements
};

/// Everything but wall-clock data, so identical runs serialize identically.
nlohmann::json report_json(const EvalReport& report);
nlohmann::json timing_json(const EvalReport& report);

/// Writes <stem>.json (deterministic) and <stem>.timing.json.
void write_report(const EvalReport& report, const std::filesystem::path& dir,
                  const std::string& stem);

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

enum class PplMode { self, nbr };
std::string ppl_mode_name(PplMode m);
PplMode parse_ppl_mode(const std::string& s);

/// exp of the token-weighted mean reconstruction loss over `ids`. nbr mode
/// skips isolated nodes and reports how many.
EvalReport perplexity(const Decoder& decoder, const TextRichGraph& graph,
                      std::span<const std::string> ids, PplMode mode, const RampConfig& ramp,
                      std::size_t ego_max_size, std::uint64_t seed);

/// Plain next-token perplexity of node texts with no summary context.
EvalReport raw_lm_perplexity(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> ids);

EvalReport classify_accuracy(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> ids, const ClassificationTask& task,
                             const RampConfig& ramp, const TrainConfig& cfg, std::uint64_t seed);

enum class ShuffleKind { neighbor_order, cross_node };
std::string shuffle_kind_name(ShuffleKind k);
ShuffleKind parse_shuffle_kind(const std::string& s);

/// Accuracy under a per-seed subgraph transform: mean, sample stddev, and
/// delta against the unshuffled accuracy. `identity` swaps the seeded
/// permutations for identity ones.
EvalReport shuffle_experiment(const Decoder& decoder, const TextRichGraph& graph,
                              std::span<const std::string> ids, const ClassificationTask& task,
                              const RampConfig& ramp, const TrainConfig& cfg, ShuffleKind kind,
                              std::span<const std::uint64_t> shuffle_seeds, std::uint64_t seed,
                              bool identity = false);

struct AblationEntry {
  const Decoder* decoder;
  RampConfig ramp;
};

/// Accuracy per entry; entries must differ only in mp_rounds.
EvalReport mp_ablation(std::span<const AblationEntry> entries, const TextRichGraph& graph,
                       std::span<const std::string> ids, const ClassificationTask& task,
                       const TrainConfig& cfg, std::uint64_t seed);

/// "[k] text" per member, an adjacency listing, then the query.
Tokens serialize_subgraph(const EgoSubgraph& sub, std::span<const int> query);

struct BaselineAnswer {
  std::string answer;
  std::size_t sequence_length = 0;
  double wall_seconds = 0.0;
};

/// One flat pass over the serialized subgraph, then greedy decoding.
BaselineAnswer graph_to_text_baseline(const Decoder& decoder, const EgoSubgraph& sub,
                                      std::span<const int> query, std::size_t max_new);

struct Bucket {
  std::size_t lo, hi;  // inclusive member-count range
  std::string name() const;
};

std::vector<Bucket> default_buckets();

struct ScalingOptions {
  std::vector<Bucket> buckets = default_buckets();
  std::size_t samples_per_bucket = 3;
  std::size_t reps = 5;  // timed, after one discarded warm-up
};

/// Per bucket: median latency of the RAMP pipeline and of the baseline, each
/// normalized to its own first non-empty bucket, plus RAMP accuracy.
/// Latencies live in the timing part of the report.
EvalReport scaling_benchmark(const Decoder& decoder, const TextRichGraph& graph,
                             std::span<const std::string> candidates,
                             const ClassificationTask& task, const RampConfig& ramp,
                             const ScalingOptions& opts, std::uint64_t seed);

/// Median of a non-empty sample.
double median(std::vector<double> values);

}  // namespace ramp
