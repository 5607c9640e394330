#pragma once

// Synthetic text-rich graphs with planted labels. A node's class keyword
// appears in its own text with probability self_signal; otherwise the label
// has to be inferred from homophilous neighbors (or weakly from filler-word
// statistics).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ramp/graph.hpp"

namespace ramp {

struct CorpusSpec {
  std::size_t n_nodes = 300;
  std::size_t n_classes = 4;
  double homophily = 0.85;
  double self_signal = 0.6;
  std::size_t text_min = 16;
  std::size_t text_max = 48;
  double degree = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { train, val, test };
std::string split_name(Split s);
Split parse_split(const std::string& s);

using SplitMap = std::map<std::string, Split>;

struct Corpus {
  TextRichGraph graph;
  SplitMap split;
  std::vector<std::string> labels;  // class index -> label string (also the keyword)
  std::size_t same_class_edges = 0;
};

/// Class names: alpha, beta, gamma, ... then class<k> past the Greek list.
std::vector<std::string> class_labels(std::size_t n_classes);

Corpus generate_corpus(const CorpusSpec& spec);

/// Node ids of a split, sorted.
std::vector<std::string> split_ids(const SplitMap& split, Split which);

/// JSON object node id -> "train" | "val" | "test".
void save_split(const SplitMap& split, const std::filesystem::path& path);
SplitMap load_split(const std::filesystem::path& path);

/// Sorted distinct labels present in the graph.
std::vector<std::string> graph_labels(const TextRichGraph& graph);

struct AuditEntry {
  std::string id;
  bool has_self_signal = false;
  std::optional<std::string> majority_neighbor_class;  // empty for isolated nodes
  bool majority_tied = false;
};

struct SignalAudit {
  std::vector<AuditEntry> entries;
  std::size_t with_self_signal = 0;
  std::size_t without_self_signal = 0;
  std::size_t without_signal_with_neighbors = 0;
  std::size_t without_signal_majority_correct = 0;
  std::size_t with_neighbors = 0;
  std::size_t majority_correct = 0;

  double no_signal_majority_accuracy() const;
  double majority_accuracy() const;
};

/// Keyword presence and neighbor-majority class per node. Majority ties go to
/// the smallest label and are flagged. Unlabeled nodes are rejected.
SignalAudit signal_audit(const TextRichGraph& graph);

/// Whether `word` occurs in `text` delimited by non-letters.
bool contains_word(std::string_view text, std::string_view word);

}  // namespace ramp
