#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ramp {

using Tokens = std::vector<int>;

/// Byte-level ids shifted past the reserved specials (pad, end-of-sequence,
/// summary placeholder).
Tokens tokenize(std::string_view text);
/// Inverse of tokenize; reserved ids are dropped.
std::string detokenize(std::span<const int> ids);

struct NodeRecord {
  std::string id;
  std::string text;
  Tokens tokens;
  std::optional<std::string> label;
};

/// Undirected text-rich graph. Neighbor lists are kept sorted by id.
class TextRichGraph {
 public:
  void add_node(std::string id, std::string text, std::optional<std::string> label = {});
  /// Adds the undirected edge {a, b}; repeated edges are stored once.
  void add_edge(const std::string& a, const std::string& b,
                std::optional<std::string> label = {});

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const NodeRecord& node(const std::string& id) const;
  /// Node ids in insertion order.
  const std::vector<std::string>& node_ids() const noexcept { return order_; }
  const std::vector<std::string>& neighbors(const std::string& id) const;
  std::size_t node_count() const noexcept { return order_.size(); }
  std::size_t edge_count() const noexcept { return edge_labels_.size(); }
  bool adjacent(const std::string& a, const std::string& b) const;
  /// Label of edge {a, b}; empty when unlabeled.
  std::optional<std::string> edge_label(const std::string& a, const std::string& b) const;

  struct Edge {
    std::string a, b;  // a < b
    std::optional<std::string> label;
  };
  std::vector<Edge> edges() const;

  /// Checks symmetry, absence of self-loops, and endpoint existence.
  void validate() const;

 private:
  std::vector<NodeRecord> nodes_;
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::vector<std::string>> adjacency_;
  std::map<std::pair<std::string, std::string>, std::optional<std::string>> edge_labels_;
};

/// Reads the JSON-lines graph format: one `{"node": {...}}` or
/// `{"edge": {...}}` object per line. Directed input is symmetrized.
TextRichGraph load_graph(const std::filesystem::path& path);
TextRichGraph parse_graph(std::string_view jsonl, const std::string& source = "<memory>");
void save_graph(const TextRichGraph& graph, const std::filesystem::path& path);
std::string serialize_graph(const TextRichGraph& graph);

inline constexpr const char* kPromptNodeId = "<prompt>";

/// Hop-limited neighborhood of a target, optionally with a synthetic prompt
/// node adjacent to every member. Local index i < members.size() is a member
/// (target at 0); the prompt node, when present, is the last local index.
struct EgoSubgraph {
  std::string target;
  std::vector<std::string> members;
  std::vector<Tokens> tokens;                        // per local node
  std::vector<std::vector<std::size_t>> neighbors;   // per local node, local indices
  bool has_prompt = false;

  std::size_t node_count() const noexcept { return tokens.size(); }
  std::size_t prompt_index() const;
  const std::string& id_of(std::size_t local) const;
  std::size_t edge_count() const;  // directed list entries / 2
};

struct EgoOptions {
  int hops = 2;
  std::size_t max_size = 20;
  std::uint64_t seed = 0;
  bool prompt_node = true;
  std::string prompt_text = "?";
};

EgoSubgraph ego_subgraph(const TextRichGraph& graph, const std::string& target,
                         const EgoOptions& options);

/// Replaces every labeled edge (u, v, l) with a node carrying text l joined to
/// both u and v.
TextRichGraph reify_edges(const TextRichGraph& graph);

/// Produces a permutation of [0, n).
using PermutationSource = std::function<std::vector<std::size_t>(std::size_t n)>;
PermutationSource seeded_permutations(std::uint64_t seed);
PermutationSource identity_permutations();

EgoSubgraph shuffle_neighbor_order(const EgoSubgraph& sub, std::uint64_t seed);
EgoSubgraph shuffle_neighbor_order(const EgoSubgraph& sub, const PermutationSource& perms);

struct CrossShuffleResult {
  EgoSubgraph subgraph;
  bool warning = false;  // fewer than two members, left unchanged
};

/// Node i receives node pi(i)'s neighbor list for a permutation pi over the
/// members; the prompt node keeps its list.
CrossShuffleResult cross_node_shuffle(const EgoSubgraph& sub, std::uint64_t seed);
CrossShuffleResult cross_node_shuffle(const EgoSubgraph& sub, const PermutationSource& perms);

}  // namespace ramp
