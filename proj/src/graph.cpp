#include "ramp/graph.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ramp/decoder.hpp"
#include "ramp/error.hpp"
#include "ramp/random.hpp"

namespace ramp {

using json = nlohmann::json;

Tokens tokenize(std::string_view text) {
  Tokens ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c) + kReservedTokens);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= kReservedTokens && id < kReservedTokens + 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id - kReservedTokens)));
    }
  }
  return out;
}

// ---- TextRichGraph --------------------------------------------------------

void TextRichGraph::add_node(std::string id, std::string text, std::optional<std::string> label) {
  if (id.empty()) fail(ErrorKind::validation, "node id must be non-empty");
  if (contains(id)) fail(ErrorKind::validation, "duplicate node id '" + id + "'");
  index_[id] = nodes_.size();
  order_.push_back(id);
  adjacency_[id];
  Tokens tokens = tokenize(text);
  nodes_.push_back(NodeRecord{std::move(id), std::move(text), std::move(tokens), std::move(label)});
}

void TextRichGraph::add_edge(const std::string& a, const std::string& b,
                             std::optional<std::string> label) {
  if (!contains(a) || !contains(b)) {
    fail(ErrorKind::validation, "edge (" + a + ", " + b + ") references an unknown node");
  }
  if (a == b) fail(ErrorKind::validation, "self-loop on node '" + a + "'");
  auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  if (edge_labels_.count(key)) return;
  edge_labels_.emplace(key, std::move(label));
  auto insert_sorted = [](std::vector<std::string>& list, const std::string& v) {
    list.insert(std::lower_bound(list.begin(), list.end(), v), v);
  };
  insert_sorted(adjacency_[a], b);
  insert_sorted(adjacency_[b], a);
}

const NodeRecord& TextRichGraph::node(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail(ErrorKind::lookup, "unknown node '" + id + "'");
  return nodes_[it->second];
}

const std::vector<std::string>& TextRichGraph::neighbors(const std::string& id) const {
  auto it = adjacency_.find(id);
  if (it == adjacency_.end()) fail(ErrorKind::lookup, "unknown node '" + id + "'");
  return it->second;
}

bool TextRichGraph::adjacent(const std::string& a, const std::string& b) const {
  return edge_labels_.count(a < b ? std::make_pair(a, b) : std::make_pair(b, a)) != 0;
}

std::optional<std::string> TextRichGraph::edge_label(const std::string& a,
                                                     const std::string& b) const {
  auto it = edge_labels_.find(a < b ? std::make_pair(a, b) : std::make_pair(b, a));
  if (it == edge_labels_.end()) return std::nullopt;
  return it->second;
}

std::vector<TextRichGraph::Edge> TextRichGraph::edges() const {
  std::vector<Edge> out;
  out.reserve(edge_labels_.size());
  for (const auto& [key, label] : edge_labels_) out.push_back(Edge{key.first, key.second, label});
  return out;
}

void TextRichGraph::validate() const {
  for (const auto& [id, list] : adjacency_) {
    for (const auto& nb : list) {
      if (nb == id) fail(ErrorKind::validation, "self-loop on node '" + id + "'");
      if (!contains(nb)) fail(ErrorKind::validation, "dangling edge endpoint '" + nb + "'");
      const auto& back = adjacency_.at(nb);
      if (!std::binary_search(back.begin(), back.end(), id)) {
        fail(ErrorKind::validation, "asymmetric adjacency between '" + id + "' and '" + nb + "'");
      }
    }
  }
}

// ---- JSON lines -----------------------------------------------------------

namespace {

std::optional<std::string> optional_string(const json& obj, const char* key, std::size_t line) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  if (!obj.at(key).is_string()) {
    fail(ErrorKind::parse, "line " + std::to_string(line) + ": field '" + key + "' must be a string");
  }
  return obj.at(key).get<std::string>();
}

std::string required_string(const json& obj, const char* key, std::size_t line) {
  auto v = optional_string(obj, key, line);
  if (!v) fail(ErrorKind::parse, "line " + std::to_string(line) + ": missing field '" + key + "'");
  return *v;
}

}  // namespace

TextRichGraph parse_graph(std::string_view jsonl, const std::string& source) {
  TextRichGraph g;
  struct PendingEdge {
    std::string src, dst;
    std::optional<std::string> label;
    std::size_t line;
  };
  std::vector<PendingEdge> edges;
  std::istringstream in{std::string(jsonl)};
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::parse, source + " line " + std::to_string(line) + ": " + e.what());
    }
    if (!obj.is_object() || obj.size() != 1) {
      fail(ErrorKind::parse, source + " line " + std::to_string(line) +
                                 ": expected a single 'node' or 'edge' object");
    }
    if (obj.contains("node") && obj["node"].is_object()) {
      const json& n = obj["node"];
      g.add_node(required_string(n, "id", line), required_string(n, "text", line),
                 optional_string(n, "label", line));
    } else if (obj.contains("edge") && obj["edge"].is_object()) {
      const json& e = obj["edge"];
      edges.push_back(PendingEdge{required_string(e, "src", line), required_string(e, "dst", line),
                                  optional_string(e, "label", line), line});
    } else {
      fail(ErrorKind::parse, source + " line " + std::to_string(line) +
                                 ": expected a single 'node' or 'edge' object");
    }
  }
  for (const auto& e : edges) {
    if (!g.contains(e.src) || !g.contains(e.dst)) {
      fail(ErrorKind::validation, source + " line " + std::to_string(e.line) + ": dangling edge (" +
                                      e.src + ", " + e.dst + ")");
    }
    if (e.src == e.dst) {
      fail(ErrorKind::validation, source + " line " + std::to_string(e.line) + ": self-loop on '" +
                                      e.src + "'");
    }
    g.add_edge(e.src, e.dst, e.label);
  }
  g.validate();
  return g;
}

TextRichGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open graph file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_graph(buf.str(), path.string());
}

std::string serialize_graph(const TextRichGraph& graph) {
  std::string out;
  for (const auto& id : graph.node_ids()) {
    const auto& n = graph.node(id);
    json node = {{"id", n.id}, {"text", n.text}};
    if (n.label) node["label"] = *n.label;
    out += json{{"node", node}}.dump() + "\n";
  }
  for (const auto& e : graph.edges()) {
    json edge = {{"src", e.a}, {"dst", e.b}};
    if (e.label) edge["label"] = *e.label;
    out += json{{"edge", edge}}.dump() + "\n";
  }
  return out;
}

void save_graph(const TextRichGraph& graph, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write graph file " + path.string());
  out << serialize_graph(graph);
}

// ---- ego subgraphs --------------------------------------------------------

std::size_t EgoSubgraph::prompt_index() const {
  if (!has_prompt) fail(ErrorKind::contract, "subgraph has no prompt node");
  return members.size();
}

const std::string& EgoSubgraph::id_of(std::size_t local) const {
  static const std::string prompt_id = kPromptNodeId;
  if (local < members.size()) return members[local];
  if (has_prompt && local == members.size()) return prompt_id;
  fail(ErrorKind::index, "local node " + std::to_string(local) + " outside subgraph");
}

std::size_t EgoSubgraph::edge_count() const {
  std::size_t entries = 0;
  for (const auto& list : neighbors) entries += list.size();
  return entries / 2;
}

EgoSubgraph ego_subgraph(const TextRichGraph& graph, const std::string& target,
                         const EgoOptions& options) {
  if (!graph.contains(target)) fail(ErrorKind::lookup, "unknown target node '" + target + "'");
  if (options.hops < 1) fail(ErrorKind::precondition, "ego_subgraph: hops must be >= 1");
  if (options.max_size < 1) fail(ErrorKind::precondition, "ego_subgraph: max_size must be >= 1");
  Rng rng(options.seed);
  EgoSubgraph sub;
  sub.target = target;
  sub.members.push_back(target);
  std::set<std::string> seen{target};
  std::vector<std::string> frontier{target};
  for (int hop = 0; hop < options.hops && sub.members.size() < options.max_size; ++hop) {
    std::set<std::string> next_set;
    for (const auto& f : frontier) {
      for (const auto& nb : graph.neighbors(f)) {
        if (!seen.count(nb)) next_set.insert(nb);
      }
    }
    std::vector<std::string> next(next_set.begin(), next_set.end());
    const std::size_t room = options.max_size - sub.members.size();
    if (next.size() > room) {
      rng.select_prefix(next, room);
      next.resize(room);
      std::sort(next.begin(), next.end());
    }
    for (const auto& id : next) {
      seen.insert(id);
      sub.members.push_back(id);
    }
    frontier = std::move(next);
    if (frontier.empty()) break;
  }

  std::map<std::string, std::size_t> local;
  for (std::size_t i = 0; i < sub.members.size(); ++i) local[sub.members[i]] = i;
  const std::size_t m = sub.members.size();
  sub.has_prompt = options.prompt_node;
  for (std::size_t i = 0; i < m; ++i) {
    sub.tokens.push_back(graph.node(sub.members[i]).tokens);
    std::vector<std::size_t> list;
    for (const auto& nb : graph.neighbors(sub.members[i])) {
      auto it = local.find(nb);
      if (it != local.end()) list.push_back(it->second);
    }
    if (sub.has_prompt) list.push_back(m);
    sub.neighbors.push_back(std::move(list));
  }
  if (sub.has_prompt) {
    sub.tokens.push_back(tokenize(options.prompt_text));
    std::vector<std::size_t> all(m);
    std::iota(all.begin(), all.end(), std::size_t{0});
    sub.neighbors.push_back(std::move(all));
  }
  return sub;
}

// ---- transforms -----------------------------------------------------------

TextRichGraph reify_edges(const TextRichGraph& graph) {
  TextRichGraph out;
  for (const auto& id : graph.node_ids()) {
    const auto& n = graph.node(id);
    out.add_node(n.id, n.text, n.label);
  }
  for (const auto& e : graph.edges()) {
    if (!e.label) {
      fail(ErrorKind::validation, "edge (" + e.a + ", " + e.b + ") has no text label to reify");
    }
    std::string id = "edge:" + e.a + "|" + e.b;
    while (out.contains(id)) id += "'";
    out.add_node(id, *e.label);
    out.add_edge(e.a, id);
    out.add_edge(id, e.b);
  }
  out.validate();
  return out;
}

PermutationSource seeded_permutations(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    rng->shuffle(p);
    return p;
  };
}

PermutationSource identity_permutations() {
  return [](std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    return p;
  };
}

namespace {

std::vector<std::size_t> checked_permutation(const PermutationSource& perms, std::size_t n) {
  auto p = perms(n);
  std::vector<bool> hit(n, false);
  if (p.size() != n) fail(ErrorKind::contract, "permutation has the wrong length");
  for (std::size_t v : p) {
    if (v >= n || hit[v]) fail(ErrorKind::contract, "permutation source produced a non-permutation");
    hit[v] = true;
  }
  return p;
}

}  // namespace

EgoSubgraph shuffle_neighbor_order(const EgoSubgraph& sub, const PermutationSource& perms) {
  EgoSubgraph out = sub;
  for (auto& list : out.neighbors) {
    const auto p = checked_permutation(perms, list.size());
    std::vector<std::size_t> permuted(list.size());
    for (std::size_t k = 0; k < list.size(); ++k) permuted[k] = list[p[k]];
    list = std::move(permuted);
  }
  return out;
}

EgoSubgraph shuffle_neighbor_order(const EgoSubgraph& sub, std::uint64_t seed) {
  return shuffle_neighbor_order(sub, seeded_permutations(seed));
}

CrossShuffleResult cross_node_shuffle(const EgoSubgraph& sub, const PermutationSource& perms) {
  CrossShuffleResult result{sub, false};
  const std::size_t m = sub.members.size();
  if (m < 2) {
    result.warning = true;
    return result;
  }
  const auto p = checked_permutation(perms, m);
  for (std::size_t i = 0; i < m; ++i) result.subgraph.neighbors[i] = sub.neighbors[p[i]];
  return result;
}

CrossShuffleResult cross_node_shuffle(const EgoSubgraph& sub, std::uint64_t seed) {
  return cross_node_shuffle(sub, seeded_permutations(seed));
}

}  // namespace ramp
