#include "ramp/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ramp/error.hpp"
#include "ramp/random.hpp"

namespace ramp {

namespace {

constexpr const char* kGreek[] = {"alpha", "beta",  "gamma", "delta",   "epsilon", "zeta",
                                  "eta",   "theta", "iota",  "kappa",   "lambda",  "mu",
                                  "nu",    "xi",    "omicron", "pi",    "rho",     "sigma",
                                  "tau",   "upsilon", "phi", "chi",     "psi",     "omega"};

constexpr const char* kFiller[] = {"the", "of",   "and",  "to",  "in",   "is",  "on",  "for",
                                   "with", "as",  "by",   "at",  "from", "an",  "be",  "or",
                                   "we",  "this", "that", "are", "it",   "via", "our", "new"};
constexpr std::size_t kFillerCount = std::size(kFiller);
// Each class draws a slice of the filler list this much more often.
constexpr double kFillerSkew = 1.5;

std::size_t pick_weighted(Rng& rng, const std::vector<double>& cumulative) {
  const double u = rng.uniform() * cumulative.back();
  return std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin();
}

std::string node_text(Rng& rng, const CorpusSpec& spec, std::size_t cls, const std::string& keyword,
                      bool with_keyword) {
  std::size_t length = spec.text_min + rng.below(spec.text_max - spec.text_min + 1);
  // A keyword never gets truncated; very short texts stretch to hold it.
  if (with_keyword) length = std::max(length, keyword.size());
  std::vector<double> cumulative(kFillerCount);
  const std::size_t slice = std::max<std::size_t>(1, kFillerCount / spec.n_classes);
  double acc = 0.0;
  for (std::size_t w = 0; w < kFillerCount; ++w) {
    acc += (w / slice) % spec.n_classes == cls ? kFillerSkew : 1.0;
    cumulative[w] = acc;
  }
  std::vector<std::string> words;
  std::size_t used = 0;
  const std::size_t budget =
      !with_keyword ? length : (keyword.size() + 1 <= length ? length - keyword.size() - 1 : 0);
  while (true) {
    const std::string w = kFiller[pick_weighted(rng, cumulative)];
    const std::size_t cost = w.size() + (words.empty() ? 0 : 1);
    if (used + cost > budget) break;
    words.push_back(w);
    used += cost;
  }
  if (with_keyword) {
    const std::size_t at = rng.below(words.size() + 1);
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), keyword);
  }
  std::string text;
  for (const auto& w : words) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  text.resize(length, '.');
  return text;
}

std::string padded_id(std::size_t i, std::size_t n) {
  std::size_t width = 4;
  for (std::size_t m = n > 0 ? n - 1 : 0; m >= 10000; m /= 10) ++width;
  std::string digits = std::to_string(i);
  return "n" + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

}  // namespace

void CorpusSpec::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (n_nodes < 1) fail(ErrorKind::config, "corpus: n_nodes must be >= 1");
  if (n_classes < 2) fail(ErrorKind::config, "corpus: n_classes must be >= 2");
  if (!prob(homophily) || !prob(self_signal)) {
    fail(ErrorKind::config, "corpus: homophily and self_signal must lie in [0, 1]");
  }
  if (text_min < 4) fail(ErrorKind::config, "corpus: text_min must be >= 4");
  if (text_max < text_min) fail(ErrorKind::config, "corpus: text_max must be >= text_min");
  if (!(degree >= 0.0)) fail(ErrorKind::config, "corpus: degree must be >= 0");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(ErrorKind::parse, "unknown split '" + s + "'");
}

std::vector<std::string> class_labels(std::size_t n_classes) {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    out.push_back(c < std::size(kGreek) ? std::string(kGreek[c]) : "class" + std::to_string(c));
  }
  return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.labels = class_labels(spec.n_classes);
  const std::size_t n = spec.n_nodes;

  std::vector<std::size_t> cls(n);
  std::vector<std::vector<std::size_t>> members(spec.n_classes);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    cls[i] = rng.below(spec.n_classes);
    members[cls[i]].push_back(i);
    ids[i] = padded_id(i, n);
    const bool keyword = rng.bernoulli(spec.self_signal);
    corpus.graph.add_node(ids[i], node_text(rng, spec, cls[i], corpus.labels[cls[i]], keyword),
                          corpus.labels[cls[i]]);
  }

  const auto edges = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.degree / 2));
  const auto same = static_cast<std::size_t>(std::llround(spec.homophily * static_cast<double>(edges)));
  const std::size_t cross = edges - same;
  std::size_t same_capacity = 0;
  for (const auto& m : members) same_capacity += m.size() * (m.size() - (m.empty() ? 0 : 1)) / 2;
  const std::size_t cross_capacity = n * (n - 1) / 2 - same_capacity;
  if (same > same_capacity || cross > cross_capacity) {
    fail(ErrorKind::validation, "corpus: infeasible degree/homophily combination (" +
                                    std::to_string(same) + " same-class and " +
                                    std::to_string(cross) + " cross-class edges requested)");
  }

  std::set<std::pair<std::size_t, std::size_t>> chosen;
  auto draw = [&](std::size_t count, bool same_class) {
    std::size_t added = 0, attempts = 0;
    const std::size_t limit = 1000 + 200 * count;
    while (added < count) {
      if (++attempts > limit) {
        fail(ErrorKind::validation, "corpus: could not place the requested edges");
      }
      const std::size_t u = rng.below(n);
      std::size_t v;
      if (same_class) {
        const auto& pool = members[cls[u]];
        if (pool.size() < 2) continue;
        v = pool[rng.below(pool.size())];
      } else {
        v = rng.below(n);
        if (cls[v] == cls[u]) continue;
      }
      if (u == v) continue;
      if (!chosen.insert(std::minmax(u, v)).second) continue;
      ++added;
    }
  };
  draw(same, true);
  draw(cross, false);
  for (const auto& [u, v] : chosen) corpus.graph.add_edge(ids[u], ids[v]);
  corpus.same_class_edges = same;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  for (std::size_t k = 0; k < n; ++k) {
    corpus.split[ids[order[k]]] =
        k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return corpus;
}

std::vector<std::string> split_ids(const SplitMap& split, Split which) {
  std::vector<std::string> out;
  for (const auto& [id, s] : split) {
    if (s == which) out.push_back(id);
  }
  return out;
}

void save_split(const SplitMap& split, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, s] : split) j[id] = split_name(s);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write split file " + path.string());
  out << j.dump(1) << "\n";
}

SplitMap load_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open split file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::parse, path.string() + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::parse, path.string() + ": expected an object");
  SplitMap split;
  for (const auto& [id, v] : j.items()) {
    if (!v.is_string()) fail(ErrorKind::parse, path.string() + ": split of '" + id + "' must be a string");
    split[id] = parse_split(v.get<std::string>());
  }
  return split;
}

std::vector<std::string> graph_labels(const TextRichGraph& graph) {
  std::set<std::string> labels;
  for (const auto& id : graph.node_ids()) {
    if (const auto& l = graph.node(id).label) labels.insert(*l);
  }
  return {labels.begin(), labels.end()};
}

bool contains_word(std::string_view text, std::string_view word) {
  if (word.empty()) return false;
  auto is_letter = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t pos = text.find(word); pos != std::string_view::npos;
       pos = text.find(word, pos + 1)) {
    const bool left = pos == 0 || !is_letter(text[pos - 1]);
    const std::size_t end = pos + word.size();
    const bool right = end == text.size() || !is_letter(text[end]);
    if (left && right) return true;
  }
  return false;
}

double SignalAudit::no_signal_majority_accuracy() const {
  return without_signal_with_neighbors == 0
             ? 0.0
             : static_cast<double>(without_signal_majority_correct) /
                   static_cast<double>(without_signal_with_neighbors);
}

double SignalAudit::majority_accuracy() const {
  return with_neighbors == 0 ? 0.0
                             : static_cast<double>(majority_correct) /
                                   static_cast<double>(with_neighbors);
}

SignalAudit signal_audit(const TextRichGraph& graph) {
  SignalAudit audit;
  for (const auto& id : graph.node_ids()) {
    const auto& node = graph.node(id);
    if (!node.label) fail(ErrorKind::validation, "audit: node '" + id + "' has no label");
    AuditEntry e{id, contains_word(node.text, *node.label), std::nullopt, false};
    std::map<std::string, std::size_t> votes;
    for (const auto& nb : graph.neighbors(id)) {
      const auto& l = graph.node(nb).label;
      if (!l) fail(ErrorKind::validation, "audit: node '" + nb + "' has no label");
      ++votes[*l];
    }
    std::size_t best = 0;
    for (const auto& [label, count] : votes) {
      if (count > best) {
        best = count;
        e.majority_neighbor_class = label;
        e.majority_tied = false;
      } else if (count == best) {
        e.majority_tied = true;
      }
    }
    const bool correct = e.majority_neighbor_class == node.label;
    (e.has_self_signal ? audit.with_self_signal : audit.without_self_signal) += 1;
    if (e.majority_neighbor_class) {
      ++audit.with_neighbors;
      audit.majority_correct += correct;
      if (!e.has_self_signal) {
        ++audit.without_signal_with_neighbors;
        audit.without_signal_majority_correct += correct;
      }
    }
    audit.entries.push_back(std::move(e));
  }
  return audit;
}

}  // namespace ramp
