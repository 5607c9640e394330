#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "ramp/corpus.hpp"
#include "ramp/error.hpp"

using namespace ramp;

TEST_CASE("class labels") {
  CHECK(class_labels(4) == std::vector<std::string>{"alpha", "beta", "gamma", "delta"});
  const auto many = class_labels(26);
  CHECK(many[23] == "omega");
  CHECK(many[24] == "class24");
  CHECK(many.size() == 26);
}

TEST_CASE("default corpus has the requested structure") {
  CorpusSpec spec;
  spec.seed = 1;
  const Corpus c = generate_corpus(spec);
  const auto& g = c.graph;
  CHECK(g.node_count() == 300);
  CHECK(c.labels == class_labels(4));

  const std::size_t E = 600;  // round(300 * 4 / 2)
  CHECK(g.edge_count() == E);
  std::size_t same = 0;
  for (const auto& e : g.edges()) same += g.node(e.a).label == g.node(e.b).label;
  CHECK(same == c.same_class_edges);
  CHECK(same == 510);  // round(0.85 * 600)
  CHECK_NOTHROW(g.validate());

  std::map<std::string, int> per_class;
  std::size_t keyword = 0;
  for (const auto& id : g.node_ids()) {
    const auto& n = g.node(id);
    REQUIRE(n.label);
    ++per_class[*n.label];
    CHECK(n.text.size() >= 16);
    CHECK(n.text.size() <= 48);
    CHECK(n.tokens.size() == n.text.size());
    bool any_keyword = false;
    for (const auto& l : c.labels) {
      if (l != *n.label) CHECK_FALSE(contains_word(n.text, l));
      any_keyword |= contains_word(n.text, l);
    }
    keyword += any_keyword;
  }
  CHECK(per_class.size() == 4);
  // Binomial(300, 0.6): mean 180, standard deviation 8.5.
  CHECK(std::abs(static_cast<double>(keyword) - 180.0) < 4 * 8.5);

  CHECK(split_ids(c.split, Split::train).size() == 210);
  CHECK(split_ids(c.split, Split::val).size() == 30);
  CHECK(split_ids(c.split, Split::test).size() == 60);
  CHECK(c.split.size() == 300);
}

TEST_CASE("labels are recoverable from neighbors") {
  for (std::uint64_t seed : {1, 2, 3}) {
    CorpusSpec spec;
    spec.seed = seed;
    const SignalAudit audit = signal_audit(generate_corpus(spec).graph);
    CHECK(audit.with_self_signal + audit.without_self_signal == 300);
    REQUIRE(audit.without_signal_with_neighbors > 0);
    CHECK(audit.no_signal_majority_accuracy() >= spec.homophily - 0.1);
  }
}

TEST_CASE("generation is seeded") {
  CorpusSpec spec;
  spec.n_nodes = 60;
  spec.seed = 4;
  const Corpus a = generate_corpus(spec), b = generate_corpus(spec);
  CHECK(serialize_graph(a.graph) == serialize_graph(b.graph));
  CHECK(a.split == b.split);
  spec.seed = 5;
  CHECK(serialize_graph(generate_corpus(spec).graph) != serialize_graph(a.graph));
}

TEST_CASE("short texts stretch to fit their keyword") {
  CorpusSpec spec;
  spec.n_nodes = 40;
  spec.text_min = 4;
  spec.text_max = 4;
  spec.self_signal = 1.0;
  const Corpus c = generate_corpus(spec);
  for (const auto& id : c.graph.node_ids()) {
    const auto& n = c.graph.node(id);
    CHECK(contains_word(n.text, *n.label));
    CHECK(n.text == *n.label);
  }
}

TEST_CASE("infeasible or invalid specs") {
  CorpusSpec spec;
  spec.n_nodes = 5;
  spec.degree = 10.0;
  CHECK_THROWS_AS(generate_corpus(spec), Error);
  auto bad = [](auto mutate) {
    CorpusSpec s;
    mutate(s);
    try {
      s.validate();
    } catch (const Error& e) {
      return e.kind() == ErrorKind::config;
    }
    return false;
  };
  CHECK(bad([](CorpusSpec& s) { s.homophily = 1.5; }));
  CHECK(bad([](CorpusSpec& s) { s.self_signal = -0.1; }));
  CHECK(bad([](CorpusSpec& s) { s.n_classes = 1; }));
  CHECK(bad([](CorpusSpec& s) { s.text_min = 50; }));
  CHECK_NOTHROW(CorpusSpec{}.validate());
}

TEST_CASE("word matching respects boundaries") {
  CHECK(contains_word("an alpha node", "alpha"));
  CHECK(contains_word("alpha", "alpha"));
  CHECK(contains_word("(alpha).", "alpha"));
  CHECK_FALSE(contains_word("alphabet", "alpha"));
  CHECK_FALSE(contains_word("betas", "beta"));
  CHECK_FALSE(contains_word("zeta", "eta"));
  CHECK_FALSE(contains_word("", "alpha"));
}

TEST_CASE("audit on a hand-built graph") {
  TextRichGraph g;
  g.add_node("hub", "nothing here", "beta");
  g.add_node("x", "x alpha", "alpha");
  g.add_node("y", "y beta", "beta");
  g.add_node("lone", "gamma lone", "gamma");
  g.add_node("p", "plain", "alpha");
  g.add_edge("hub", "x");
  g.add_edge("hub", "y");
  g.add_edge("p", "x");
  const SignalAudit a = signal_audit(g);
  CHECK(a.with_self_signal == 3);
  CHECK(a.without_self_signal == 2);
  CHECK(a.without_signal_with_neighbors == 2);
  // hub ties alpha/beta and takes alpha, which is wrong; p's neighbor x is alpha.
  CHECK(a.without_signal_majority_correct == 1);
  const auto& hub = a.entries[0];
  CHECK(hub.id == "hub");
  CHECK(hub.majority_tied);
  CHECK(hub.majority_neighbor_class == std::optional<std::string>("alpha"));
  CHECK_FALSE(a.entries[3].majority_neighbor_class);
  CHECK(a.with_neighbors == 4);
  CHECK(a.majority_correct == 3);  // x ties hub/p and takes alpha, which is right
  CHECK(a.no_signal_majority_accuracy() == 0.5);

  TextRichGraph unlabeled;
  unlabeled.add_node("u", "t");
  CHECK_THROWS_AS(signal_audit(unlabeled), Error);
}

TEST_CASE("split files") {
  SplitMap s{{"a", Split::train}, {"b", Split::val}, {"c", Split::test}, {"d", Split::train}};
  const auto path = std::filesystem::temp_directory_path() / "ramp_test_split.json";
  save_split(s, path);
  CHECK(load_split(path) == s);
  std::filesystem::remove(path);
  CHECK(split_ids(s, Split::train) == std::vector<std::string>{"a", "d"});
  CHECK(parse_split("val") == Split::val);
  CHECK(split_name(Split::test) == "test");
  CHECK_THROWS_AS(parse_split("dev"), Error);
  CHECK_THROWS_AS(load_split("/nonexistent/split.json"), Error);
}

TEST_CASE("graph labels") {
  TextRichGraph g;
  g.add_node("a", "t", "zeta");
  g.add_node("b", "t", "alpha");
  g.add_node("c", "t", "zeta");
  g.add_node("d", "t");
  CHECK(graph_labels(g) == std::vector<std::string>{"alpha", "zeta"});
}
