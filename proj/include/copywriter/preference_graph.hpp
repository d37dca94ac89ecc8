#pragma once

#include <compare>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "copywriter/records.hpp"

namespace copywriter::graph {

struct Edge {
  std::string winner;
  std::string loser;

  auto operator<=>(const Edge&) const = default;
};

// Directed winner -> loser graph over summary ids. No self-edges, at most
// one edge per ordered pair.
class PreferenceGraph {
 public:
  void add_node(const std::string& id) { nodes_.insert(id); }
  // Returns false when the edge already exists.
  bool add_edge(const std::string& winner, const std::string& loser);
  bool remove_edge(const Edge& e) { return edges_.erase(e) > 0; }
  bool has_edge(const std::string& winner, const std::string& loser) const {
    return edges_.contains(Edge{winner, loser});
  }

  const std::set<std::string>& nodes() const { return nodes_; }
  const std::set<Edge>& edges() const { return edges_; }

  bool is_acyclic() const;

  bool operator==(const PreferenceGraph&) const = default;

 private:
  std::set<std::string> nodes_;
  std::set<Edge> edges_;
};

struct BuildResult {
  PreferenceGraph graph;
  // Unordered pairs judged in both directions; neither edge is kept.
  std::vector<std::pair<std::string, std::string>> conflicts;
};

// All comparisons must share one aspect; when `splits` is given, every
// referenced summary must resolve to the same split.
BuildResult build_graph(const std::vector<PairwiseComparison>& comparisons,
                        const std::unordered_map<std::string, Split>* splits = nullptr);

// One genuine directed cycle per non-trivial strongly connected component.
// Empty iff the graph is a DAG.
std::vector<std::vector<std::string>> detect_cycles(const PreferenceGraph& g);

struct CycleBreakResult {
  PreferenceGraph dag;
  std::vector<Edge> removed;
};

// Greedy Eades-Lin-Smyth ordering per strongly connected component, refined
// by single-vertex insertion moves, then every removed edge that can be put
// back without closing a cycle is restored. Ties break on id order.
CycleBreakResult break_cycles(const PreferenceGraph& g);

// Per-node win-rate over the comparisons it took part in: wins = out-degree, total = degree.
// Isolated nodes are omitted; output sorted by summary id. Throws if
// `require_acyclic` and the graph has a cycle.
std::vector<WinRateRecord> win_rates(const PreferenceGraph& g, bool require_acyclic = true);

struct GroupCleaning {
  std::vector<WinRateRecord> win_rates;
  std::vector<Edge> removed;
  std::vector<std::pair<std::string, std::string>> conflicts;
  std::size_t groups = 0;
};

// Groups comparisons by (normalized aspect, split), cleans each group and
// computes win-rates. With `before_cleaning`, win-rates come from the raw
// (possibly cyclic) graphs instead.
GroupCleaning clean_and_score(const std::vector<PairwiseComparison>& comparisons,
                              const std::vector<AspectedSummary>& summaries,
                              bool before_cleaning = false);

std::string to_line(const Edge& e);
Edge edge_from_line(std::string_view line);

}  // namespace copywriter::graph
