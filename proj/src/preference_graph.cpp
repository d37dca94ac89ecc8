#include "copywriter/preference_graph.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <stdexcept>

#include "json.hpp"
#include <spdlog/spdlog.h>

namespace copywriter::graph {

namespace {

// Dense index view of a graph; nodes in sorted id order.
struct Indexed {
  std::vector<std::string> ids;
  std::unordered_map<std::string, int> index;
  std::vector<std::vector<int>> out;

  explicit Indexed(const PreferenceGraph& g) {
    for (const auto& id : g.nodes()) {
      index.emplace(id, static_cast<int>(ids.size()));
      ids.push_back(id);
    }
    out.resize(ids.size());
    for (const auto& e : g.edges()) out[index.at(e.winner)].push_back(index.at(e.loser));
  }

  int size() const { return static_cast<int>(ids.size()); }
};

// Tarjan's algorithm, iterative. Components come out in reverse topological
// order; members of each component are sorted.
std::vector<std::vector<int>> strongly_connected(const std::vector<std::vector<int>>& out) {
  const int n = static_cast<int>(out.size());
  std::vector<int> index(n, -1), low(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<int> stack;
  std::vector<std::vector<int>> components;
  int counter = 0;
  for (int root = 0; root < n; ++root) {
    if (index[root] != -1) continue;
    std::vector<std::pair<int, std::size_t>> call{{root, 0}};
    index[root] = low[root] = counter++;
    stack.push_back(root);
    on_stack[root] = true;
    while (!call.empty()) {
      auto& [v, next] = call.back();
      if (next < out[v].size()) {
        const int w = out[v][next++];
        if (index[w] == -1) {
          index[w] = low[w] = counter++;
          stack.push_back(w);
          on_stack[w] = true;
          call.emplace_back(w, 0);
        } else if (on_stack[w]) {
          low[v] = std::min(low[v], index[w]);
        }
        continue;
      }
      if (low[v] == index[v]) {
        std::vector<int> comp;
        int w = -1;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack[w] = false;
          comp.push_back(w);
        } while (w != v);
        std::sort(comp.begin(), comp.end());
        components.push_back(std::move(comp));
      }
      const int finished = v;
      call.pop_back();
      if (!call.empty()) low[call.back().first] = std::min(low[call.back().first], low[finished]);
    }
  }
  return components;
}

// Greedy ordering minimizing backward arcs (Eades, Lin & Smyth 1993).
std::vector<int> greedy_order(const std::vector<int>& members,
                              const std::vector<std::vector<int>>& out,
                              const std::vector<std::vector<int>>& in) {
  std::set<int> alive(members.begin(), members.end());
  std::unordered_map<int, int> outdeg, indeg;
  for (int v : members) {
    for (int w : out[v]) {
      if (alive.contains(w)) {
        ++outdeg[v];
        ++indeg[w];
      }
    }
  }
  std::deque<int> head, tail;
  auto drop = [&](int v) {
    alive.erase(v);
    for (int w : out[v]) {
      if (alive.contains(w)) --indeg[w];
    }
    for (int u : in[v]) {
      if (alive.contains(u)) --outdeg[u];
    }
  };
  while (!alive.empty()) {
    bool progressed = true;
    while (progressed) {
      progressed = false;
      for (int v : std::vector<int>(alive.begin(), alive.end())) {
        if (!alive.contains(v)) continue;
        if (outdeg[v] == 0) {
          tail.push_front(v);
          drop(v);
          progressed = true;
        } else if (indeg[v] == 0) {
          head.push_back(v);
          drop(v);
          progressed = true;
        }
      }
    }
    if (alive.empty()) break;
    int best = *alive.begin();
    for (int v : alive) {
      if (outdeg[v] - indeg[v] > outdeg[best] - indeg[best]) best = v;
    }
    head.push_back(best);
    drop(best);
  }
  std::vector<int> order(head.begin(), head.end());
  order.insert(order.end(), tail.begin(), tail.end());
  return order;
}

// Moves single vertices to their best position while that strictly lowers
// the number of backward arcs.
void refine_by_insertion(std::vector<int>& order, const std::vector<std::vector<int>>& out,
                         const std::set<int>& members) {
  const int n = static_cast<int>(order.size());
  if (n < 3) return;
  // arc[i][j] = 1 if order[i] -> order[j]
  auto arcs = [&](const std::vector<int>& ord) {
    std::unordered_map<int, int> pos;
    for (int i = 0; i < n; ++i) pos[ord[i]] = i;
    std::vector<std::vector<char>> a(n, std::vector<char>(n, 0));
    for (int i = 0; i < n; ++i) {
      for (int w : out[ord[i]]) {
        if (members.contains(w)) a[i][pos[w]] = 1;
      }
    }
    return a;
  };
  bool improved = true;
  int passes = 0;
  while (improved && passes++ < 4 * n) {
    improved = false;
    const auto a = arcs(order);
    for (int i = 0; i < n && !improved; ++i) {
      // Moving the vertex at i to slot j changes backward arcs by `delta`.
      int best_delta = 0, best_j = i, delta = 0;
      for (int j = i - 1; j >= 0; --j) {
        delta += a[j][i] - a[i][j];  // i jumps before j
        if (delta < best_delta) {
          best_delta = delta;
          best_j = j;
        }
      }
      delta = 0;
      for (int j = i + 1; j < n; ++j) {
        delta += a[i][j] - a[j][i];  // i moves after j
        if (delta < best_delta) {
          best_delta = delta;
          best_j = j;
        }
      }
      if (best_delta < 0) {
        const int v = order[i];
        order.erase(order.begin() + i);
        order.insert(order.begin() + best_j, v);
        improved = true;
      }
    }
  }
}

bool reachable(const std::vector<std::vector<int>>& out, int from, int to) {
  std::vector<char> seen(out.size(), 0);
  std::vector<int> stack{from};
  seen[from] = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (v == to) return true;
    for (int w : out[v]) {
      if (!seen[w]) {
        seen[w] = 1;
        stack.push_back(w);
      }
    }
  }
  return false;
}

}  // namespace

bool PreferenceGraph::add_edge(const std::string& winner, const std::string& loser) {
  if (winner == loser) throw std::invalid_argument("self-edge on " + winner);
  nodes_.insert(winner);
  nodes_.insert(loser);
  return edges_.insert(Edge{winner, loser}).second;
}

bool PreferenceGraph::is_acyclic() const { return detect_cycles(*this).empty(); }

BuildResult build_graph(const std::vector<PairwiseComparison>& comparisons,
                        const std::unordered_map<std::string, Split>* splits) {
  BuildResult result;
  if (comparisons.empty()) return result;
  const std::string& aspect = comparisons.front().aspect.normalized;
  std::optional<Split> group_split;
  // Directions judged per unordered pair: bit 1 = min->max, bit 2 = max->min.
  std::map<std::pair<std::string, std::string>, int> judged;
  for (const auto& c : comparisons) {
    if (c.aspect.normalized != aspect) {
      throw std::invalid_argument("comparison crosses aspects: '" + aspect + "' vs '" +
                                  c.aspect.normalized + "'");
    }
    if (c.id_a == c.id_b) throw std::invalid_argument("comparison of " + c.id_a + " with itself");
    if (splits != nullptr) {
      for (const auto* id : {&c.id_a, &c.id_b}) {
        const auto it = splits->find(*id);
        if (it == splits->end()) throw std::invalid_argument("unknown summary " + *id);
        if (group_split && *group_split != it->second) {
          throw std::invalid_argument("comparison crosses splits at " + *id);
        }
        group_split = it->second;
      }
    }
    const std::string& w = c.winner_id();
    const std::string& l = c.loser_id();
    const auto key = std::minmax(w, l);
    judged[{key.first, key.second}] |= (w < l) ? 1 : 2;
    result.graph.add_node(c.id_a);
    result.graph.add_node(c.id_b);
  }
  for (const auto& [pair, dirs] : judged) {
    if (dirs == 3) {
      spdlog::warn("contradictory judgments between {} and {}; dropping both", pair.first,
                   pair.second);
      result.conflicts.push_back(pair);
    } else if (dirs == 1) {
      result.graph.add_edge(pair.first, pair.second);
    } else {
      result.graph.add_edge(pair.second, pair.first);
    }
  }
  return result;
}

std::vector<std::vector<std::string>> detect_cycles(const PreferenceGraph& g) {
  const Indexed idx(g);
  std::vector<std::vector<std::string>> cycles;
  auto components = strongly_connected(idx.out);
  std::sort(components.begin(), components.end());
  for (const auto& comp : components) {
    if (comp.size() < 2) continue;
    std::set<int> members(comp.begin(), comp.end());
    // Shortest cycle through the smallest member, by BFS back to it.
    const int start = comp.front();
    std::unordered_map<int, int> parent;
    std::deque<int> queue;
    for (int w : idx.out[start]) {
      if (members.contains(w) && !parent.contains(w)) {
        parent[w] = start;
        queue.push_back(w);
      }
    }
    while (!queue.empty() && !parent.contains(start)) {
      const int v = queue.front();
      queue.pop_front();
      for (int w : idx.out[v]) {
        if (members.contains(w) && !parent.contains(w)) {
          parent[w] = v;
          queue.push_back(w);
        }
      }
    }
    std::vector<std::string> cycle;
    int v = parent.at(start);
    cycle.push_back(idx.ids[start]);
    std::vector<int> back;
    while (v != start) {
      back.push_back(v);
      v = parent.at(v);
    }
    for (auto it = back.rbegin(); it != back.rend(); ++it) cycle.push_back(idx.ids[*it]);
    cycles.push_back(std::move(cycle));
  }
  return cycles;
}

CycleBreakResult break_cycles(const PreferenceGraph& g) {
  const Indexed idx(g);
  const int n = idx.size();
  std::vector<std::vector<int>> in(n);
  for (int v = 0; v < n; ++v) {
    for (int w : idx.out[v]) in[w].push_back(v);
  }

  std::set<std::pair<int, int>> removed;
  for (const auto& comp : strongly_connected(idx.out)) {
    if (comp.size() < 2) continue;
    const std::set<int> members(comp.begin(), comp.end());
    auto order = greedy_order(comp, idx.out, in);
    refine_by_insertion(order, idx.out, members);
    std::unordered_map<int, int> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = static_cast<int>(i);
    for (int v : comp) {
      for (int w : idx.out[v]) {
        if (members.contains(w) && pos[w] < pos[v]) removed.insert({v, w});
      }
    }
  }

  // Restore removed edges that no longer close a cycle.
  std::vector<std::vector<int>> kept(n);
  for (int v = 0; v < n; ++v) {
    for (int w : idx.out[v]) {
      if (!removed.contains({v, w})) kept[v].push_back(w);
    }
  }
  std::vector<std::pair<int, int>> final_removed;
  for (const auto& [v, w] : removed) {
    if (reachable(kept, w, v)) {
      final_removed.emplace_back(v, w);
    } else {
      kept[v].push_back(w);
    }
  }

  CycleBreakResult result{g, {}};
  for (const auto& [v, w] : final_removed) {
    Edge e{idx.ids[v], idx.ids[w]};
    result.dag.remove_edge(e);
    result.removed.push_back(std::move(e));
  }
  return result;
}

std::vector<WinRateRecord> win_rates(const PreferenceGraph& g, bool require_acyclic) {
  if (require_acyclic && !g.is_acyclic()) {
    throw std::invalid_argument("win_rates requires an acyclic graph; run break_cycles first");
  }
  std::map<std::string, std::pair<int, int>> counts;  // id -> (wins, total)
  for (const auto& e : g.edges()) {
    auto& w = counts[e.winner];
    ++w.first;
    ++w.second;
    ++counts[e.loser].second;
  }
  std::vector<WinRateRecord> out;
  out.reserve(counts.size());
  for (const auto& [id, c] : counts) {
    out.push_back({id, c.first, c.second, static_cast<double>(c.first) / static_cast<double>(c.second)});
  }
  return out;
}

GroupCleaning clean_and_score(const std::vector<PairwiseComparison>& comparisons,
                              const std::vector<AspectedSummary>& summaries,
                              bool before_cleaning) {
  std::unordered_map<std::string, Split> splits;
  for (const auto& s : summaries) splits.emplace(s.id, s.split);
  std::map<std::pair<std::string, Split>, std::vector<PairwiseComparison>> groups;
  for (const auto& c : comparisons) {
    const auto it = splits.find(c.id_a);
    if (it == splits.end()) throw std::invalid_argument("unknown summary " + c.id_a);
    groups[{c.aspect.normalized, it->second}].push_back(c);
  }
  GroupCleaning out;
  out.groups = groups.size();
  for (const auto& [key, group] : groups) {
    auto built = build_graph(group, &splits);
    out.conflicts.insert(out.conflicts.end(), built.conflicts.begin(), built.conflicts.end());
    auto cleaned = break_cycles(built.graph);
    out.removed.insert(out.removed.end(), cleaned.removed.begin(), cleaned.removed.end());
    auto rates = before_cleaning ? win_rates(built.graph, false) : win_rates(cleaned.dag);
    out.win_rates.insert(out.win_rates.end(), rates.begin(), rates.end());
  }
  std::sort(out.win_rates.begin(), out.win_rates.end(),
            [](const auto& a, const auto& b) { return a.summary_id < b.summary_id; });
  return out;
}

std::string to_line(const Edge& e) {
  nlohmann::ordered_json j;
  j["v"] = kSchemaVersion;
  j["winner"] = e.winner;
  j["loser"] = e.loser;
  return j.dump();
}

Edge edge_from_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("v").get<int>() != kSchemaVersion) throw DecodeError("unsupported schema version");
    return Edge{j.at("winner").get<std::string>(), j.at("loser").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("malformed edge record: ") + e.what());
  }
}

}  // namespace copywriter::graph
