#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "featref/errors.hpp"
#include "featref/scene_model.hpp"

namespace featref {

struct Match {
  NodeKey a;
  NodeKey b;
  double confidence = 1.0;
};

// Endpoints ordered so that a < b.
inline Match canonical(const Match& m) {
  return m.b < m.a ? Match{m.b, m.a, m.confidence} : m;
}

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    std::size_t root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const std::size_t next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::uint8_t> rank_;
};

// Undirected keypoint graph. Nodes are sorted; edges are canonical and sorted.
class MatchGraph {
 public:
  const std::vector<NodeKey>& nodes() const { return nodes_; }
  const std::vector<Match>& edges() const { return edges_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_edges() const { return edges_.size(); }

  std::size_t index_of(const NodeKey& key) const {
    auto it = std::lower_bound(nodes_.begin(), nodes_.end(), key);
    if (it == nodes_.end() || *it != key) fail(ErrorCode::InvalidArgument, "node not in graph");
    return static_cast<std::size_t>(it - nodes_.begin());
  }

  // Edge indices incident to each node.
  const std::vector<std::vector<std::size_t>>& adjacency() const { return adjacency_; }

  friend MatchGraph build_graph(const std::vector<Match>& matches);

 private:
  std::vector<NodeKey> nodes_;
  std::vector<Match> edges_;
  std::vector<std::vector<std::size_t>> adjacency_;
};

// Duplicate edges keep the maximum confidence.
inline MatchGraph build_graph(const std::vector<Match>& matches) {
  std::map<std::pair<NodeKey, NodeKey>, double> merged;
  for (const Match& raw : matches) {
    if (raw.a == raw.b) fail(ErrorCode::SelfMatch, "match connects a keypoint to itself");
    if (raw.a.image_id == raw.b.image_id)
      fail(ErrorCode::InvalidArgument, "match endpoints lie in the same image");
    if (!(raw.confidence > 0.0)) fail(ErrorCode::NonPositiveConfidence, "match confidence must be > 0");
    const Match m = canonical(raw);
    auto [it, inserted] = merged.try_emplace({m.a, m.b}, m.confidence);
    if (!inserted) it->second = std::max(it->second, m.confidence);
  }
  MatchGraph g;
  std::set<NodeKey> nodes;
  for (const auto& [ends, w] : merged) {
    nodes.insert(ends.first);
    nodes.insert(ends.second);
    g.edges_.push_back(Match{ends.first, ends.second, w});
  }
  g.nodes_.assign(nodes.begin(), nodes.end());
  g.adjacency_.assign(g.nodes_.size(), {});
  for (std::size_t e = 0; e < g.edges_.size(); ++e) {
    g.adjacency_[g.index_of(g.edges_[e].a)].push_back(e);
    g.adjacency_[g.index_of(g.edges_[e].b)].push_back(e);
  }
  return g;
}

struct Component {
  std::vector<NodeKey> nodes;  // sorted
  std::vector<Match> edges;    // canonical, sorted
};

// Components with a single node are dropped. Ordered by smallest member.
inline std::vector<Component> connected_components(const MatchGraph& graph) {
  UnionFind uf(graph.num_nodes());
  for (const Match& e : graph.edges()) uf.unite(graph.index_of(e.a), graph.index_of(e.b));
  std::map<std::size_t, std::size_t> root_to_component;
  std::vector<Component> out;
  for (std::size_t i = 0; i < graph.num_nodes(); ++i) {
    const std::size_t root = uf.find(i);
    auto [it, inserted] = root_to_component.try_emplace(root, out.size());
    if (inserted) out.emplace_back();
    out[it->second].nodes.push_back(graph.nodes()[i]);
  }
  for (const Match& e : graph.edges())
    out[root_to_component.at(uf.find(graph.index_of(e.a)))].edges.push_back(e);
  std::erase_if(out, [](const Component& c) { return c.nodes.size() < 2; });
  return out;
}

struct TentativeTrack {
  std::int64_t track_id = 0;
  std::vector<NodeKey> members;  // sorted
  std::vector<Match> edges;
  NodeKey reference;
};

// Member with the highest degree in the track's own edges; ties -> lowest key.
inline NodeKey topological_center(const TentativeTrack& track) {
  if (track.members.empty()) fail(ErrorCode::EmptyTrack, "topological center of an empty track");
  std::map<NodeKey, std::size_t> degree;
  for (const NodeKey& m : track.members) degree[m] = 0;
  for (const Match& e : track.edges) {
    if (degree.count(e.a)) ++degree[e.a];
    if (degree.count(e.b)) ++degree[e.b];
  }
  NodeKey best = degree.begin()->first;
  std::size_t best_degree = degree.begin()->second;
  for (const auto& [key, d] : degree)
    if (d > best_degree) {
      best = key;
      best_degree = d;
    }
  return best;
}

inline bool has_unique_images(const std::vector<NodeKey>& nodes) {
  std::set<std::int64_t> images;
  for (const NodeKey& n : nodes)
    if (!images.insert(n.image_id).second) return false;
  return true;
}

// Components up to this size are separated exactly; larger ones greedily.
inline constexpr std::size_t kExactSeparationMaxNodes = 10;

namespace detail {

// Minimum-weight set of cut edges such that every remaining group holds at
// most one keypoint per image. Depth-first assignment of nodes to groups with
// cost pruning; the first optimum in assignment order wins.
class ExactSeparation {
 public:
  explicit ExactSeparation(const Component& c)
      : nodes_(c.nodes), weight_(c.nodes.size(), std::vector<double>(c.nodes.size(), 0.0)) {
    for (const Match& e : c.edges) {
      const std::size_t a = index(e.a), b = index(e.b);
      weight_[a][b] = weight_[b][a] = e.confidence;
    }
    group_of_.assign(nodes_.size(), -1);
  }

  std::vector<int> solve() {
    best_cost_ = std::numeric_limits<double>::infinity();
    groups_.clear();
    search(0, 0.0);
    return best_assignment_;
  }

  double best_cost() const { return best_cost_; }

 private:
  std::size_t index(const NodeKey& k) const {
    return static_cast<std::size_t>(std::lower_bound(nodes_.begin(), nodes_.end(), k) - nodes_.begin());
  }

  void search(std::size_t i, double cost) {
    if (cost >= best_cost_) return;
    if (i == nodes_.size()) {
      best_cost_ = cost;
      best_assignment_ = group_of_;
      return;
    }
    const int num_groups = static_cast<int>(groups_.size());
    for (int g = 0; g <= num_groups; ++g) {
      if (g < num_groups) {
        bool clash = false;
        for (std::size_t m : groups_[g])
          if (nodes_[m].image_id == nodes_[i].image_id) clash = true;
        if (clash) continue;
      }
      double added = 0.0;
      for (std::size_t j = 0; j < i; ++j)
        if (group_of_[j] != g) added += weight_[i][j];
      if (g == num_groups) groups_.emplace_back();
      groups_[g].push_back(i);
      group_of_[i] = g;
      search(i + 1, cost + added);
      group_of_[i] = -1;
      groups_[g].pop_back();
      if (g == num_groups) groups_.pop_back();
    }
  }

  std::vector<NodeKey> nodes_;
  std::vector<std::vector<double>> weight_;
  std::vector<int> group_of_;
  std::vector<std::vector<std::size_t>> groups_;
  std::vector<int> best_assignment_;
  double best_cost_ = 0.0;
};

inline bool edge_less(const Match& x, const Match& y) {
  if (x.confidence != y.confidence) return x.confidence < y.confidence;
  return std::pair(x.a, x.b) < std::pair(y.a, y.b);
}

// Repeatedly removes the weakest edge on a shortest path between two
// keypoints of the same image until no such path remains. Removing an edge
// never creates a path, so sources found clean are not revisited.
inline std::vector<Match> greedy_separation(const Component& c) {
  const std::vector<Match>& edges = c.edges;
  const std::size_t n = c.nodes.size();
  auto idx = [&](const NodeKey& k) {
    return static_cast<std::size_t>(std::lower_bound(c.nodes.begin(), c.nodes.end(), k) - c.nodes.begin());
  };
  std::vector<std::size_t> ea(edges.size()), eb(edges.size());
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    ea[e] = idx(edges[e].a);
    eb[e] = idx(edges[e].b);
    adj[ea[e]].push_back(e);
    adj[eb[e]].push_back(e);
  }
  std::vector<char> removed(edges.size(), 0);
  std::vector<std::size_t> via(n), stamp(n, 0);
  std::size_t round = 0;
  std::vector<std::size_t> queue;
  for (std::size_t s = 0; s < n;) {
    ++round;
    queue.assign(1, s);
    stamp[s] = round;
    via[s] = edges.size();
    bool cut = false;
    for (std::size_t head = 0; head < queue.size() && !cut; ++head) {
      const std::size_t cur = queue[head];
      for (std::size_t e : adj[cur]) {
        if (removed[e]) continue;
        const std::size_t next = ea[e] == cur ? eb[e] : ea[e];
        if (stamp[next] == round) continue;
        stamp[next] = round;
        via[next] = e;
        if (c.nodes[next].image_id == c.nodes[s].image_id) {
          std::size_t weakest = e;
          for (std::size_t walk = next; walk != s;) {
            const std::size_t pe = via[walk];
            if (edge_less(edges[pe], edges[weakest])) weakest = pe;
            walk = ea[pe] == walk ? eb[pe] : ea[pe];
          }
          removed[weakest] = 1;
          cut = true;
          break;
        }
        queue.push_back(next);
      }
    }
    if (!cut) ++s;
  }
  std::vector<Match> kept;
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (!removed[e]) kept.push_back(edges[e]);
  return kept;
}

inline std::vector<Component> split(const std::vector<Match>& edges) {
  return connected_components(build_graph(edges));
}

}  // namespace detail

inline double total_confidence(const std::vector<Match>& edges) {
  double s = 0.0;
  for (const Match& e : edges) s += e.confidence;
  return s;
}

// Splits a connected component into tracks with at most one keypoint per
// image. Single-node leftovers are dropped. track_id is the output index.
inline std::vector<TentativeTrack> separate_tracks(const Component& component) {
  std::vector<Match> kept;
  if (has_unique_images(component.nodes)) {
    kept = component.edges;
  } else if (component.nodes.size() <= kExactSeparationMaxNodes) {
    detail::ExactSeparation solver(component);
    const std::vector<int> groups = solver.solve();
    auto group = [&](const NodeKey& k) {
      return groups[static_cast<std::size_t>(
          std::lower_bound(component.nodes.begin(), component.nodes.end(), k) - component.nodes.begin())];
    };
    for (const Match& e : component.edges)
      if (group(e.a) == group(e.b)) kept.push_back(e);
  } else {
    kept = detail::greedy_separation(component);
  }
  std::vector<TentativeTrack> tracks;
  for (Component& part : detail::split(kept)) {
    TentativeTrack t;
    t.track_id = static_cast<std::int64_t>(tracks.size());
    t.members = std::move(part.nodes);
    t.edges = std::move(part.edges);
    t.reference = topological_center(t);
    tracks.push_back(std::move(t));
  }
  return tracks;
}

// Graph -> components -> separated tracks, numbered consecutively.
inline std::vector<TentativeTrack> build_tracks(const std::vector<Match>& matches) {
  std::vector<TentativeTrack> tracks;
  for (const Component& c : connected_components(build_graph(matches)))
    for (TentativeTrack& t : separate_tracks(c)) {
      t.track_id = static_cast<std::int64_t>(tracks.size());
      tracks.push_back(std::move(t));
    }
  return tracks;
}

}  // namespace featref
