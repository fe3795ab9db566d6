#pragma once

// Deterministic network simulator: directed capacitated links, minimum-hop
// relaying, per-hop byte accounting and link up/down events.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "swarmsynth/core.hpp"

namespace swarmsynth::netsim {

using NodeId = int;

enum class PayloadKind { kRequest, kSemantic, kLatent, kRaw, kDetections, kGuidance, kFlParams, kSummary };

inline constexpr std::array<PayloadKind, 8> kAllKinds{PayloadKind::kRequest,   PayloadKind::kSemantic,
                                                      PayloadKind::kLatent,    PayloadKind::kRaw,
                                                      PayloadKind::kDetections, PayloadKind::kGuidance,
                                                      PayloadKind::kFlParams,  PayloadKind::kSummary};

inline std::string_view kind_name(PayloadKind k) {
  switch (k) {
    case PayloadKind::kRequest: return "REQUEST";
    case PayloadKind::kSemantic: return "SEMANTIC";
    case PayloadKind::kLatent: return "LATENT";
    case PayloadKind::kRaw: return "RAW";
    case PayloadKind::kDetections: return "DETECTIONS";
    case PayloadKind::kGuidance: return "GUIDANCE";
    case PayloadKind::kFlParams: return "FL_PARAMS";
    case PayloadKind::kSummary: return "SUMMARY";
  }
  return "?";
}

inline constexpr double kDefaultCapacity = 1e6;  // bytes / second
inline constexpr double kDefaultLatency = 0.01;  // seconds

struct Link {
  double capacity = kDefaultCapacity;
  double latency = kDefaultLatency;

  void validate() const {
    if (!(capacity > 0.0) || !std::isfinite(capacity)) throw InvalidArgument("link capacity must be positive");
    if (!(latency >= 0.0) || !std::isfinite(latency)) throw InvalidArgument("link latency must be non-negative");
  }
  friend bool operator==(const Link&, const Link&) = default;
};

using NodePair = std::pair<NodeId, NodeId>;

inline NodePair unordered(NodeId a, NodeId b) { return a < b ? NodePair{a, b} : NodePair{b, a}; }

class Topology {
 public:
  Topology() = default;
  explicit Topology(std::span<const NodeId> nodes) {
    for (NodeId n : nodes) add_node(n);
  }

  /// n nodes 0..n-1 with symmetric links between every non-obstructed pair.
  static Topology fully_connected(int n, Link link = {}, std::span<const NodePair> obstructions = {}) {
    Topology t;
    for (int i = 0; i < n; ++i) t.add_node(i);
    for (const auto& [a, b] : obstructions) t.obstruct(a, b);
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        if (a != b && !t.obstructed(a, b)) t.add_link(a, b, link);
      }
    }
    return t;
  }

  void add_node(NodeId n) { nodes_.insert(n); }
  bool has_node(NodeId n) const { return nodes_.count(n) > 0; }
  const std::set<NodeId>& nodes() const { return nodes_; }

  void add_link(NodeId a, NodeId b, Link link) {
    require(a);
    require(b);
    if (a == b) throw InvalidArgument("self links are not allowed");
    if (obstructed(a, b)) throw InvalidArgument("cannot link an obstructed pair");
    link.validate();
    links_[{a, b}] = link;
  }
  void add_symmetric_link(NodeId a, NodeId b, Link link) {
    add_link(a, b, link);
    add_link(b, a, link);
  }
  void remove_link(NodeId a, NodeId b) {
    require(a);
    require(b);
    links_.erase({a, b});
  }

  /// Forces the pair link-less in both directions.
  void obstruct(NodeId a, NodeId b) {
    require(a);
    require(b);
    if (a == b) throw InvalidArgument("cannot obstruct a node from itself");
    obstructions_.insert(unordered(a, b));
    links_.erase({a, b});
    links_.erase({b, a});
  }
  bool obstructed(NodeId a, NodeId b) const { return obstructions_.count(unordered(a, b)) > 0; }
  const std::set<NodePair>& obstructions() const { return obstructions_; }

  bool has_link(NodeId a, NodeId b) const { return links_.count({a, b}) > 0; }
  const Link& link(NodeId a, NodeId b) const {
    const auto it = links_.find({a, b});
    if (it == links_.end()) throw InvalidArgument("no such link");
    return it->second;
  }
  const std::map<NodePair, Link>& links() const { return links_; }

  /// Out-neighbours in increasing id order.
  std::vector<NodeId> neighbors(NodeId a) const {
    std::vector<NodeId> out;
    for (auto it = links_.lower_bound({a, std::numeric_limits<NodeId>::min()}); it != links_.end() && it->first.first == a;
         ++it) {
      out.push_back(it->first.second);
    }
    return out;
  }

  void require(NodeId n) const {
    if (!has_node(n)) throw InvalidArgument("unknown node id " + std::to_string(n));
  }

  void validate() const {
    for (const auto& [pair, link] : links_) {
      require(pair.first);
      require(pair.second);
      link.validate();
      if (obstructed(pair.first, pair.second)) throw InvalidArgument("link crosses an obstruction");
    }
  }

  friend bool operator==(const Topology&, const Topology&) = default;

 private:
  std::set<NodeId> nodes_;
  std::map<NodePair, Link> links_;
  std::set<NodePair> obstructions_;
};

/// Minimum-hop path, lexicographically smallest among ties; nullopt when
/// unreachable.
inline std::optional<std::vector<NodeId>> route(const Topology& topo, NodeId src, NodeId dst) {
  topo.require(src);
  topo.require(dst);
  if (src == dst) return std::vector<NodeId>{src};
  // hop distance to dst over reversed links
  std::map<NodeId, std::vector<NodeId>> reverse;
  for (const auto& [pair, link] : topo.links()) reverse[pair.second].push_back(pair.first);
  std::map<NodeId, int> dist{{dst, 0}};
  std::deque<NodeId> queue{dst};
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    for (NodeId v : reverse[u]) {
      if (dist.count(v) == 0) {
        dist[v] = dist[u] + 1;
        queue.push_back(v);
      }
    }
  }
  if (dist.count(src) == 0) return std::nullopt;
  std::vector<NodeId> path{src};
  NodeId u = src;
  while (u != dst) {
    for (NodeId v : topo.neighbors(u)) {
      const auto it = dist.find(v);
      if (it != dist.end() && it->second == dist[u] - 1) {
        u = v;
        break;
      }
    }
    path.push_back(u);
  }
  return path;
}

struct NetMessage {
  NodeId src = 0;
  NodeId dst = 0;
  PayloadKind kind = PayloadKind::kRequest;
  std::uint64_t payload_bytes = 1;
  std::uint64_t sequence = 0;
};

struct DeliveryReport {
  std::uint64_t sequence = 0;
  PayloadKind kind = PayloadKind::kRequest;
  std::uint64_t payload_bytes = 0;
  bool delivered = false;
  std::vector<NodeId> path;
  std::vector<std::uint64_t> per_link_bytes;
  double send_time = 0.0;
  double arrival_time = 0.0;
};

inline double hop_delay(const Link& l, std::uint64_t bytes) {
  return l.latency + static_cast<double>(bytes) / l.capacity;
}

/// Store-and-forward along route(); every traversed link carries the full payload.
inline DeliveryReport transmit(const Topology& topo, const NetMessage& msg, double now) {
  if (msg.payload_bytes < 1) throw InvalidArgument("payload must be at least one byte");
  DeliveryReport r;
  r.sequence = msg.sequence;
  r.kind = msg.kind;
  r.payload_bytes = msg.payload_bytes;
  r.send_time = now;
  r.arrival_time = now;
  const auto path = route(topo, msg.src, msg.dst);
  if (!path) return r;
  r.delivered = true;
  r.path = *path;
  for (std::size_t i = 0; i + 1 < r.path.size(); ++i) {
    r.arrival_time += hop_delay(topo.link(r.path[i], r.path[i + 1]), msg.payload_bytes);
    r.per_link_bytes.push_back(msg.payload_bytes);
  }
  return r;
}

/// Unicast fan-out to every other node, each copy routed and charged separately.
inline std::vector<DeliveryReport> broadcast(const Topology& topo, NodeId src, PayloadKind kind, std::uint64_t bytes,
                                             double now, std::uint64_t first_sequence) {
  std::vector<DeliveryReport> out;
  std::uint64_t seq = first_sequence;
  for (NodeId n : topo.nodes()) {
    if (n != src) out.push_back(transmit(topo, {src, n, kind, bytes, seq++}, now));
  }
  return out;
}

struct LinkEvent {
  enum class Type { kUp, kDown } type = Type::kDown;
  NodeId a = 0;
  NodeId b = 0;
  Link link;  // used by kUp
};

/// Applies events in order. Up on an existing link replaces its parameters, down
/// on a missing link is a no-op.
inline Topology update_topology(Topology topo, std::span<const LinkEvent> events) {
  for (const LinkEvent& e : events) {
    if (!topo.has_node(e.a) || !topo.has_node(e.b)) throw InvalidArgument("event references an unknown node");
    if (e.a == e.b) throw InvalidArgument("event on a self link");
    if (e.type == LinkEvent::Type::kUp) {
      if (topo.obstructed(e.a, e.b)) throw InvalidArgument("link up on an obstructed pair");
      topo.add_link(e.a, e.b, e.link);
    } else {
      topo.remove_link(e.a, e.b);
    }
  }
  return topo;
}

struct BandwidthLedger {
  std::map<PayloadKind, std::uint64_t> bytes;

  BandwidthLedger() {
    for (PayloadKind k : kAllKinds) bytes[k] = 0;
  }
  void add(const DeliveryReport& r) {
    for (auto b : r.per_link_bytes) bytes[r.kind] += b;
  }
  std::uint64_t of(PayloadKind k) const { return bytes.at(k); }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : bytes) t += v;
    return t;
  }
  std::uint64_t total_excluding(std::span<const PayloadKind> skip) const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : bytes) {
      if (std::find(skip.begin(), skip.end(), k) == skip.end()) t += v;
    }
    return t;
  }
};

inline BandwidthLedger bandwidth_ledger(std::span<const DeliveryReport> reports) {
  BandwidthLedger l;
  for (const auto& r : reports) l.add(r);
  return l;
}

}  // namespace swarmsynth::netsim
