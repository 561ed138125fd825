#pragma once

// Event streams: CSV ingest, chronological ordering, splits and the
// temporal-neighbor index.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dsrd/common.hpp"

namespace dsrd {

inline constexpr std::int8_t kNoLabel = -1;

struct Event {
  NodeId src = 0;
  NodeId dst = 0;
  double time = 0.0;
  std::vector<double> edge_feat;
  std::int8_t label = kNoLabel;
  EventIdx idx = 0;

  bool has_label() const noexcept { return label != kNoLabel; }
  bool touches(NodeId n) const noexcept { return src == n || dst == n; }
};

/// Chronologically sorted, validated event log with optional node features.
/// Immutable after construction.
class EventStream {
 public:
  EventStream() = default;

  /// Validates, stable-sorts by time (ties keep input order) and assigns idx.
  /// `num_nodes` may be 0 to infer it from the largest id seen.
  static EventStream from_events(std::vector<Event> events, std::size_t num_nodes = 0,
                                 RowMatrix<double> node_feat = {},
                                 std::optional<std::size_t> edge_dim = std::nullopt) {
    if (events.empty()) throw Error("empty stream");
    EventStream s;
    const std::size_t m = edge_dim.value_or(events.front().edge_feat.size());
    std::size_t max_id = 0;
    for (std::size_t k = 0; k < events.size(); ++k) {
      const Event& e = events[k];
      if (!(e.time >= 0.0) || !std::isfinite(e.time))
        throw Error("event " + std::to_string(k) + ": negative or non-finite timestamp");
      if (e.edge_feat.size() != m)
        throw Error("event " + std::to_string(k) + ": inconsistent edge feature arity");
      if (e.src > kMaxNodeId || e.dst > kMaxNodeId)
        throw Error("event " + std::to_string(k) + ": node-id overflow");
      if (e.label != kNoLabel && e.label != 0 && e.label != 1)
        throw Error("event " + std::to_string(k) + ": label must be 0, 1 or absent");
      max_id = std::max<std::size_t>(max_id, std::max(e.src, e.dst));
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.time < b.time; });
    for (std::size_t k = 0; k < events.size(); ++k) events[k].idx = static_cast<EventIdx>(k);

    s.num_nodes_ = std::max<std::size_t>(num_nodes, max_id + 1);
    if (node_feat.rows() > 0 && static_cast<std::size_t>(node_feat.rows()) > s.num_nodes_)
      s.num_nodes_ = static_cast<std::size_t>(node_feat.rows());
    if (node_feat.cols() > 0 && static_cast<std::size_t>(node_feat.rows()) < s.num_nodes_) {
      RowMatrix<double> padded = RowMatrix<double>::Zero(
          static_cast<Eigen::Index>(s.num_nodes_), node_feat.cols());
      padded.topRows(node_feat.rows()) = node_feat;
      node_feat = std::move(padded);
    }
    s.events_ = std::move(events);
    s.node_feat_ = std::move(node_feat);
    s.edge_dim_ = m;
    s.unique_times_.reserve(s.events_.size());
    for (const Event& e : s.events_)
      if (s.unique_times_.empty() || s.unique_times_.back() != e.time)
        s.unique_times_.push_back(e.time);
    return s;
  }

  std::span<const Event> events() const noexcept { return events_; }
  const Event& operator[](EventIdx i) const { return events_[i]; }
  std::size_t size() const noexcept { return events_.size(); }
  bool empty() const noexcept { return events_.empty(); }
  std::size_t num_nodes() const noexcept { return num_nodes_; }
  std::size_t node_feat_dim() const noexcept { return static_cast<std::size_t>(node_feat_.cols()); }
  std::size_t edge_feat_dim() const noexcept { return edge_dim_; }
  const RowMatrix<double>& node_feat() const noexcept { return node_feat_; }
  std::span<const double> unique_times() const noexcept { return unique_times_; }

  /// Distinct timestamps that are <= t.
  std::span<const double> unique_times_upto(double t) const {
    auto end = std::upper_bound(unique_times_.begin(), unique_times_.end(), t);
    return {unique_times_.data(), static_cast<std::size_t>(end - unique_times_.begin())};
  }

  /// Number of events with time <= t.
  std::size_t count_upto(double t) const {
    auto it = std::upper_bound(events_.begin(), events_.end(), t,
                               [](double v, const Event& e) { return v < e.time; });
    return static_cast<std::size_t>(it - events_.begin());
  }

  /// True when no node occurs both as a source and as a destination.
  bool is_bipartite() const {
    std::vector<std::uint8_t> role(num_nodes_, 0);
    for (const Event& e : events_) {
      role[e.src] |= 1;
      role[e.dst] |= 2;
    }
    return std::none_of(role.begin(), role.end(), [](std::uint8_t r) { return r == 3; });
  }

  /// Copy restricted to the events whose positions are listed; idx is reassigned.
  EventStream subset(std::span<const EventIdx> keep) const {
    std::vector<Event> out;
    out.reserve(keep.size());
    for (EventIdx i : keep) out.push_back(events_.at(i));
    return from_events(std::move(out), num_nodes_, node_feat_, edge_dim_);
  }

 private:
  std::vector<Event> events_;
  std::size_t num_nodes_ = 0;
  RowMatrix<double> node_feat_;
  std::size_t edge_dim_ = 0;
  std::vector<double> unique_times_;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<std::uint64_t> parse_uint(std::string_view s) {
  s = trim(s);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc::result_out_of_range) return std::numeric_limits<std::uint64_t>::max();
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<double> parse_real(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::string format_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, p);
  // Keep a decimal point so the column reads as real-valued.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

}  // namespace detail

/// Parses the event CSV format: header `src,dst,time,label[,ef_0..ef_{m-1}]`.
/// An empty label field (or -1) marks the event as unlabeled.
inline EventStream parse_events_csv(std::istream& in, const std::string& source = "<events>",
                                    RowMatrix<double> node_feat = {}) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(source, 1, "missing header");
  ++lineno;
  const auto header = detail::split_csv_line(detail::trim(line));
  static constexpr std::string_view kFixed[] = {"src", "dst", "time", "label"};
  if (header.size() < 4) throw ParseError(source, 1, "header must start with src,dst,time,label");
  for (std::size_t c = 0; c < 4; ++c)
    if (detail::trim(header[c]) != kFixed[c])
      throw ParseError(source, 1, "header must start with src,dst,time,label");
  const std::size_t m = header.size() - 4;
  for (std::size_t c = 0; c < m; ++c)
    if (detail::trim(header[4 + c]) != "ef_" + std::to_string(c))
      throw ParseError(source, 1, "edge feature columns must be named ef_0..ef_{m-1}");

  std::vector<Event> events;
  while (std::getline(in, line)) {
    ++lineno;
    const auto view = detail::trim(line);
    if (view.empty()) continue;
    const auto cols = detail::split_csv_line(view);
    if (cols.size() != 4 + m)
      throw ParseError(source, lineno,
                       "expected " + std::to_string(4 + m) + " fields, got " +
                           std::to_string(cols.size()));
    Event e;
    const auto src = detail::parse_uint(cols[0]);
    const auto dst = detail::parse_uint(cols[1]);
    if (!src || !dst) throw ParseError(source, lineno, "malformed node id");
    if (*src > kMaxNodeId || *dst > kMaxNodeId) throw ParseError(source, lineno, "node-id overflow");
    e.src = static_cast<NodeId>(*src);
    e.dst = static_cast<NodeId>(*dst);
    const auto t = detail::parse_real(cols[2]);
    if (!t || !std::isfinite(*t)) throw ParseError(source, lineno, "malformed timestamp");
    if (*t < 0.0) throw ParseError(source, lineno, "negative timestamp");
    e.time = *t;
    const auto lab = detail::trim(cols[3]);
    if (lab.empty() || lab == "-1") {
      e.label = kNoLabel;
    } else if (lab == "0" || lab == "1") {
      e.label = static_cast<std::int8_t>(lab[0] - '0');
    } else {
      throw ParseError(source, lineno, "label must be 0, 1, -1 or empty");
    }
    e.edge_feat.resize(m);
    for (std::size_t c = 0; c < m; ++c) {
      const auto v = detail::parse_real(cols[4 + c]);
      if (!v) throw ParseError(source, lineno, "malformed edge feature ef_" + std::to_string(c));
      e.edge_feat[c] = *v;
    }
    events.push_back(std::move(e));
  }
  if (events.empty()) throw ParseError(source, lineno, "empty stream");
  return EventStream::from_events(std::move(events), 0, std::move(node_feat), m);
}

/// Parses the node-feature CSV: header `node,f_0..f_{d-1}`; absent rows stay zero.
inline RowMatrix<double> parse_node_features_csv(std::istream& in,
                                                 const std::string& source = "<node features>") {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(source, 1, "missing header");
  ++lineno;
  const auto header = detail::split_csv_line(detail::trim(line));
  if (header.empty() || detail::trim(header[0]) != "node")
    throw ParseError(source, 1, "header must start with node");
  const std::size_t d = header.size() - 1;
  for (std::size_t c = 0; c < d; ++c)
    if (detail::trim(header[1 + c]) != "f_" + std::to_string(c))
      throw ParseError(source, 1, "feature columns must be named f_0..f_{d-1}");
  std::vector<std::pair<NodeId, std::vector<double>>> rows;
  std::size_t max_id = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto view = detail::trim(line);
    if (view.empty()) continue;
    const auto cols = detail::split_csv_line(view);
    if (cols.size() != d + 1) throw ParseError(source, lineno, "inconsistent feature arity");
    const auto id = detail::parse_uint(cols[0]);
    if (!id) throw ParseError(source, lineno, "malformed node id");
    if (*id > kMaxNodeId) throw ParseError(source, lineno, "node-id overflow");
    std::vector<double> f(d);
    for (std::size_t c = 0; c < d; ++c) {
      const auto v = detail::parse_real(cols[1 + c]);
      if (!v) throw ParseError(source, lineno, "malformed feature value");
      f[c] = *v;
    }
    max_id = std::max<std::size_t>(max_id, *id);
    rows.emplace_back(static_cast<NodeId>(*id), std::move(f));
  }
  RowMatrix<double> out = RowMatrix<double>::Zero(rows.empty() ? 0 : static_cast<Eigen::Index>(max_id + 1),
                                                  static_cast<Eigen::Index>(d));
  for (auto& [id, f] : rows)
    for (std::size_t c = 0; c < d; ++c) out(id, static_cast<Eigen::Index>(c)) = f[c];
  return out;
}

inline EventStream ingest_csv(const std::string& path,
                              const std::optional<std::string>& node_feature_path = std::nullopt) {
  RowMatrix<double> feats;
  if (node_feature_path) {
    std::ifstream nf(*node_feature_path);
    if (!nf) throw Error("cannot open " + *node_feature_path);
    feats = parse_node_features_csv(nf, *node_feature_path);
  }
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_events_csv(in, path, std::move(feats));
}

inline void write_events_csv(const EventStream& stream, std::ostream& out) {
  out << "src,dst,time,label";
  for (std::size_t c = 0; c < stream.edge_feat_dim(); ++c) out << ",ef_" << c;
  out << '\n';
  for (const Event& e : stream.events()) {
    out << e.src << ',' << e.dst << ',' << detail::format_real(e.time) << ',';
    if (e.has_label()) out << int(e.label);
    for (double f : e.edge_feat) out << ',' << detail::format_real(f);
    out << '\n';
  }
}

inline void write_csv(const EventStream& stream, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_events_csv(stream, out);
}

inline void write_node_features_csv(const RowMatrix<double>& feats, std::ostream& out) {
  out << "node";
  for (Eigen::Index c = 0; c < feats.cols(); ++c) out << ",f_" << c;
  out << '\n';
  for (Eigen::Index r = 0; r < feats.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < feats.cols(); ++c) out << ',' << detail::format_real(feats(r, c));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { Transductive, Inductive };

struct SplitPlan {
  EventIdx train_end = 0;
  EventIdx val_end = 0;
  std::vector<NodeId> new_nodes;  // sorted
  SplitMode mode = SplitMode::Transductive;

  bool is_new(NodeId n) const { return std::binary_search(new_nodes.begin(), new_nodes.end(), n); }
  bool touches_new(const Event& e) const { return is_new(e.src) || is_new(e.dst); }
};

namespace detail {
inline EventIdx floor_count(double frac, std::size_t n) {
  return static_cast<EventIdx>(std::floor(frac * static_cast<double>(n) + 1e-9));
}
}  // namespace detail

inline SplitPlan chronological_split(const EventStream& stream, double train_frac, double val_frac) {
  if (!(train_frac > 0.0) || !(val_frac > 0.0) || !(train_frac + val_frac < 1.0))
    throw Error("split fractions must satisfy 0 < train, 0 < val, train + val < 1");
  SplitPlan plan;
  plan.train_end = detail::floor_count(train_frac, stream.size());
  plan.val_end = detail::floor_count(train_frac + val_frac, stream.size());
  if (plan.train_end == 0) throw Error("split leaves no training events");
  return plan;
}

/// Positions of training events, excluding those that touch withheld nodes.
inline std::vector<EventIdx> train_indices(const EventStream& stream, const SplitPlan& plan) {
  std::vector<EventIdx> out;
  out.reserve(plan.train_end);
  for (EventIdx i = 0; i < plan.train_end; ++i)
    if (plan.new_nodes.empty() || !plan.touches_new(stream[i])) out.push_back(i);
  return out;
}

inline SplitPlan inductive_split(const EventStream& stream, double train_frac, double val_frac,
                                 double new_node_frac, std::uint64_t seed) {
  if (!(new_node_frac > 0.0) || !(new_node_frac < 1.0))
    throw Error("new_node_frac must lie in (0, 1)");
  SplitPlan plan = chronological_split(stream, train_frac, val_frac);
  plan.mode = SplitMode::Inductive;
  std::vector<NodeId> nodes(stream.num_nodes());
  std::iota(nodes.begin(), nodes.end(), NodeId{0});
  std::mt19937_64 rng(seed);
  std::shuffle(nodes.begin(), nodes.end(), rng);
  const std::size_t count = detail::floor_count(new_node_frac, stream.num_nodes());
  plan.new_nodes.assign(nodes.begin(), nodes.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(plan.new_nodes.begin(), plan.new_nodes.end());
  if (train_indices(stream, plan).empty()) throw Error("empty training set");
  return plan;
}

// ---------------------------------------------------------------------------
// Temporal neighbor index

struct NeighborRecord {
  NodeId neighbor = 0;
  EventIdx event = 0;
  double time = 0.0;
};

/// Per-node incidence lists in ascending (time, idx) order. Each event is
/// listed under both endpoints (once for self-loops).
class NeighborIndex {
 public:
  NeighborIndex() = default;

  explicit NeighborIndex(const EventStream& stream) : lists_(stream.num_nodes()) {
    for (const Event& e : stream.events()) add(e);
  }

  /// Index over a subset of the stream (positions ascending).
  NeighborIndex(const EventStream& stream, std::span<const EventIdx> included)
      : lists_(stream.num_nodes()) {
    for (EventIdx i : included) add(stream[i]);
  }

  std::size_t num_nodes() const noexcept { return lists_.size(); }

  std::span<const NeighborRecord> history(NodeId node) const { return lists_.at(node); }

  /// Up to kappa entries with time strictly before t, most recent first.
  std::vector<NeighborRecord> recent_neighbors(NodeId node, double t, std::size_t kappa) const {
    const auto& l = lists_.at(node);
    auto end = std::lower_bound(l.begin(), l.end(), t,
                                [](const NeighborRecord& r, double v) { return r.time < v; });
    return take_recent(l, static_cast<std::size_t>(end - l.begin()), kappa);
  }

  /// Last (up to) kappa entries whose event position is < bound, ascending order.
  std::span<const NeighborRecord> window_before(NodeId node, EventIdx bound, std::size_t kappa) const {
    const auto& l = lists_.at(node);
    auto end = std::lower_bound(l.begin(), l.end(), bound,
                                [](const NeighborRecord& r, EventIdx v) { return r.event < v; });
    const std::size_t n_end = static_cast<std::size_t>(end - l.begin());
    const std::size_t n_begin = n_end > kappa ? n_end - kappa : 0;
    return {l.data() + n_begin, n_end - n_begin};
  }

 private:
  void add(const Event& e) {
    lists_.at(e.src).push_back({e.dst, e.idx, e.time});
    if (e.dst != e.src) lists_.at(e.dst).push_back({e.src, e.idx, e.time});
  }

  static std::vector<NeighborRecord> take_recent(const std::vector<NeighborRecord>& l, std::size_t end,
                                                 std::size_t kappa) {
    std::vector<NeighborRecord> out;
    for (std::size_t k = end; k > 0 && out.size() < kappa; --k) out.push_back(l[k - 1]);
    return out;
  }

  std::vector<std::vector<NeighborRecord>> lists_;
};

inline std::vector<NeighborRecord> recent_neighbors(const NeighborIndex& index, NodeId node, double t,
                                                    std::size_t kappa) {
  return index.recent_neighbors(node, t, kappa);
}

}  // namespace dsrd
