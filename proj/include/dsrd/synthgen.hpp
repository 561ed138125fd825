#pragma once

// Seeded synthetic event streams and the scaling benchmark.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <random>
#include <set>

#include "dsrd/evaluation.hpp"
#include "dsrd/graph_store.hpp"
#include "dsrd/network.hpp"

namespace dsrd {

enum class Pattern { Periodic, Bursty, Chain, Uniform };

inline const char* to_string(Pattern p) {
  switch (p) {
    case Pattern::Periodic: return "periodic";
    case Pattern::Bursty: return "bursty";
    case Pattern::Chain: return "chain";
    case Pattern::Uniform: return "uniform";
  }
  return "?";
}

inline Pattern parse_pattern(const std::string& s) {
  if (s == "periodic") return Pattern::Periodic;
  if (s == "bursty") return Pattern::Bursty;
  if (s == "chain") return Pattern::Chain;
  if (s == "uniform") return Pattern::Uniform;
  throw Error("unknown pattern: " + s);
}

struct SynthSpec {
  Pattern pattern = Pattern::Periodic;
  std::size_t num_nodes = 200;
  std::size_t num_events = 5000;
  std::size_t pairs = 0;      // periodic/bursty pair pool; 0 picks num_nodes
  double period = 1.0;        // periodic: spacing between re-fires of a pair
  double jitter = 0.05;       // periodic: uniform half-width, fraction of the period
  double burst_rate = 0.2;    // bursty: cluster arrivals per unit time
  double burst_mean = 8.0;    // bursty: mean events per cluster
  double burst_scale = 0.05;  // bursty: mean gap inside a cluster
  double horizon = 0.0;       // uniform: time span; 0 picks num_events / num_nodes
  bool bipartite = false;
  std::uint64_t seed = 0;
  std::size_t node_feat_dim = 16;
  std::size_t edge_feat_dim = 0;
  bool labels = false;        // attach a source-class label to every event

  void validate() const {
    if (num_events < 1) throw Error("synth: num_events must be >= 1");
    if (num_nodes < 2) throw Error("synth: num_nodes must be >= 2");
    if (bipartite && num_nodes < 2) throw Error("synth: bipartite needs >= 2 nodes");
    if (!(period > 0.0) || !(jitter >= 0.0 && jitter < 0.5) || !(burst_rate > 0.0) || !(burst_mean >= 1.0) ||
        !(burst_scale > 0.0) || !(horizon >= 0.0))
      throw Error("synth: parameters must be positive");
  }
};

namespace detail {

inline std::pair<NodeId, NodeId> random_pair(std::mt19937_64& rng, const SynthSpec& s) {
  const auto n = static_cast<NodeId>(s.num_nodes);
  if (s.bipartite) {
    const NodeId half = n / 2;
    std::uniform_int_distribution<NodeId> a(0, half - 1), b(half, n - 1);
    return {a(rng), b(rng)};
  }
  std::uniform_int_distribution<NodeId> a(0, n - 1), b(0, n - 2);
  const NodeId u = a(rng);
  NodeId v = b(rng);
  if (v >= u) ++v;
  return {u, v};
}

inline std::vector<std::pair<NodeId, NodeId>> pair_pool(std::mt19937_64& rng, const SynthSpec& s, std::size_t k) {
  const std::size_t cap = s.bipartite ? (s.num_nodes / 2) * (s.num_nodes - s.num_nodes / 2)
                                      : s.num_nodes * (s.num_nodes - 1);
  k = std::min(k, cap);
  std::set<std::pair<NodeId, NodeId>> seen;
  std::vector<std::pair<NodeId, NodeId>> out;
  while (out.size() < k) {
    const auto p = random_pair(rng, s);
    if (seen.insert(p).second) out.push_back(p);
  }
  return out;
}

}  // namespace detail

/// Deterministic in `spec`.
inline EventStream generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, 0x73796e7468ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Event> ev;

  switch (spec.pattern) {
    case Pattern::Chain: {
      // path 0 -> 1 -> ... -> n-1 at times 1, 2, ...
      for (std::size_t i = 0; i + 1 < spec.num_nodes; ++i)
        ev.push_back({static_cast<NodeId>(i), static_cast<NodeId>(i + 1), static_cast<double>(i + 1), {}, kNoLabel, 0});
      break;
    }
    case Pattern::Periodic: {
      const auto pool = detail::pair_pool(rng, spec, spec.pairs ? spec.pairs : spec.num_nodes);
      std::vector<double> phase(pool.size());
      for (auto& p : phase) p = unit(rng) * spec.period;
      for (std::size_t i = 0; i < spec.num_events; ++i) {
        const std::size_t k = i % pool.size();
        const double round = static_cast<double>(i / pool.size());
        const double j = (2.0 * unit(rng) - 1.0) * spec.jitter * spec.period;
        const double t = std::max(0.0, (round + 1.0) * spec.period + phase[k] + j);
        ev.push_back({pool[k].first, pool[k].second, t, {}, kNoLabel, 0});
      }
      break;
    }
    case Pattern::Bursty: {
      const auto pool = detail::pair_pool(rng, spec, spec.pairs ? spec.pairs : spec.num_nodes);
      std::exponential_distribution<double> arrival(spec.burst_rate), gap(1.0 / spec.burst_scale);
      std::geometric_distribution<int> size(1.0 / spec.burst_mean);
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      double clock = 0.0;
      while (ev.size() < spec.num_events) {
        clock += arrival(rng);
        const auto p = pool[pick(rng)];
        double t = clock;
        // self-exciting cluster: the pair and, with probability 1/4, its reverse
        for (int m = 1 + size(rng); m > 0 && ev.size() < spec.num_events; --m) {
          const bool flip = unit(rng) < 0.25 && !spec.bipartite;
          ev.push_back({flip ? p.second : p.first, flip ? p.first : p.second, t, {}, kNoLabel, 0});
          t += gap(rng);
        }
      }
      break;
    }
    case Pattern::Uniform: {
      const double T = spec.horizon > 0.0 ? spec.horizon
                                          : static_cast<double>(spec.num_events) / static_cast<double>(spec.num_nodes);
      for (std::size_t i = 0; i < spec.num_events; ++i) {
        const auto p = detail::random_pair(rng, spec);
        ev.push_back({p.first, p.second, unit(rng) * T, {}, kNoLabel, 0});
      }
      break;
    }
  }

  RowMatrix<double> feat;
  if (spec.node_feat_dim > 0) {
    feat.resize(static_cast<Eigen::Index>(spec.num_nodes), static_cast<Eigen::Index>(spec.node_feat_dim));
    for (Eigen::Index i = 0; i < feat.size(); ++i) feat.data()[i] = gauss(rng);
  }
  for (auto& e : ev) {
    if (spec.edge_feat_dim > 0) {
      e.edge_feat.resize(spec.edge_feat_dim);
      for (auto& x : e.edge_feat) x = gauss(rng);
    }
    if (spec.labels) {
      // class of the source: sign of its first feature (node id parity without features)
      const bool c = spec.node_feat_dim > 0 ? feat(static_cast<Eigen::Index>(e.src), 0) > 0.0 : (e.src % 2 == 1);
      e.label = c ? 1 : 0;
    }
  }
  return EventStream::from_events(std::move(ev), spec.num_nodes, std::move(feat),
                                  spec.edge_feat_dim > 0 ? std::optional<std::size_t>(spec.edge_feat_dim)
                                                         : std::nullopt);
}

// ---------------------------------------------------------------------------
// Scaling benchmark

struct ScalingRow {
  std::size_t events = 0;
  std::size_t nodes = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  std::size_t peak_mem_bytes = 0;  // state rows plus the largest tape
};

struct ScalingOptions {
  std::size_t nodes = 1000;
  std::size_t repeats = 3;
  std::size_t batch_size = 200;
  std::uint64_t seed = 0;
  Pattern pattern = Pattern::Uniform;
};

/// One taped sweep over `stream` with link queries; forward and backward timed separately.
template <class T>
ScalingRow time_sweep(const Model<T>& model, const EventStream& stream, std::size_t batch_size, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  const NeighborIndex index(stream);
  const NegativeSampler sampler(stream, NegativeStrategy::Random, seed);
  StateStore<T> store = model.make_store();
  GradientSet<T> grads(model.params());
  ScalingRow row;
  row.events = stream.size();
  row.nodes = stream.num_nodes();
  std::size_t tape_peak = 0;
  sweep(model, store, stream, index, stream.events(), batch_size, true,
        [&](std::size_t a, std::size_t b, BatchSpec& spec) {
          for (std::size_t p = a; p < b; ++p) {
            const Event& e = stream[p];
            const std::size_t q0 = spec.queries.size();
            spec.queries.push_back({e.src, e.time, e.idx});
            spec.queries.push_back({e.dst, e.time, e.idx});
            spec.queries.push_back({sampler.sample(e, p), e.time, e.idx});
            spec.links.push_back({q0, q0 + 1, 1.0});
            spec.links.push_back({q0, q0 + 2, 0.0});
          }
        },
        [&](Tape<T>& tape, const BatchSpec& spec, std::size_t, std::size_t) {
          const auto t0 = clock::now();
          BatchResult<T> r = model.forward(tape, &grads, store, spec);
          const auto t1 = clock::now();
          if (r.has_loss) tape.backward(r.loss);
          const auto t2 = clock::now();
          row.forward_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
          row.backward_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
          tape_peak = std::max(tape_peak, tape.memory_bytes());
          return r;
        });
  row.peak_mem_bytes = store.slots_in_use() * store.block_size() * sizeof(T) + tape_peak;
  return row;
}

/// Per-size medians over `repeats` timed runs after one discarded warm-up.
template <class T>
std::vector<ScalingRow> scaling_suite(const std::vector<std::size_t>& sizes, const ModelConfig& base,
                                      const ScalingOptions& opt) {
  if (!std::is_sorted(sizes.begin(), sizes.end())) throw Error("scaling_suite: sizes must be ascending");
  std::vector<ScalingRow> out;
  for (std::size_t n : sizes) {
    SynthSpec s;
    s.pattern = opt.pattern;
    s.num_nodes = opt.nodes;
    s.num_events = n;
    s.seed = opt.seed;
    const EventStream stream = generate(s);
    ModelConfig mc = base;
    mc.num_nodes = stream.num_nodes();
    mc.node_feat_dim = stream.node_feat_dim();
    mc.edge_feat_dim = stream.edge_feat_dim();
    const Model<T> model(mc);
    time_sweep(model, stream, opt.batch_size, opt.seed);  // warm-up
    std::vector<ScalingRow> runs;
    for (std::size_t r = 0; r < std::max<std::size_t>(opt.repeats, 1); ++r)
      runs.push_back(time_sweep(model, stream, opt.batch_size, opt.seed));
    auto median = [&](auto field) {
      std::vector<double> v;
      for (const auto& x : runs) v.push_back(x.*field);
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    ScalingRow row = runs.front();
    row.forward_ms = median(&ScalingRow::forward_ms);
    row.backward_ms = median(&ScalingRow::backward_ms);
    out.push_back(row);
  }
  return out;
}

inline void write_scaling_csv(std::ostream& out, const std::vector<ScalingRow>& rows) {
  out << "events,nodes,forward_ms,backward_ms\n";
  for (const auto& r : rows)
    out << r.events << ',' << r.nodes << ',' << detail::format_real(r.forward_ms) << ','
        << detail::format_real(r.backward_ms) << '\n';
}

/// Least-squares slope of log(y) on log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("loglog_slope: need two or more points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace dsrd
