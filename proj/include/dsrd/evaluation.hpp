#pragma once

// Ranking metrics, negative samplers and chronological evaluation sweeps.

#include <numeric>
#include <random>

#include "json.hpp"

#include "dsrd/graph_store.hpp"
#include "dsrd/network.hpp"

namespace dsrd {

// ---------------------------------------------------------------------------
// Metrics

/// Precision-recall sum over the score-descending ranking; ties keep input order.
inline double average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) throw Error("average_precision: size mismatch");
  const auto P = std::count(labels.begin(), labels.end(), 1);
  if (P == 0) throw Error("average_precision: no positives");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] != 1) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return ap / static_cast<double>(P);
}

/// Mann-Whitney: (ordered pos/neg pairs + 0.5 ties) / (P N).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("roc_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double P = 0, N = 0, rank_sum = 0;
  std::size_t k = 0;
  while (k < order.size()) {
    std::size_t e = k;
    while (e < order.size() && scores[order[e]] == scores[order[k]]) ++e;
    const double avg_rank = 0.5 * static_cast<double>(k + 1 + e);  // mean of ranks k+1..e
    for (std::size_t r = k; r < e; ++r) {
      if (labels[order[r]] == 1) {
        rank_sum += avg_rank;
        ++P;
      } else {
        ++N;
      }
    }
    k = e;
  }
  if (P == 0 || N == 0) throw Error("roc_auc: degenerate class");
  return (rank_sum - P * (P + 1) / 2) / (P * N);
}

enum class Setting { Transductive, Inductive };
enum class NegativeStrategy { Random, Historical, Inductive };

inline const char* to_string(Setting s) { return s == Setting::Transductive ? "transductive" : "inductive"; }
inline const char* to_string(NegativeStrategy s) {
  switch (s) {
    case NegativeStrategy::Random: return "random";
    case NegativeStrategy::Historical: return "historical";
    default: return "inductive";
  }
}

struct MetricReport {
  double ap = 0.0;
  double roc_auc = 0.0;
  std::optional<double> auprc;
  std::size_t n = 0;
  Setting setting = Setting::Transductive;
  std::string strategy = "random";
};

inline nlohmann::ordered_json to_json(const MetricReport& r, std::uint64_t seed, const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["setting"] = to_string(r.setting);
  j["strategy"] = r.strategy;
  j["ap"] = r.ap;
  j["roc_auc"] = r.roc_auc;
  if (r.auprc) j["auprc"] = *r.auprc;
  j["n"] = r.n;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  return j;
}

// ---------------------------------------------------------------------------
// Negative sampling

/// SplitMix-based engine; deterministic per seed.
struct SplitMixEngine {
  using result_type = std::uint64_t;
  std::uint64_t state;
  explicit SplitMixEngine(std::uint64_t s) : state(s) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() {
    state += 0x9e3779b97f4a7c15ULL;
    return splitmix64(state);
  }
};

/// Chooses v- for a positive (u, v, t). Everything the sampler consults lies at
/// stream positions before the positive's own.
class NegativeSampler {
 public:
  NegativeSampler(const EventStream& stream, NegativeStrategy strategy, std::uint64_t seed,
                  EventIdx eval_begin = 0)
      : strategy_(strategy), seed_(seed), eval_begin_(eval_begin), num_nodes_(stream.num_nodes()) {
    if (num_nodes_ < 2) throw Error("negative sampler: need at least two nodes");
    // Destination side as of each position: nodes in order of first arrival as
    // a destination, and the first position at which some node has played both roles.
    constexpr std::size_t never = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> first_src(num_nodes_, never), first_dst(num_nodes_, never);
    for (std::size_t p = 0; p < stream.size(); ++p) {
      const Event& e = stream[p];
      if (first_src[e.src] == never) first_src[e.src] = p;
      if (first_dst[e.dst] == never) {
        first_dst[e.dst] = p;
        dst_order_.push_back(e.dst);
        dst_since_.push_back(p);
      }
    }
    dst_rank_.assign(num_nodes_, never);
    for (std::size_t r = 0; r < dst_order_.size(); ++r) dst_rank_[dst_order_[r]] = r;
    mixed_from_ = never;
    for (NodeId n = 0; n < num_nodes_; ++n)
      if (first_src[n] != never && first_dst[n] != never)
        mixed_from_ = std::min(mixed_from_, std::max(first_src[n], first_dst[n]));
    // First occurrence of each directed pair, in stream order.
    std::unordered_map<std::uint64_t, bool> seen;
    by_src_.resize(num_nodes_);
    for (const Event& e : stream.events()) {
      const std::uint64_t k = (static_cast<std::uint64_t>(e.src) << 32) | e.dst;
      if (!seen.emplace(k, true).second) continue;
      by_src_[e.src].push_back({e.idx, e.dst});
      global_.push_back({e.idx, e.dst});
    }
  }

  NegativeStrategy strategy() const noexcept { return strategy_; }

  /// Negative destination for the positive at stream position `position`.
  NodeId sample(const Event& pos, std::size_t position) const {
    SplitMixEngine rng(mix_seed(seed_, position, static_cast<std::uint64_t>(strategy_)));
    if (strategy_ != NegativeStrategy::Random) {
      const EventIdx lo = strategy_ == NegativeStrategy::Inductive ? eval_begin_ : 0;
      if (auto v = from_pairs(by_src_[pos.src], lo, pos.idx, pos.dst, rng)) return *v;
      if (auto v = from_pairs(global_, lo, pos.idx, pos.dst, rng)) return *v;
    }
    return random(pos.dst, position, rng);
  }

 private:
  struct Pair {
    EventIdx first;
    NodeId dst;
  };

  /// Uniform over the destination side seen before `position` while the
  /// prefix is bipartite, otherwise over all nodes; never `exclude`.
  NodeId random(NodeId exclude, std::size_t position, SplitMixEngine& rng) const {
    if (mixed_from_ >= position) {
      const auto m = static_cast<std::size_t>(
          std::lower_bound(dst_since_.begin(), dst_since_.end(), position) - dst_since_.begin());
      const bool contains = dst_rank_[exclude] < m;
      if (m > (contains ? 1u : 0u)) {
        std::uniform_int_distribution<std::size_t> d(0, m - (contains ? 2 : 1));
        std::size_t r = d(rng);
        if (contains && r >= dst_rank_[exclude]) ++r;
        return dst_order_[r];
      }
    }
    std::uniform_int_distribution<std::size_t> d(0, num_nodes_ - 2);
    NodeId r = static_cast<NodeId>(d(rng));
    if (r >= exclude) ++r;
    return r;
  }

  /// Uniform over pairs first seen in [lo, hi) with a destination other than `exclude`.
  static std::optional<NodeId> from_pairs(const std::vector<Pair>& pairs, EventIdx lo, EventIdx hi, NodeId exclude,
                                          SplitMixEngine& rng) {
    auto b = std::lower_bound(pairs.begin(), pairs.end(), lo, [](const Pair& p, EventIdx v) { return p.first < v; });
    auto e = std::lower_bound(b, pairs.end(), hi, [](const Pair& p, EventIdx v) { return p.first < v; });
    const auto n = static_cast<std::size_t>(e - b);
    if (n == 0) return std::nullopt;
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    for (int attempt = 0; attempt < 32; ++attempt) {
      const NodeId v = (b + static_cast<std::ptrdiff_t>(d(rng)))->dst;
      if (v != exclude) return v;
    }
    for (auto it = b; it != e; ++it)
      if (it->dst != exclude) return it->dst;
    return std::nullopt;
  }

  NegativeStrategy strategy_;
  std::uint64_t seed_;
  EventIdx eval_begin_;
  std::size_t num_nodes_;
  std::vector<NodeId> dst_order_;         // by first arrival as a destination
  std::vector<std::size_t> dst_since_;    // that arrival position, ascending
  std::vector<std::size_t> dst_rank_;     // node -> index in dst_order_
  std::size_t mixed_from_ = 0;            // first position with a node in both roles
  std::vector<std::vector<Pair>> by_src_;
  std::vector<Pair> global_;
};

// ---------------------------------------------------------------------------
// Batching and sweeps

/// Consecutive chunks of `batch_size` positions, each extended so that no
/// timestamp group is split.
inline std::vector<std::pair<std::size_t, std::size_t>> make_batches(std::span<const Event> seq,
                                                                      std::size_t batch_size) {
  if (batch_size == 0) throw Error("batch_size must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t a = 0;
  while (a < seq.size()) {
    std::size_t b = std::min(seq.size(), a + batch_size);
    while (b < seq.size() && seq[b].time == seq[b - 1].time) ++b;
    out.emplace_back(a, b);
    a = b;
  }
  return out;
}

/// Runs a chronological sweep: every batch first applies the previous batch's
/// events, then answers its own queries. `build(begin, end, spec)` fills the
/// queries/targets; `consume(tape, spec, begin, end)` runs the forward (and
/// anything else) and returns its result, which is then committed.
template <class T, class Build, class Consume>
void sweep(const Model<T>& model, StateStore<T>& store, const EventStream& stream, const NeighborIndex& index,
           std::span<const Event> seq, std::size_t batch_size, bool needs_grad, Build&& build, Consume&& consume) {
  std::span<const Event> pending;
  for (auto [a, b] : make_batches(seq, batch_size)) {
    BatchSpec spec;
    spec.stream = &stream;
    spec.index = &index;
    spec.pending = pending;
    build(a, b, spec);
    Tape<T> tape(needs_grad);
    BatchResult<T> res = consume(tape, spec, a, b);
    model.commit(tape, res, store);
    pending = seq.subspan(a, b - a);
  }
}

struct LinkEvalOptions {
  Setting setting = Setting::Transductive;
  NegativeStrategy strategy = NegativeStrategy::Random;
  std::uint64_t seed = 0;
  std::size_t batch_size = 200;
};

/// Scores for a chronological sweep over stream positions [0, end), with
/// link queries (positive + one negative) for positions in [begin, end)
/// accepted by `keep`.
struct LinkScores {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::size_t> positions;  // stream position of each scored pair
};

template <class T>
LinkScores score_links(const Model<T>& model, const EventStream& stream, const NeighborIndex& index,
                       std::size_t begin, std::size_t end, const NegativeSampler& sampler,
                       const std::function<bool(const Event&)>& keep, std::size_t batch_size) {
  StateStore<T> store = model.make_store();
  LinkScores out;
  const auto seq = stream.events().subspan(0, end);
  sweep(model, store, stream, index, seq, batch_size, false,
        [&](std::size_t a, std::size_t b, BatchSpec& spec) {
          for (std::size_t p = std::max(a, begin); p < b; ++p) {
            const Event& e = seq[p];
            if (keep && !keep(e)) continue;
            const NodeId neg = sampler.sample(e, p);
            const std::size_t q0 = spec.queries.size();
            spec.queries.push_back({e.src, e.time, e.idx});
            spec.queries.push_back({e.dst, e.time, e.idx});
            spec.queries.push_back({neg, e.time, e.idx});
            spec.links.push_back({q0, q0 + 1, 1.0});
            spec.links.push_back({q0, q0 + 2, 0.0});
            out.positions.push_back(p);
            out.positions.push_back(p);
            out.labels.push_back(1);
            out.labels.push_back(0);
          }
        },
        [&](Tape<T>& tape, const BatchSpec& spec, std::size_t, std::size_t) {
          BatchResult<T> r = model.forward(tape, nullptr, store, spec);
          for (T z : r.link_logits) out.scores.push_back(static_cast<double>(sigmoid(z)));
          return r;
        });
  return out;
}

/// Link evaluation over the slice [begin, end) after replaying everything before it.
template <class T>
MetricReport evaluate_link(const Model<T>& model, const EventStream& stream, const SplitPlan& plan,
                           std::size_t begin, std::size_t end, const LinkEvalOptions& opt) {
  const NeighborIndex index(stream);
  const NegativeSampler sampler(stream, opt.strategy, opt.seed, plan.train_end);
  std::function<bool(const Event&)> keep;
  if (opt.setting == Setting::Inductive) keep = [&plan](const Event& e) { return plan.touches_new(e); };
  LinkScores s = score_links(model, stream, index, begin, end, sampler, keep, opt.batch_size);
  if (s.scores.empty()) throw Error("evaluate_link: empty evaluation slice");
  MetricReport r;
  r.ap = average_precision(s.scores, s.labels);
  r.roc_auc = roc_auc(s.scores, s.labels);
  r.n = s.scores.size();
  r.setting = opt.setting;
  r.strategy = to_string(opt.strategy);
  return r;
}

/// Node-classification probabilities for labeled events in [begin, end); the
/// label belongs to the event's source node, embedded just before the event.
template <class T>
std::pair<std::vector<double>, std::vector<int>> score_nodes(const Model<T>& model, const EventStream& stream,
                                                             std::size_t begin, std::size_t end,
                                                             std::size_t batch_size) {
  const NeighborIndex index(stream);
  StateStore<T> store = model.make_store();
  std::vector<double> scores;
  std::vector<int> labels;
  const auto seq = stream.events().subspan(0, end);
  sweep(model, store, stream, index, seq, batch_size, false,
        [&](std::size_t a, std::size_t b, BatchSpec& spec) {
          for (std::size_t p = std::max(a, begin); p < b; ++p) {
            const Event& e = seq[p];
            if (!e.has_label()) continue;
            spec.nodes.push_back({spec.queries.size(), static_cast<double>(e.label)});
            spec.queries.push_back({e.src, e.time, e.idx});
            labels.push_back(e.label);
          }
        },
        [&](Tape<T>& tape, const BatchSpec& spec, std::size_t, std::size_t) {
          BatchResult<T> r = model.forward(tape, nullptr, store, spec);
          const int C = model.config().classes;
          for (std::size_t k = 0; k < r.node_logits.size(); k += static_cast<std::size_t>(C))
            scores.push_back(static_cast<double>(sigmoid(r.node_logits[k])));
          return r;
        });
  return {scores, labels};
}

template <class T>
MetricReport evaluate_node(const Model<T>& model, const EventStream& stream, std::size_t begin, std::size_t end,
                           std::size_t batch_size = 200) {
  auto [scores, labels] = score_nodes(model, stream, begin, end, batch_size);
  if (scores.empty()) throw Error("evaluate_node: no labeled events in slice");
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) throw Error("evaluate_node: single-class slice");
  MetricReport r;
  r.roc_auc = roc_auc(scores, labels);
  r.auprc = average_precision(scores, labels);
  r.ap = *r.auprc;
  r.n = scores.size();
  r.strategy = "none";
  return r;
}

}  // namespace dsrd
