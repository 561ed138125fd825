#pragma once

// Retentive node states: decay-weighted injection, gated fusion,
// cross-depth propagation and readout. Value-level state machine plus
// closed-form and boundedness oracles.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "dsrd/common.hpp"
#include "dsrd/graph_store.hpp"

namespace dsrd {

// ---------------------------------------------------------------------------
// Scalar kernels shared by the value path and the taped path.
namespace kern {

template <class T>
inline T dot(const T* a, const T* b, int n) {
  T s = 0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// Cosine similarity; a zero-norm side yields 0. Norms are returned for reuse.
template <class T>
inline T cosine(const T* a, const T* b, int n, T& na, T& nb) {
  na = std::sqrt(dot(a, a, n));
  nb = std::sqrt(dot(b, b, n));
  const T ab = dot(a, b, n);
  if (std::isnan(ab) || std::isnan(na) || std::isnan(nb)) throw Error("cosine: NaN input");
  if (na == T(0) || nb == T(0)) return T(0);
  return ab / (na * nb);
}

template <class T>
inline T cosine(const T* a, const T* b, int n) {
  T na, nb;
  return cosine(a, b, n, na, nb);
}

/// exp(-lambda * log(1+dt)^alpha); 1 at dt = 0.
template <class T>
inline T temporal_factor(T lambda, T alpha, double dt) {
  const T L = static_cast<T>(std::log1p(dt));
  if (L <= T(0)) return T(1);
  return std::exp(-lambda * std::pow(L, alpha));
}

/// exp(-l * delta * log(1+dt)).
template <class T>
inline T attenuation(int l, T delta, double dt) {
  return std::exp(-T(l) * delta * static_cast<T>(std::log1p(dt)));
}

template <class T>
inline T normalizer(T abs_sum) {
  return std::max(abs_sum, T(1));
}

/// S += w * k^T v for row-major dh x dh S.
template <class T>
inline void accumulate_outer(T* S, const T* k, const T* v, int dh, T w) {
  for (int a = 0; a < dh; ++a) {
    const T ka = w * k[a];
    T* row = S + a * dh;
    for (int b = 0; b < dh; ++b) row[b] += ka * v[b];
  }
}

}  // namespace kern

// ---------------------------------------------------------------------------

template <class T>
struct DecayParams {
  int layers = 0;
  int heads = 0;
  // Row-major [layer][head].
  std::vector<T> lambda_raw, alpha_raw, gamma_raw, delta_raw;

  DecayParams() = default;
  DecayParams(int K, int H) : layers(K), heads(H) {
    const std::size_t n = static_cast<std::size_t>(K) * static_cast<std::size_t>(H);
    lambda_raw.assign(n, softplus_inverse(T(1)));
    alpha_raw.assign(n, T(0));
    gamma_raw.assign(n, T(0));
    delta_raw.assign(n, softplus_inverse(T(1)));
  }

  std::size_t at(int l, int h) const { return static_cast<std::size_t>(l * heads + h); }
  T lambda(int l, int h) const { return softplus(lambda_raw[at(l, h)]); }
  T alpha(int l, int h) const { return sigmoid(alpha_raw[at(l, h)]); }
  T gamma(int l, int h) const { return sigmoid(gamma_raw[at(l, h)]); }
  T delta(int l, int h) const { return softplus(delta_raw[at(l, h)]); }
};

/// sigma(cos(q,k)) * exp(-lambda * log(1+dt)^alpha).
template <class T>
inline T decay_weight(T lambda, T alpha, const RowVector<T>& q, const RowVector<T>& k, double dt,
                      bool temporal_decay = true) {
  if (q.size() != k.size()) throw Error("decay_weight: dimension mismatch");
  if (!(dt >= 0.0)) throw Error("decay_weight: negative elapsed time");
  const T c = kern::cosine(q.data(), k.data(), static_cast<int>(q.size()));
  return sigmoid(c) * (temporal_decay ? kern::temporal_factor(lambda, alpha, dt) : T(1));
}

template <class T>
struct Injection {
  RowMatrix<T> value;
  std::vector<T> weights;  // normalized weights, one per contributing event
};

/// Normalizes raw weights by max(sum |w|, 1) (unless disabled) and sums the
/// weighted outer products k^T v.
template <class T>
inline Injection<T> injection_from_weights(std::span<const T> raw, std::span<const RowVector<T>> keys,
                                           std::span<const RowVector<T>> values, int dh,
                                           bool normalize = true) {
  if (raw.size() != keys.size() || keys.size() != values.size())
    throw Error("short_term_injection: entry count mismatch");
  Injection<T> out;
  out.value = RowMatrix<T>::Zero(dh, dh);
  T abs_sum = 0;
  for (T w : raw) abs_sum += std::abs(w);
  const T z = normalize ? kern::normalizer(abs_sum) : T(1);
  for (std::size_t e = 0; e < raw.size(); ++e) {
    if (keys[e].size() != dh || values[e].size() != dh)
      throw Error("short_term_injection: dimension mismatch");
    const T w = raw[e] / z;
    out.weights.push_back(w);
    kern::accumulate_outer(out.value.data(), keys[e].data(), values[e].data(), dh, w);
  }
  return out;
}

template <class T>
inline Injection<T> short_term_injection(const RowVector<T>& q, std::span<const RowVector<T>> keys,
                                         std::span<const RowVector<T>> values, std::span<const double> dts,
                                         T lambda, T alpha, bool temporal_decay = true) {
  if (dts.size() != keys.size()) throw Error("short_term_injection: entry count mismatch");
  std::vector<T> raw(keys.size());
  for (std::size_t e = 0; e < keys.size(); ++e)
    raw[e] = decay_weight(lambda, alpha, q, keys[e], dts[e], temporal_decay);
  return injection_from_weights<T>(raw, keys, values, static_cast<int>(q.size()));
}

template <class T>
inline RowMatrix<T> gated_update(const RowMatrix<T>& prev, const RowMatrix<T>& inj, T gamma) {
  if (prev.rows() != inj.rows() || prev.cols() != inj.cols()) throw Error("gated_update: shape mismatch");
  return gamma * prev + (T(1) - gamma) * inj;
}

/// q S / sqrt(d).
template <class T>
inline RowVector<T> readout(const RowMatrix<T>& S, const RowVector<T>& q, int d) {
  if (S.rows() != q.size() || S.cols() != S.rows()) throw Error("readout: shape mismatch");
  return (q * S) / std::sqrt(T(d));
}

struct PropagationSource {
  std::size_t state = 0;  // index into the source-state list
  double dt = 0.0;        // age used by the attenuation
};

/// S_l += sum_i psi~_i S_{l-1}^{(i)}, psi = exp(-l delta log(1+dt)), psi~ = psi / max(sum psi, 1).
template <class T>
inline RowMatrix<T> topo_propagate(const RowMatrix<T>& target, std::span<const RowMatrix<T>> lower_states,
                                   std::span<const PropagationSource> sources, int l, T delta,
                                   bool attenuate = true, bool normalize = true) {
  if (l < 2) throw Error("topo_propagate: depth must be >= 2");
  std::vector<T> psi(sources.size());
  T sum = 0;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    psi[s] = attenuate ? kern::attenuation(l, delta, sources[s].dt) : T(1);
    sum += psi[s];
  }
  const T z = normalize ? kern::normalizer(sum) : T(1);
  RowMatrix<T> out = target;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& src = lower_states[sources[s].state];
    if (src.rows() != target.rows() || src.cols() != target.cols())
      throw Error("topo_propagate: shape mismatch");
    out += (psi[s] / z) * src;
  }
  return out;
}

// ---------------------------------------------------------------------------
// State storage: node -> slot with K x H blocks of dh x dh, allocated on first touch.

template <class T>
class StateStore {
 public:
  StateStore() = default;
  StateStore(std::size_t num_nodes, int K, int H, int dh)
      : K_(K), H_(H), dh_(dh), slot_of_(num_nodes, -1) {}

  int layers() const noexcept { return K_; }
  int heads() const noexcept { return H_; }
  int head_dim() const noexcept { return dh_; }
  std::size_t row_size() const noexcept { return static_cast<std::size_t>(H_) * dh_ * dh_; }
  std::size_t block_size() const noexcept { return row_size() * static_cast<std::size_t>(K_); }
  std::size_t num_nodes() const noexcept { return slot_of_.size(); }
  std::size_t slots_in_use() const noexcept { return last_update_.size(); }

  void reset() {
    std::fill(slot_of_.begin(), slot_of_.end(), -1);
    data_.clear();
    last_update_.clear();
    updates_.clear();
  }

  bool has(NodeId n) const { return slot_of_.at(n) >= 0; }

  int slot(NodeId n) {
    int& s = slot_of_.at(n);
    if (s < 0) {
      s = static_cast<int>(last_update_.size());
      data_.resize(data_.size() + block_size(), T(0));
      last_update_.push_back(0.0);
      updates_.push_back(0);
    }
    return s;
  }

  /// Layer row (all heads) or nullptr when the node has never been touched.
  const T* row(NodeId n, int l) const {
    const int s = slot_of_.at(n);
    return s < 0 ? nullptr : data_.data() + static_cast<std::size_t>(s) * block_size() + l * row_size();
  }
  T* mutable_row(NodeId n, int l) {
    const int s = slot(n);
    return data_.data() + static_cast<std::size_t>(s) * block_size() + l * row_size();
  }

  Eigen::Map<const RowMatrix<T>> head(NodeId n, int l, int h) const {
    const T* r = row(n, l);
    if (!r) throw Error("state store: node has no state");
    return {r + static_cast<std::size_t>(h) * dh_ * dh_, dh_, dh_};
  }

  RowMatrix<T> head_or_zero(NodeId n, int l, int h) const {
    if (!has(n)) return RowMatrix<T>::Zero(dh_, dh_);
    return head(n, l, h);
  }

  double last_update(NodeId n) const {
    const int s = slot_of_.at(n);
    return s < 0 ? 0.0 : last_update_[static_cast<std::size_t>(s)];
  }
  std::uint64_t update_count(NodeId n) const {
    const int s = slot_of_.at(n);
    return s < 0 ? 0 : updates_[static_cast<std::size_t>(s)];
  }
  void mark_updated(NodeId n, double t) {
    const auto s = static_cast<std::size_t>(slot(n));
    last_update_[s] = t;
    ++updates_[s];
  }

  std::span<const T> raw() const noexcept { return data_; }

 private:
  int K_ = 0, H_ = 0, dh_ = 0;
  std::vector<int> slot_of_;
  std::vector<T> data_;
  std::vector<double> last_update_;
  std::vector<std::uint64_t> updates_;
};

// ---------------------------------------------------------------------------
// Value-level state machine

enum class EntryMode { Recent, CurrentEvents };

struct CoreOptions {
  bool temporal_decay = true;
  bool diffusion = true;
  bool retention = true;  // false: state is the latest injection only
  bool attenuate_propagation = true;
  bool normalize_propagation = true;
  bool normalize_weights = true;
  bool unit_weights = false;  // omega = 1
  std::optional<std::pair<double, double>> fixed_retention;  // (a, b) override of (gamma, 1-gamma)
  std::optional<double> injection_clip;  // clip injections to this Frobenius norm
  EntryMode entries = EntryMode::Recent;
  std::size_t kappa = 20;
};

/// Everything a provider needs to build one injection.
struct InjectionContext {
  NodeId node = 0;
  int layer = 0;  // 0-based
  int head = 0;
  double time = 0.0;
  std::span<const NeighborRecord> entries;
};

struct UpdateRecord {
  NodeId node = 0;
  int layer = 0;
  int head = 0;
  double time = 0.0;
  std::uint64_t n = 0;  // updates of this node so far, including this one
  double state_norm = 0.0;
  double injection_norm = 0.0;
};

struct NodeOutput {
  NodeId node = 0;
  Eigen::Matrix<double, 1, Eigen::Dynamic> value;
};

/// Single-writer state machine over a chronological stream. `Provider` must
/// expose `injection(const InjectionContext&, const CoreOptions&)` returning a
/// dh x dh matrix and `query(NodeId, int layer, int head)` returning a length-dh row.
template <class T, class Provider>
class RetentiveCore {
 public:
  using Mat = RowMatrix<T>;

  RetentiveCore(const EventStream& stream, int K, int H, int dh, DecayParams<T> params, Provider provider,
                CoreOptions options = {})
      : stream_(&stream),
        index_(stream),
        K_(K),
        H_(H),
        dh_(dh),
        params_(std::move(params)),
        provider_(std::move(provider)),
        opt_(options),
        store_(stream.num_nodes(), K, H, dh) {
    if (K < 1 || H < 1 || dh < 1) throw Error("retentive core: bad shape");
  }

  void reset() {
    store_.reset();
    clock_ = -std::numeric_limits<double>::infinity();
  }

  const StateStore<T>& states() const noexcept { return store_; }
  const CoreOptions& options() const noexcept { return opt_; }
  double clock() const noexcept { return clock_; }
  std::function<void(const UpdateRecord&)> observer;

  Mat state(NodeId n, int l, int h) const { return store_.head_or_zero(n, l, h); }

  /// Processes a chronological run of events (grouped by timestamp) and
  /// returns the deepest-layer readout for every node touched, in order.
  std::vector<NodeOutput> process_event_batch(std::span<const Event> events) {
    std::vector<NodeOutput> out;
    std::size_t a = 0;
    while (a < events.size()) {
      std::size_t b = a + 1;
      while (b < events.size() && events[b].time == events[a].time) ++b;
      process_group(events.subspan(a, b - a), out);
      a = b;
    }
    return out;
  }

  /// Replays the whole stream up to and including time t.
  std::vector<NodeOutput> run_until(double t) {
    const std::size_t n = stream_->count_upto(t);
    return process_event_batch(stream_->events().subspan(0, n));
  }

 private:
  T gate_a(int l, int h) const {
    if (opt_.fixed_retention) return static_cast<T>(opt_.fixed_retention->first);
    return params_.gamma(l, h);
  }
  T gate_b(int l, int h) const {
    if (opt_.fixed_retention) return static_cast<T>(opt_.fixed_retention->second);
    return T(1) - params_.gamma(l, h);
  }

  void process_group(std::span<const Event> group, std::vector<NodeOutput>& out) {
    const double t = group.front().time;
    if (!(t > clock_)) throw Error("retentive core: out-of-order timestamp");
    clock_ = t;

    std::vector<NodeId> nodes;
    for (const Event& e : group)
      for (NodeId n : {e.src, e.dst})
        if (std::find(nodes.begin(), nodes.end(), n) == nodes.end()) nodes.push_back(n);

    // Pre-timestamp snapshot of every touched node (sources of propagation).
    struct Snapshot {
      bool present;
      double last;
      std::vector<T> rows;
    };
    std::unordered_map<NodeId, Snapshot> pre;
    for (NodeId n : nodes) {
      Snapshot s{store_.has(n), store_.last_update(n), {}};
      if (s.present) {
        const T* r = store_.row(n, 0);
        s.rows.assign(r, r + store_.block_size());
      }
      pre.emplace(n, std::move(s));
    }

    const std::size_t rs = store_.row_size();
    const std::size_t hs = static_cast<std::size_t>(dh_) * dh_;
    for (NodeId j : nodes) {
      std::vector<NeighborRecord> entries = gather_entries(j, group);
      const std::uint64_t n_upd = store_.update_count(j) + 1;
      for (int l = 0; l < K_; ++l) {
        T* row = store_.mutable_row(j, l);
        for (int h = 0; h < H_; ++h) {
          Mat inj = provider_.injection(InjectionContext{j, l, h, t, entries}, opt_);
          if (opt_.injection_clip) {
            const T nrm = inj.norm();
            const T M = static_cast<T>(*opt_.injection_clip);
            if (nrm > M) inj *= M / nrm;
          }
          Eigen::Map<Mat> S(row + h * hs, dh_, dh_);
          if (opt_.retention)
            S = gate_a(l, h) * S + gate_b(l, h) * inj;
          else
            S = inj;
          if (observer)
            observer(UpdateRecord{j, l, h, t, n_upd, static_cast<double>(S.norm()),
                                  static_cast<double>(inj.norm())});
        }
      }
    }

    // Readout precedes propagation.
    const T scale = T(1) / std::sqrt(T(H_ * dh_));
    for (NodeId j : nodes) {
      NodeOutput o{j, Eigen::Matrix<double, 1, Eigen::Dynamic>::Zero(H_ * dh_)};
      for (int h = 0; h < H_; ++h) {
        const RowVector<T> q = provider_.query(j, K_ - 1, h);
        const RowVector<T> r = q * store_.head(j, K_ - 1, h) * scale;
        for (int c = 0; c < dh_; ++c) o.value(h * dh_ + c) = static_cast<double>(r(c));
      }
      out.push_back(std::move(o));
    }

    if (opt_.diffusion && opt_.retention) {
      for (int l = K_ - 1; l >= 1; --l) {
        for (NodeId j : nodes) {
          // Links into j from every event at t (self-loops once).
          std::vector<std::pair<NodeId, double>> links;
          for (const Event& e : group) {
            if (e.dst == j) links.emplace_back(e.src, 0.0);
            else if (e.src == j) links.emplace_back(e.dst, 0.0);
          }
          for (int h = 0; h < H_; ++h) {
            const std::size_t ph = params_.at(l, h);
            const T delta = softplus(params_.delta_raw[ph]);
            std::vector<T> psi;
            std::vector<const T*> src;
            T sum = 0;
            for (auto& [i, unused] : links) {
              const Snapshot& s = pre.at(i);
              if (!s.present) continue;
              const double age = t - s.last;
              const T p = opt_.attenuate_propagation ? kern::attenuation(l + 1, delta, age) : T(1);
              psi.push_back(p);
              src.push_back(s.rows.data() + static_cast<std::size_t>(l - 1) * rs + h * hs);
              sum += p;
            }
            const T z = opt_.normalize_propagation ? kern::normalizer(sum) : T(1);
            Eigen::Map<Mat> S(store_.mutable_row(j, l) + h * hs, dh_, dh_);
            for (std::size_t s = 0; s < psi.size(); ++s)
              S += (psi[s] / z) * Eigen::Map<const Mat>(src[s], dh_, dh_);
          }
        }
      }
    }

    for (NodeId j : nodes) store_.mark_updated(j, t);
  }

  std::vector<NeighborRecord> gather_entries(NodeId j, std::span<const Event> group) const {
    if (opt_.entries == EntryMode::CurrentEvents) {
      std::vector<NeighborRecord> out;
      for (const Event& e : group) {
        if (e.src == j) out.push_back({e.dst, e.idx, e.time});
        else if (e.dst == j) out.push_back({e.src, e.idx, e.time});
      }
      return out;
    }
    EventIdx bound = 0;
    for (const Event& e : group)
      if (e.touches(j)) bound = e.idx + 1;
    auto w = index_.window_before(j, bound, opt_.kappa);
    return {w.begin(), w.end()};
  }

  const EventStream* stream_;
  NeighborIndex index_;
  int K_, H_, dh_;
  DecayParams<T> params_;
  Provider provider_;
  CoreOptions opt_;
  StateStore<T> store_;
  double clock_ = -std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Providers

/// Projection-based injections: keys/values/queries are node features times
/// per-(layer, head) matrices.
template <class T>
struct ProjectionInjector {
  RowMatrix<T> X;                   // |V| x d_in
  std::vector<RowMatrix<T>> WQ, WK, WV;  // [l*H + h], each d_in x dh
  DecayParams<T> params;
  int heads = 1;

  RowVector<T> key(NodeId n, int l, int h) const { return X.row(n) * WK[l * heads + h]; }
  RowVector<T> value(NodeId n, int l, int h) const { return X.row(n) * WV[l * heads + h]; }
  RowVector<T> query(NodeId n, int l, int h) const { return X.row(n) * WQ[l * heads + h]; }

  RowMatrix<T> injection(const InjectionContext& c, const CoreOptions& opt) const {
    const RowVector<T> q = query(c.node, c.layer, c.head);
    std::vector<RowVector<T>> ks, vs;
    std::vector<T> raw;
    for (const auto& r : c.entries) {
      ks.push_back(key(r.neighbor, c.layer, c.head));
      vs.push_back(value(r.neighbor, c.layer, c.head));
      raw.push_back(opt.unit_weights ? T(1)
                                     : decay_weight(params.lambda(c.layer, c.head), params.alpha(c.layer, c.head),
                                                    q, ks.back(), c.time - r.time, opt.temporal_decay));
    }
    return injection_from_weights<T>(raw, ks, vs, static_cast<int>(q.size()), opt.normalize_weights).value;
  }
};

/// Layer-0 injection of a rank-one marker per source node (e_i^T e_0);
/// deeper layers receive nothing. Makes walk counts readable from states.
template <class T>
struct BasisInjector {
  int dh = 1;

  RowMatrix<T> injection(const InjectionContext& c, const CoreOptions&) const {
    RowMatrix<T> m = RowMatrix<T>::Zero(dh, dh);
    if (c.layer != 0) return m;
    for (const auto& r : c.entries) m(static_cast<Eigen::Index>(r.neighbor), 0) += T(1);
    return m;
  }
  RowVector<T> query(NodeId, int, int) const { return RowVector<T>::Zero(dh); }
};

// ---------------------------------------------------------------------------
// Oracles

inline constexpr std::size_t kClosedFormMaxEvents = 50;

/// Expansion sum_tau (prod_{later updates} a) b inj(tau) over the node's own
/// update timestamps <= t. `inj(tau)` returns the injection delivered at tau.
template <class T>
inline RowMatrix<T> closed_form_state(const EventStream& stream, double t, NodeId j, T a, T b, int dh,
                                      const std::function<RowMatrix<T>(double)>& inj) {
  const std::size_t n = stream.count_upto(t);
  if (n > kClosedFormMaxEvents) throw Error("closed_form_state: oversize prefix");
  std::vector<double> taus;
  for (std::size_t k = 0; k < n; ++k) {
    const Event& e = stream.events()[k];
    if (e.touches(j) && (taus.empty() || taus.back() != e.time)) taus.push_back(e.time);
  }
  RowMatrix<T> S = RowMatrix<T>::Zero(dh, dh);
  for (std::size_t k = 0; k < taus.size(); ++k) {
    T coef = b;
    for (std::size_t r = k + 1; r < taus.size(); ++r) coef *= a;
    S += coef * inj(taus[k]);
  }
  return S;
}

/// Unweighted sum of per-event increments over j's history up to t.
template <class T>
inline RowMatrix<T> flat_aggregation(const EventStream& stream, double t, NodeId j, int dh,
                                     const std::function<RowMatrix<T>(const Event&, NodeId)>& increment) {
  RowMatrix<T> H = RowMatrix<T>::Zero(dh, dh);
  for (const Event& e : stream.events()) {
    if (e.time > t) break;
    if (!e.touches(j)) continue;
    H += increment(e, e.src == j ? e.dst : e.src);
  }
  return H;
}

struct BoundReport {
  bool ok = true;
  double max_ratio = 0.0;
  std::size_t steps = 0;
  std::size_t violations = 0;
  std::optional<std::size_t> first_violation;
};

/// Checks ||S|| <= (1 - gamma^n) M at every record (n = updates of that state).
inline BoundReport check_bound(std::span<const UpdateRecord> history, double gamma, double M,
                               double rel_slack = 1e-12) {
  BoundReport rep;
  for (std::size_t s = 0; s < history.size(); ++s) {
    const UpdateRecord& r = history[s];
    if (r.injection_norm > M * (1.0 + rel_slack))
      throw Error("check_bound: injection exceeds M at step " + std::to_string(s));
    const double bound = (1.0 - std::pow(gamma, static_cast<double>(r.n))) * M;
    const double ratio = bound > 0 ? r.state_norm / bound : (r.state_norm > 0 ? INFINITY : 0.0);
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    ++rep.steps;
    if (r.state_norm > bound * (1.0 + rel_slack) + 1e-300) {
      ++rep.violations;
      if (!rep.first_violation) rep.first_violation = s;
      rep.ok = false;
    }
  }
  return rep;
}

}  // namespace dsrd
