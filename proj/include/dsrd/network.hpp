#pragma once

// The full model: input projection, time/edge augmentation, retentive
// layers with residual blocks, task heads, batched taped forward over a
// stream, and checkpoints.

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

#include "dsrd/common.hpp"
#include "dsrd/differentiation.hpp"
#include "dsrd/graph_store.hpp"
#include "dsrd/retentive_core.hpp"

namespace dsrd {

struct Ablation {
  bool no_decay = false;
  bool no_diffusion = false;
  bool no_state = false;
  bool no_block = false;

  bool stateful() const noexcept { return !no_state && !no_block; }
  bool any() const noexcept { return no_decay || no_diffusion || no_state || no_block; }
  bool operator==(const Ablation&) const = default;
};

/// Flags: "no-decay", "no-diffusion", "no-state", "no-block" (underscores accepted).
inline Ablation ablation_config(const std::vector<std::string>& flags) {
  Ablation a;
  for (std::string f : flags) {
    std::replace(f.begin(), f.end(), '_', '-');
    if (f == "no-decay") a.no_decay = true;
    else if (f == "no-diffusion") a.no_diffusion = true;
    else if (f == "no-state") a.no_state = true;
    else if (f == "no-block") a.no_block = true;
    else throw Error("unknown ablation flag: " + f);
  }
  return a;
}

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int dim = 64;
  int neighbors = 20;
  int time_dim = 16;
  int classes = 1;
  double dropout = 0.1;
  std::size_t num_nodes = 0;
  std::size_t node_feat_dim = 0;  // 0: zero features of width dim
  std::size_t edge_feat_dim = 0;
  std::uint64_t seed = 0;
  Ablation ablation;

  int head_dim() const { return dim / heads; }
  std::size_t input_dim() const { return node_feat_dim ? node_feat_dim : static_cast<std::size_t>(dim); }
  std::size_t fuse_dim() const { return std::max(edge_feat_dim, static_cast<std::size_t>(time_dim)); }

  void validate() const {
    if (layers < 1 || heads < 1 || dim < 1 || neighbors < 1 || time_dim < 1 || classes < 1)
      throw Error("model config: sizes must be positive");
    if (dim % heads != 0) throw Error("model config: dim must be divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("model config: dropout must lie in [0, 1)");
    if (num_nodes == 0) throw Error("model config: num_nodes must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"dim", c.dim},
          {"neighbors", c.neighbors},
          {"time_dim", c.time_dim},
          {"classes", c.classes},
          {"dropout", c.dropout},
          {"num_nodes", c.num_nodes},
          {"node_feat_dim", c.node_feat_dim},
          {"edge_feat_dim", c.edge_feat_dim},
          {"seed", c.seed},
          {"ablation",
           {{"no_decay", c.ablation.no_decay},
            {"no_diffusion", c.ablation.no_diffusion},
            {"no_state", c.ablation.no_state},
            {"no_block", c.ablation.no_block}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.dim = j.at("dim");
  c.neighbors = j.at("neighbors");
  c.time_dim = j.at("time_dim");
  c.classes = j.at("classes");
  c.dropout = j.at("dropout");
  c.num_nodes = j.at("num_nodes");
  c.node_feat_dim = j.at("node_feat_dim");
  c.edge_feat_dim = j.at("edge_feat_dim");
  c.seed = j.at("seed");
  const auto& a = j.at("ablation");
  c.ablation = {a.at("no_decay"), a.at("no_diffusion"), a.at("no_state"), a.at("no_block")};
  return c;
}

// ---------------------------------------------------------------------------
// Value-level building blocks

template <class T>
inline RowVector<T> time_encode(double dt, const RowVector<T>& w) {
  if (!(dt >= 0.0)) throw Error("time_encode: negative elapsed time");
  return w.unaryExpr([dt](T x) { return std::cos(static_cast<T>(dt) * x); });
}

/// (pad(phi_e) + pad(phi_t)) W_e with the common width W_e.rows().
template <class T>
inline RowVector<T> fuse_edge(const RowVector<T>& phi_e, const RowVector<T>& phi_t, const RowMatrix<T>& We) {
  const Eigen::Index c = We.rows();
  if (phi_e.size() > c || phi_t.size() > c) throw Error("fuse_edge: width mismatch");
  RowVector<T> s = RowVector<T>::Zero(c);
  s.head(phi_e.size()) += phi_e;
  s.head(phi_t.size()) += phi_t;
  return s * We;
}

template <class T>
inline std::pair<RowVector<T>, RowVector<T>> augment_kv(const RowVector<T>& K, const RowVector<T>& V,
                                                        const RowVector<T>& phi, const RowMatrix<T>& WK,
                                                        const RowMatrix<T>& WV) {
  if (phi.size() != WK.rows() || phi.size() != WV.rows() || K.size() != WK.cols() || V.size() != WV.cols())
    throw Error("augment_kv: shape mismatch");
  return {K + phi * WK, V + phi * WV};
}

template <class T>
inline RowMatrix<T> layer_norm_rows(const RowMatrix<T>& X, const RowVector<T>& g, const RowVector<T>& b,
                                    T eps = T(1e-5)) {
  RowMatrix<T> out(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mu = X.row(r).mean();
    const T var = (X.row(r).array() - mu).square().mean();
    out.row(r) = ((X.row(r).array() - mu) / std::sqrt(var + eps)) * g.array() + b.array();
  }
  return out;
}

template <class T>
inline RowMatrix<T> gelu_rows(const RowMatrix<T>& X) {
  return X.unaryExpr([](T x) { return ad::gelu_value(x); });
}

/// Z = X + LN1(O); X' = Z + GELU(LN2(Z) W1) W2 (no dropout).
template <class T>
inline RowMatrix<T> block_forward(const RowMatrix<T>& X, const RowMatrix<T>& O, const RowVector<T>& ln1g,
                                  const RowVector<T>& ln1b, const RowVector<T>& ln2g, const RowVector<T>& ln2b,
                                  const RowMatrix<T>& W1, const RowMatrix<T>& W2) {
  if (X.rows() != O.rows() || X.cols() != O.cols()) throw Error("block_forward: width mismatch");
  const RowMatrix<T> Z = X + layer_norm_rows(O, ln1g, ln1b);
  return Z + gelu_rows<T>(layer_norm_rows(Z, ln2g, ln2b) * W1) * W2;
}

/// Mean over H equal-width head blocks.
template <class T>
inline RowVector<T> pool_heads(const RowVector<T>& concat, int H) {
  if (H < 1 || concat.size() % H != 0) throw Error("pool_heads: width mismatch");
  const Eigen::Index dh = concat.size() / H;
  RowVector<T> out = RowVector<T>::Zero(dh);
  for (int h = 0; h < H; ++h) out += concat.segment(h * dh, dh);
  return out / T(H);
}

template <class T>
inline T predict_link(const RowVector<T>& hu, const RowVector<T>& hv, const RowMatrix<T>& W1,
                      const RowVector<T>& b1, const RowMatrix<T>& W2, T b2) {
  if (hu.size() != hv.size() || W1.rows() != hu.size() + hv.size()) throw Error("predict_link: shape mismatch");
  RowVector<T> x(hu.size() + hv.size());
  x << hu, hv;
  const RowVector<T> a = (x * W1 + b1).unaryExpr([](T v) { return ad::gelu_value(v); });
  return sigmoid(T((a * W2)(0, 0) + b2));
}

template <class T>
inline RowVector<T> classify_node(const RowVector<T>& h, const RowMatrix<T>& Wcls) {
  if (h.size() != Wcls.rows()) throw Error("classify_node: shape mismatch");
  return (h * Wcls).unaryExpr([](T v) { return sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Batch description

struct QuerySpec {
  NodeId node = 0;
  double time = 0.0;
  EventIdx bound = 0;  // only neighbor events with idx < bound are visible
};
struct LinkTarget {
  std::size_t u = 0, v = 0;  // indices into queries
  double y = 0.0;
};
struct NodeTarget {
  std::size_t q = 0;
  double y = 0.0;
};

/// One step: apply `pending` events to the persisted states (differentiably),
/// then embed `queries` against the result and score the targets.
struct BatchSpec {
  const EventStream* stream = nullptr;
  const NeighborIndex* index = nullptr;
  std::span<const Event> pending;
  std::vector<QuerySpec> queries;
  std::vector<LinkTarget> links;
  std::vector<NodeTarget> nodes;
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <class T>
struct BatchResult {
  using Var = typename Tape<T>::Var;
  Var loss;
  bool has_loss = false;
  Var embeddings;  // queries x dim
  std::vector<T> link_logits;
  std::vector<T> node_logits;
  struct Commit {
    NodeId node = 0;
    std::vector<ad::RowRef<T>> rows;  // per layer
    std::vector<double> times;        // update times in order
  };
  std::vector<Commit> commits;
};

// ---------------------------------------------------------------------------

template <class T>
class Model {
 public:
  using Mat = RowMatrix<T>;
  using Var = typename Tape<T>::Var;

  struct LayerIds {
    std::size_t wq, wk, wv, lambda, alpha, gamma, delta, ln1g, ln1b, ln2g, ln2b, w1, w2;
  };
  struct Ids {
    std::size_t in_w, in_b, time_w, edge_w;
    std::vector<LayerIds> layer;
    std::size_t link_w1, link_b1, link_w2, link_b2, cls_w;
  };

  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    init();
  }

  Model(ModelConfig cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    bind_ids();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ModelConfig& mutable_config() noexcept { return cfg_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  ParamSet<T>& params() noexcept { return params_; }
  const Ids& ids() const noexcept { return ids_; }

  StateStore<T> make_store() const {
    return StateStore<T>(cfg_.num_nodes, cfg_.layers, cfg_.heads, cfg_.head_dim());
  }

  DecayParams<T> decay_params() const {
    DecayParams<T> d(cfg_.layers, cfg_.heads);
    for (int l = 0; l < cfg_.layers; ++l)
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto& L = ids_.layer[static_cast<std::size_t>(l)];
        d.lambda_raw[d.at(l, h)] = params_.values[L.lambda](0, h);
        d.alpha_raw[d.at(l, h)] = params_.values[L.alpha](0, h);
        d.gamma_raw[d.at(l, h)] = params_.values[L.gamma](0, h);
        d.delta_raw[d.at(l, h)] = params_.values[L.delta](0, h);
      }
    return d;
  }

  /// Records one batch on the tape. With `params` given, it replaces the
  /// model's own parameters (used by finite differences).
  BatchResult<T> forward(Tape<T>& tp, GradientSet<T>* grads, const StateStore<T>& store, const BatchSpec& b,
                         const ParamSet<T>* params = nullptr) const;

  /// Writes the post-pending states of a completed forward into the store.
  void commit(const Tape<T>& tp, const BatchResult<T>& r, StateStore<T>& store) const {
    for (const auto& c : r.commits) {
      for (int l = 0; l < cfg_.layers; ++l) {
        const T* src = ad::row_ptr(tp, c.rows[static_cast<std::size_t>(l)]);
        T* dst = store.mutable_row(c.node, l);
        if (src)
          std::copy(src, src + store.row_size(), dst);
        else
          std::fill(dst, dst + store.row_size(), T(0));
      }
      for (double t : c.times) store.mark_updated(c.node, t);
    }
  }

 private:
  void init();
  void bind_ids();

  ModelConfig cfg_;
  ParamSet<T> params_;
  Ids ids_;
};

namespace detail {

template <class T>
RowMatrix<T> xavier(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  RowMatrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

inline std::string layer_name(int l, const char* what) { return "L" + std::to_string(l) + "." + what; }

}  // namespace detail

template <class T>
void Model<T>::init() {
  std::mt19937_64 rng(mix_seed(cfg_.seed, 0x6d6f64656cULL));
  const auto d = static_cast<Eigen::Index>(cfg_.dim);
  const auto H = static_cast<Eigen::Index>(cfg_.heads);
  const auto din = static_cast<Eigen::Index>(cfg_.input_dim());
  const auto c = static_cast<Eigen::Index>(cfg_.fuse_dim());
  params_ = {};
  params_.add("in.W", "input", detail::xavier<T>(rng, din, d));
  params_.add("in.b", "input", Mat::Zero(1, d));
  Mat w(1, cfg_.time_dim);
  for (int i = 0; i < cfg_.time_dim; ++i)
    w(0, i) = static_cast<T>(std::pow(10.0, -2.0 * i / static_cast<double>(cfg_.time_dim)));
  params_.add("time.w", "time_encoder", w);
  params_.add("edge.W", "edge_fuser", detail::xavier<T>(rng, c, d));
  for (int l = 0; l < cfg_.layers; ++l) {
    params_.add(detail::layer_name(l, "WQ"), "projections", detail::xavier<T>(rng, d, d));
    params_.add(detail::layer_name(l, "WK"), "projections", detail::xavier<T>(rng, d, d));
    params_.add(detail::layer_name(l, "WV"), "projections", detail::xavier<T>(rng, d, d));
    params_.add(detail::layer_name(l, "lambda_raw"), "lambda", Mat::Constant(1, H, softplus_inverse(T(1))));
    params_.add(detail::layer_name(l, "alpha_raw"), "alpha", Mat::Zero(1, H));
    params_.add(detail::layer_name(l, "gamma_raw"), "gamma", Mat::Zero(1, H));
    params_.add(detail::layer_name(l, "delta_raw"), "delta", Mat::Constant(1, H, softplus_inverse(T(1))));
    params_.add(detail::layer_name(l, "ln1.g"), "layer_norm", Mat::Ones(1, d));
    params_.add(detail::layer_name(l, "ln1.b"), "layer_norm", Mat::Zero(1, d));
    params_.add(detail::layer_name(l, "ln2.g"), "layer_norm", Mat::Ones(1, d));
    params_.add(detail::layer_name(l, "ln2.b"), "layer_norm", Mat::Zero(1, d));
    params_.add(detail::layer_name(l, "ffn.W1"), "ffn", detail::xavier<T>(rng, d, 4 * d));
    params_.add(detail::layer_name(l, "ffn.W2"), "ffn", detail::xavier<T>(rng, 4 * d, d));
  }
  params_.add("link.W1", "link_head", detail::xavier<T>(rng, 2 * d, d));
  params_.add("link.b1", "link_head", Mat::Zero(1, d));
  params_.add("link.W2", "link_head", detail::xavier<T>(rng, d, 1));
  params_.add("link.b2", "link_head", Mat::Zero(1, 1));
  params_.add("cls.W", "node_head", detail::xavier<T>(rng, d, cfg_.classes));
  bind_ids();
}

template <class T>
void Model<T>::bind_ids() {
  const auto& p = params_;
  ids_.in_w = p.find("in.W");
  ids_.in_b = p.find("in.b");
  ids_.time_w = p.find("time.w");
  ids_.edge_w = p.find("edge.W");
  ids_.layer.clear();
  for (int l = 0; l < cfg_.layers; ++l) {
    LayerIds L{};
    L.wq = p.find(detail::layer_name(l, "WQ"));
    L.wk = p.find(detail::layer_name(l, "WK"));
    L.wv = p.find(detail::layer_name(l, "WV"));
    L.lambda = p.find(detail::layer_name(l, "lambda_raw"));
    L.alpha = p.find(detail::layer_name(l, "alpha_raw"));
    L.gamma = p.find(detail::layer_name(l, "gamma_raw"));
    L.delta = p.find(detail::layer_name(l, "delta_raw"));
    L.ln1g = p.find(detail::layer_name(l, "ln1.g"));
    L.ln1b = p.find(detail::layer_name(l, "ln1.b"));
    L.ln2g = p.find(detail::layer_name(l, "ln2.g"));
    L.ln2b = p.find(detail::layer_name(l, "ln2.b"));
    L.w1 = p.find(detail::layer_name(l, "ffn.W1"));
    L.w2 = p.find(detail::layer_name(l, "ffn.W2"));
    ids_.layer.push_back(L);
  }
  ids_.link_w1 = p.find("link.W1");
  ids_.link_b1 = p.find("link.b1");
  ids_.link_w2 = p.find("link.W2");
  ids_.link_b2 = p.find("link.b2");
  ids_.cls_w = p.find("cls.W");
}

template <class T>
BatchResult<T> Model<T>::forward(Tape<T>& tp, GradientSet<T>* grads, const StateStore<T>& store,
                                 const BatchSpec& b, const ParamSet<T>* params) const {
  using ad::RowRef;
  const ParamSet<T>& ps = params ? *params : params_;
  const EventStream& stream = *b.stream;
  const NeighborIndex& index = *b.index;
  const int K = cfg_.layers, H = cfg_.heads, dh = cfg_.head_dim(), d = cfg_.dim;
  const std::size_t kappa = static_cast<std::size_t>(cfg_.neighbors);
  const Ablation& ab = cfg_.ablation;
  const bool stateful = ab.stateful();
  const bool drop = b.training && cfg_.dropout > 0.0;

  std::vector<Var> P(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i)
    P[i] = tp.parameter(ps.values[i], grads ? &grads->grads[i] : nullptr, ps.names[i].c_str());

  // ---- plan: local node table, slots and neighbor entries
  std::unordered_map<NodeId, int> local;
  std::vector<NodeId> local_nodes;
  auto local_row = [&](NodeId n) {
    auto [it, fresh] = local.try_emplace(n, static_cast<int>(local_nodes.size()));
    if (fresh) local_nodes.push_back(n);
    return it->second;
  };

  auto plan = std::make_shared<ad::InjectionPlan>();
  plan->offset.push_back(0);
  std::vector<int> entry_src;       // local row of the entry's neighbor
  std::vector<EventIdx> entry_event;
  std::vector<int> slot_target;     // local row of the slot's node
  auto add_slot = [&](NodeId n, double t, EventIdx bound) {
    slot_target.push_back(local_row(n));
    for (const NeighborRecord& r : index.window_before(n, bound, kappa)) {
      entry_src.push_back(local_row(r.neighbor));
      entry_event.push_back(r.event);
      plan->dt.push_back(t - r.time);
    }
    plan->offset.push_back(plan->dt.size());
  };

  struct Group {
    double t;
    std::size_t ev0, ev1;
    std::vector<NodeId> nodes;
    std::size_t slot0;
  };
  std::vector<Group> groups;
  if (stateful) {
    std::size_t a = 0;
    const auto& pend = b.pending;
    while (a < pend.size()) {
      std::size_t e = a + 1;
      while (e < pend.size() && pend[e].time == pend[a].time) ++e;
      Group g{pend[a].time, a, e, {}, slot_target.size()};
      for (std::size_t k = a; k < e; ++k)
        for (NodeId n : {pend[k].src, pend[k].dst})
          if (std::find(g.nodes.begin(), g.nodes.end(), n) == g.nodes.end()) g.nodes.push_back(n);
      for (NodeId n : g.nodes) {
        EventIdx bound = 0;
        for (std::size_t k = a; k < e; ++k)
          if (pend[k].touches(n)) bound = pend[k].idx + 1;
        add_slot(n, g.t, bound);
      }
      groups.push_back(std::move(g));
      a = e;
    }
  }
  const std::size_t query_slot0 = slot_target.size();
  std::vector<int> query_rows;
  for (const QuerySpec& q : b.queries) {
    add_slot(q.node, q.time, q.bound);
    query_rows.push_back(slot_target.back());
  }

  // ---- input projection for every local node
  const auto nl = static_cast<Eigen::Index>(local_nodes.size());
  Mat feats;
  if (cfg_.node_feat_dim) {
    feats.resize(nl, static_cast<Eigen::Index>(cfg_.node_feat_dim));
    const auto& nf = stream.node_feat();
    for (Eigen::Index r = 0; r < nl; ++r)
      feats.row(r) = nf.row(local_nodes[static_cast<std::size_t>(r)]).template cast<T>();
  } else {
    feats = Mat::Zero(nl, d);
  }
  const Var X1 = ad::add_row(tp, ad::matmul(tp, tp.constant(std::move(feats), "node_feat"), P[ids_.in_w]),
                             P[ids_.in_b]);

  // ---- entry inputs: neighbor projection + fused edge/time encoding
  const std::size_t E = plan->dt.size();
  Mat ef(static_cast<Eigen::Index>(E), static_cast<Eigen::Index>(cfg_.edge_feat_dim));
  for (std::size_t e = 0; e < E; ++e) {
    const auto& f = stream[entry_event[e]].edge_feat;
    for (std::size_t c = 0; c < cfg_.edge_feat_dim; ++c)
      ef(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(c)) = static_cast<T>(f[c]);
  }
  const Var phi_t = ad::time_encode(tp, plan->dt, P[ids_.time_w]);
  const Var phi = ad::matmul(
      tp, ad::pad_add(tp, tp.constant(std::move(ef), "edge_feat"), phi_t, static_cast<Eigen::Index>(cfg_.fuse_dim())),
      P[ids_.edge_w]);
  const Var U = ad::add(tp, ad::gather_rows(tp, X1, entry_src), phi);
  const Var Xq = ad::gather_rows(tp, X1, slot_target);

  ad::InjectionOptions iopt;
  iopt.temporal_decay = !ab.no_decay;
  if (ab.no_block) {
    iopt.unit_weights = true;
    iopt.normalize = false;
  }

  std::vector<Var> delta(static_cast<std::size_t>(K));
  for (int l = 0; l < K; ++l) {
    const LayerIds& L = ids_.layer[static_cast<std::size_t>(l)];
    const Var kt = ad::matmul(tp, U, P[L.wk]);
    const Var vt = ad::matmul(tp, U, P[L.wv]);
    const Var qw = ad::matmul(tp, Xq, P[L.wq]);
    delta[static_cast<std::size_t>(l)] =
        ad::injection(tp, kt, vt, qw, P[L.lambda], P[L.alpha], plan, H, dh, iopt);
  }

  // ---- apply pending events group by group
  BatchResult<T> res;
  std::unordered_map<std::uint64_t, RowRef<T>> live;
  std::unordered_map<NodeId, double> live_time;
  auto key = [K](NodeId n, int l) { return static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(K) + l; };
  auto ref = [&](NodeId n, int l) -> RowRef<T> {
    auto it = live.find(key(n, l));
    if (it != live.end()) return it->second;
    return RowRef<T>{store.row(n, l), -1, 0};
  };
  auto present = [&](NodeId n) { return live_time.count(n) > 0 || store.has(n); };
  auto last_time = [&](NodeId n) {
    auto it = live_time.find(n);
    return it != live_time.end() ? it->second : store.last_update(n);
  };

  std::unordered_map<NodeId, std::size_t> commit_of;
  for (const Group& g : groups) {
    const std::size_t gn = g.nodes.size();
    // pre-group snapshot for propagation sources
    std::vector<std::vector<RowRef<T>>> pre(gn);
    std::vector<bool> pre_present(gn);
    std::vector<double> pre_time(gn);
    for (std::size_t r = 0; r < gn; ++r) {
      for (int l = 0; l < K; ++l) pre[r].push_back(ref(g.nodes[r], l));
      pre_present[r] = present(g.nodes[r]);
      pre_time[r] = last_time(g.nodes[r]);
    }
    auto row_of = [&](NodeId n) {
      return static_cast<std::size_t>(std::find(g.nodes.begin(), g.nodes.end(), n) - g.nodes.begin());
    };
    for (int l = 0; l < K; ++l) {
      const LayerIds& L = ids_.layer[static_cast<std::size_t>(l)];
      std::vector<RowRef<T>> prev(gn);
      for (std::size_t r = 0; r < gn; ++r) prev[r] = pre[r][static_cast<std::size_t>(l)];
      Var S = ad::gate(tp, std::move(prev), delta[static_cast<std::size_t>(l)], g.slot0, P[L.gamma], H, dh);
      if (!ab.no_diffusion && l >= 1) {
        std::vector<ad::PropagationLink<T>> links;
        for (std::size_t r = 0; r < gn; ++r) {
          const NodeId j = g.nodes[r];
          for (std::size_t k = g.ev0; k < g.ev1; ++k) {
            const Event& e = b.pending[k];
            NodeId i;
            if (e.dst == j) i = e.src;
            else if (e.src == j) i = e.dst;
            else continue;
            const std::size_t ri = row_of(i);
            if (!pre_present[ri]) continue;
            links.push_back({static_cast<int>(r), pre[ri][static_cast<std::size_t>(l - 1)], g.t - pre_time[ri]});
          }
        }
        if (!links.empty()) S = ad::propagate(tp, S, std::move(links), P[L.delta], l + 1, H, dh);
      }
      for (std::size_t r = 0; r < gn; ++r) live[key(g.nodes[r], l)] = RowRef<T>{nullptr, S.id, static_cast<int>(r)};
    }
    for (NodeId n : g.nodes) {
      live_time[n] = g.t;
      auto [it, fresh] = commit_of.try_emplace(n, res.commits.size());
      if (fresh) res.commits.push_back({n, {}, {}});
      res.commits[it->second].times.push_back(g.t);
    }
  }
  for (auto& c : res.commits)
    for (int l = 0; l < K; ++l) c.rows.push_back(ref(c.node, l));

  if (b.queries.empty()) return res;

  // ---- embed queries
  const T scale = T(1) / std::sqrt(T(d));
  Var X = ad::gather_rows(tp, X1, query_rows);
  for (int l = 0; l < K; ++l) {
    const LayerIds& L = ids_.layer[static_cast<std::size_t>(l)];
    Var S;
    if (stateful) {
      std::vector<RowRef<T>> prev;
      for (const QuerySpec& q : b.queries) prev.push_back(ref(q.node, l));
      S = ad::gate(tp, std::move(prev), delta[static_cast<std::size_t>(l)], query_slot0, P[L.gamma], H, dh);
    } else {
      S = delta[static_cast<std::size_t>(l)];
    }
    const Var q = ad::matmul(tp, X, P[L.wq]);
    Var O = ad::readout(tp, q, S, H, dh, scale);
    O = ad::layer_norm(tp, O, P[L.ln1g], P[L.ln1b]);
    if (drop) O = ad::dropout(tp, O, cfg_.dropout, mix_seed(b.dropout_seed, static_cast<std::uint64_t>(l), 1));
    const Var Z = ad::add(tp, X, O);
    Var Hh = ad::gelu(tp, ad::matmul(tp, ad::layer_norm(tp, Z, P[L.ln2g], P[L.ln2b]), P[L.w1]));
    if (drop) Hh = ad::dropout(tp, Hh, cfg_.dropout, mix_seed(b.dropout_seed, static_cast<std::uint64_t>(l), 2));
    X = ad::add(tp, Z, ad::matmul(tp, Hh, P[L.w2]));
  }
  res.embeddings = X;

  std::vector<Var> losses;
  if (!b.links.empty()) {
    std::vector<int> iu, iv;
    std::vector<T> y;
    for (const LinkTarget& t : b.links) {
      iu.push_back(static_cast<int>(t.u));
      iv.push_back(static_cast<int>(t.v));
      y.push_back(static_cast<T>(t.y));
    }
    const Var cat = ad::concat_cols(tp, ad::gather_rows(tp, X, iu), ad::gather_rows(tp, X, iv));
    const Var hid = ad::gelu(tp, ad::add_row(tp, ad::matmul(tp, cat, P[ids_.link_w1]), P[ids_.link_b1]));
    const Var z = ad::add_row(tp, ad::matmul(tp, hid, P[ids_.link_w2]), P[ids_.link_b2]);
    const Mat& zv = tp.value(z);
    res.link_logits.assign(zv.data(), zv.data() + zv.size());
    losses.push_back(ad::bce_logits_mean(tp, z, std::move(y)));
  }
  if (!b.nodes.empty()) {
    std::vector<int> iq;
    std::vector<T> y;
    for (const NodeTarget& t : b.nodes) {
      iq.push_back(static_cast<int>(t.q));
      y.push_back(static_cast<T>(t.y));
    }
    const Var z = ad::matmul(tp, ad::gather_rows(tp, X, iq), P[ids_.cls_w]);
    const Mat& zv = tp.value(z);
    res.node_logits.assign(zv.data(), zv.data() + zv.size());
    if (cfg_.classes == 1) losses.push_back(ad::bce_logits_mean(tp, z, std::move(y)));
  }
  if (!losses.empty()) {
    Var total = losses[0];
    for (std::size_t k = 1; k < losses.size(); ++k) total = ad::add(tp, total, losses[k]);
    res.loss = total;
    res.has_loss = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DSRDCKPT", u32 version, u64 json length, json (config + meta),
// u64 tensor count, then per tensor: u64 name length, name, u64 rows, u64 cols, f64 data.

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'R', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class I>
void put(std::ostream& o, I v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
template <class I>
I get(std::istream& in) {
  I v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}
}  // namespace detail

template <class T>
void write_checkpoint(std::ostream& out, const Model<T>& m, const nlohmann::json& meta = nlohmann::json::object()) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string js = nlohmann::json{{"config", to_json(m.config())}, {"meta", meta}}.dump();
  detail::put<std::uint64_t>(out, js.size());
  out.write(js.data(), static_cast<std::streamsize>(js.size()));
  const auto& p = m.params();
  detail::put<std::uint64_t>(out, p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    detail::put<std::uint64_t>(out, p.names[i].size());
    out.write(p.names[i].data(), static_cast<std::streamsize>(p.names[i].size()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(p.values[i].rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(p.values[i].cols()));
    for (Eigen::Index k = 0; k < p.values[i].size(); ++k)
      detail::put<double>(out, static_cast<double>(p.values[i].data()[k]));
  }
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& m, const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_checkpoint(out, m, meta);
}

template <class T>
Model<T> read_checkpoint(std::istream& in, nlohmann::json* meta = nullptr) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw Error("checkpoint: bad magic");
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
  std::string js(detail::get<std::uint64_t>(in), '\0');
  in.read(js.data(), static_cast<std::streamsize>(js.size()));
  const auto doc = nlohmann::json::parse(js);
  ModelConfig cfg = model_config_from_json(doc.at("config"));
  if (meta) *meta = doc.value("meta", nlohmann::json::object());
  // Names and groups come from a fresh model so the layout is authoritative.
  Model<T> fresh(cfg);
  ParamSet<T> p = fresh.params();
  const auto n = detail::get<std::uint64_t>(in);
  if (n != p.size()) throw Error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    std::string name(detail::get<std::uint64_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const std::size_t idx = p.find(name);
    const auto rows = detail::get<std::uint64_t>(in), cols = detail::get<std::uint64_t>(in);
    if (static_cast<Eigen::Index>(rows) != p.values[idx].rows() || static_cast<Eigen::Index>(cols) != p.values[idx].cols())
      throw Error("checkpoint: shape mismatch for " + name);
    for (Eigen::Index k = 0; k < p.values[idx].size(); ++k) p.values[idx].data()[k] = static_cast<T>(detail::get<double>(in));
  }
  return Model<T>(cfg, std::move(p));
}

template <class T>
Model<T> load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_checkpoint<T>(in, meta);
}

}  // namespace dsrd
