#pragma once

// Reverse-mode tape over dense row-major matrices, the primitive set the
// model needs (including fused retentive ops), named parameter sets and a
// central-difference gradient verifier.

#include <atomic>
#include <memory>
#include <mutex>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "dsrd/common.hpp"
#include "dsrd/retentive_core.hpp"

namespace dsrd {

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<std::string> groups;
  std::vector<RowMatrix<T>> values;

  std::size_t add(std::string name, std::string group, RowMatrix<T> v) {
    names.push_back(std::move(name));
    groups.push_back(std::move(group));
    values.push_back(std::move(v));
    return values.size() - 1;
  }
  std::size_t size() const noexcept { return values.size(); }
  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw Error("unknown parameter " + name);
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }
  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.names = names;
    out.groups = groups;
    for (const auto& v : values) out.values.push_back(v.template cast<U>());
    return out;
  }
};

template <class T>
struct GradientSet {
  std::vector<RowMatrix<T>> grads;

  GradientSet() = default;
  explicit GradientSet(const ParamSet<T>& p) {
    for (const auto& v : p.values) grads.push_back(RowMatrix<T>::Zero(v.rows(), v.cols()));
  }
  void zero() {
    for (auto& g : grads) g.setZero();
  }
  bool all_finite() const {
    for (const auto& g : grads)
      if (!g.allFinite()) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Tape

template <class T>
class Tape {
 public:
  using Mat = RowMatrix<T>;
  struct Var {
    int id = -1;
    bool valid() const noexcept { return id >= 0; }
  };
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  explicit Tape(bool needs_grad = true) : needs_grad_(needs_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool needs_grad() const noexcept { return needs_grad_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  /// Bytes held by owned activations (views excluded).
  std::size_t memory_bytes() const noexcept {
    std::size_t b = 0;
    for (const auto& n : nodes_) b += static_cast<std::size_t>(n.value.size()) * sizeof(T);
    return b;
  }

  Var constant(Mat v, const char* name = "constant") {
    Node n;
    n.value = std::move(v);
    n.name = name;
    return push(std::move(n));
  }

  /// View of caller-owned data; must outlive the tape.
  Var view(const Mat& v, const char* name = "view") {
    Node n;
    n.ext = &v;
    n.name = name;
    return push(std::move(n));
  }

  Var parameter(const Mat& v, Mat* grad, const char* name = "param") {
    Node n;
    n.ext = &v;
    n.param_grad = needs_grad_ ? grad : nullptr;
    n.requires_grad = needs_grad_ && grad != nullptr;
    n.name = name;
    return push(std::move(n));
  }

  /// Records an op output. `bw` receives the output adjoint and must
  /// accumulate into its inputs' adjoints via `grad()`.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward bw, const char* name) {
    bool rg = false;
    if (needs_grad_)
      for (Var v : inputs) rg = rg || (v.valid() && nodes_[static_cast<std::size_t>(v.id)].requires_grad);
    return record_rg(std::move(value), rg, std::move(bw), name);
  }

  Var record_rg(Mat value, bool rg, Backward bw, const char* name) {
    if (check_finite_ && !value.allFinite())
      throw Error(std::string("non-finite activation produced by ") + name);
    Node n;
    n.value = std::move(value);
    n.name = name;
    n.requires_grad = rg && needs_grad_;
    if (n.requires_grad) n.backward = std::move(bw);
    return push(std::move(n));
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.ext ? *n.ext : n.value;
  }
  T scalar(Var v) const { return value(v)(0, 0); }

  bool requires_grad(Var v) const { return v.valid() && nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

  /// Adjoint slot (zero-initialized on first access).
  Mat& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.param_grad) return *n.param_grad;
    if (n.grad.size() == 0) {
      const Mat& val = n.ext ? *n.ext : n.value;
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  void backward(Var loss, T seed = T(1)) {
    if (consumed_) throw Error("tape already consumed");
    consumed_ = true;
    if (!requires_grad(loss)) return;
    grad(loss).array() += seed;
    for (std::size_t k = nodes_.size(); k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
      n.grad = Mat();
    }
  }

  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    Mat value;
    const Mat* ext = nullptr;
    Mat grad;
    Mat* param_grad = nullptr;
    bool requires_grad = false;
    Backward backward;
    const char* name = "";
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
  bool needs_grad_ = true;
  bool consumed_ = false;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Primitive ops

namespace ad {

template <class T>
using V = typename Tape<T>::Var;
template <class T>
using M = RowMatrix<T>;

/// Row r of A B computed from row r of A alone, so a row's bits do not depend
/// on how many other rows share the product.
template <class T>
M<T> rowwise_product(const M<T>& A, const M<T>& B) {
  M<T> out(A.rows(), B.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r) out.row(r).noalias() = A.row(r) * B;
  return out;
}

template <class T>
V<T> matmul(Tape<T>& tp, V<T> a, V<T> b) {
  const M<T>& A = tp.value(a);
  const M<T>& B = tp.value(b);
  if (A.cols() != B.rows()) throw Error("matmul: shape mismatch");
  M<T> out = rowwise_product(A, B);
  return tp.record(std::move(out), {a, b},
                   [a, b](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
                     if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
                   },
                   "matmul");
}

template <class T>
V<T> add(Tape<T>& tp, V<T> a, V<T> b) {
  const M<T>& A = tp.value(a);
  const M<T>& B = tp.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw Error("add: shape mismatch");
  return tp.record(A + B, {a, b},
                   [a, b](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a) += g;
                     if (t.requires_grad(b)) t.grad(b) += g;
                   },
                   "add");
}

/// a + broadcast(row)
template <class T>
V<T> add_row(Tape<T>& tp, V<T> a, V<T> row) {
  const M<T>& A = tp.value(a);
  const M<T>& R = tp.value(row);
  if (R.rows() != 1 || R.cols() != A.cols()) throw Error("add_row: shape mismatch");
  M<T> out = A;
  out.rowwise() += R.row(0);
  return tp.record(std::move(out), {a, row},
                   [a, row](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a) += g;
                     if (t.requires_grad(row)) t.grad(row) += g.colwise().sum();
                   },
                   "add_row");
}

template <class T>
V<T> mul(Tape<T>& tp, V<T> a, V<T> b) {
  const M<T>& A = tp.value(a);
  const M<T>& B = tp.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw Error("mul: shape mismatch");
  return tp.record(A.cwiseProduct(B), {a, b},
                   [a, b](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a) += g.cwiseProduct(t.value(b));
                     if (t.requires_grad(b)) t.grad(b) += g.cwiseProduct(t.value(a));
                   },
                   "mul");
}

template <class T>
V<T> scale(Tape<T>& tp, V<T> a, T s) {
  return tp.record(tp.value(a) * s, {a},
                   [a, s](Tape<T>& t, const M<T>& g) { t.grad(a) += g * s; }, "scale");
}

template <class T>
V<T> sigmoid(Tape<T>& tp, V<T> a) {
  M<T> out = tp.value(a).unaryExpr([](T x) { return dsrd::sigmoid(x); });
  M<T> saved = out;
  return tp.record(std::move(out), {a},
                   [a, saved = std::move(saved)](Tape<T>& t, const M<T>& g) {
                     t.grad(a).array() += g.array() * saved.array() * (T(1) - saved.array());
                   },
                   "sigmoid");
}

template <class T>
inline T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}
template <class T>
inline T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846264338327950288L));
  return cdf + x * pdf;
}

template <class T>
V<T> gelu(Tape<T>& tp, V<T> a) {
  M<T> out = tp.value(a).unaryExpr([](T x) { return gelu_value(x); });
  return tp.record(std::move(out), {a},
                   [a](Tape<T>& t, const M<T>& g) {
                     t.grad(a).array() +=
                         g.array() * t.value(a).unaryExpr([](T x) { return gelu_derivative(x); }).array();
                   },
                   "gelu");
}

template <class T>
V<T> gather_rows(Tape<T>& tp, V<T> a, std::vector<int> idx) {
  const M<T>& A = tp.value(a);
  M<T> out(static_cast<Eigen::Index>(idx.size()), A.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = A.row(idx[r]);
  return tp.record(std::move(out), {a},
                   [a, idx = std::move(idx)](Tape<T>& t, const M<T>& g) {
                     M<T>& ga = t.grad(a);
                     for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
                   },
                   "gather_rows");
}

template <class T>
V<T> concat_cols(Tape<T>& tp, V<T> a, V<T> b) {
  const M<T>& A = tp.value(a);
  const M<T>& B = tp.value(b);
  if (A.rows() != B.rows()) throw Error("concat_cols: shape mismatch");
  M<T> out(A.rows(), A.cols() + B.cols());
  out << A, B;
  const Eigen::Index ca = A.cols(), cb = B.cols();
  return tp.record(std::move(out), {a, b},
                   [a, b, ca, cb](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a) += g.leftCols(ca);
                     if (t.requires_grad(b)) t.grad(b) += g.rightCols(cb);
                   },
                   "concat_cols");
}

/// Zero-pads a and b to `width` columns and adds them.
template <class T>
V<T> pad_add(Tape<T>& tp, V<T> a, V<T> b, Eigen::Index width) {
  const M<T>& A = tp.value(a);
  const M<T>& B = tp.value(b);
  if (A.rows() != B.rows() || A.cols() > width || B.cols() > width) throw Error("pad_add: shape mismatch");
  M<T> out = M<T>::Zero(A.rows(), width);
  out.leftCols(A.cols()) += A;
  out.leftCols(B.cols()) += B;
  const Eigen::Index ca = A.cols(), cb = B.cols();
  return tp.record(std::move(out), {a, b},
                   [a, b, ca, cb](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(a)) t.grad(a) += g.leftCols(ca);
                     if (t.requires_grad(b)) t.grad(b) += g.leftCols(cb);
                   },
                   "pad_add");
}

/// cos(dt_i * w_j); dt is constant data.
template <class T>
V<T> time_encode(Tape<T>& tp, std::vector<double> dt, V<T> w) {
  const M<T>& W = tp.value(w);
  if (W.rows() != 1) throw Error("time_encode: frequency row expected");
  M<T> out(static_cast<Eigen::Index>(dt.size()), W.cols());
  for (std::size_t i = 0; i < dt.size(); ++i)
    for (Eigen::Index j = 0; j < W.cols(); ++j)
      out(static_cast<Eigen::Index>(i), j) = std::cos(static_cast<T>(dt[i]) * W(0, j));
  return tp.record(std::move(out), {w},
                   [w, dt = std::move(dt)](Tape<T>& t, const M<T>& g) {
                     const M<T>& W = t.value(w);
                     M<T>& gw = t.grad(w);
                     for (std::size_t i = 0; i < dt.size(); ++i) {
                       const T d = static_cast<T>(dt[i]);
                       for (Eigen::Index j = 0; j < W.cols(); ++j)
                         gw(0, j) -= g(static_cast<Eigen::Index>(i), j) * std::sin(d * W(0, j)) * d;
                     }
                   },
                   "time_encode");
}

/// Row-wise layer norm with gain and bias rows.
template <class T>
V<T> layer_norm(Tape<T>& tp, V<T> x, V<T> gain, V<T> bias, T eps = T(1e-5)) {
  const M<T>& X = tp.value(x);
  const M<T>& G = tp.value(gain);
  const M<T>& B = tp.value(bias);
  const Eigen::Index n = X.cols();
  if (G.cols() != n || B.cols() != n) throw Error("layer_norm: shape mismatch");
  M<T> xhat(X.rows(), n);
  std::vector<T> inv(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mu = X.row(r).mean();
    const T var = (X.row(r).array() - mu).square().mean();
    inv[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv[static_cast<std::size_t>(r)];
  }
  M<T> out = xhat;
  out.array().rowwise() *= G.row(0).array();
  out.rowwise() += B.row(0);
  return tp.record(std::move(out), {x, gain, bias},
                   [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv), n](Tape<T>& t, const M<T>& g) {
                     if (t.requires_grad(gain)) t.grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                     if (t.requires_grad(bias)) t.grad(bias) += g.colwise().sum();
                     if (!t.requires_grad(x)) return;
                     const M<T>& G = t.value(gain);
                     M<T>& gx = t.grad(x);
                     for (Eigen::Index r = 0; r < g.rows(); ++r) {
                       const auto gh = (g.row(r).array() * G.row(0).array()).eval();
                       const T m1 = gh.mean();
                       const T m2 = (gh * xhat.row(r).array()).mean();
                       gx.row(r).array() +=
                           inv[static_cast<std::size_t>(r)] * (gh - m1 - xhat.row(r).array() * m2);
                     }
                     (void)n;
                   },
                   "layer_norm");
}

/// Inverted dropout with a caller-seeded mask; identity when rate is 0.
template <class T>
V<T> dropout(Tape<T>& tp, V<T> a, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return a;
  const M<T>& A = tp.value(a);
  M<T> mask(A.rows(), A.cols());
  std::uint64_t s = seed;
  const T keep_scale = T(1) / T(1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    s = splitmix64(s);
    const double u = static_cast<double>(s >> 11) * 0x1.0p-53;
    mask.data()[i] = u < rate ? T(0) : keep_scale;
  }
  M<T> out = A.cwiseProduct(mask);
  return tp.record(std::move(out), {a},
                   [a, mask = std::move(mask)](Tape<T>& t, const M<T>& g) { t.grad(a) += g.cwiseProduct(mask); },
                   "dropout");
}

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy of sigmoid(z) against targets, with p clamped
/// to [1e-7, 1 - 1e-7]. z is N x 1.
template <class T>
V<T> bce_logits_mean(Tape<T>& tp, V<T> z, std::vector<T> y) {
  const M<T>& Z = tp.value(z);
  if (Z.cols() != 1 || static_cast<std::size_t>(Z.rows()) != y.size() || y.empty())
    throw Error("bce: shape mismatch");
  const T lo = T(kProbClamp), hi = T(1) - T(kProbClamp);
  T loss = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T p = std::clamp(dsrd::sigmoid(Z(static_cast<Eigen::Index>(i), 0)), lo, hi);
    loss -= y[i] * std::log(p) + (T(1) - y[i]) * std::log(T(1) - p);
  }
  M<T> out(1, 1);
  out(0, 0) = loss / T(y.size());
  return tp.record(std::move(out), {z},
                   [z, y = std::move(y), lo, hi](Tape<T>& t, const M<T>& g) {
                     const M<T>& Z = t.value(z);
                     M<T>& gz = t.grad(z);
                     const T s = g(0, 0) / T(y.size());
                     for (std::size_t i = 0; i < y.size(); ++i) {
                       const T p = dsrd::sigmoid(Z(static_cast<Eigen::Index>(i), 0));
                       if (p < lo || p > hi) continue;  // clamped: flat
                       gz(static_cast<Eigen::Index>(i), 0) += s * (p - y[i]);
                     }
                   },
                   "bce");
}

// ---------------------------------------------------------------------------
// Fused retentive ops. State rows hold H blocks of dh x dh, row-major.

/// Reference to one state row: tape variable row, external constant data, or zero.
template <class T>
struct RowRef {
  const T* ext = nullptr;
  int var = -1;
  int row = 0;
  bool is_zero() const noexcept { return ext == nullptr && var < 0; }
};

template <class T>
inline const T* row_ptr(const Tape<T>& tp, const RowRef<T>& r) {
  if (r.ext) return r.ext;
  if (r.var >= 0) return tp.value(typename Tape<T>::Var{r.var}).row(r.row).data();
  return nullptr;
}

struct InjectionPlan {
  // Entries sorted by slot; entries of slot s are [offset[s], offset[s+1]).
  std::vector<std::size_t> offset;
  std::vector<double> dt;
  std::size_t slots() const noexcept { return offset.empty() ? 0 : offset.size() - 1; }
};

struct InjectionOptions {
  bool temporal_decay = true;
  bool unit_weights = false;
  bool normalize = true;
};

/// Per slot and head: sum_e w~_e k_e^T v_e with w = sigma(cos(q, k)) * exp(-lambda log(1+dt)^alpha),
/// w~ = w / max(sum |w|, 1). Kt, Vt: entries x (H dh); Qw: slots x (H dh);
/// lambda_raw, alpha_raw: 1 x H. Output: slots x (H dh dh).
template <class T>
V<T> injection(Tape<T>& tp, V<T> kt, V<T> vt, V<T> qw, V<T> lambda_raw, V<T> alpha_raw,
               std::shared_ptr<const InjectionPlan> plan, int H, int dh, InjectionOptions opt) {
  const M<T>& K = tp.value(kt);
  const M<T>& Vv = tp.value(vt);
  const M<T>& Q = tp.value(qw);
  const std::size_t S = plan->slots();
  const std::size_t E = plan->dt.size();
  if (static_cast<std::size_t>(K.rows()) != E || static_cast<std::size_t>(Vv.rows()) != E ||
      static_cast<std::size_t>(Q.rows()) != S || K.cols() != H * dh || Vv.cols() != H * dh || Q.cols() != H * dh)
    throw Error("injection: shape mismatch");
  const std::size_t hs = static_cast<std::size_t>(dh) * dh;
  M<T> out = M<T>::Zero(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(H * hs));

  // Saved per (entry, head): cosine, norms, sigma(cos), temporal factor, raw weight; per (slot, head): z.
  struct Saved {
    std::vector<T> cosv, nq, nk, sig, fac, w;
    std::vector<T> z;
  };
  auto sv = std::make_shared<Saved>();
  const std::size_t EH = E * static_cast<std::size_t>(H);
  sv->cosv.resize(EH);
  sv->nq.resize(EH);
  sv->nk.resize(EH);
  sv->sig.resize(EH);
  sv->fac.resize(EH);
  sv->w.resize(EH);
  sv->z.resize(S * static_cast<std::size_t>(H));

  const M<T>& LR = tp.value(lambda_raw);
  const M<T>& AR = tp.value(alpha_raw);
  std::vector<T> lam(static_cast<std::size_t>(H)), alp(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) {
    lam[static_cast<std::size_t>(h)] = softplus(LR(0, h));
    alp[static_cast<std::size_t>(h)] = dsrd::sigmoid(AR(0, h));
  }

  for (std::size_t s = 0; s < S; ++s) {
    for (int h = 0; h < H; ++h) {
      const T* q = Q.row(static_cast<Eigen::Index>(s)).data() + h * dh;
      T sum = 0;
      for (std::size_t e = plan->offset[s]; e < plan->offset[s + 1]; ++e) {
        const std::size_t k = e * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
        if (opt.unit_weights) {
          sv->w[k] = T(1);
        } else {
          const T* kk = K.row(static_cast<Eigen::Index>(e)).data() + h * dh;
          sv->cosv[k] = kern::cosine(q, kk, dh, sv->nq[k], sv->nk[k]);
          sv->sig[k] = dsrd::sigmoid(sv->cosv[k]);
          sv->fac[k] = opt.temporal_decay
                           ? kern::temporal_factor(lam[static_cast<std::size_t>(h)], alp[static_cast<std::size_t>(h)],
                                                   plan->dt[e])
                           : T(1);
          sv->w[k] = sv->sig[k] * sv->fac[k];
        }
        sum += std::abs(sv->w[k]);
      }
      const T z = opt.normalize ? kern::normalizer(sum) : T(1);
      sv->z[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = z;
      T* dst = out.row(static_cast<Eigen::Index>(s)).data() + static_cast<std::size_t>(h) * hs;
      for (std::size_t e = plan->offset[s]; e < plan->offset[s + 1]; ++e) {
        const std::size_t k = e * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
        kern::accumulate_outer(dst, K.row(static_cast<Eigen::Index>(e)).data() + h * dh,
                               Vv.row(static_cast<Eigen::Index>(e)).data() + h * dh, dh, sv->w[k] / z);
      }
    }
  }

  const bool rg = tp.requires_grad(kt) || tp.requires_grad(vt) || tp.requires_grad(qw) ||
                  tp.requires_grad(lambda_raw) || tp.requires_grad(alpha_raw);
  return tp.record_rg(
      std::move(out), rg,
      [=](Tape<T>& t, const M<T>& g) {
        const M<T>& K = t.value(kt);
        const M<T>& Vv = t.value(vt);
        const M<T>& Q = t.value(qw);
        const M<T>& LR = t.value(lambda_raw);
        const M<T>& AR = t.value(alpha_raw);
        const bool gk = t.requires_grad(kt), gv = t.requires_grad(vt), gq = t.requires_grad(qw);
        const bool gl = t.requires_grad(lambda_raw), ga = t.requires_grad(alpha_raw);
        M<T>* GK = gk ? &t.grad(kt) : nullptr;
        M<T>* GV = gv ? &t.grad(vt) : nullptr;
        M<T>* GQ = gq ? &t.grad(qw) : nullptr;
        M<T>* GL = gl ? &t.grad(lambda_raw) : nullptr;
        M<T>* GA = ga ? &t.grad(alpha_raw) : nullptr;
        std::vector<T> dw;  // adjoint of normalized weights for the current slot/head
        std::vector<T> tmp(static_cast<std::size_t>(dh));
        for (std::size_t s = 0; s < plan->slots(); ++s) {
          for (int h = 0; h < H; ++h) {
            const T* G = g.row(static_cast<Eigen::Index>(s)).data() + static_cast<std::size_t>(h) * hs;
            const std::size_t e0 = plan->offset[s], e1 = plan->offset[s + 1];
            const T z = sv->z[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
            dw.assign(e1 - e0, T(0));
            T dot_wz = 0;
            for (std::size_t e = e0; e < e1; ++e) {
              const std::size_t k = e * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
              const T* kv = K.row(static_cast<Eigen::Index>(e)).data() + h * dh;
              const T* vv = Vv.row(static_cast<Eigen::Index>(e)).data() + h * dh;
              const T wn = sv->w[k] / z;
              // tmp = G v^T ; d(w~) = k . tmp
              for (int a = 0; a < dh; ++a) tmp[static_cast<std::size_t>(a)] = kern::dot(G + a * dh, vv, dh);
              const T dwn = kern::dot(kv, tmp.data(), dh);
              dw[e - e0] = dwn;
              dot_wz += dwn * sv->w[k];
              if (gk) {
                T* dk = GK->row(static_cast<Eigen::Index>(e)).data() + h * dh;
                for (int a = 0; a < dh; ++a) dk[a] += wn * tmp[static_cast<std::size_t>(a)];
              }
              if (gv) {
                T* dv = GV->row(static_cast<Eigen::Index>(e)).data() + h * dh;
                for (int a = 0; a < dh; ++a) {
                  const T c = wn * kv[a];
                  const T* Ga = G + a * dh;
                  for (int b = 0; b < dh; ++b) dv[b] += c * Ga[b];
                }
              }
            }
            if (opt.unit_weights) continue;
            const bool clipped = opt.normalize && z > T(1);
            const T lam = softplus(LR(0, h));
            const T alp = dsrd::sigmoid(AR(0, h));
            const T* q = Q.row(static_cast<Eigen::Index>(s)).data() + h * dh;
            for (std::size_t e = e0; e < e1; ++e) {
              const std::size_t k = e * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
              // w~ = w / z with z = sum |w| when above 1 (w > 0 here).
              const T dwr = clipped ? dw[e - e0] / z - dot_wz / (z * z) : dw[e - e0];
              const T f = sv->fac[k];
              const T sg = sv->sig[k];
              if (opt.temporal_decay && (gl || ga)) {
                const T L = static_cast<T>(std::log1p(plan->dt[e]));
                if (L > T(0)) {
                  const T La = std::pow(L, alp);
                  const T df = dwr * sg;
                  if (gl) (*GL)(0, h) += df * f * (-La) * dsrd::sigmoid(LR(0, h));
                  if (ga) (*GA)(0, h) += df * f * (-lam * La * std::log(L)) * alp * (T(1) - alp);
                }
              }
              if (!(gq || gk)) continue;
              const T nq = sv->nq[k], nk = sv->nk[k];
              if (nq == T(0) || nk == T(0)) continue;
              const T dc = dwr * f * sg * (T(1) - sg);
              const T c = sv->cosv[k];
              const T* kv = K.row(static_cast<Eigen::Index>(e)).data() + h * dh;
              const T inv = T(1) / (nq * nk);
              if (gq) {
                T* dq = GQ->row(static_cast<Eigen::Index>(s)).data() + h * dh;
                for (int a = 0; a < dh; ++a) dq[a] += dc * (kv[a] * inv - c * q[a] / (nq * nq));
              }
              if (gk) {
                T* dk = GK->row(static_cast<Eigen::Index>(e)).data() + h * dh;
                for (int a = 0; a < dh; ++a) dk[a] += dc * (q[a] * inv - c * kv[a] / (nk * nk));
              }
            }
          }
        }
      },
      "injection");
}

/// S_s = gamma S_prev(s) + (1 - gamma) D_s per head; gamma = sigmoid(gamma_raw).
/// Rows of `delta` used are [row0, row0 + prev.size()).
template <class T>
V<T> gate(Tape<T>& tp, std::vector<RowRef<T>> prev, V<T> delta, std::size_t row0, V<T> gamma_raw, int H, int dh) {
  const M<T>& D = tp.value(delta);
  const M<T>& GR = tp.value(gamma_raw);
  const std::size_t hs = static_cast<std::size_t>(dh) * dh;
  if (static_cast<std::size_t>(D.rows()) < row0 + prev.size() || D.cols() != static_cast<Eigen::Index>(H * hs))
    throw Error("gate: shape mismatch");
  M<T> out(static_cast<Eigen::Index>(prev.size()), D.cols());
  bool rg = tp.requires_grad(delta) || tp.requires_grad(gamma_raw);
  for (std::size_t s = 0; s < prev.size(); ++s) {
    const T* P = row_ptr(tp, prev[s]);
    rg = rg || (prev[s].var >= 0 && tp.requires_grad(typename Tape<T>::Var{prev[s].var}));
    for (int h = 0; h < H; ++h) {
      const T gm = dsrd::sigmoid(GR(0, h));
      const std::size_t o = static_cast<std::size_t>(h) * hs;
      T* dst = out.row(static_cast<Eigen::Index>(s)).data() + o;
      const T* d = D.row(static_cast<Eigen::Index>(row0 + s)).data() + o;
      for (std::size_t i = 0; i < hs; ++i) dst[i] = (P ? gm * P[o + i] : T(0)) + (T(1) - gm) * d[i];
    }
  }
  return tp.record_rg(
      std::move(out), rg,
      [=, prev = std::move(prev)](Tape<T>& t, const M<T>& g) {
        const M<T>& D = t.value(delta);
        const M<T>& GR = t.value(gamma_raw);
        const bool gd = t.requires_grad(delta), gg = t.requires_grad(gamma_raw);
        for (std::size_t s = 0; s < prev.size(); ++s) {
          const T* P = row_ptr(t, prev[s]);
          T* dP = nullptr;
          if (prev[s].var >= 0) {
            typename Tape<T>::Var pv{prev[s].var};
            if (t.requires_grad(pv)) dP = t.grad(pv).row(prev[s].row).data();
          }
          for (int h = 0; h < H; ++h) {
            const T gm = dsrd::sigmoid(GR(0, h));
            const std::size_t o = static_cast<std::size_t>(h) * hs;
            const T* G = g.row(static_cast<Eigen::Index>(s)).data() + o;
            const T* d = D.row(static_cast<Eigen::Index>(row0 + s)).data() + o;
            T dg = 0;
            for (std::size_t i = 0; i < hs; ++i) dg += G[i] * ((P ? P[o + i] : T(0)) - d[i]);
            if (gg) t.grad(gamma_raw)(0, h) += dg * gm * (T(1) - gm);
            if (gd) {
              T* gdst = t.grad(delta).row(static_cast<Eigen::Index>(row0 + s)).data() + o;
              for (std::size_t i = 0; i < hs; ++i) gdst[i] += (T(1) - gm) * G[i];
            }
            if (dP)
              for (std::size_t i = 0; i < hs; ++i) dP[o + i] += gm * G[i];
          }
        }
      },
      "gate");
}

template <class T>
struct PropagationLink {
  int target = 0;  // row of the input state
  RowRef<T> source;  // pre-timestamp lower-depth state
  double age = 0.0;
};

/// S_t += sum_k psi~_k S_src(k) per head, psi = exp(-l delta log(1+age)),
/// psi~ = psi / max(sum psi, 1) over the links of one target. Links sorted by target.
template <class T>
V<T> propagate(Tape<T>& tp, V<T> states, std::vector<PropagationLink<T>> links, V<T> delta_raw, int l, int H,
               int dh, bool attenuate = true, bool normalize = true) {
  if (l < 2) throw Error("propagate: depth must be >= 2");
  const M<T>& S = tp.value(states);
  const M<T>& DR = tp.value(delta_raw);
  const std::size_t hs = static_cast<std::size_t>(dh) * dh;
  M<T> out = S;
  auto psi = std::make_shared<std::vector<T>>(links.size() * static_cast<std::size_t>(H));
  auto zs = std::make_shared<std::vector<T>>(links.size() * static_cast<std::size_t>(H));
  bool rg = tp.requires_grad(states) || tp.requires_grad(delta_raw);
  std::size_t a = 0;
  while (a < links.size()) {
    std::size_t b = a;
    while (b < links.size() && links[b].target == links[a].target) ++b;
    for (int h = 0; h < H; ++h) {
      const T dl = softplus(DR(0, h));
      T sum = 0;
      for (std::size_t k = a; k < b; ++k) {
        const T p = attenuate ? kern::attenuation(l, dl, links[k].age) : T(1);
        (*psi)[k * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = p;
        sum += p;
      }
      const T z = normalize ? kern::normalizer(sum) : T(1);
      T* dst = out.row(links[a].target).data() + static_cast<std::size_t>(h) * hs;
      for (std::size_t k = a; k < b; ++k) {
        (*zs)[k * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = z;
        const T* src = row_ptr(tp, links[k].source);
        if (!src) continue;
        const T w = (*psi)[k * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] / z;
        src += static_cast<std::size_t>(h) * hs;
        for (std::size_t i = 0; i < hs; ++i) dst[i] += w * src[i];
      }
    }
    for (std::size_t k = a; k < b; ++k)
      rg = rg || (links[k].source.var >= 0 && tp.requires_grad(typename Tape<T>::Var{links[k].source.var}));
    a = b;
  }
  return tp.record_rg(
      std::move(out), rg,
      [=, links = std::move(links)](Tape<T>& t, const M<T>& g) {
        if (t.requires_grad(states)) t.grad(states) += g;
        const bool gdl = t.requires_grad(delta_raw) && attenuate;
        const M<T>& DR = t.value(delta_raw);
        std::size_t a = 0;
        while (a < links.size()) {
          std::size_t b = a;
          while (b < links.size() && links[b].target == links[a].target) ++b;
          for (int h = 0; h < H; ++h) {
            const std::size_t o = static_cast<std::size_t>(h) * hs;
            const T* G = g.row(links[a].target).data() + o;
            const T z = (*zs)[a * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
            // adjoints of the normalized weights
            std::vector<T> dpn(b - a, T(0));
            T dot_pz = 0;
            for (std::size_t k = a; k < b; ++k) {
              const T* src = row_ptr(t, links[k].source);
              const std::size_t kh = k * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
              if (src) {
                T acc = 0;
                for (std::size_t i = 0; i < hs; ++i) acc += G[i] * src[o + i];
                dpn[k - a] = acc;
              }
              dot_pz += dpn[k - a] * (*psi)[kh];
              if (links[k].source.var >= 0) {
                typename Tape<T>::Var sv{links[k].source.var};
                if (t.requires_grad(sv)) {
                  T* ds = t.grad(sv).row(links[k].source.row).data() + o;
                  const T w = (*psi)[kh] / z;
                  for (std::size_t i = 0; i < hs; ++i) ds[i] += w * G[i];
                }
              }
            }
            if (!gdl) continue;
            const bool clipped = normalize && z > T(1);
            const T sg = dsrd::sigmoid(DR(0, h));
            for (std::size_t k = a; k < b; ++k) {
              const std::size_t kh = k * static_cast<std::size_t>(H) + static_cast<std::size_t>(h);
              const T dp = clipped ? dpn[k - a] / z - dot_pz / (z * z) : dpn[k - a];
              const T p = (*psi)[kh];
              t.grad(delta_raw)(0, h) += dp * p * (-T(l) * static_cast<T>(std::log1p(links[k].age))) * sg;
            }
          }
          a = b;
        }
      },
      "propagate");
}

/// O_s,h = q_s,h S_s,h * scale. Q: N x (H dh), S: N x (H dh dh).
template <class T>
V<T> readout(Tape<T>& tp, V<T> q, V<T> states, int H, int dh, T scale) {
  const M<T>& Q = tp.value(q);
  const M<T>& S = tp.value(states);
  const std::size_t hs = static_cast<std::size_t>(dh) * dh;
  if (Q.rows() != S.rows() || Q.cols() != H * dh || S.cols() != static_cast<Eigen::Index>(H * hs))
    throw Error("readout: shape mismatch");
  M<T> out = M<T>::Zero(Q.rows(), Q.cols());
  for (Eigen::Index r = 0; r < Q.rows(); ++r)
    for (int h = 0; h < H; ++h) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Sh(
          S.row(r).data() + static_cast<std::size_t>(h) * hs, dh, dh);
      out.row(r).segment(h * dh, dh).noalias() = scale * Q.row(r).segment(h * dh, dh) * Sh;
    }
  return tp.record(std::move(out), {q, states},
                   [=](Tape<T>& t, const M<T>& g) {
                     const M<T>& Q = t.value(q);
                     const M<T>& S = t.value(states);
                     const bool gq = t.requires_grad(q), gs = t.requires_grad(states);
                     for (Eigen::Index r = 0; r < Q.rows(); ++r)
                       for (int h = 0; h < H; ++h) {
                         Eigen::Map<const M<T>> Sh(S.row(r).data() + static_cast<std::size_t>(h) * hs, dh, dh);
                         const auto gr = g.row(r).segment(h * dh, dh);
                         if (gq) t.grad(q).row(r).segment(h * dh, dh).noalias() += scale * gr * Sh.transpose();
                         if (gs) {
                           Eigen::Map<M<T>> dS(t.grad(states).row(r).data() + static_cast<std::size_t>(h) * hs, dh,
                                               dh);
                           dS.noalias() += scale * Q.row(r).segment(h * dh, dh).transpose() * gr;
                         }
                       }
                   },
                   "readout");
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Worker count for parallel harnesses: DSRD_THREADS when set, else hardware.
inline unsigned worker_threads() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DSRD_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(std::min<long>(v, hw));
  }
  return hw;
}

struct FiniteDiffEntry {
  std::size_t param = 0;
  Eigen::Index index = 0;  // flat index into the parameter
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<FiniteDiffEntry> entries;
};

/// Central differences for selected scalars, compared against `analytic`.
/// `loss` must be re-entrant: it receives a private perturbed copy.
template <class T>
FiniteDiffReport finite_diff_check(const ParamSet<T>& params, const GradientSet<T>& analytic,
                                   const std::function<T(const ParamSet<T>&)>& loss,
                                   const std::vector<std::pair<std::size_t, Eigen::Index>>& which, double eps,
                                   unsigned threads = 0) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw Error("finite_diff_check: eps out of range");
  FiniteDiffReport rep;
  rep.entries.resize(which.size());
  if (threads == 0) threads = worker_threads();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(which.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    try {
      ParamSet<T> local = params;
      for (std::size_t k = next++; k < which.size(); k = next++) {
        const auto [p, i] = which[k];
        T& x = local.values[p].data()[i];
        const T x0 = x;
        x = x0 + static_cast<T>(eps);
        const T lp = loss(local);
        x = x0 - static_cast<T>(eps);
        const T lm = loss(local);
        x = x0;
        const double num = static_cast<double>((lp - lm) / (T(2) * static_cast<T>(eps)));
        const double ana = static_cast<double>(analytic.grads[p].data()[i]);
        const double den = std::max({std::abs(ana), std::abs(num), 1e-8});
        rep.entries[k] = {p, i, ana, num, std::abs(ana - num) / den};
      }
    } catch (...) {
      std::lock_guard lock(failure_mu);
      failure = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < threads; ++w) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  for (const auto& e : rep.entries) rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
  return rep;
}

}  // namespace dsrd
