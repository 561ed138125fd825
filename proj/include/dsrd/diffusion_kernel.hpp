#pragma once

// Explicit temporal-walk kernels A^(0..K) and brute-force walk oracles.
// Dense |V|x|V| matrices; intended for small graphs only.

#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

#include "dsrd/common.hpp"
#include "dsrd/graph_store.hpp"

namespace dsrd {

inline constexpr std::size_t kOracleMaxNodes = 64;
inline constexpr std::size_t kWalkEnumerationGuard = 20;

struct TransitionMatrix {
  double t = 0.0;
  RowMatrix<double> T;
};

struct WalkKernel {
  int depth = 1;
  std::vector<RowMatrix<double>> A;  // A[0..depth]
  double last_time = -std::numeric_limits<double>::infinity();

  WalkKernel() = default;
  WalkKernel(std::size_t num_nodes, int K) : depth(K) {
    if (K < 1) throw Error("walk kernel depth must be >= 1");
    const auto n = static_cast<Eigen::Index>(num_nodes);
    A.assign(static_cast<std::size_t>(K) + 1, RowMatrix<double>::Zero(n, n));
    A[0].setIdentity();
  }

  std::size_t num_nodes() const { return A.empty() ? 0 : static_cast<std::size_t>(A[0].rows()); }
};

/// One recursion step at a new distinct timestamp, deepest level first.
inline void kernel_update(WalkKernel& kernel, const TransitionMatrix& tr) {
  if (!(tr.t > kernel.last_time)) throw Error("kernel_update: timestamp must strictly increase");
  const auto n = static_cast<Eigen::Index>(kernel.num_nodes());
  if (tr.T.rows() != n || tr.T.cols() != n) throw Error("kernel_update: dimension mismatch");
  for (int l = kernel.depth; l >= 1; --l)
    kernel.A[static_cast<std::size_t>(l)].noalias() += kernel.A[static_cast<std::size_t>(l) - 1] * tr.T;
  kernel.last_time = tr.t;
}

struct TransitionOptions {
  bool symmetric = false;  // add j->i alongside i->j (self-loops once)
  /// Per-event weight; unit weight when empty.
  std::function<double(const Event&)> weight;
};

/// One transition matrix per distinct timestamp <= t; events sharing a
/// timestamp are summed into the same matrix.
inline std::vector<TransitionMatrix> transitions(const EventStream& stream, double t,
                                                 const TransitionOptions& opt = {}) {
  const auto n = static_cast<Eigen::Index>(stream.num_nodes());
  std::vector<TransitionMatrix> out;
  for (const Event& e : stream.events()) {
    if (e.time > t) break;
    if (out.empty() || out.back().t != e.time)
      out.push_back({e.time, RowMatrix<double>::Zero(n, n)});
    const double w = opt.weight ? opt.weight(e) : 1.0;
    out.back().T(e.src, e.dst) += w;
    if (opt.symmetric && e.src != e.dst) out.back().T(e.dst, e.src) += w;
  }
  return out;
}

inline WalkKernel iterate_kernel(const EventStream& stream, double t, int K,
                                 const TransitionOptions& opt = {}) {
  WalkKernel kernel(stream.num_nodes(), K);
  for (const auto& tr : transitions(stream, t, opt)) kernel_update(kernel, tr);
  return kernel;
}

/// Sum over strictly increasing timestamp tuples of T_{t1} ... T_{tl}.
inline RowMatrix<double> closed_form_kernel(const EventStream& stream, double t, int l,
                                            const TransitionOptions& opt = {}) {
  if (l < 1) throw Error("closed_form_kernel: depth must be >= 1");
  if (stream.num_nodes() > kOracleMaxNodes) throw Error("closed_form_kernel: oversize graph");
  const auto trs = transitions(stream, t, opt);
  const auto n = static_cast<Eigen::Index>(stream.num_nodes());
  RowMatrix<double> total = RowMatrix<double>::Zero(n, n);
  const std::size_t L = static_cast<std::size_t>(l);
  if (trs.size() < L) return total;

  std::vector<std::size_t> pick(L);
  for (std::size_t k = 0; k < L; ++k) pick[k] = k;
  while (true) {
    RowMatrix<double> prod = trs[pick[0]].T;
    for (std::size_t k = 1; k < L; ++k) prod = prod * trs[pick[k]].T;
    total += prod;
    // next combination in lexicographic order
    std::size_t k = L;
    while (k > 0 && pick[k - 1] == trs.size() - L + (k - 1)) --k;
    if (k == 0) break;
    ++pick[k - 1];
    for (std::size_t r = k; r < L; ++r) pick[r] = pick[r - 1] + 1;
  }
  return total;
}

/// Counts length-l walks i -> j whose step times strictly increase.
inline std::uint64_t enumerate_walks(const EventStream& stream, double t, int l, NodeId i, NodeId j,
                                     bool symmetric = false) {
  std::vector<std::pair<NodeId, NodeId>> steps;
  std::vector<double> times;
  for (const Event& e : stream.events()) {
    if (e.time > t) break;
    steps.emplace_back(e.src, e.dst);
    times.push_back(e.time);
    if (symmetric && e.src != e.dst) {
      steps.emplace_back(e.dst, e.src);
      times.push_back(e.time);
    }
  }
  std::size_t n_events = stream.count_upto(t);
  if (n_events > kWalkEnumerationGuard) throw Error("enumerate_walks: guard exceeded");
  if (l < 1) return 0;

  std::uint64_t count = 0;
  std::function<void(NodeId, int, double)> dfs = [&](NodeId at, int remaining, double after) {
    if (remaining == 0) {
      if (at == j) ++count;
      return;
    }
    for (std::size_t s = 0; s < steps.size(); ++s)
      if (steps[s].first == at && times[s] > after) dfs(steps[s].second, remaining - 1, times[s]);
  };
  dfs(i, l, -std::numeric_limits<double>::infinity());
  return count;
}

inline void write_matrix_csv(const RowMatrix<double>& m, std::ostream& out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << detail::format_real(m(r, c));
    }
    out << '\n';
  }
}

}  // namespace dsrd
