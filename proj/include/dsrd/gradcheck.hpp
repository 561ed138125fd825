#pragma once

// Reverse-mode vs central-difference comparison on a two-batch pass: the
// first batch is committed, the second re-applies it differentiably and
// scores link and node targets, so every parameter group is reached.

#include <map>
#include <random>

#include "dsrd/differentiation.hpp"
#include "dsrd/evaluation.hpp"
#include "dsrd/network.hpp"

namespace dsrd {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  std::size_t per_param = 4;  // sampled scalars per tensor
  double eps = 1e-5;
  unsigned threads = 0;
  bool dropout = true;  // fixed mask
};

struct GradCheckResult {
  FiniteDiffReport report;
  std::map<std::string, double> group_max;  // parameter group -> max rel. error
  double loss = 0.0;
  std::size_t checked = 0;
};

template <class T>
GradCheckResult gradient_check(const Model<T>& model, const EventStream& stream, const GradCheckOptions& opt) {
  if (stream.size() < 2) throw Error("gradient_check: need at least two events");
  const NeighborIndex index(stream);
  const NegativeSampler sampler(stream, NegativeStrategy::Random, opt.seed);
  const auto all = stream.events();
  const std::size_t half = all.size() / 2;

  auto fill = [&](std::size_t a, std::size_t b, BatchSpec& spec) {
    spec.stream = &stream;
    spec.index = &index;
    spec.training = opt.dropout;
    spec.dropout_seed = mix_seed(opt.seed, a);
    for (std::size_t p = a; p < b; ++p) {
      const Event& e = all[p];
      const std::size_t q0 = spec.queries.size();
      spec.queries.push_back({e.src, e.time, e.idx});
      spec.queries.push_back({e.dst, e.time, e.idx});
      spec.queries.push_back({sampler.sample(e, p), e.time, e.idx});
      spec.links.push_back({q0, q0 + 1, 1.0});
      spec.links.push_back({q0, q0 + 2, 0.0});
      if (e.has_label()) spec.nodes.push_back({q0, static_cast<double>(e.label)});
    }
  };

  StateStore<T> store = model.make_store();
  {
    BatchSpec first;
    fill(0, half, first);
    Tape<T> tp(false);
    const auto r = model.forward(tp, nullptr, store, first);
    model.commit(tp, r, store);
  }
  BatchSpec second;
  fill(half, all.size(), second);
  second.pending = all.subspan(0, half);

  GradientSet<T> grads(model.params());
  GradCheckResult out;
  {
    Tape<T> tp(true);
    const auto r = model.forward(tp, &grads, store, second);
    if (!r.has_loss) throw Error("gradient_check: no loss");
    out.loss = static_cast<double>(tp.scalar(r.loss));
    tp.backward(r.loss);
  }

  const auto& ps = model.params();
  std::mt19937_64 rng(mix_seed(opt.seed, 0x6763ULL));
  std::vector<std::pair<std::size_t, Eigen::Index>> which;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    const auto n = ps.values[p].size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < std::min<std::size_t>(opt.per_param, idx.size()); ++k) which.emplace_back(p, idx[k]);
  }
  const std::function<T(const ParamSet<T>&)> loss = [&](const ParamSet<T>& local) {
    Tape<T> tp(false);
    const auto r = model.forward(tp, nullptr, store, second, &local);
    return tp.scalar(r.loss);
  };
  out.report = finite_diff_check(ps, grads, loss, which, opt.eps, opt.threads);
  out.checked = which.size();
  for (const auto& e : out.report.entries) {
    double& g = out.group_max[ps.groups[e.param]];
    g = std::max(g, e.rel_error);
  }
  return out;
}

}  // namespace dsrd
