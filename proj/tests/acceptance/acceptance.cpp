// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [C1 C2 ...]   (no arguments runs everything)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsrd/dsrd.hpp"

using namespace dsrd;
using Mat = RowMatrix<double>;
using Vec = RowVector<double>;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Mat gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

ProjectionInjector<double> random_injector(std::mt19937_64& rng, std::size_t nodes, int din, int K, int H, int dh,
                                           const DecayParams<double>& p, double xscale = 1.0) {
  ProjectionInjector<double> inj;
  inj.X = gaussian(rng, static_cast<Eigen::Index>(nodes), din, xscale);
  for (int i = 0; i < K * H; ++i) {
    inj.WQ.push_back(gaussian(rng, din, dh));
    inj.WK.push_back(gaussian(rng, din, dh));
    inj.WV.push_back(gaussian(rng, din, dh));
  }
  inj.params = p;
  inj.heads = H;
  return inj;
}

DecayParams<double> random_decays(std::mt19937_64& rng, int K, int H) {
  std::normal_distribution<double> g(0.0, 1.0);
  DecayParams<double> p(K, H);
  for (auto* v : {&p.lambda_raw, &p.alpha_raw, &p.gamma_raw, &p.delta_raw})
    for (double& x : *v) x = g(rng);
  return p;
}

// Events with src != dst and nondecreasing times drawn from `steps` (zero steps make ties).
EventStream random_stream(std::mt19937_64& rng, NodeId nodes, std::size_t events, const std::vector<double>& steps,
                          const Mat& feat = {}) {
  std::uniform_int_distribution<NodeId> node(0, nodes - 1);
  std::uniform_int_distribution<std::size_t> step(0, steps.size() - 1);
  std::vector<Event> ev;
  double t = 1.0;
  for (std::size_t i = 0; i < events; ++i) {
    if (i) t += steps[step(rng)];
    const NodeId u = node(rng);
    NodeId v = node(rng);
    if (u == v) v = (v + 1) % nodes;
    ev.push_back({u, v, t, {}, kNoLabel, 0});
  }
  return EventStream::from_events(ev, nodes, feat);
}

// ---------------------------------------------------------------------------
// C1: recurrent state vs closed-form expansion with a brute-force injection.

// Injection delivered to j at tau, rebuilt from scratch: the kappa most recent
// events touching j up to tau, weights sigma(cos) exp(-lambda log(1+dt)^alpha),
// normalized by max(sum |w|, 1).
Mat oracle_injection(const EventStream& s, const ProjectionInjector<double>& P, const DecayParams<double>& D,
                     NodeId j, int l, int h, double tau, std::size_t kappa, int dh) {
  std::vector<const Event*> hist;
  for (const Event& e : s.events())
    if (e.time <= tau && (e.src == j || e.dst == j)) hist.push_back(&e);
  if (hist.size() > kappa) hist.erase(hist.begin(), hist.end() - static_cast<std::ptrdiff_t>(kappa));
  const int w = l * P.heads + h;
  const Vec q = P.X.row(j) * P.WQ[w];
  const double lambda = std::log1p(std::exp(D.lambda_raw[D.at(l, h)]));
  const double alpha = 1.0 / (1.0 + std::exp(-D.alpha_raw[D.at(l, h)]));
  std::vector<double> ws;
  std::vector<Vec> ks, vs;
  double total = 0.0;
  for (const Event* e : hist) {
    const NodeId nb = e->src == j ? e->dst : e->src;
    const Vec k = P.X.row(nb) * P.WK[w];
    const double qn = q.norm(), kn = k.norm();
    const double c = (qn == 0.0 || kn == 0.0) ? 0.0 : q.dot(k) / (qn * kn);
    const double L = std::log1p(tau - e->time);
    const double decay = L > 0.0 ? std::exp(-lambda * std::pow(L, alpha)) : 1.0;
    ws.push_back(decay / (1.0 + std::exp(-c)));
    ks.push_back(k);
    vs.push_back(P.X.row(nb) * P.WV[w]);
    total += std::abs(ws.back());
  }
  Mat out = Mat::Zero(dh, dh);
  const double z = std::max(total, 1.0);
  for (std::size_t e = 0; e < ws.size(); ++e) out += (ws[e] / z) * ks[e].transpose() * vs[e];
  return out;
}

Verdict c1_closed_form() {
  const Stopwatch sw;
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::size_t checks = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const NodeId V = std::uniform_int_distribution<NodeId>(2, 8)(rng);
    const std::size_t E = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    const int K = std::uniform_int_distribution<int>(1, 3)(rng);
    const int H = std::uniform_int_distribution<int>(1, 2)(rng);
    const int dh = std::uniform_int_distribution<int>(1, 4)(rng);
    const int din = std::uniform_int_distribution<int>(1, 4)(rng);
    const std::size_t kappa = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const auto s = random_stream(rng, V, E, {0.0, 0.5, 1.0, 2.3, 7.0});
    const auto D = random_decays(rng, K, H);
    const auto P = random_injector(rng, V, din, K, H, dh, D);
    CoreOptions opt;
    opt.diffusion = false;
    opt.kappa = kappa;
    RetentiveCore<double, ProjectionInjector<double>> core(s, K, H, dh, D, P, opt);
    std::size_t a = 0;
    while (a < s.size()) {
      std::size_t b = a + 1;
      while (b < s.size() && s[b].time == s[a].time) ++b;
      core.process_event_batch(s.events().subspan(a, b - a));
      const double t = s[a].time;
      for (NodeId j = 0; j < V; ++j)
        for (int l = 0; l < K; ++l)
          for (int h = 0; h < H; ++h) {
            const double g = 1.0 / (1.0 + std::exp(-D.gamma_raw[D.at(l, h)]));
            const Mat ref = closed_form_state<double>(s, t, j, g, 1.0 - g, dh, [&](double tau) {
              return oracle_injection(s, P, D, j, l, h, tau, kappa, dh);
            });
            worst = std::max(worst, (core.state(j, l, h) - ref).cwiseAbs().maxCoeff());
            ++checks;
          }
      a = b;
    }
  }
  const double secs = sw.seconds();
  return {worst <= 1e-12 && secs < 10.0, fmt("max_abs_err=%.3e checks=%zu time=%.2fs", worst, checks, secs)};
}

// ---------------------------------------------------------------------------
// C2: iterated kernel == closed-form sum == walk enumeration, exactly.

Verdict c2_walks() {
  const Stopwatch sw;
  std::mt19937_64 rng(202);
  std::size_t mismatches = 0, compared = 0;
  std::uint64_t walks = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const NodeId V = std::uniform_int_distribution<NodeId>(2, 6)(rng);
    const std::size_t E = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
    const int depth = std::uniform_int_distribution<int>(1, 4)(rng);
    const auto s = random_stream(rng, V, E, {0.0, 1.0, 1.0, 2.0});
    TransitionOptions o;
    o.symmetric = inst % 2 == 1;
    for (double t : {s[s.size() / 2].time, s[s.size() - 1].time}) {
      const auto it = iterate_kernel(s, t, depth, o);
      for (int l = 1; l <= depth; ++l) {
        const Mat cf = closed_form_kernel(s, t, l, o);
        for (NodeId i = 0; i < V; ++i)
          for (NodeId j = 0; j < V; ++j) {
            const auto w = enumerate_walks(s, t, l, i, j, o.symmetric);
            walks += w;
            ++compared;
            const double x = it.A[static_cast<std::size_t>(l)](i, j);
            if (x != cf(i, j) || x != static_cast<double>(w)) ++mismatches;
          }
      }
    }
  }
  const double secs = sw.seconds();
  return {mismatches == 0 && secs < 10.0,
          fmt("mismatches=%zu entries=%zu walks=%llu time=%.2fs", mismatches, compared,
              static_cast<unsigned long long>(walks), secs)};
}

// ---------------------------------------------------------------------------
// C3: A -> B -> C ordering in the explicit kernel, the state core and the model.

EventStream chain(bool forward, const Mat& feat = {}) {
  // forward: A->B at 1, B->C at 2; reversed swaps the times
  std::vector<Event> ev{{0, 1, forward ? 1.0 : 2.0, {}, kNoLabel, 0}, {1, 2, forward ? 2.0 : 1.0, {}, kNoLabel, 0}};
  std::sort(ev.begin(), ev.end(), [](const Event& x, const Event& y) { return x.time < y.time; });
  return EventStream::from_events(ev, 3, feat);
}

double core_depth2(const EventStream& s) {
  CoreOptions o;
  o.entries = EntryMode::CurrentEvents;
  o.fixed_retention = std::make_pair(1.0, 1.0);
  RetentiveCore<double, BasisInjector<double>> core(s, 2, 1, 3, DecayParams<double>(2, 1), BasisInjector<double>{3}, o);
  core.process_event_batch(s.events());
  return core.state(2, 1, 0)(0, 0);  // A's marker in C's depth-2 state
}

// Max change of C's embedding at t=3 when A's features change.
double model_sensitivity(bool forward) {
  std::mt19937_64 rng(303);
  Mat f = gaussian(rng, 3, 4);
  const auto s1 = chain(forward, f);
  f.row(0) *= -3.0;
  const auto s2 = chain(forward, f);
  ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.neighbors = 4;
  c.time_dim = 4;
  c.num_nodes = 3;
  c.node_feat_dim = 4;
  const Model<double> m(c);
  auto embed = [&](const EventStream& s) {
    const NeighborIndex index(s);
    BatchSpec b;
    b.stream = &s;
    b.index = &index;
    b.pending = s.events();
    b.queries = {{2, 3.0, 2}};
    Tape<double> tp(false);
    const auto r = m.forward(tp, nullptr, m.make_store(), b);
    return Mat(tp.value(r.embeddings));
  };
  return (embed(s1) - embed(s2)).cwiseAbs().maxCoeff();
}

Verdict c3_chain() {
  const double kf = iterate_kernel(chain(true), 2.0, 2).A[2](0, 2);
  const double kr = iterate_kernel(chain(false), 2.0, 2).A[2](0, 2);
  const double sf = core_depth2(chain(true)), sr = core_depth2(chain(false));
  const double mf = model_sensitivity(true), mr = model_sensitivity(false);
  const bool ok = kf > 0.0 && kr == 0.0 && sf > 0.0 && sr == 0.0 && mf > 0.0 && mr == 0.0;
  return {ok, fmt("kernel fwd=%g rev=%g; state fwd=%g rev=%g; model dC fwd=%.3e rev=%g", kf, kr, sf, sr, mf, mr)};
}

// ---------------------------------------------------------------------------
// C4: clipped injections keep every state inside (1 - gamma^n) M.

Verdict c4_bounded() {
  const double M = 0.5;
  std::size_t steps = 0, violations = 0, clipped = 0, readouts = 0, readout_violations = 0;
  double worst = 0.0, worst_readout = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(mix_seed(404, seed));
    const int K = 2, H = 2, dh = 4, din = 6;
    const NodeId V = 30;
    const auto s = random_stream(rng, V, 1000, {0.0, 0.1, 0.5, 1.0, 4.0});
    const auto D = random_decays(rng, K, H);
    const auto P = random_injector(rng, V, din, K, H, dh, D, 0.35);
    CoreOptions o;
    o.diffusion = false;
    o.injection_clip = M;
    o.kappa = 10;
    RetentiveCore<double, ProjectionInjector<double>> core(s, K, H, dh, D, P, o);
    std::vector<std::vector<UpdateRecord>> hist(static_cast<std::size_t>(K * H));
    core.observer = [&](const UpdateRecord& r) {
      hist[static_cast<std::size_t>(r.layer * H + r.head)].push_back(r);
      clipped += r.injection_norm >= M * (1.0 - 1e-12);
    };
    const auto out = core.process_event_batch(s.events());
    for (int l = 0; l < K; ++l)
      for (int h = 0; h < H; ++h) {
        const auto rep = check_bound(hist[static_cast<std::size_t>(l * H + h)], D.gamma(l, h), M);
        steps += rep.steps;
        violations += rep.violations;
        worst = std::max(worst, rep.max_ratio);
      }
    double Lq = 0.0, Bx = 0.0;
    for (int h = 0; h < H; ++h) {
      Eigen::JacobiSVD<Mat> svd(P.WQ[static_cast<std::size_t>((K - 1) * H + h)]);
      Lq = std::max(Lq, svd.singularValues()(0));
    }
    for (NodeId n = 0; n < V; ++n) Bx = std::max(Bx, P.X.row(n).norm());
    const double cap = Lq * Bx * M;
    for (const auto& r : out)
      for (int h = 0; h < H; ++h) {
        const double nrm = r.value.segment(h * dh, dh).norm();
        worst_readout = std::max(worst_readout, nrm / cap);
        ++readouts;
        readout_violations += nrm > cap * (1.0 + 1e-12);
      }
  }
  const bool ok = violations == 0 && steps >= 10000 && readout_violations == 0;
  return {ok, fmt("steps=%zu violations=%zu max_ratio=%.6f clipped=%zu readouts=%zu readout_violations=%zu "
                  "max_readout_ratio=%.4f",
                  steps, violations, worst, clipped, readouts, readout_violations, worst_readout)};
}

// ---------------------------------------------------------------------------
// C5: reverse mode vs central differences for every parameter group.

Verdict c5_gradients() {
  const Stopwatch sw;
  std::map<std::string, double> groups;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec s;
    s.pattern = Pattern::Uniform;
    s.num_nodes = 8;
    s.num_events = 30;
    s.seed = seed;
    s.node_feat_dim = 4;
    s.edge_feat_dim = 2;
    s.labels = true;
    const EventStream stream = generate(s);
    ModelConfig mc;
    mc.dim = 8;
    mc.time_dim = 4;
    mc.neighbors = 5;
    mc.num_nodes = stream.num_nodes();
    mc.node_feat_dim = stream.node_feat_dim();
    mc.edge_feat_dim = stream.edge_feat_dim();
    mc.seed = seed;
    const Model<double> model(mc);
    GradCheckOptions o;
    o.seed = seed;
    o.eps = 1e-5;
    o.per_param = 6;
    o.threads = 1;
    const auto r = gradient_check(model, stream, o);
    checked += r.checked;
    for (const auto& [g, e] : r.group_max) groups[g] = std::max(groups[g], e);
  }
  const double secs = sw.seconds();
  const std::vector<std::string> expected{"lambda",      "alpha",      "gamma",       "delta", "projections",
                                          "time_encoder", "edge_fuser", "layer_norm", "ffn",   "link_head",
                                          "node_head",   "input"};
  bool ok = secs < 60.0;
  std::string d;
  for (const auto& g : expected) {
    const auto it = groups.find(g);
    if (it == groups.end()) {
      ok = false;
      d += g + "=missing ";
      continue;
    }
    ok = ok && it->second <= 1e-4;
    d += fmt("%s=%.1e ", g.c_str(), it->second);
  }
  return {ok, d + fmt("scalars=%zu time=%.1fs", checked, secs)};
}

// ---------------------------------------------------------------------------
// C6: metric oracles and the random-scorer AUPRC baseline.

Verdict c6_metrics() {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<int> y{1, 0, 1, 0}, perfect{1, 1, 0, 0};
  const double ap = average_precision(s, y), auc = roc_auc(s, y);
  const double ap1 = average_precision(s, perfect), auc1 = roc_auc(s, perfect);

  const double pi = 0.3;
  const std::size_t n = 10000, reps = 200;
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&] {
    std::vector<double> sc(n);
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = u(rng);
      lab[i] = u(rng) < pi;
    }
    return average_precision(sc, lab);
  };
  double m = 0.0, m2 = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    const double a = draw();
    m += a;
    m2 += a * a;
  }
  m /= reps;
  const double sigma = std::sqrt(std::max(m2 / reps - m * m, 0.0));
  const double fresh = draw();

  const bool ok = std::abs(ap - 0.8333) <= 1e-4 && std::abs(ap - 5.0 / 6.0) <= 1e-9 && auc == 0.75 && ap1 == 1.0 &&
                  auc1 == 1.0 && std::abs(fresh - pi) <= 3.0 * sigma;
  return {ok, fmt("ap=%.12f auc=%.17g perfect=(%g,%g) random_auprc=%.5f pi=%.2f sigma=%.5f mean=%.5f", ap, auc, ap1,
                  auc1, fresh, pi, sigma, m)};
}

// ---------------------------------------------------------------------------
// C7 / C8: desk-scale learning on the periodic stream.

const EventStream& periodic() {
  static const EventStream s = generate(SynthSpec{});  // 200 nodes, 5000 events, seed 0
  return s;
}

Verdict c7_learning() {
  const Stopwatch sw;
  const EventStream& s = periodic();
  TrainConfig cfg;  // d=64, K=2, kappa=20, lr=1e-4, batch=200, dropout=0.1
  const SplitPlan plan = chronological_split(s, cfg.train_frac, cfg.val_frac);
  const Model<float> init(cfg.model_config(s));
  const double untrained = validation_metrics(init, make_train_data(s, plan), cfg).first;
  cfg.time_budget_s = 280.0 - sw.seconds();
  const auto r = fit(s, plan, init, cfg);
  const double secs = sw.seconds();
  const bool ok = r.best_metric >= 0.85 && r.best_metric - untrained >= 0.20 && secs < 300.0;
  return {ok, fmt("best_val_ap=%.4f untrained=%.4f epochs=%zu best_epoch=%zu time=%.1fs", r.best_metric, untrained,
                  r.history.size(), r.best_epoch, secs)};
}

Verdict c8_ablations() {
  const EventStream& s = periodic();
  TrainConfig cfg;
  cfg.max_epochs = 15;
  const SplitPlan plan = chronological_split(s, cfg.train_frac, cfg.val_frac);
  const std::vector<std::string> variants{"full", "no-decay", "no-diffusion", "no-state", "no-block"};
  std::map<std::string, double> ap;
  for (const auto& v : variants) {
    TrainConfig c = cfg;
    if (v != "full") c.ablation = ablation_config({v});
    ap[v] = fit(s, plan, Model<float>(c.model_config(s)), c).best_metric;
  }
  bool ok = true;
  std::string d = fmt("full=%.4f", ap["full"]);
  for (std::size_t i = 1; i < variants.size(); ++i) {
    ok = ok && ap["full"] >= ap[variants[i]] - 0.01;
    d += fmt(" %s=%.4f", variants[i].c_str(), ap[variants[i]]);
  }
  return {ok, d};
}

// ---------------------------------------------------------------------------
// C9: runtime linear in events, flat in node count.

Verdict c9_scaling() {
  ModelConfig mc;
  mc.dim = 32;
  mc.neighbors = 5;
  mc.time_dim = 8;
  ScalingOptions o;
  o.nodes = 1000;
  o.repeats = 1;
  const auto rows = scaling_suite<float>({10000, 30000, 100000, 300000}, mc, o);
  std::vector<double> x, y;
  std::string d;
  for (const auto& r : rows) {
    x.push_back(static_cast<double>(r.events));
    y.push_back(r.forward_ms + r.backward_ms);
    d += fmt("%zu:%.0fms ", r.events, y.back());
  }
  const double slope = loglog_slope(x, y);
  // node count x10 at the largest size, where every neighbor window is full at both widths
  ScalingOptions wide = o;
  wide.nodes = 10000;
  const auto big = scaling_suite<float>({300000}, mc, wide).front();
  const double a = y.back(), b = big.forward_ms + big.backward_ms;
  const double ratio = std::max(a, b) / std::min(a, b);
  return {slope >= 0.9 && slope <= 1.3 && ratio <= 1.5,
          d + fmt("slope=%.3f nodes1e3=%.0fms nodes1e4=%.0fms ratio=%.3f", slope, a, b, ratio)};
}

// ---------------------------------------------------------------------------
// C10: byte-identical reruns; deleting a future event leaves earlier scores unchanged.

struct RunArtifacts {
  std::string checkpoint, history, report;
  Model<float> model;
};

RunArtifacts train_once(const EventStream& s) {
  TrainConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.neighbors = 5;
  cfg.time_dim = 4;
  cfg.batch_size = 50;
  cfg.max_epochs = 2;
  cfg.seed = 11;
  const SplitPlan plan = chronological_split(s, cfg.train_frac, cfg.val_frac);
  const auto mc = cfg.model_config(s);
  const auto r = fit(s, plan, Model<float>(mc), cfg);
  RunArtifacts a{{}, {}, {}, r.best};
  std::ostringstream ck;
  write_checkpoint(ck, r.best, {{"best_epoch", r.best_epoch}});
  a.checkpoint = ck.str();
  for (const auto& e : r.history) {
    auto j = to_json(e);
    j.erase("wall_ms");
    a.history += j.dump() + "\n";
  }
  LinkEvalOptions o;
  o.seed = 5;
  a.report = to_json(evaluate_link(r.best, s, plan, plan.val_end, s.size(), o), 5, config_hash(mc, cfg)).dump();
  return a;
}

Verdict c10_determinism() {
  SynthSpec spec;
  spec.num_nodes = 40;
  spec.num_events = 800;
  spec.pairs = 20;
  spec.node_feat_dim = 8;
  const EventStream s = generate(spec);
  const auto a = train_once(s), b = train_once(s);
  const bool same = a.checkpoint == b.checkpoint && a.history == b.history && a.report == b.report;

  std::size_t compared = 0, differ = 0;
  const NeighborIndex full_index(s);
  for (auto strat : {NegativeStrategy::Random, NegativeStrategy::Historical}) {
    const NegativeSampler full_ns(s, strat, 9, 560);
    const auto ref = score_links(a.model, s, full_index, 0, s.size(), full_ns, {}, 50);
    for (std::size_t p : {std::size_t{1}, std::size_t{137}, std::size_t{400}, std::size_t{649}, s.size() - 1}) {
      std::vector<EventIdx> keep;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (i != p) keep.push_back(static_cast<EventIdx>(i));
      const EventStream cut = s.subset(keep);
      const NegativeSampler cut_ns(cut, strat, 9, 560);
      const auto got = score_links(a.model, cut, NeighborIndex(cut), 0, cut.size(), cut_ns, {}, 50);
      for (std::size_t k = 0; k < got.scores.size() && got.positions[k] < p; ++k) {
        ++compared;
        differ += got.scores[k] != ref.scores[k] || got.labels[k] != ref.labels[k];
      }
    }
  }
  return {same && differ == 0 && compared > 0,
          fmt("checkpoint_bytes=%zu identical=%s earlier_scores=%zu changed=%zu", a.checkpoint.size(),
              same ? "yes" : "no", compared, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::pair<std::string, std::function<Verdict()>>>> all{
      {"C1", {"closed-form state", c1_closed_form}},
      {"C2", {"walk equivalence", c2_walks}},
      {"C3", {"chain ordering", c3_chain}},
      {"C4", {"bounded state", c4_bounded}},
      {"C5", {"gradient check", c5_gradients}},
      {"C6", {"metric oracles", c6_metrics}},
      {"C7", {"periodic learning", c7_learning}},
      {"C8", {"ablation ordering", c8_ablations}},
      {"C9", {"linear scaling", c9_scaling}},
      {"C10", {"determinism and causality", c10_determinism}},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [id, entry] : all) {
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %s %s: %s\n", v.pass ? "PASS" : "FAIL", id.c_str(), entry.first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
