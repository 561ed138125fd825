#include <gtest/gtest.h>

#include <random>

#include "dsrd/differentiation.hpp"

using namespace dsrd;
using Mat = RowMatrix<double>;
using TapeD = Tape<double>;
using Var = TapeD::Var;
using Build = std::function<Var(TapeD&, const std::vector<Var>&)>;

namespace {

Mat random(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// sum(R .* out) through tape primitives
Var contract(TapeD& tp, Var out, const Mat& R) {
  const Mat& v = tp.value(out);
  const Var prod = ad::mul(tp, out, tp.constant(R));
  const Var rows = ad::matmul(tp, tp.constant(Mat::Ones(1, v.rows())), prod);
  return ad::matmul(tp, rows, tp.constant(Mat::Ones(v.cols(), 1)));
}

double op_check(const ParamSet<double>& ps, const Build& build, std::uint64_t seed = 1) {
  Mat R;
  {
    TapeD probe(false);
    std::vector<Var> in;
    for (const auto& v : ps.values) in.push_back(probe.parameter(v, nullptr));
    const Mat& o = probe.value(build(probe, in));
    std::mt19937_64 rng(seed);
    R = random(rng, static_cast<int>(o.rows()), static_cast<int>(o.cols()));
  }
  GradientSet<double> grads(ps);
  {
    TapeD tp(true);
    std::vector<Var> in;
    for (std::size_t i = 0; i < ps.size(); ++i) in.push_back(tp.parameter(ps.values[i], &grads.grads[i]));
    tp.backward(contract(tp, build(tp, in), R));
  }
  std::vector<std::pair<std::size_t, Eigen::Index>> which;
  for (std::size_t p = 0; p < ps.size(); ++p)
    for (Eigen::Index i = 0; i < ps.values[p].size(); ++i) which.emplace_back(p, i);
  const std::function<double(const ParamSet<double>&)> loss = [&](const ParamSet<double>& local) {
    TapeD tp(false);
    std::vector<Var> in;
    for (const auto& v : local.values) in.push_back(tp.parameter(v, nullptr));
    return tp.scalar(contract(tp, build(tp, in), R));
  };
  return finite_diff_check(ps, grads, loss, which, 1e-5, 1).max_rel_error;
}

ParamSet<double> params(std::initializer_list<Mat> ms) {
  ParamSet<double> ps;
  int i = 0;
  for (const auto& m : ms) ps.add("p" + std::to_string(i++), "g", m);
  return ps;
}

}  // namespace

TEST(Backward, LinearBceHandDerivative) {
  Mat w = Mat::Zero(1, 1);
  Mat gw = Mat::Zero(1, 1);
  TapeD tp;
  const Var z = ad::matmul(tp, tp.constant(Mat::Ones(1, 1)), tp.parameter(w, &gw));
  tp.backward(ad::bce_logits_mean(tp, z, std::vector<double>{1.0}));
  EXPECT_DOUBLE_EQ(gw(0, 0), -0.5);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  Mat a = Mat::Ones(1, 1), b = Mat::Ones(1, 1), ga = Mat::Zero(1, 1), gb = Mat::Zero(1, 1);
  TapeD tp;
  const Var va = tp.parameter(a, &ga);
  tp.parameter(b, &gb);
  tp.backward(ad::scale(tp, va, 3.0));
  EXPECT_EQ(ga(0, 0), 3.0);
  EXPECT_EQ(gb(0, 0), 0.0);
}

TEST(Backward, TapeIsSingleUse) {
  Mat a = Mat::Ones(1, 1), ga = Mat::Zero(1, 1);
  TapeD tp;
  const Var l = ad::scale(tp, tp.parameter(a, &ga), 2.0);
  tp.backward(l);
  EXPECT_THROW(tp.backward(l), Error);
}

TEST(Backward, NonFiniteActivationIsReported) {
  Mat a = Mat::Constant(1, 1, std::numeric_limits<double>::infinity());
  TapeD tp;
  EXPECT_THROW(ad::scale(tp, tp.constant(a), 0.0), Error);
}

TEST(FiniteDiff, ConstantLossIsExact) {
  ParamSet<double> ps = params({Mat::Ones(2, 2)});
  GradientSet<double> g(ps);
  const auto rep = finite_diff_check<double>(ps, g, [](const ParamSet<double>&) { return 1.5; },
                                             {{0, 0}, {0, 3}}, 1e-5, 1);
  EXPECT_EQ(rep.max_rel_error, 0.0);
  EXPECT_THROW(finite_diff_check<double>(ps, g, [](const ParamSet<double>&) { return 0.0; }, {{0, 0}}, 1e-9), Error);
}

class Ops : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  static constexpr double tol = 1e-6;
};

TEST_F(Ops, DenseAlgebra) {
  EXPECT_LE(op_check(params({random(rng, 3, 4), random(rng, 4, 2)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::matmul(t, v[0], v[1]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, 4), random(rng, 1, 4)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::add_row(t, v[0], v[1]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, 4), random(rng, 3, 4)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::mul(t, ad::add(t, v[0], v[1]), v[0]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, 2), random(rng, 3, 3)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::concat_cols(t, v[0], v[1]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 4, 2)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::gather_rows(t, v[0], {3, 0, 3, 1}); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 2, 2), random(rng, 2, 3)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::pad_add(t, v[0], v[1], 4); }),
            tol);
}

TEST_F(Ops, Nonlinearities) {
  EXPECT_LE(op_check(params({random(rng, 3, 5)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::sigmoid(t, v[0]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, 5)}), [](TapeD& t, const std::vector<Var>& v) { return ad::gelu(t, v[0]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 1, 4)}),
                     [](TapeD& t, const std::vector<Var>& v) {
                       return ad::time_encode(t, std::vector<double>{0.0, 0.7, 3.0}, v[0]);
                     }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, 6), random(rng, 1, 6), random(rng, 1, 6)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::layer_norm(t, v[0], v[1], v[2]); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 4, 6)}),
                     [](TapeD& t, const std::vector<Var>& v) { return ad::dropout(t, v[0], 0.3, 99); }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 5, 1)}),
                     [](TapeD& t, const std::vector<Var>& v) {
                       return ad::bce_logits_mean(t, v[0], std::vector<double>{1, 0, 0, 1, 1});
                     }),
            tol);
}

TEST_F(Ops, FusedRetentionOps) {
  const int H = 2, dh = 2, w = H * dh;
  auto plan = std::make_shared<ad::InjectionPlan>();
  plan->offset = {0, 2, 2, 5};  // second slot has no entries
  plan->dt = {0.0, 1.5, 0.3, 4.0, 0.0};
  for (bool decay : {true, false}) {
    ad::InjectionOptions o;
    o.temporal_decay = decay;
    EXPECT_LE(op_check(params({random(rng, 5, w), random(rng, 5, w), random(rng, 3, w), random(rng, 1, H),
                               random(rng, 1, H)}),
                       [&](TapeD& t, const std::vector<Var>& v) {
                         return ad::injection(t, v[0], v[1], v[2], v[3], v[4], plan, H, dh, o);
                       }),
              tol);
  }
  // gate with an external previous state, a taped one and none
  const Mat ext = random(rng, 1, H * dh * dh);
  EXPECT_LE(op_check(params({random(rng, 2, H * dh * dh), random(rng, 4, H * dh * dh), random(rng, 1, H)}),
                     [&](TapeD& t, const std::vector<Var>& v) {
                       std::vector<ad::RowRef<double>> prev{{ext.data(), -1, 0}, {nullptr, v[0].id, 1}, {}};
                       return ad::gate(t, prev, v[1], 1, v[2], H, dh);
                     }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, H * dh * dh), random(rng, 2, H * dh * dh), random(rng, 1, H)}),
                     [&](TapeD& t, const std::vector<Var>& v) {
                       std::vector<ad::PropagationLink<double>> links{
                           {0, {nullptr, v[1].id, 0}, 0.5}, {0, {nullptr, v[1].id, 1}, 2.0}, {2, {ext.data(), -1, 0}, 0.0}};
                       return ad::propagate(t, v[0], links, v[2], 2, H, dh);
                     }),
            tol);
  EXPECT_LE(op_check(params({random(rng, 3, w), random(rng, 3, H * dh * dh)}),
                     [&](TapeD& t, const std::vector<Var>& v) { return ad::readout(t, v[0], v[1], H, dh, 0.5); }),
            tol);
}

TEST(FusedValue, InjectionMatchesValueLevel) {
  std::mt19937_64 rng(3);
  const int dh = 3;
  const Mat k = random(rng, 2, dh), v = random(rng, 2, dh), q = random(rng, 1, dh);
  const Mat lr = Mat::Constant(1, 1, 0.2), ar = Mat::Constant(1, 1, -0.4);
  auto plan = std::make_shared<ad::InjectionPlan>();
  plan->offset = {0, 2};
  plan->dt = {0.5, 2.0};
  TapeD tp(false);
  const Var out = ad::injection(tp, tp.constant(k), tp.constant(v), tp.constant(q), tp.constant(lr), tp.constant(ar),
                                plan, 1, dh, {});
  const RowVector<double> qv = q.row(0);
  const std::vector<RowVector<double>> ks{k.row(0), k.row(1)}, vs{v.row(0), v.row(1)};
  const std::vector<double> dts{0.5, 2.0};
  const auto ref = short_term_injection<double>(qv, ks, vs, dts, softplus(0.2), sigmoid(-0.4));
  const Mat got = Eigen::Map<const Mat>(tp.value(out).data(), dh, dh);
  EXPECT_LE((got - ref.value).cwiseAbs().maxCoeff(), 1e-14);
}
