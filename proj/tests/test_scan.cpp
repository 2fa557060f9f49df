#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mogen/grad_check.hpp"
#include "mogen/scan.hpp"

using namespace mogen;

namespace {

std::int64_t ceil_log2(std::int64_t n) {
  std::int64_t d = 0;
  std::int64_t p = 1;
  while (p < n) {
    p *= 2;
    ++d;
  }
  return d;
}

// Frozen LTI selection: zero weight matrices, constant biases.
template <typename S>
SelectionParams<S> frozen_selection(std::int64_t ch, std::int64_t st, S b_val, S c_val,
                                    S delta_val) {
  SelectionParams<S> sel;
  sel.w_b = Tensor<S>::zeros({ch, st});
  sel.b_b = Tensor<S>::full({st}, b_val);
  sel.w_c = Tensor<S>::zeros({ch, st});
  sel.b_c = Tensor<S>::full({st}, c_val);
  sel.w_delta = Tensor<S>::zeros({ch, ch});
  sel.delta_bias = Tensor<S>::full({ch}, inv_softplus(delta_val));
  return sel;
}

}  // namespace

TEST(Discretize, SmallDeltaLimit) {
  TensorD delta = TensorD::full({3, 2}, 1e-12);
  TensorD a = TensorD::full({2, 4}, -1.0);
  TensorD b = TensorD::full({3, 4}, 0.7);
  auto [abar, bbar] = discretize(delta, a, b);
  for (int i = 0; i < abar.numel(); ++i) EXPECT_NEAR(abar.at(i), 1.0, 1e-10);
  for (int i = 0; i < bbar.numel(); ++i) EXPECT_NEAR(bbar.at(i), 0.0, 1e-10);
}

TEST(Discretize, ScalarAnalyticExponential) {
  TensorD delta = TensorD::full({1, 1}, std::log(2.0));
  TensorD a = TensorD::full({1, 1}, -1.0);
  TensorD b = TensorD::full({1, 1}, 1.0);
  auto [abar, bbar] = discretize(delta, a, b);
  EXPECT_NEAR(abar.at(0), 0.5, 1e-15);
  EXPECT_NEAR(bbar.at(0), std::log(2.0), 1e-15);
}

TEST(Discretize, AbarInUnitInterval) {
  Rng rng(101);
  TensorD delta = TensorD::uniform({6, 3}, 1e-3, 2.0, rng);
  std::vector<double> av(12);
  for (auto& v : av) v = -std::exp(rng.uniform(-3.0, 2.0));
  TensorD a = TensorD::from_data({3, 4}, std::move(av));
  TensorD b = TensorD::randn({6, 4}, rng);
  auto [abar, bbar] = discretize(delta, a, b);
  for (int i = 0; i < abar.numel(); ++i) {
    EXPECT_GT(abar.at(i), 0.0);
    EXPECT_LT(abar.at(i), 1.0);
  }
}

TEST(Discretize, RejectsNonpositiveDelta) {
  TensorD delta = TensorD::zeros({2, 2});
  TensorD a = TensorD::full({2, 3}, -1.0);
  TensorD b = TensorD::zeros({2, 3});
  EXPECT_THROW(discretize(delta, a, b), NumericError);
}

TEST(SelectiveScan, HandRecurrence) {
  // Abar = 0.5, Bbar = C = 1, no skip, x = [1, 0, 0] -> y = [1, 0.5, 0.25].
  TensorD x = TensorD::from_data({3, 1}, {1.0, 0.0, 0.0});
  TensorD delta = TensorD::full({3, 1}, 1.0);
  TensorD b = TensorD::full({3, 1}, 1.0);
  TensorD c = TensorD::full({3, 1}, 1.0);
  TensorD a = TensorD::full({1, 1}, std::log(0.5));
  TensorD y = selective_scan<double>(x, delta, b, c, a, nullptr, ScanMode::Sequential);
  EXPECT_NEAR(y.at(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(y.at(1, 0), 0.5, 1e-14);
  EXPECT_NEAR(y.at(2, 0), 0.25, 1e-14);
}

TEST(SelectiveScan, MemorylessLimit) {
  // A extremely negative: no state carries over, y_t = C_t Bbar_t x_t + skip.
  Rng rng(103);
  const std::int64_t t_len = 5, ch = 3, st = 2;
  TensorD x = TensorD::randn({t_len, ch}, rng);
  TensorD delta = TensorD::uniform({t_len, ch}, 0.5, 1.5, rng);
  TensorD b = TensorD::randn({t_len, st}, rng);
  TensorD c = TensorD::randn({t_len, st}, rng);
  TensorD a = TensorD::full({ch, st}, -1e9);
  TensorD skip = TensorD::uniform({ch}, 0.1, 1.0, rng);
  TensorD y = selective_scan(x, delta, b, c, a, &skip, ScanMode::Sequential);
  for (std::int64_t t = 0; t < t_len; ++t)
    for (std::int64_t d = 0; d < ch; ++d) {
      double expect = skip.at(d) * x.at(t, d);
      for (std::int64_t n = 0; n < st; ++n)
        expect += c.at(t, n) * delta.at(t, d) * b.at(t, n) * x.at(t, d);
      EXPECT_NEAR(y.at(t, d), expect, 1e-12);
    }
}

TEST(SelectiveScan, LengthOneSequence) {
  Rng rng(107);
  TensorD x = TensorD::randn({1, 2}, rng);
  TensorD delta = TensorD::uniform({1, 2}, 0.1, 1.0, rng);
  TensorD b = TensorD::randn({1, 3}, rng);
  TensorD c = TensorD::randn({1, 3}, rng);
  TensorD a = TensorD::full({2, 3}, -0.5);
  TensorD skip = TensorD::full({2}, 0.25);
  TensorD y = selective_scan(x, delta, b, c, a, &skip, ScanMode::Sequential);
  for (std::int64_t d = 0; d < 2; ++d) {
    double expect = 0.25 * x.at(0, d);
    for (std::int64_t n = 0; n < 3; ++n)
      expect += c.at(0, n) * delta.at(0, d) * b.at(0, n) * x.at(0, d);
    EXPECT_NEAR(y.at(0, d), expect, 1e-14);
  }
}

TEST(SelectiveScan, NonFiniteInputReportsStep) {
  TensorD x = TensorD::from_data({2, 1}, {1.0, std::numeric_limits<double>::infinity()});
  TensorD delta = TensorD::full({2, 1}, 0.5);
  TensorD b = TensorD::full({2, 1}, 1.0);
  TensorD c = TensorD::full({2, 1}, 1.0);
  TensorD a = TensorD::full({1, 1}, -1.0);
  try {
    selective_scan<double>(x, delta, b, c, a, nullptr, ScanMode::Sequential);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(ScanCombinator, Associativity) {
  Rng rng(109);
  auto compose = [](std::pair<double, double> p, std::pair<double, double> q) {
    return std::pair<double, double>{q.first * p.first, q.first * p.second + q.second};
  };
  for (int it = 0; it < 200; ++it) {
    std::pair<double, double> p{rng.uniform(0.0, 1.0), rng.normal()};
    std::pair<double, double> q{rng.uniform(0.0, 1.0), rng.normal()};
    std::pair<double, double> r{rng.uniform(0.0, 1.0), rng.normal()};
    auto left = compose(compose(p, q), r);
    auto right = compose(p, compose(q, r));
    EXPECT_NEAR(left.first, right.first, 1e-12);
    EXPECT_NEAR(left.second, right.second, 1e-12);
  }
}

TEST(ParallelScan, MatchesSequentialDouble) {
  Rng rng(113);
  for (int it = 0; it < 25; ++it) {
    const auto t_len = static_cast<std::int64_t>(1 + rng.uniform_int(300));
    const auto ch = static_cast<std::int64_t>(1 + rng.uniform_int(8));
    const auto st = static_cast<std::int64_t>(1 + rng.uniform_int(8));
    SsmParams<double> ssm = make_ssm_params<double>(ch, st);
    SelectionParams<double> sel = make_selection_params<double>(ch, st, rng);
    TensorD x = TensorD::randn({t_len, ch}, rng);
    TensorD ys = selective_scan_seq(x, ssm, sel);
    TensorD yp = selective_scan_par(x, ssm, sel);
    double max_diff = 0;
    for (int i = 0; i < ys.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(ys.at(i) - yp.at(i)));
    EXPECT_LT(max_diff, 1e-10) << "T=" << t_len << " ch=" << ch << " st=" << st;
  }
}

TEST(ParallelScan, MatchesSequentialFloat) {
  Rng rng(127);
  for (int it = 0; it < 15; ++it) {
    const auto t_len = static_cast<std::int64_t>(1 + rng.uniform_int(300));
    const auto ch = static_cast<std::int64_t>(1 + rng.uniform_int(6));
    const auto st = static_cast<std::int64_t>(1 + rng.uniform_int(6));
    SsmParams<float> ssm = make_ssm_params<float>(ch, st);
    SelectionParams<float> sel = make_selection_params<float>(ch, st, rng);
    TensorF x = TensorF::randn({t_len, ch}, rng);
    TensorF ys = selective_scan_seq(x, ssm, sel);
    TensorF yp = selective_scan_par(x, ssm, sel);
    float max_diff = 0;
    for (int i = 0; i < ys.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(ys.at(i) - yp.at(i)));
    EXPECT_LT(max_diff, 1e-5f) << "T=" << t_len;
  }
}

TEST(ParallelScan, SingleStepIsExact) {
  Rng rng(131);
  SsmParams<double> ssm = make_ssm_params<double>(4, 3);
  SelectionParams<double> sel = make_selection_params<double>(4, 3, rng);
  TensorD x = TensorD::randn({1, 4}, rng);
  TensorD ys = selective_scan_seq(x, ssm, sel);
  TensorD yp = selective_scan_par(x, ssm, sel);
  for (int i = 0; i < ys.numel(); ++i) EXPECT_EQ(ys.at(i), yp.at(i));
}

TEST(ParallelScan, DepthAndWorkBounds) {
  Rng rng(137);
  for (std::int64_t t_len : {2, 3, 5, 7, 16, 100, 255, 256, 1000, 1024}) {
    SsmParams<double> ssm = make_ssm_params<double>(2, 2);
    SelectionParams<double> sel = make_selection_params<double>(2, 2, rng);
    TensorD x = TensorD::randn({t_len, 2}, rng);
    TensorD ys = selective_scan_seq(x, ssm, sel);
    ScanStats stats;
    TensorD yp = selective_scan_par(x, ssm, sel, &stats);
    double max_diff = 0;
    for (int i = 0; i < ys.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(ys.at(i) - yp.at(i)));
    EXPECT_LT(max_diff, 1e-10);
    EXPECT_LE(stats.depth, ceil_log2(t_len)) << "T=" << t_len;
    // Work-efficient: at most 4 combines per element per lane.
    EXPECT_LE(stats.combines, 4 * t_len * 2 * 2) << "T=" << t_len;
  }
}

TEST(LtiReduction, MatchesImpulseResponseConvolution) {
  // Selection weights zeroed: B, C, delta constant -> time-invariant system
  // y[t,d] = sum_k r_d[t-k] x[k,d] with r_d[j] = sum_n c_n abar_dn^j dt b_n.
  Rng rng(139);
  const std::int64_t t_len = 40, ch = 3, st = 4;
  const double b_val = 0.8, c_val = 0.6, delta_val = 0.2;
  SsmParams<double> ssm = make_ssm_params<double>(ch, st, /*use_skip=*/false);
  SelectionParams<double> sel = frozen_selection<double>(ch, st, b_val, c_val, delta_val);
  TensorD x = TensorD::randn({t_len, ch}, rng);
  TensorD y = selective_scan_seq(x, ssm, sel);

  for (std::int64_t d = 0; d < ch; ++d) {
    std::vector<double> impulse(static_cast<std::size_t>(t_len), 0.0);
    for (std::int64_t j = 0; j < t_len; ++j) {
      double r = 0;
      for (std::int64_t n = 0; n < st; ++n) {
        const double a_dn = -std::exp(ssm.a_log.at(d, n));
        r += c_val * std::pow(std::exp(delta_val * a_dn), static_cast<double>(j)) * delta_val *
             b_val;
      }
      impulse[static_cast<std::size_t>(j)] = r;
    }
    for (std::int64_t t = 0; t < t_len; ++t) {
      double conv = 0;
      for (std::int64_t k = 0; k <= t; ++k)
        conv += impulse[static_cast<std::size_t>(t - k)] * x.at(k, d);
      EXPECT_NEAR(y.at(t, d), conv, 1e-8);
    }
  }
}

TEST(SelectiveScan, GradientsPassFiniteDifferences) {
  Rng rng(149);
  const std::int64_t t_len = 6, ch = 3, st = 4;
  SsmParams<double> ssm = make_ssm_params<double>(ch, st);
  SelectionParams<double> sel = make_selection_params<double>(ch, st, rng);
  TensorD x = TensorD::randn({t_len, ch}, rng);
  TensorD w = TensorD::randn({t_len, ch}, rng);

  auto fx = [&](const TensorD& in) { return sum(mul(selective_scan_seq(in, ssm, sel), w)); };
  auto report = grad_check<double>(fx, x, 1e-5);
  EXPECT_TRUE(report.passed) << "x: " << report.message;

  auto loss = [&]() { return sum(mul(selective_scan_seq(x, ssm, sel), w)); };
  for (auto* param : {&ssm.a_log, &ssm.d_skip, &sel.w_b, &sel.b_b, &sel.w_c, &sel.b_c,
                      &sel.w_delta, &sel.delta_bias}) {
    auto rp = grad_check_param<double>(loss, *param, 1e-5);
    EXPECT_TRUE(rp.passed) << rp.message;
  }
}
