#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>

#include "test_support.hpp"
#include "trajdiv/dpp.hpp"

using namespace trajdiv;
using ad::Var;
using scene::Point2;
using trajdiv::testing::gradient_error;
using trajdiv::testing::random_psd;
using trajdiv::testing::random_tensor;

namespace {

constexpr double kPi = std::numbers::pi;

// Independent determinant: Laplace expansion along the first row.
double laplace_det(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  if (n == 0) return 1.0;
  if (n == 1) return m[0][0];
  double det = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::vector<double>> minor;
    for (std::size_t r = 1; r < n; ++r) {
      std::vector<double> row;
      for (std::size_t c = 0; c < n; ++c)
        if (c != j) row.push_back(m[r][c]);
      minor.push_back(row);
    }
    det += (j % 2 ? -1.0 : 1.0) * m[0][j] * laplace_det(minor);
  }
  return det;
}

std::vector<std::vector<double>> rows_of(const Tensor& t, const std::vector<std::size_t>& idx) {
  std::vector<std::vector<double>> m;
  for (std::size_t i : idx) {
    std::vector<double> row;
    for (std::size_t j : idx) row.push_back(t.at(i, j));
    m.push_back(row);
  }
  return m;
}

Tensor random_set(std::size_t n, std::size_t t_f, std::mt19937_64& rng, double spread = 10.0) {
  return random_tensor({n, 2 * t_f}, rng, -spread, spread);
}

}  // namespace

TEST(AngularDeviation, HandValues) {
  const Point2 o{1.0, 1.0};
  EXPECT_NEAR(dpp::angular_deviation(o, {2, 1}, {1, 2}), kPi / 2, 1e-15);
  EXPECT_NEAR(dpp::angular_deviation(o, {2, 1}, {0, 1}), kPi, 1e-15);
  EXPECT_NEAR(dpp::angular_deviation(o, {2, 1}, {5, 1}), 0.0, 1e-15);
  EXPECT_NEAR(dpp::angular_deviation(o, {2, 2}, {2, 1}), kPi / 4, 1e-15);
}

TEST(AngularDeviation, DegenerateSegmentCountsAndReturnsZero) {
  dpp::reset_degenerate_segment_count();
  EXPECT_EQ(dpp::angular_deviation({1, 1}, {1, 1}, {3, 4}), 0.0);
  EXPECT_EQ(dpp::degenerate_segment_count(), 1u);
}

TEST(PairwiseAngles, MatchesScalarVersion) {
  std::mt19937_64 rng(1);
  const Tensor e = random_tensor({6, 2}, rng, -5, 5);
  const Tensor a = dpp::pairwise_angles(ad::constant(e)).value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const double expected = i == j ? 0.0 : dpp::angular_deviation({0, 0}, {e.at(i, 0), e.at(i, 1)}, {e.at(j, 0), e.at(j, 1)});
      EXPECT_NEAR(a.at(i, j), expected, 1e-12);
    }
}

TEST(InnerValues, HandComputedCompound) {
  // Two one-step trajectories from the origin: (1, 0) and (0, 1).
  const Tensor t = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  const Tensor v = dpp::inner_values(ad::constant(t), {0, 0}, dpp::KernelKind::compound).value();
  EXPECT_EQ(v.at(0, 0), 0.0);
  EXPECT_NEAR(v.at(0, 1), kPi / 2 + 2.0, 1e-15);
  EXPECT_EQ(v.at(0, 1), v.at(1, 0));
  const Tensor d = dpp::inner_values(ad::constant(t), {0, 0}, dpp::KernelKind::distance_only).value();
  EXPECT_EQ(d.at(0, 1), 2.0);
  const Tensor a = dpp::inner_values(ad::constant(t), {0, 0}, dpp::KernelKind::angle_only).value();
  EXPECT_NEAR(a.at(0, 1), kPi / 2, 1e-15);
}

TEST(InnerValues, AngleUsesOnlyEndpoints) {
  // Different intermediate points, same endpoints: angle term unchanged.
  const Tensor t1 = Tensor::matrix({{1, 0, 2, 0}, {0, 1, 0, 2}});
  const Tensor t2 = Tensor::matrix({{5, 5, 2, 0}, {-3, 1, 0, 2}});
  const Tensor a1 = dpp::inner_values(ad::constant(t1), {0, 0}, dpp::KernelKind::angle_only).value();
  const Tensor a2 = dpp::inner_values(ad::constant(t2), {0, 0}, dpp::KernelKind::angle_only).value();
  EXPECT_EQ(a1.at(0, 1), a2.at(0, 1));
}

TEST(Kernel, HandComputedEntries) {
  const Tensor t = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  const dpp::DppKernelMatrix k = dpp::build_kernel(ad::constant(t), {0, 0}, dpp::KernelKind::compound, 0.5);
  EXPECT_DOUBLE_EQ(k.entries.value().at(0, 0), 1.0 + dpp::kJitter);
  EXPECT_DOUBLE_EQ(k.entries.value().at(0, 1), std::exp(-0.5 * (kPi / 2 + 2.0)));
}

TEST(Kernel, RejectsBadArguments) {
  const Tensor t = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_THROW(dpp::build_kernel(ad::constant(t), {0, 0}, dpp::KernelKind::compound, 0.0), std::invalid_argument);
  EXPECT_THROW(dpp::build_kernel(ad::constant(Tensor::matrix({{1.0, 0.0}})), {0, 0},
                                 dpp::KernelKind::compound, 1.0),
               std::invalid_argument);
  EXPECT_THROW(dpp::inner_values(ad::constant(Tensor({3, 3})), {0, 0}, dpp::KernelKind::compound), ShapeError);
}

TEST(Kernel, SymmetricUnitDiagonalPsd) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 11;
    const Tensor t = random_set(n, 6, rng);
    const dpp::DppKernelMatrix k =
        dpp::build_calibrated_kernel(ad::constant(t), {0.3, -0.2}, dpp::KernelKind::compound);
    const Tensor& l = k.entries.value();
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(l.at(i, i), 1.0 + dpp::kJitter);
      for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(l.at(i, j), l.at(j, i));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(l.mat());
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(Alpha, ReciprocalOfMeanInnerValue) {
  const Tensor t = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  // Mean over the 4 ordered pairs of {0, 2, 2, 0}.
  EXPECT_DOUBLE_EQ(dpp::calibrate_alpha(ad::constant(t), {0, 0}, dpp::KernelKind::distance_only), 1.0);
  EXPECT_DOUBLE_EQ(
      dpp::calibrate_alpha(ad::constant(t), {0, 0}, dpp::KernelKind::distance_only, dpp::AlphaMode::literal_mean),
      1.0);
  const Tensor t2 = Tensor::matrix({{2.0, 0.0}, {0.0, 2.0}});
  EXPECT_DOUBLE_EQ(dpp::calibrate_alpha(ad::constant(t2), {0, 0}, dpp::KernelKind::distance_only), 0.25);
}

TEST(Alpha, FloorForCollapsedSet) {
  const Tensor t = Tensor::matrix({{1.0, 1.0}, {1.0, 1.0}});
  EXPECT_EQ(dpp::calibrate_alpha(ad::constant(t), {0, 0}, dpp::KernelKind::distance_only), 1.0 / dpp::kAlphaFloor);
}

TEST(Alpha, DistanceKernelScaleInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor t = random_set(5, 6, rng);
    Tensor scaled = t;
    const double s = std::ldexp(1.0, trial % 7 - 3);  // powers of two keep the arithmetic exact
    scaled.scale_(s);
    const Tensor a = dpp::build_calibrated_kernel(ad::constant(t), {0, 0}, dpp::KernelKind::distance_only)
                         .entries.value();
    const Tensor b = dpp::build_calibrated_kernel(ad::constant(scaled), {0, 0}, dpp::KernelKind::distance_only)
                         .entries.value();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(std::abs(a[i] - b[i]), 1e-12);
  }
}

TEST(Alpha, NoGradientThroughBandwidth) {
  // With alpha held fixed, the loss gradient equals that of build_kernel at
  // the same alpha: calibration must not contribute a path.
  std::mt19937_64 rng(4);
  const Tensor t = random_set(4, 3, rng, 2.0);
  const double alpha = dpp::calibrate_alpha(ad::constant(t), {0, 0}, dpp::KernelKind::compound);
  Var a = ad::parameter(t), b = ad::parameter(t);
  ad::backward(dpp::dpp_loss(dpp::build_calibrated_kernel(a, {0, 0}, dpp::KernelKind::compound).entries));
  ad::backward(dpp::dpp_loss(dpp::build_kernel(b, {0, 0}, dpp::KernelKind::compound, alpha).entries));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(a.grad()[i], b.grad()[i]);
}

TEST(Oracle, SubsetProbabilitiesSumToOne) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const Tensor l = random_psd(n, rng);
    double total = 0.0;
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
      std::vector<std::size_t> b;
      for (std::size_t i = 0; i < n; ++i)
        if (mask >> i & 1) b.push_back(i);
      total += dpp::oracle_subset_probability(l, b);
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(Oracle, SubsetProbabilityMatchesLaplaceDeterminants) {
  std::mt19937_64 rng(6);
  const Tensor l = random_psd(5, rng);
  std::vector<std::size_t> all = {0, 1, 2, 3, 4};
  std::vector<std::vector<double>> shifted = rows_of(l, all);
  for (std::size_t i = 0; i < 5; ++i) shifted[i][i] += 1.0;
  const double z = laplace_det(shifted);
  const std::vector<std::size_t> b = {1, 3, 4};
  EXPECT_NEAR(dpp::oracle_subset_probability(l, b), laplace_det(rows_of(l, b)) / z, 1e-13);
  EXPECT_NEAR(dpp::oracle_subset_probability(l, {}), 1.0 / z, 1e-13);
  EXPECT_THROW(dpp::oracle_subset_probability(l, {7}), std::out_of_range);
}

TEST(Oracle, ExpectedCardinalityMatchesTraceFormula) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor l = random_psd(2 + trial % 7, rng);
    EXPECT_NEAR(dpp::oracle_expected_cardinality(l), dpp::expected_cardinality(l), 1e-10);
  }
}

TEST(Oracle, DiagonalKernelCardinality) {
  // Independent items: E|A| = sum l_i / (1 + l_i).
  Tensor l({3, 3});
  l.at(0, 0) = 1.0;
  l.at(1, 1) = 3.0;
  l.at(2, 2) = 0.0;
  EXPECT_NEAR(dpp::expected_cardinality(l), 0.5 + 0.75, 1e-15);
  EXPECT_NEAR(dpp::oracle_expected_cardinality(l), 1.25, 1e-15);
}

TEST(Oracle, PairInclusionFromMarginalKernel) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const Tensor l = random_psd(n, rng);
    const Tensor k = dpp::marginal_kernel(l);
    for (std::size_t a = 0; a < n; ++a) {
      EXPECT_NEAR(dpp::oracle_inclusion_probability(l, {a}), k.at(a, a), 1e-10);
      for (std::size_t b = a + 1; b < n; ++b) {
        EXPECT_NEAR(dpp::oracle_inclusion_probability(l, {a, b}), k.at(a, a) * k.at(b, b) - k.at(a, b) * k.at(a, b),
                    1e-10);
      }
    }
  }
}

TEST(Oracle, SizeLimit) {
  std::mt19937_64 rng(9);
  const Tensor l = random_psd(dpp::kOracleMaxItems + 1, rng);
  EXPECT_THROW(dpp::oracle_expected_cardinality(l), std::invalid_argument);
}

TEST(Loss, IsNegatedExpectedCardinality) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor l = random_psd(2 + trial % 7, rng);
    EXPECT_NEAR(dpp::dpp_loss(ad::constant(l)).item(), -dpp::oracle_expected_cardinality(l), 1e-10);
  }
}

TEST(Loss, BoundsForKernels) {
  // Identity kernel: every item kept with probability 1/2.
  EXPECT_NEAR(dpp::dpp_loss(ad::constant(Tensor::identity(4))).item(), -2.0, 1e-14);
  // All-ones kernel is rank one: E|A| = N / (N + 1).
  Tensor ones({4, 4});
  for (double& v : ones.data()) v = 1.0;
  EXPECT_NEAR(dpp::dpp_loss(ad::constant(ones)).item(), -0.8, 1e-14);
}

TEST(Loss, SpreadingSetLowersLoss) {
  const Tensor tight = Tensor::matrix({{1.0, 0.0}, {1.0, 0.1}, {1.0, -0.1}});
  const Tensor wide = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}, {0.0, -1.0}});
  auto loss = [](const Tensor& t) {
    return dpp::dpp_loss(dpp::build_kernel(ad::constant(t), {0, 0}, dpp::KernelKind::compound, 1.0).entries).item();
  };
  EXPECT_LT(loss(wide), loss(tight));
}

TEST(Loss, GradientThroughInverse) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor l = random_psd(2 + trial % 7, rng);
    const double err = gradient_error([](const std::vector<Var>& x) { return dpp::dpp_loss(x[0]); }, {l});
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Loss, GradientThroughCompoundKernel) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor t = random_set(3 + trial % 5, 3, rng, 2.0);
    const double err = gradient_error(
        [](const std::vector<Var>& x) {
          return dpp::dpp_loss(dpp::build_kernel(x[0], {0.1, 0.2}, dpp::KernelKind::compound, 0.3).entries);
        },
        {t});
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Loss, NonSquareRejected) { EXPECT_THROW(dpp::dpp_loss(ad::constant(Tensor({2, 3}))), ShapeError); }

TEST(Names, RoundTrip) {
  for (auto k : {dpp::KernelKind::compound, dpp::KernelKind::distance_only, dpp::KernelKind::angle_only})
    EXPECT_EQ(dpp::parse_kernel_kind(dpp::to_string(k)), k);
  for (auto m : {dpp::AlphaMode::reciprocal_mean, dpp::AlphaMode::literal_mean})
    EXPECT_EQ(dpp::parse_alpha_mode(dpp::to_string(m)), m);
  EXPECT_THROW(dpp::parse_kernel_kind("rbf"), std::invalid_argument);
}
