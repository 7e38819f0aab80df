#pragma once

// Determinantal point process machinery over sets of predicted futures:
// trajectory kernels, bandwidth calibration, the expected-cardinality loss,
// and brute-force enumeration oracles for the DPP identities.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "trajdiv/autodiff.hpp"
#include "trajdiv/scene.hpp"

namespace trajdiv::dpp {

enum class KernelKind { compound, distance_only, angle_only };
std::string to_string(KernelKind kind);
KernelKind parse_kernel_kind(std::string_view name);

enum class AlphaMode {
  reciprocal_mean,  // alpha = 1 / mean inner value
  literal_mean,     // alpha = mean inner value
};
std::string to_string(AlphaMode mode);
AlphaMode parse_alpha_mode(std::string_view name);

inline constexpr double kJitter = 1e-8;
inline constexpr double kDegenerateEps = 1e-8;
inline constexpr double kAlphaFloor = 1e-8;

/// Counts degenerate (zero-length) segments met by angular_deviation.
std::uint64_t degenerate_segment_count();
void reset_degenerate_segment_count();

/// Un-oriented angle in [0, pi] between the segments origin->a and origin->b.
/// A segment shorter than kDegenerateEps yields 0 and bumps the counter.
double angular_deviation(scene::Point2 origin, scene::Point2 a, scene::Point2 b);

/// N x N matrix of angular deviations between endpoints (rows of an Nx2 Var,
/// already relative to the past endpoint). Differentiable.
ad::Var pairwise_angles(const ad::Var& endpoints);
/// N x N matrix of squared Euclidean distances between the rows of an NxD Var.
ad::Var pairwise_sq_distances(const ad::Var& rows);

/// Inner values theta_ij + ||S_i - S_j||^2 (or one of the two terms) of a
/// trajectory set given as an N x (2*T_f) Var of agent- or world-frame
/// coordinates, row n holding (x_1, y_1, ..., x_T, y_T).
ad::Var inner_values(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind);

struct DppKernelMatrix {
  ad::Var entries;
  double jitter = kJitter;
  double alpha = 1.0;
  KernelKind kind = KernelKind::compound;
};

/// L_ij = exp(-alpha * inner_ij) + jitter * [i == j]. Throws
/// std::invalid_argument when alpha <= 0 or N < 2.
DppKernelMatrix build_kernel(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind,
                             double alpha);

/// Bandwidth from the mean of the inner values over all N^2 ordered pairs
/// (diagonal included). Uses values only: no gradient flows through alpha.
double calibrate_alpha(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind,
                       AlphaMode mode = AlphaMode::reciprocal_mean);

/// Builds the kernel with a calibrated alpha.
DppKernelMatrix build_calibrated_kernel(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind,
                                        AlphaMode mode = AlphaMode::reciprocal_mean);

/// Negated expected cardinality, -trace[I - (L + I)^{-1}].
ad::Var dpp_loss(const ad::Var& kernel);

// Oracles. Plain-value routines used to validate the identities above.

inline constexpr std::size_t kOracleMaxItems = 12;

/// det(L_B) / det(L + I). Throws std::out_of_range for a bad index.
double oracle_subset_probability(const Tensor& kernel, const std::vector<std::size_t>& subset);
/// sum_B |B| P[A = B] by enumerating all 2^N subsets.
double oracle_expected_cardinality(const Tensor& kernel);
/// Probability that the random set contains every item of `items`, by enumeration.
double oracle_inclusion_probability(const Tensor& kernel, const std::vector<std::size_t>& items);
/// trace[I - (L + I)^{-1}] evaluated directly.
double expected_cardinality(const Tensor& kernel);

/// K = (L + I)^{-1} L.
Tensor marginal_kernel(const Tensor& kernel);

}  // namespace trajdiv::dpp
