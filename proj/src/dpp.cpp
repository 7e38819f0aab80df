#include "trajdiv/dpp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trajdiv::dpp {
namespace {

std::atomic<std::uint64_t> g_degenerate{0};

void check_square(const Tensor& k, const char* who) {
  if (k.rank() != 2 || k.rows() != k.cols()) throw ShapeError(std::string(who) + ": kernel must be square");
}

RowMatrix principal_submatrix(const Tensor& k, const std::vector<std::size_t>& idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  RowMatrix sub(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) sub(i, j) = k.at(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  return sub;
}

double det_of(const RowMatrix& m) { return m.rows() == 0 ? 1.0 : m.determinant(); }

double normalizer(const Tensor& k) {
  const RowMatrix shifted = k.mat() + RowMatrix::Identity(k.mat().rows(), k.mat().cols());
  return shifted.determinant();
}

}  // namespace

std::string to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::compound:
      return "compound";
    case KernelKind::distance_only:
      return "distance";
    case KernelKind::angle_only:
      return "angle";
  }
  return "unknown";
}

KernelKind parse_kernel_kind(std::string_view name) {
  for (KernelKind k : {KernelKind::compound, KernelKind::distance_only, KernelKind::angle_only}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown kernel kind '" + std::string(name) + "'");
}

std::string to_string(AlphaMode mode) {
  return mode == AlphaMode::reciprocal_mean ? "reciprocal-mean" : "literal-mean";
}

AlphaMode parse_alpha_mode(std::string_view name) {
  if (name == "reciprocal-mean") return AlphaMode::reciprocal_mean;
  if (name == "literal-mean") return AlphaMode::literal_mean;
  throw std::invalid_argument("unknown alpha mode '" + std::string(name) + "'");
}

std::uint64_t degenerate_segment_count() { return g_degenerate.load(); }
void reset_degenerate_segment_count() { g_degenerate.store(0); }

double angular_deviation(scene::Point2 origin, scene::Point2 a, scene::Point2 b) {
  const scene::Point2 u = a - origin, v = b - origin;
  if (scene::norm(u) < kDegenerateEps || scene::norm(v) < kDegenerateEps) {
    g_degenerate.fetch_add(1);
    return 0.0;
  }
  const double c = (u.x * v.x + u.y * v.y) / (scene::norm(u) * scene::norm(v));
  return std::acos(std::clamp(c, -1.0, 1.0));
}

ad::Var pairwise_angles(const ad::Var& endpoints) {
  const Shape& s = endpoints.shape();
  if (s.size() != 2 || s[1] != 2) throw ShapeError("pairwise_angles: expected Nx2, got " + shape_str(s));
  const std::size_t n = s[0];
  const auto& e = endpoints.value();
  Tensor out({n, n});
  // d theta_ij / d e_i, stored per ordered pair.
  auto dtheta = std::make_shared<std::vector<scene::Point2>>(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const scene::Point2 u{e[2 * i], e[2 * i + 1]}, v{e[2 * j], e[2 * j + 1]};
      const double nu = scene::norm(u), nv = scene::norm(v);
      if (nu < kDegenerateEps || nv < kDegenerateEps) {
        if (i < j) g_degenerate.fetch_add(1);
        continue;
      }
      // The clamped arccos of the normalized dot product, evaluated in the
      // equivalent atan2 form so the gradient stays finite near 0 and pi.
      const double cr = u.x * v.y - u.y * v.x;
      const double dt = u.x * v.x + u.y * v.y;
      out.at(i, j) = std::atan2(std::abs(cr), dt);
      // For theta = atan2(|u x v|, u.v): d theta / d u = -sign(u x v) * perp(u) / |u|^2
      // with perp(u) = (-u_y, u_x).
      const double sgn = cr > 0 ? 1.0 : (cr < 0 ? -1.0 : 0.0);
      const double inv = 1.0 / (nu * nu);
      (*dtheta)[i * n + j] = {sgn * u.y * inv, -sgn * u.x * inv};
    }
  }
  return ad::make_op(std::move(out), {endpoints}, "pairwise_angles", [endpoints, dtheta, n](ad::Node& self) {
    Tensor g(endpoints.shape());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        // theta_ij appears at (i, j) and (j, i); both depend on e_i through
        // the same derivative.
        const double w = self.grad.at(i, j) + self.grad.at(j, i);
        g[2 * i] += w * (*dtheta)[i * n + j].x;
        g[2 * i + 1] += w * (*dtheta)[i * n + j].y;
      }
    }
    ad::accumulate_grad(endpoints, std::move(g));
  });
}

ad::Var pairwise_sq_distances(const ad::Var& rows) {
  const Shape& s = rows.shape();
  if (s.size() != 2) throw ShapeError("pairwise_sq_distances: expected NxD, got " + shape_str(s));
  const std::size_t n = s[0], d = s[1];
  const auto& x = rows.value();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x[i * d + k] - x[j * d + k];
        acc += diff * diff;
      }
      out.at(i, j) = out.at(j, i) = acc;
    }
  return ad::make_op(std::move(out), {rows}, "pairwise_sq_distances", [rows, n, d](ad::Node& self) {
    const auto& x = rows.value();
    Tensor g(rows.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = 2.0 * (self.grad.at(i, j) + self.grad.at(j, i));
        for (std::size_t k = 0; k < d; ++k) g[i * d + k] += w * (x[i * d + k] - x[j * d + k]);
      }
    ad::accumulate_grad(rows, std::move(g));
  });
}

ad::Var inner_values(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind) {
  const Shape& s = trajectories.shape();
  if (s.size() != 2 || s[1] < 2 || s[1] % 2 != 0) {
    throw ShapeError("inner_values: expected N x (2*T_f), got " + shape_str(s));
  }
  ad::Var angles, dists;
  if (kind != KernelKind::distance_only) {
    const ad::Var ends = ad::slice(trajectories, 1, s[1] - 2, s[1]);
    const ad::Var rel = ad::sub(ends, ad::constant(Tensor::vector({past_endpoint.x, past_endpoint.y})));
    angles = pairwise_angles(rel);
  }
  if (kind != KernelKind::angle_only) dists = pairwise_sq_distances(trajectories);
  if (kind == KernelKind::distance_only) return dists;
  if (kind == KernelKind::angle_only) return angles;
  return ad::add(angles, dists);
}

DppKernelMatrix build_kernel(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind,
                             double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("kernel bandwidth alpha must be positive");
  const std::size_t n = trajectories.shape().at(0);
  if (n < 2) throw std::invalid_argument("a DPP kernel needs at least two trajectories");
  const ad::Var inner = inner_values(trajectories, past_endpoint, kind);
  Tensor jitter = Tensor::identity(n);
  jitter.scale_(kJitter);
  DppKernelMatrix k;
  k.entries = ad::add(ad::exp(ad::scale(inner, -alpha)), ad::constant(std::move(jitter)));
  k.alpha = alpha;
  k.kind = kind;
  return k;
}

double calibrate_alpha(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind, AlphaMode mode) {
  const std::size_t n = trajectories.shape().at(0);
  if (n < 2) throw std::invalid_argument("alpha calibration needs at least two trajectories");
  const ad::Var detached = ad::constant(trajectories.value());
  const Tensor inner = inner_values(detached, past_endpoint, kind).value();
  double m = 0.0;
  for (double v : inner.data()) m += v;
  m /= static_cast<double>(n * n);
  if (mode == AlphaMode::literal_mean) return std::max(m, kAlphaFloor);
  return 1.0 / std::max(m, kAlphaFloor);
}

DppKernelMatrix build_calibrated_kernel(const ad::Var& trajectories, scene::Point2 past_endpoint, KernelKind kind,
                                        AlphaMode mode) {
  return build_kernel(trajectories, past_endpoint, kind, calibrate_alpha(trajectories, past_endpoint, kind, mode));
}

ad::Var dpp_loss(const ad::Var& kernel) {
  const Shape& s = kernel.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("dpp_loss: kernel must be square, got " + shape_str(s));
  const std::size_t n = s[0];
  const ad::Var shifted = ad::add(kernel, ad::constant(Tensor::identity(n)));
  // -trace[I - (L + I)^{-1}] = trace[(L + I)^{-1}] - N
  return ad::add_scalar(ad::trace(ad::inverse(shifted)), -static_cast<double>(n));
}

double oracle_subset_probability(const Tensor& kernel, const std::vector<std::size_t>& subset) {
  check_square(kernel, "oracle_subset_probability");
  const std::size_t n = kernel.rows();
  if (n > kOracleMaxItems) throw std::invalid_argument("oracle limited to 12 items");
  for (std::size_t i : subset) {
    if (i >= n) throw std::out_of_range("subset index " + std::to_string(i) + " out of range for N=" + std::to_string(n));
  }
  return det_of(principal_submatrix(kernel, subset)) / normalizer(kernel);
}

double oracle_expected_cardinality(const Tensor& kernel) {
  check_square(kernel, "oracle_expected_cardinality");
  const std::size_t n = kernel.rows();
  if (n > kOracleMaxItems) throw std::invalid_argument("oracle limited to 12 items");
  const double z = normalizer(kernel);
  double expectation = 0.0;
  std::vector<std::size_t> idx;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    idx.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) idx.push_back(i);
    expectation += static_cast<double>(idx.size()) * det_of(principal_submatrix(kernel, idx)) / z;
  }
  return expectation;
}

double oracle_inclusion_probability(const Tensor& kernel, const std::vector<std::size_t>& items) {
  check_square(kernel, "oracle_inclusion_probability");
  const std::size_t n = kernel.rows();
  if (n > kOracleMaxItems) throw std::invalid_argument("oracle limited to 12 items");
  std::uint32_t required = 0;
  for (std::size_t i : items) {
    if (i >= n) throw std::out_of_range("item index out of range");
    required |= 1u << i;
  }
  const double z = normalizer(kernel);
  double p = 0.0;
  std::vector<std::size_t> idx;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if ((mask & required) != required) continue;
    idx.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) idx.push_back(i);
    p += det_of(principal_submatrix(kernel, idx)) / z;
  }
  return p;
}

double expected_cardinality(const Tensor& kernel) {
  check_square(kernel, "expected_cardinality");
  const auto n = kernel.mat().rows();
  const RowMatrix inv = (kernel.mat() + RowMatrix::Identity(n, n)).inverse();
  return static_cast<double>(n) - inv.trace();
}

Tensor marginal_kernel(const Tensor& kernel) {
  check_square(kernel, "marginal_kernel");
  const auto n = kernel.mat().rows();
  const RowMatrix shifted = kernel.mat() + RowMatrix::Identity(n, n);
  if (!kernel.all_finite()) throw NumericalError("marginal_kernel: non-finite kernel");
  return Tensor::from_matrix(shifted.partialPivLu().solve(RowMatrix(kernel.mat())));
}

}  // namespace trajdiv::dpp
