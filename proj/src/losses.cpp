#include "trajdiv/losses.hpp"

#include <stdexcept>

namespace trajdiv::losses {

Var kl_divergence(const model::LatentDistribution& q) {
  const std::size_t rows = q.mean.shape().at(0);
  const Var per_entry = ad::sub(ad::add(ad::square(q.mean), ad::exp(q.log_var)), ad::add_scalar(q.log_var, 1.0));
  return ad::scale(ad::sum(per_entry), 0.5 / static_cast<double>(rows));
}

LossBreakdown cvae_loss(const Var& predicted, const Tensor& truth, const model::LatentDistribution& q, double beta) {
  if (predicted.shape() != truth.shape()) {
    throw ShapeError("cvae_loss: prediction " + shape_str(predicted.shape()) + " vs truth " +
                     shape_str(truth.shape()));
  }
  if (q.mean.shape() != q.log_var.shape() || q.mean.shape().at(0) != truth.shape().at(0)) {
    throw ShapeError("cvae_loss: latent distribution does not match the batch");
  }
  LossBreakdown out;
  out.beta = beta;
  out.reconstruction = ad::mean(ad::square(ad::sub(predicted, ad::constant(truth))));
  out.kl = kl_divergence(q);
  out.total = ad::add(out.reconstruction, ad::scale(out.kl, beta));
  return out;
}

Var layout_loss(const Var& world_set, const scene::ChamferField& field, bool normalize) {
  const Shape& s = world_set.shape();
  if (s.size() != 2 || s[1] % 2 != 0) throw ShapeError("layout_loss: expected N x 2T, got " + shape_str(s));
  const std::size_t points = s[0] * s[1] / 2;
  const Var values = scene::sample_field(field, ad::reshape(world_set, {points, 2}));
  const Var total = ad::sum(values);
  return normalize ? ad::scale(total, 1.0 / static_cast<double>(points)) : total;
}

LossBreakdown combine_dsf(const Var& dpp_term, const Var& layout_term, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  LossBreakdown out;
  out.lambda = lambda;
  out.dpp = dpp_term;
  out.layout = layout_term;
  // The endpoints drop a term outright so its gradient vanishes exactly.
  if (lambda == 1.0) {
    out.total = ad::scale(dpp_term, 1.0);
  } else if (lambda == 0.0) {
    out.total = ad::scale(layout_term, 1.0);
  } else {
    out.total = ad::add(ad::scale(dpp_term, lambda), ad::scale(layout_term, 1.0 - lambda));
  }
  return out;
}

LossBreakdown dsf_loss(const Var& world_set, scene::Point2 past_endpoint, const scene::ChamferField& field,
                       const DsfLossOptions& options) {
  if (!(options.lambda >= 0.0 && options.lambda <= 1.0)) {
    throw std::invalid_argument("lambda must lie in [0, 1], got " + std::to_string(options.lambda));
  }
  const dpp::DppKernelMatrix kernel =
      dpp::build_calibrated_kernel(world_set, past_endpoint, options.kernel, options.alpha_mode);
  return combine_dsf(dpp::dpp_loss(kernel.entries), layout_loss(world_set, field, options.normalize_layout),
                     options.lambda);
}

}  // namespace trajdiv::losses
