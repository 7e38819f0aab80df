#pragma once

// Training objectives: the cVAE bound, the drivable-area layout penalty and
// the lambda-weighted diversity sampler objective.

#include "trajdiv/dpp.hpp"
#include "trajdiv/forecaster.hpp"
#include "trajdiv/scene.hpp"

namespace trajdiv::losses {

using ad::Var;

/// Scalar Vars; components not used by a loss are undefined.
struct LossBreakdown {
  Var total;
  Var reconstruction;
  Var kl;
  Var dpp;
  Var layout;
  double lambda = 0.0;
  double beta = 0.0;
};

/// 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1), summed over latent dims and
/// averaged over the batch rows.
Var kl_divergence(const model::LatentDistribution& q);

/// reconstruction = mean squared error over every coordinate,
/// total = reconstruction + beta * kl. Throws ShapeError on mismatched shapes.
LossBreakdown cvae_loss(const Var& predicted, const Tensor& truth, const model::LatentDistribution& q,
                        double beta = 1.0);

/// Sum of chamfer values at every point of an N x (2 T_f) world-frame set,
/// divided by N * T_f when `normalize` is set.
Var layout_loss(const Var& world_set, const scene::ChamferField& field, bool normalize = true);

struct DsfLossOptions {
  double lambda = 0.5;
  dpp::KernelKind kernel = dpp::KernelKind::compound;
  dpp::AlphaMode alpha_mode = dpp::AlphaMode::reciprocal_mean;
  bool normalize_layout = true;
};

/// total = lambda * dpp + (1 - lambda) * layout. Throws std::invalid_argument
/// when lambda lies outside [0, 1].
LossBreakdown combine_dsf(const Var& dpp_term, const Var& layout_term, double lambda);

/// Diversity and layout terms of one scene's world-frame set.
LossBreakdown dsf_loss(const Var& world_set, scene::Point2 past_endpoint, const scene::ChamferField& field,
                       const DsfLossOptions& options);

}  // namespace trajdiv::losses
