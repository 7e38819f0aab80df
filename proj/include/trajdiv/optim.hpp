#pragma once

#include <cstdint>

#include "trajdiv/nn.hpp"

namespace trajdiv::optim {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global-norm gradient clipping; disabled when <= 0.
  double clip_norm = 0.0;
};

/// Adam with bias correction. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(nn::ParameterList params, AdamOptions options);

  /// Applies one update. Throws NumericalError naming the first parameter
  /// whose gradient holds a NaN or Inf; no parameter is modified in that case.
  void step();
  void zero_grad() const { params_.zero_grad(); }

  std::uint64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  nn::ParameterList params_;
  AdamOptions options_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace trajdiv::optim
