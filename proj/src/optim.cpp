#include "trajdiv/optim.hpp"

#include <cmath>

namespace trajdiv::optim {

Adam::Adam(nn::ParameterList params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_.params()) {
    m_.emplace_back(p.var->shape());
    v_.emplace_back(p.var->shape());
  }
}

void Adam::step() {
  const auto& ps = params_.params();
  double norm_sq = 0.0;
  for (const auto& p : ps) {
    const Tensor& g = p.var->grad();
    if (g.empty()) continue;
    if (!g.all_finite()) throw NumericalError("non-finite gradient for parameter '" + p.path + "'");
    for (double x : g.data()) norm_sq += x * x;
  }
  double clip = 1.0;
  if (options_.clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > options_.clip_norm) clip = options_.clip_norm / norm;
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const Tensor& g = ps[k].var->grad();
    if (g.empty()) continue;
    Tensor& w = ps[k].var->mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * gi;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace trajdiv::optim
