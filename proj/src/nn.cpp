#include "trajdiv/nn.hpp"

#include <cmath>

namespace trajdiv::nn {

void ParameterList::append(const ParameterList& other) {
  params_.insert(params_.end(), other.params_.begin(), other.params_.end());
  buffers_.insert(buffers_.end(), other.buffers_.begin(), other.buffers_.end());
}

void ParameterList::zero_grad() const {
  for (const auto& p : params_) p.var->zero_grad();
}

void ParameterList::set_requires_grad(bool flag) const {
  for (const auto& p : params_) p.var->set_requires_grad(flag);
}

void ParameterList::fill(double value) const {
  for (const auto& p : params_) p.var->mutable_value().fill(value);
}

std::size_t ParameterList::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->size();
  return n;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng) : in_(in), out_(out) {
  weight = ad::parameter(init_uniform({in, out}, in, rng));
  bias = ad::parameter(init_uniform({out}, in, rng));
}

Var Linear::forward(const Var& x) const { return ad::add(ad::matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParameterList& out) {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

GruCell::GruCell(std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng)
    : input_(input_size), hidden_(hidden_size) {
  if (input_ > 0) w_ih = ad::parameter(init_uniform({input_, 3 * hidden_}, hidden_, rng));
  w_hh = ad::parameter(init_uniform({hidden_, 3 * hidden_}, hidden_, rng));
  b_ih = ad::parameter(init_uniform({3 * hidden_}, hidden_, rng));
  b_hh = ad::parameter(init_uniform({3 * hidden_}, hidden_, rng));
}

// gi holds the input-side pre-activations [r | z | n] (Bx3H, or a 3H row
// when the input is zero).
Var GruCell::combine(const Var& gi, const Var& h) const {
  const std::size_t hs = hidden_;
  const Var gh = ad::add(ad::matmul(h, w_hh), b_hh);
  auto part = [hs](const Var& v, std::size_t k) {
    return v.shape().size() == 1 ? ad::slice(v, 0, k * hs, (k + 1) * hs) : ad::slice(v, 1, k * hs, (k + 1) * hs);
  };
  // gh is BxH*3; gi may be a 1-D row, which broadcasts as a bias.
  const Var r = ad::sigmoid(ad::add(part(gh, 0), part(gi, 0)));
  const Var z = ad::sigmoid(ad::add(part(gh, 1), part(gi, 1)));
  const Var n = ad::tanh(ad::add(ad::mul(r, part(gh, 2)), part(gi, 2)));
  // h' = (1 - z) * n + z * h = n + z * (h - n)
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

Var GruCell::step(const Var& x, const Var& h) const {
  if (input_ == 0) return step(h);
  return combine(ad::add(ad::matmul(x, w_ih), b_ih), h);
}

Var GruCell::step(const Var& h) const { return combine(b_ih, h); }

void GruCell::collect(const std::string& prefix, ParameterList& out) {
  if (input_ > 0) out.add(prefix + ".w_ih", w_ih);
  out.add(prefix + ".w_hh", w_hh);
  out.add(prefix + ".b_ih", b_ih);
  out.add(prefix + ".b_hh", b_hh);
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
               std::size_t padding, std::mt19937_64& rng)
    : stride_(stride), padding_(padding) {
  const std::size_t fan_in = in_channels * kernel * kernel;
  weight = ad::parameter(init_uniform({out_channels, in_channels, kernel, kernel}, fan_in, rng));
  bias = ad::parameter(init_uniform({out_channels}, fan_in, rng));
}

Var Conv2d::forward(const Var& x) const { return ad::conv2d(x, weight, bias, stride_, padding_); }

void Conv2d::collect(const std::string& prefix, ParameterList& out) {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

BatchNorm::BatchNorm(std::size_t features) {
  gamma = ad::parameter(Tensor({features}, 1.0));
  beta = ad::parameter(Tensor({features}, 0.0));
  state.running_mean = Tensor({features}, 0.0);
  state.running_var = Tensor({features}, 1.0);
}

Var BatchNorm::forward(const Var& x, bool training) { return ad::batch_norm(x, gamma, beta, state, training); }

void BatchNorm::collect(const std::string& prefix, ParameterList& out) {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
  out.add_buffer(prefix + ".running_mean", state.running_mean);
  out.add_buffer(prefix + ".running_var", state.running_var);
}

}  // namespace trajdiv::nn
