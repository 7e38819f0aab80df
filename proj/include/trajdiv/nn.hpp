#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "trajdiv/autodiff.hpp"

namespace trajdiv::nn {

using ad::Var;

/// Named references to the trainable parameters and non-trainable buffers
/// of a model. Holds raw pointers: the owning model must outlive the list
/// and must not move.
class ParameterList {
 public:
  struct Param {
    std::string path;
    Var* var;
  };
  struct Buffer {
    std::string path;
    Tensor* tensor;
  };

  void add(std::string path, Var& v) { params_.push_back({std::move(path), &v}); }
  void add_buffer(std::string path, Tensor& t) { buffers_.push_back({std::move(path), &t}); }
  void append(const ParameterList& other);

  const std::vector<Param>& params() const { return params_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  void zero_grad() const;
  void set_requires_grad(bool flag) const;
  void fill(double value) const;
  std::size_t count() const;

 private:
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

  /// x: BxIn -> BxOut.
  Var forward(const Var& x) const;
  void collect(const std::string& prefix, ParameterList& out);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Var weight;  // In x Out
  Var bias;    // Out

 private:
  std::size_t in_ = 0, out_ = 0;
};

/// Gated recurrent unit cell (reset/update/candidate gates).
class GruCell {
 public:
  GruCell() = default;
  /// input_size may be 0 for a cell driven only by its hidden state.
  GruCell(std::size_t input_size, std::size_t hidden_size, std::mt19937_64& rng);

  Var step(const Var& x, const Var& h) const;
  /// Step with an all-zero input.
  Var step(const Var& h) const;
  void collect(const std::string& prefix, ParameterList& out);

  std::size_t hidden_size() const { return hidden_; }
  std::size_t input_size() const { return input_; }

  Var w_ih, w_hh, b_ih, b_hh;

 private:
  Var combine(const Var& gi, const Var& h) const;
  std::size_t input_ = 0, hidden_ = 0;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, std::mt19937_64& rng);

  Var forward(const Var& x) const;
  void collect(const std::string& prefix, ParameterList& out);

  Var weight, bias;

 private:
  std::size_t stride_ = 1, padding_ = 0;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t features);

  Var forward(const Var& x, bool training);
  void collect(const std::string& prefix, ParameterList& out);

  Var gamma, beta;
  ad::BatchNormState state;
};

}  // namespace trajdiv::nn
