#include "trajdiv/forecaster.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace trajdiv::model {
namespace {

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::concat:
      return "concat";
    case FusionMode::sum:
      return "sum";
    case FusionMode::product:
      return "product";
  }
  return "unknown";
}

FusionMode parse_fusion_mode(std::string_view name) {
  for (FusionMode m : {FusionMode::concat, FusionMode::sum, FusionMode::product}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown fusion mode '" + std::string(name) + "'");
}

std::string to_string(BranchMode mode) {
  switch (mode) {
    case BranchMode::two_branch:
      return "two-branch";
    case BranchMode::diversity_only:
      return "one-branch-diversity";
    case BranchMode::layout_only:
      return "one-branch-layout";
  }
  return "unknown";
}

BranchMode parse_branch_mode(std::string_view name) {
  for (BranchMode m : {BranchMode::two_branch, BranchMode::diversity_only, BranchMode::layout_only}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown branch mode '" + std::string(name) + "'");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"past_len", past_len},
          {"future_len", future_len},
          {"grid_size", grid_size},
          {"d_h", d_h},
          {"d_m", d_m},
          {"d_z", d_z},
          {"n_samples", n_samples},
          {"posterior_hidden", posterior_hidden},
          {"decoder_fc", decoder_fc},
          {"dsf_width", dsf_width},
          {"fusion", to_string(fusion)},
          {"branches", to_string(branches)},
          {"kernel", dpp::to_string(kernel)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.past_len = j.value("past_len", c.past_len);
  c.future_len = j.value("future_len", c.future_len);
  c.grid_size = j.value("grid_size", c.grid_size);
  c.d_h = j.value("d_h", c.d_h);
  c.d_m = j.value("d_m", c.d_m);
  c.d_z = j.value("d_z", c.d_z);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.posterior_hidden = j.value("posterior_hidden", c.posterior_hidden);
  c.decoder_fc = j.value("decoder_fc", c.decoder_fc);
  c.dsf_width = j.value("dsf_width", c.dsf_width);
  if (j.contains("fusion")) c.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
  if (j.contains("branches")) c.branches = parse_branch_mode(j.at("branches").get<std::string>());
  if (j.contains("kernel")) c.kernel = dpp::parse_kernel_kind(j.at("kernel").get<std::string>());
  return c;
}

std::string ModelConfig::backbone_hash() const {
  const nlohmann::json j = {{"past_len", past_len},   {"future_len", future_len},
                            {"grid_size", grid_size}, {"d_h", d_h},
                            {"d_m", d_m},             {"d_z", d_z},
                            {"posterior_hidden", posterior_hidden}, {"decoder_fc", decoder_fc}};
  return fnv_hex(j.dump());
}

std::string ModelConfig::architecture_hash() const { return fnv_hex(to_json().dump()); }

std::vector<double> past_features(std::span<const scene::Point2> agent_past) {
  std::vector<double> f;
  f.reserve(agent_past.size() * kPastFeatures);
  for (std::size_t t = 0; t < agent_past.size(); ++t) {
    const scene::Point2 p = agent_past[t];
    const scene::Point2 d = t == 0 ? scene::Point2{} : p - agent_past[t - 1];
    f.insert(f.end(), {p.x / 10.0, p.y / 10.0, d.x / 2.0, d.y / 2.0});
  }
  return f;
}

Batch make_batch(std::span<const scene::SceneRecord* const> scenes, const ModelConfig& config) {
  const std::size_t b = scenes.size();
  const std::size_t g = config.grid_size;
  Batch batch;
  batch.past = Tensor({b, config.past_len * kPastFeatures});
  batch.maps = Tensor({b, scene::kChannels, g, g});
  batch.future = Tensor({b, 2 * config.future_len});
  for (std::size_t i = 0; i < b; ++i) {
    const scene::SceneRecord& rec = *scenes[i];
    const auto& traj = rec.trajectory;
    if (traj.past_len != config.past_len || traj.future_len() != config.future_len) {
      throw ShapeError("scene " + rec.id + " does not match the configured horizons");
    }
    if (rec.map.height != g || rec.map.width != g) {
      throw ShapeError("scene " + rec.id + " raster is not " + std::to_string(g) + "x" + std::to_string(g));
    }
    std::vector<scene::Point2> agent_past;
    for (scene::Point2 p : traj.past()) agent_past.push_back(rec.map.world_to_agent.apply(p));
    const std::vector<double> f = past_features(agent_past);
    std::copy(f.begin(), f.end(), batch.past.data().begin() + static_cast<std::ptrdiff_t>(i * f.size()));
    for (std::size_t t = 0; t < config.future_len; ++t) {
      const scene::Point2 a = rec.map.world_to_agent.apply(traj.future()[t]);
      batch.future.at(i, 2 * t) = a.x;
      batch.future.at(i, 2 * t + 1) = a.y;
    }
    for (std::size_t ch = 0; ch < scene::kChannels; ++ch)
      for (std::size_t r = 0; r < g; ++r)
        for (std::size_t c = 0; c < g; ++c) batch.maps[((i * scene::kChannels + ch) * g + r) * g + c] = rec.map.at(r, c, ch);
    batch.scenes.push_back(&rec);
  }
  return batch;
}

CvaeModel::CvaeModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  std::mt19937_64 rng(seed);
  past_gru_ = nn::GruCell(kPastFeatures, config.d_h, rng);
  std::size_t in_ch = scene::kChannels;
  for (std::size_t out_ch : kMapChannels) {
    convs_.emplace_back(in_ch, out_ch, 3, 2, 1, rng);
    conv_norms_.emplace_back(out_ch);
    in_ch = out_ch;
  }
  map_fc_ = nn::Linear(in_ch, config.d_m, rng);
  post_fc1_ = nn::Linear(config.d_h + config.d_m + 2 * config.future_len, config.posterior_hidden, rng);
  post_fc2_ = nn::Linear(config.posterior_hidden, 2 * config.d_z, rng);
  dec_gru_ = nn::GruCell(0, config.decoder_hidden(), rng);
  dec_fc1_ = nn::Linear(config.decoder_hidden(), config.decoder_fc, rng);
  dec_fc2_ = nn::Linear(config.decoder_fc, 2, rng);
}

Var CvaeModel::encode_past(const Var& past) const {
  const Shape& s = past.shape();
  if (s.size() != 2 || s[1] != config_.past_len * kPastFeatures) {
    throw ShapeError("encode_past: expected " + std::to_string(config_.past_len) + " past points, got input " +
                     shape_str(s));
  }
  Var h = ad::constant(Tensor({s[0], config_.d_h}));
  for (std::size_t t = 0; t < config_.past_len; ++t) {
    h = past_gru_.step(ad::slice(past, 1, t * kPastFeatures, (t + 1) * kPastFeatures), h);
  }
  return h;
}

Var CvaeModel::encode_map(const Var& maps, bool training) {
  const Shape& s = maps.shape();
  if (s.size() != 4 || s[1] != scene::kChannels || s[2] != config_.grid_size || s[3] != config_.grid_size) {
    throw ShapeError("encode_map: expected Bx3x" + std::to_string(config_.grid_size) + "x" +
                     std::to_string(config_.grid_size) + ", got " + shape_str(s));
  }
  Var x = maps;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    x = ad::leaky_relu(conv_norms_[i].forward(convs_[i].forward(x), training));
  }
  return map_fc_.forward(ad::spatial_mean(x));
}

LatentDistribution CvaeModel::posterior(const Var& h, const Var& m, const Var& future) const {
  const Var in = ad::concat({h, m, ad::scale(future, 0.1)}, 1);
  const Var out = post_fc2_.forward(ad::leaky_relu(post_fc1_.forward(in)));
  LatentDistribution q;
  q.mean = ad::slice(out, 1, 0, config_.d_z);
  q.log_var = ad::clamp(ad::slice(out, 1, config_.d_z, 2 * config_.d_z), -10.0, 10.0);
  return q;
}

Var CvaeModel::decode(const Var& z, const Var& h, const Var& m) const {
  if (z.shape().size() != 2 || z.shape()[1] != config_.d_z) {
    throw ShapeError("decode: latent codes must be Bx" + std::to_string(config_.d_z) + ", got " +
                     shape_str(z.shape()));
  }
  Var hidden = ad::concat({z, h, m}, 1);
  if (hidden.shape()[1] != config_.decoder_hidden()) {
    throw ShapeError("decode: d_z + d_h + d_m does not match the decoder hidden size");
  }
  std::vector<Var> positions;
  Var pos;
  for (std::size_t t = 0; t < config_.future_len; ++t) {
    hidden = dec_gru_.step(hidden);
    const Var offset = dec_fc2_.forward(ad::leaky_relu(dec_fc1_.forward(hidden)));
    pos = t == 0 ? offset : ad::add(pos, offset);
    positions.push_back(pos);
  }
  return ad::concat(positions, 1);
}

nn::ParameterList CvaeModel::parameters() {
  nn::ParameterList list;
  past_gru_.collect("past_encoder.gru", list);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect("map_encoder.conv" + std::to_string(i), list);
    conv_norms_[i].collect("map_encoder.bn" + std::to_string(i), list);
  }
  map_fc_.collect("map_encoder.fc", list);
  post_fc1_.collect("posterior.fc1", list);
  post_fc2_.collect("posterior.fc2", list);
  dec_gru_.collect("decoder.gru", list);
  dec_fc1_.collect("decoder.fc1", list);
  dec_fc2_.collect("decoder.fc2", list);
  return list;
}

Var reparameterize(const LatentDistribution& q, const Tensor& eps) {
  return ad::add(q.mean, ad::mul(ad::exp(ad::scale(q.log_var, 0.5)), ad::constant(eps)));
}

DsfBranch::DsfBranch(std::size_t in, std::size_t width, std::size_t out, std::mt19937_64& rng, double out_std) {
  layers_.emplace_back(in, width, rng);
  layers_.emplace_back(width, width, rng);
  layers_.emplace_back(width, width, rng);
  layers_.emplace_back(width, out, rng);
  for (int i = 0; i < 3; ++i) norms_.emplace_back(width);
  // Batch-normed leaky-ReLU features have E[a^2] ~ 1/2, so weights with
  // variance 2 out_std^2 / width give outputs of standard deviation out_std.
  nn::Linear& last = layers_.back();
  for (double& v : last.weight.mutable_value().data()) v *= out_std * std::sqrt(6.0);
  for (double& v : last.bias.mutable_value().data()) v = 0.0;
}

Var DsfBranch::forward(const Var& x, bool training) {
  Var y = x;
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    y = ad::leaky_relu(norms_[i].forward(layers_[i].forward(y), training));
  }
  return layers_.back().forward(y);
}

void DsfBranch::collect(const std::string& prefix, nn::ParameterList& out) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".fc" + std::to_string(i), out);
  for (std::size_t i = 0; i < norms_.size(); ++i) norms_[i].collect(prefix + ".bn" + std::to_string(i), out);
}

Var fuse(FusionMode mode, const Var& z_p, const Var& z_m) {
  switch (mode) {
    case FusionMode::product:
      return ad::mul(z_p, z_m);
    case FusionMode::sum:
      return ad::add(z_p, z_m);
    case FusionMode::concat:
      return ad::concat({z_p, z_m}, 1);
  }
  throw std::invalid_argument("unknown fusion mode");
}

DiversitySampler::DiversitySampler(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  if (config_.fusion == FusionMode::concat && config_.d_z % 2 != 0) {
    throw std::invalid_argument("concat fusion needs an even latent dimension");
  }
  build();
}

void DiversitySampler::build() {
  std::mt19937_64 rng(seed_);
  const bool split = config_.branches == BranchMode::two_branch && config_.fusion == FusionMode::concat;
  const std::size_t out = config_.n_samples * (split ? config_.d_z / 2 : config_.d_z);
  // Fused codes start at the scale of prior samples, N(0, I), whatever the
  // fusion: a sum of two branches needs each at 1/sqrt(2).
  const double out_std =
      config_.branches == BranchMode::two_branch && config_.fusion == FusionMode::sum ? std::sqrt(0.5) : 1.0;
  diversity_ = DsfBranch(config_.d_h, config_.dsf_width, out, rng, out_std);
  quality_ = DsfBranch(config_.d_m, config_.dsf_width, out, rng, out_std);
}

void DiversitySampler::set_fusion_mode(FusionMode mode) {
  if (mode == FusionMode::concat && config_.d_z % 2 != 0) {
    throw std::invalid_argument("concat fusion needs an even latent dimension");
  }
  config_.fusion = mode;
  build();
}

Var DiversitySampler::latent_codes(const Var& h, const Var& m, bool training) {
  const std::size_t b = h.shape().at(0);
  const std::size_t n = config_.n_samples;
  switch (config_.branches) {
    case BranchMode::diversity_only:
      return ad::reshape(diversity_.forward(h, training), {b * n, config_.d_z});
    case BranchMode::layout_only:
      return ad::reshape(quality_.forward(m, training), {b * n, config_.d_z});
    case BranchMode::two_branch:
      break;
  }
  const Var zp = diversity_.forward(h, training);
  const Var zm = quality_.forward(m, training);
  if (config_.fusion == FusionMode::concat) {
    const std::size_t half = config_.d_z / 2;
    return fuse(FusionMode::concat, ad::reshape(zp, {b * n, half}), ad::reshape(zm, {b * n, half}));
  }
  return ad::reshape(fuse(config_.fusion, zp, zm), {b * n, config_.d_z});
}

nn::ParameterList DiversitySampler::parameters() {
  nn::ParameterList list;
  if (config_.branches != BranchMode::layout_only) diversity_.collect("dsf.diversity", list);
  if (config_.branches != BranchMode::diversity_only) quality_.collect("dsf.quality", list);
  return list;
}

Tensor repeat_rows(const Tensor& t, std::size_t n) {
  const std::size_t rows = t.rows(), cols = t.cols();
  Tensor out({rows * n, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                  out.data().begin() + static_cast<std::ptrdiff_t>((r * n + k) * cols));
  return out;
}

Var dsf_sample(CvaeModel& backbone, DiversitySampler& dsf, const Tensor& h, const Tensor& m, bool training) {
  const std::size_t n = dsf.config().n_samples;
  const Var z = dsf.latent_codes(ad::constant(h), ad::constant(m), training);
  return backbone.decode(z, ad::constant(repeat_rows(h, n)), ad::constant(repeat_rows(m, n)));
}

Var prior_sample(CvaeModel& backbone, const Tensor& h, const Tensor& m, std::size_t n, std::mt19937_64& rng) {
  const std::size_t d_z = backbone.config().d_z;
  Tensor z({h.rows() * n, d_z});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : z.data()) v = normal(rng);
  return backbone.decode(ad::constant(std::move(z)), ad::constant(repeat_rows(h, n)),
                         ad::constant(repeat_rows(m, n)));
}

Embeddings embed(CvaeModel& backbone, const Batch& batch) {
  Embeddings e;
  e.h = backbone.encode_past(ad::constant(batch.past)).value();
  e.m = backbone.encode_map(ad::constant(batch.maps), false).value();
  return e;
}

std::vector<std::vector<scene::Point2>> to_world(const Tensor& agent_rows, std::size_t first_row, std::size_t count,
                                                 const scene::SceneMap& map) {
  const scene::Affine2 to_w = map.world_to_agent.inverse();
  const std::size_t cols = agent_rows.cols();
  std::vector<std::vector<scene::Point2>> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    for (std::size_t t = 0; t + 1 < cols; t += 2) {
      out[k].push_back(to_w.apply({agent_rows.at(first_row + k, t), agent_rows.at(first_row + k, t + 1)}));
    }
  }
  return out;
}

Var agent_to_world(const Var& agent_rows, const scene::SceneMap& map) {
  const Shape s = agent_rows.shape();
  const scene::Affine2 t = map.world_to_agent.inverse();
  const Var pts = ad::reshape(agent_rows, {s[0] * s[1] / 2, 2});
  // Row-vector form: [x y] * [[a c], [b d]] + [tx ty]
  const Var rotated = ad::matmul(pts, ad::constant(Tensor::matrix({{t.a, t.c}, {t.b, t.d}})));
  return ad::reshape(ad::add(rotated, ad::constant(Tensor::vector({t.tx, t.ty}))), s);
}

}  // namespace trajdiv::model
