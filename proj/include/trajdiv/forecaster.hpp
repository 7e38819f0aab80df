#pragma once

// Trajectory forecaster: recurrent past encoder, convolutional map encoder,
// cVAE posterior and recurrent decoder, plus the two-branch diversity
// sampling function (DSF) that emits all N latent codes of a scene at once.
//
// All network-side coordinates live in the agent frame (current position at
// the origin, heading along +x).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajdiv/dpp.hpp"
#include "trajdiv/nn.hpp"
#include "trajdiv/scene.hpp"

namespace trajdiv::model {

using ad::Var;

enum class FusionMode { concat, sum, product };
std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view name);

/// Which DSF branches exist: both (gated), only the past-driven diversity
/// branch, or only the map-driven quality branch.
enum class BranchMode { two_branch, diversity_only, layout_only };
std::string to_string(BranchMode mode);
BranchMode parse_branch_mode(std::string_view name);

struct ModelConfig {
  std::size_t past_len = scene::kPastLen;
  std::size_t future_len = scene::kFutureLen;
  std::size_t grid_size = 64;
  std::size_t d_h = 128;
  std::size_t d_m = 128;
  std::size_t d_z = 16;
  std::size_t n_samples = 12;
  std::size_t posterior_hidden = 256;
  std::size_t decoder_fc = 128;
  std::size_t dsf_width = 128;
  FusionMode fusion = FusionMode::product;
  BranchMode branches = BranchMode::two_branch;
  dpp::KernelKind kernel = dpp::KernelKind::compound;

  std::size_t decoder_hidden() const { return d_z + d_h + d_m; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Hash over the fields that shape the cVAE backbone.
  std::string backbone_hash() const;
  /// Hash over every architecture field.
  std::string architecture_hash() const;
};

inline constexpr std::size_t kPastFeatures = 4;
inline constexpr std::size_t kMapChannels[] = {8, 16, 32, 64};

/// Network inputs for a batch of scenes.
struct Batch {
  Tensor past;    // B x (T_p * 4): per step (x/10, y/10, dx/2, dy/2), agent frame
  Tensor maps;    // B x 3 x H x W
  Tensor future;  // B x (2 T_f), agent frame
  std::vector<const scene::SceneRecord*> scenes;
  std::size_t size() const { return scenes.size(); }
};

/// Past features of one trajectory (T_p * 4 values). The trajectory must
/// already be expressed in the agent frame.
std::vector<double> past_features(std::span<const scene::Point2> agent_past);
Batch make_batch(std::span<const scene::SceneRecord* const> scenes, const ModelConfig& config);

struct LatentDistribution {
  Var mean;     // B x d_z
  Var log_var;  // B x d_z, clamped to [-10, 10]
};

class CvaeModel {
 public:
  CvaeModel(const ModelConfig& config, std::uint64_t seed);

  /// past: B x (T_p*4) -> B x d_h. Throws ShapeError on the wrong point count.
  Var encode_past(const Var& past) const;
  /// maps: B x 3 x H x W -> B x d_m.
  Var encode_map(const Var& maps, bool training);
  LatentDistribution posterior(const Var& h, const Var& m, const Var& future) const;
  /// (z, h, m) rows -> B x (2 T_f) agent-frame positions.
  Var decode(const Var& z, const Var& h, const Var& m) const;

  nn::ParameterList parameters();
  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  nn::GruCell past_gru_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm> conv_norms_;
  nn::Linear map_fc_;
  nn::Linear post_fc1_, post_fc2_;
  nn::GruCell dec_gru_;
  nn::Linear dec_fc1_, dec_fc2_;
};

/// z = mu + exp(log_var / 2) * eps.
Var reparameterize(const LatentDistribution& q, const Tensor& eps);

/// Four fully-connected layers; the first three followed by batch norm and
/// leaky ReLU. The output layer is initialized for outputs of standard
/// deviation `out_std` in training mode, with zero bias.
class DsfBranch {
 public:
  DsfBranch() = default;
  DsfBranch(std::size_t in, std::size_t width, std::size_t out, std::mt19937_64& rng, double out_std = 1.0);
  Var forward(const Var& x, bool training);
  void collect(const std::string& prefix, nn::ParameterList& out);

 private:
  std::vector<nn::Linear> layers_;
  std::vector<nn::BatchNorm> norms_;
};

/// Combines partial codes of identical shape.
Var fuse(FusionMode mode, const Var& z_p, const Var& z_m);

class DiversitySampler {
 public:
  DiversitySampler(const ModelConfig& config, std::uint64_t seed);

  /// h: B x d_h, m: B x d_m -> (B*N) x d_z, row b*N + n.
  Var latent_codes(const Var& h, const Var& m, bool training);
  /// Re-initializes the branches for the new fusion (concat halves each
  /// branch's output width). Only meaningful before training.
  void set_fusion_mode(FusionMode mode);
  FusionMode fusion_mode() const { return config_.fusion; }

  nn::ParameterList parameters();
  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  DsfBranch diversity_;  // fed h
  DsfBranch quality_;    // fed m
  std::uint64_t seed_;

  void build();
};

/// Repeats each row n times: (B x D) -> (B*n) x D.
Tensor repeat_rows(const Tensor& t, std::size_t n);

/// Decodes the DSF codes: returns (B*N) x (2 T_f) agent-frame positions.
Var dsf_sample(CvaeModel& backbone, DiversitySampler& dsf, const Tensor& h, const Tensor& m, bool training);

/// N prior draws per scene decoded: (B*N) x (2 T_f).
Var prior_sample(CvaeModel& backbone, const Tensor& h, const Tensor& m, std::size_t n, std::mt19937_64& rng);

/// Backbone embeddings in eval mode, no gradient.
struct Embeddings {
  Tensor h;  // B x d_h
  Tensor m;  // B x d_m
};
Embeddings embed(CvaeModel& backbone, const Batch& batch);

/// Agent-frame rows (x1, y1, ..., xT, yT) of one scene's set -> world points.
std::vector<std::vector<scene::Point2>> to_world(const Tensor& agent_rows, std::size_t first_row, std::size_t count,
                                                 const scene::SceneMap& map);

/// Agent-frame rows of a Var mapped to world coordinates, differentiably:
/// (K x 2T) -> (K x 2T).
Var agent_to_world(const Var& agent_rows, const scene::SceneMap& map);

}  // namespace trajdiv::model
