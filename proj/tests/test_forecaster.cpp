#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "trajdiv/forecaster.hpp"

using namespace trajdiv;
using ad::Var;
using scene::Point2;
using trajdiv::testing::random_tensor;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.grid_size = 32;
  c.d_h = 6;
  c.d_m = 5;
  c.d_z = 4;
  c.n_samples = 3;
  c.posterior_hidden = 8;
  c.decoder_fc = 7;
  c.dsf_width = 8;
  return c;
}

std::vector<scene::SceneRecord> scenes(std::size_t grid) {
  std::vector<scene::SceneRecord> out;
  for (std::uint64_t s = 0; s < 3; ++s) out.push_back(scene::generate_record(scene::kAllLayoutKinds[s], s, grid));
  return out;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool same(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && values(a) == values(b); }

}  // namespace

TEST(ModelConfig, JsonRoundTrip) {
  model::ModelConfig c = small_config();
  c.fusion = model::FusionMode::sum;
  c.branches = model::BranchMode::diversity_only;
  c.kernel = dpp::KernelKind::distance_only;
  const model::ModelConfig r = model::ModelConfig::from_json(c.to_json());
  EXPECT_EQ(r.to_json(), c.to_json());
  EXPECT_EQ(r.architecture_hash(), c.architecture_hash());
  EXPECT_THROW(model::ModelConfig::from_json({{"fusion", "max"}}), std::invalid_argument);
}

TEST(ModelConfig, BackboneHashIgnoresSamplerFields) {
  const model::ModelConfig a = small_config();
  model::ModelConfig b = a;
  b.fusion = model::FusionMode::concat;
  b.n_samples = 9;
  b.dsf_width = 3;
  EXPECT_EQ(a.backbone_hash(), b.backbone_hash());
  EXPECT_NE(a.architecture_hash(), b.architecture_hash());
  b.d_h = 7;
  EXPECT_NE(a.backbone_hash(), b.backbone_hash());
}

TEST(Features, HandComputed) {
  const std::vector<Point2> past = {{-4, 2}, {-2, 1}, {0, 0}};
  const std::vector<double> f = model::past_features(past);
  const std::vector<double> expected = {-0.4, 0.2, 0.0, 0.0, -0.2, 0.1, 1.0, -0.5, 0.0, 0.0, 1.0, -0.5};
  ASSERT_EQ(f.size(), expected.size());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_DOUBLE_EQ(f[i], expected[i]);
}

TEST(Batch, LayoutAndAgentFrame) {
  const auto recs = scenes(32);
  std::vector<const scene::SceneRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const model::Batch b = model::make_batch(ptrs, small_config());
  EXPECT_EQ(b.past.shape(), (Shape{3, scene::kPastLen * 4}));
  EXPECT_EQ(b.maps.shape(), (Shape{3, 3, 32, 32}));
  EXPECT_EQ(b.future.shape(), (Shape{3, 2 * scene::kFutureLen}));
  for (std::size_t i = 0; i < 3; ++i) {
    // Current position is the origin of the agent frame.
    const std::size_t cur = (scene::kPastLen - 1) * 4;
    EXPECT_NEAR(b.past.at(i, cur), 0.0, 1e-12);
    EXPECT_NEAR(b.past.at(i, cur + 1), 0.0, 1e-12);
    // Heading along +x: the last displacement has no lateral part.
    EXPECT_NEAR(b.past.at(i, cur + 3), 0.0, 1e-12);
    EXPECT_GT(b.past.at(i, cur + 2), 0.0);
    EXPECT_EQ(b.maps[((i * 3 + 1) * 32 + 5) * 32 + 7], recs[i].map.at(5, 7, 1));
  }
  model::ModelConfig wrong = small_config();
  wrong.grid_size = 64;
  EXPECT_THROW(model::make_batch(ptrs, wrong), ShapeError);
}

TEST(Cvae, ShapesAndErrors) {
  const model::ModelConfig cfg = small_config();
  model::CvaeModel net(cfg, 1);
  std::mt19937_64 rng(1);
  const Var h = net.encode_past(ad::constant(random_tensor({2, cfg.past_len * 4}, rng)));
  EXPECT_EQ(h.shape(), (Shape{2, cfg.d_h}));
  EXPECT_THROW(net.encode_past(ad::constant(Tensor({2, 4 * (cfg.past_len - 1)}))), ShapeError);
  const Var m = net.encode_map(ad::constant(random_tensor({2, 3, 32, 32}, rng)), true);
  EXPECT_EQ(m.shape(), (Shape{2, cfg.d_m}));
  EXPECT_THROW(net.encode_map(ad::constant(Tensor({2, 3, 16, 16})), false), ShapeError);
  const model::LatentDistribution q = net.posterior(h, m, ad::constant(random_tensor({2, 12}, rng)));
  EXPECT_EQ(q.mean.shape(), (Shape{2, cfg.d_z}));
  for (double v : q.log_var.value().data()) {
    EXPECT_GE(v, -10.0);
    EXPECT_LE(v, 10.0);
  }
  const Var y = net.decode(q.mean, h, m);
  EXPECT_EQ(y.shape(), (Shape{2, 2 * cfg.future_len}));
  EXPECT_THROW(net.decode(ad::constant(Tensor({2, cfg.d_z + 1})), h, m), ShapeError);
}

TEST(Cvae, DeterministicInSeedAndNamedParameters) {
  const model::ModelConfig cfg = small_config();
  model::CvaeModel a(cfg, 5), b(cfg, 5), c(cfg, 6);
  const nn::ParameterList pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.params().size(), pb.params().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.params().size(); ++i) {
    EXPECT_EQ(pa.params()[i].path, pb.params()[i].path);
    EXPECT_TRUE(same(pa.params()[i].var->value(), pb.params()[i].var->value()));
    any_diff = any_diff || !same(pa.params()[i].var->value(), pc.params()[i].var->value());
  }
  EXPECT_TRUE(any_diff);
  EXPECT_EQ(pa.params().front().path.rfind("past_encoder.", 0), 0u);
}

TEST(Reparameterize, HandComputed) {
  const model::LatentDistribution q{ad::constant(Tensor::matrix({{1.0, -1.0}})),
                                    ad::constant(Tensor::matrix({{0.0, std::log(4.0)}}))};
  const Tensor z = model::reparameterize(q, Tensor::matrix({{0.5, 0.5}})).value();
  EXPECT_DOUBLE_EQ(z.at(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(z.at(0, 1), 0.0);
}

TEST(Fusion, ElementwiseModes) {
  const Var a = ad::constant(Tensor::matrix({{1.0, 2.0}})), b = ad::constant(Tensor::matrix({{3.0, -1.0}}));
  EXPECT_EQ(values(model::fuse(model::FusionMode::product, a, b).value()), (std::vector<double>{3.0, -2.0}));
  EXPECT_EQ(values(model::fuse(model::FusionMode::sum, a, b).value()), (std::vector<double>{4.0, 1.0}));
  EXPECT_EQ(values(model::fuse(model::FusionMode::concat, a, b).value()), (std::vector<double>{1.0, 2.0, 3.0, -1.0}));
}

TEST(Sampler, CodeShapesForEveryMode) {
  model::ModelConfig cfg = small_config();
  std::mt19937_64 rng(2);
  const Var h = ad::constant(random_tensor({2, cfg.d_h}, rng)), m = ad::constant(random_tensor({2, cfg.d_m}, rng));
  for (auto br : {model::BranchMode::two_branch, model::BranchMode::diversity_only, model::BranchMode::layout_only}) {
    for (auto fu : {model::FusionMode::concat, model::FusionMode::sum, model::FusionMode::product}) {
      cfg.branches = br;
      cfg.fusion = fu;
      model::DiversitySampler dsf(cfg, 3);
      EXPECT_EQ(dsf.latent_codes(h, m, true).shape(), (Shape{2 * cfg.n_samples, cfg.d_z}));
    }
  }
  cfg.d_z = 5;
  cfg.fusion = model::FusionMode::concat;
  EXPECT_THROW(model::DiversitySampler(cfg, 1), std::invalid_argument);
}

TEST(Sampler, BranchInputsAreIsolated) {
  model::ModelConfig cfg = small_config();
  std::mt19937_64 rng(3);
  const Var h = ad::constant(random_tensor({2, cfg.d_h}, rng));
  const Var m1 = ad::constant(random_tensor({2, cfg.d_m}, rng)), m2 = ad::constant(random_tensor({2, cfg.d_m}, rng));
  const Var h2 = ad::constant(random_tensor({2, cfg.d_h}, rng));

  cfg.branches = model::BranchMode::diversity_only;
  model::DiversitySampler d(cfg, 4);
  EXPECT_TRUE(same(d.latent_codes(h, m1, false).value(), d.latent_codes(h, m2, false).value()));
  const nn::ParameterList dp = d.parameters();
  for (const auto& p : dp.params()) EXPECT_EQ(p.path.rfind("dsf.diversity", 0), 0u);

  cfg.branches = model::BranchMode::layout_only;
  model::DiversitySampler l(cfg, 4);
  EXPECT_TRUE(same(l.latent_codes(h, m1, false).value(), l.latent_codes(h2, m1, false).value()));
  const nn::ParameterList lp = l.parameters();
  for (const auto& p : lp.params()) EXPECT_EQ(p.path.rfind("dsf.quality", 0), 0u);

  // Concat: the first half of every code comes from the diversity branch.
  cfg.branches = model::BranchMode::two_branch;
  cfg.fusion = model::FusionMode::concat;
  model::DiversitySampler c(cfg, 4);
  const Tensor z1 = c.latent_codes(h, m1, false).value(), z2 = c.latent_codes(h, m2, false).value();
  for (std::size_t r = 0; r < z1.rows(); ++r) {
    for (std::size_t k = 0; k < cfg.d_z / 2; ++k) EXPECT_EQ(z1.at(r, k), z2.at(r, k));
    bool differs = false;
    for (std::size_t k = cfg.d_z / 2; k < cfg.d_z; ++k) differs = differs || z1.at(r, k) != z2.at(r, k);
    EXPECT_TRUE(differs);
  }
}

TEST(Sampler, InitialCodesMatchPriorScale) {
  // Fused codes start near unit RMS in training mode for every fusion.
  model::ModelConfig cfg;
  cfg.grid_size = 32;
  std::mt19937_64 rng(6);
  const Var h = ad::constant(random_tensor({32, cfg.d_h}, rng)), m = ad::constant(random_tensor({32, cfg.d_m}, rng));
  for (auto br : {model::BranchMode::two_branch, model::BranchMode::diversity_only}) {
    for (auto fu : {model::FusionMode::concat, model::FusionMode::sum, model::FusionMode::product}) {
      cfg.branches = br;
      cfg.fusion = fu;
      model::DiversitySampler dsf(cfg, 7);
      const Tensor z = dsf.latent_codes(h, m, true).value();
      double ss = 0.0;
      for (double v : z.data()) ss += v * v;
      const double rms = std::sqrt(ss / static_cast<double>(z.size()));
      EXPECT_GT(rms, 0.8) << model::to_string(br) << " " << model::to_string(fu);
      EXPECT_LT(rms, 1.25) << model::to_string(br) << " " << model::to_string(fu);
    }
  }
}

TEST(Sampler, ProductGateZeroesCodes) {
  // A zero layout code suppresses every latent direction under product fusion.
  model::ModelConfig cfg = small_config();
  model::DiversitySampler dsf(cfg, 5);
  const nn::ParameterList params = dsf.parameters();
  for (const auto& p : params.params()) {
    if (p.path.rfind("dsf.quality", 0) == 0 && p.path.find(".fc3") != std::string::npos) {
      p.var->mutable_value().fill(0.0);
    }
  }
  std::mt19937_64 rng(4);
  const Tensor z = dsf.latent_codes(ad::constant(random_tensor({2, cfg.d_h}, rng)),
                                    ad::constant(random_tensor({2, cfg.d_m}, rng)), false)
                       .value();
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Transforms, RepeatRows) {
  const Tensor t = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor r = model::repeat_rows(t, 3);
  EXPECT_EQ(r.shape(), (Shape{6, 2}));
  EXPECT_EQ(values(r), (std::vector<double>{1, 2, 1, 2, 1, 2, 3, 4, 3, 4, 3, 4}));
}

TEST(Transforms, AgentToWorldMatchesPlainTransform) {
  const auto recs = scenes(64);
  std::mt19937_64 rng(5);
  for (const auto& rec : recs) {
    const Tensor rows = random_tensor({4, 12}, rng, -20, 20);
    const Tensor w = model::agent_to_world(ad::constant(rows), rec.map).value();
    const auto plain = model::to_world(rows, 0, 4, rec.map);
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t t = 0; t < 6; ++t) {
        EXPECT_NEAR(w.at(k, 2 * t), plain[k][t].x, 1e-9);
        EXPECT_NEAR(w.at(k, 2 * t + 1), plain[k][t].y, 1e-9);
      }
    // The agent-frame ground truth maps back onto the world future.
    Tensor gt({1, 12});
    for (std::size_t t = 0; t < 6; ++t) {
      const Point2 a = rec.map.world_to_agent.apply(rec.trajectory.future()[t]);
      gt.at(0, 2 * t) = a.x;
      gt.at(0, 2 * t + 1) = a.y;
    }
    const auto back = model::to_world(gt, 0, 1, rec.map);
    for (std::size_t t = 0; t < 6; ++t) EXPECT_LT(scene::distance(back[0][t], rec.trajectory.future()[t]), 1e-9);
  }
}

TEST(Names, RoundTrip) {
  for (auto m : {model::FusionMode::concat, model::FusionMode::sum, model::FusionMode::product})
    EXPECT_EQ(model::parse_fusion_mode(model::to_string(m)), m);
  for (auto m : {model::BranchMode::two_branch, model::BranchMode::diversity_only, model::BranchMode::layout_only})
    EXPECT_EQ(model::parse_branch_mode(model::to_string(m)), m);
  EXPECT_THROW(model::parse_branch_mode("both"), std::invalid_argument);
}
