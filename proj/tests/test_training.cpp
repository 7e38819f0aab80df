#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "trajdiv/checkpoint.hpp"
#include "trajdiv/training.hpp"

using namespace trajdiv;

namespace {

train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.seed = 11;
  c.model.grid_size = 32;
  c.model.d_h = 8;
  c.model.d_m = 8;
  c.model.d_z = 4;
  c.model.n_samples = 4;
  c.model.posterior_hidden = 16;
  c.model.decoder_fc = 16;
  c.model.dsf_width = 16;
  c.cvae.epochs = 3;
  c.cvae.batch_size = 8;
  c.dsf.epochs = 2;
  c.dsf.batch_size = 8;
  c.dsf.learning_rate = 1e-3;
  c.threads = 1;
  return c;
}

const data::Dataset& tiny_dataset() {
  static const data::Dataset ds = [] {
    data::DatasetSpec spec;
    spec.n_train = 20;
    spec.n_val = 9;
    spec.grid_size = 32;
    spec.seed = 5;
    return data::generate(spec);
  }();
  return ds;
}

std::vector<checkpoint::Entry> values_of(nn::ParameterList list) { return checkpoint::snapshot(list); }

bool same_entries(const std::vector<checkpoint::Entry>& a, const std::vector<checkpoint::Entry>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].first != b[i].first || !(a[i].second == b[i].second)) return false;
  return true;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("trajdiv_training_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  train::TrainConfig c = tiny_config();
  c.dsf.alpha_mode = dpp::AlphaMode::literal_mean;
  c.log = "run.csv";
  const train::TrainConfig r = train::TrainConfig::from_json(c.to_json());
  EXPECT_EQ(r.to_json(), c.to_json());
  EXPECT_EQ(c.to_json()["schema_version"], train::kSchemaVersion);
}

TEST(Config, RejectsUnknownKeysSchemaAndRanges) {
  nlohmann::json j = tiny_config().to_json();
  j["learning_rate"] = 1.0;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  j = tiny_config().to_json();
  j["cvae"]["momentum"] = 0.9;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  j = tiny_config().to_json();
  j["schema_version"] = 2;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  j = tiny_config().to_json();
  j["dsf"]["lambda"] = 1.5;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  j = tiny_config().to_json();
  j["model"]["n_samples"] = 1;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  j = tiny_config().to_json();
  j["cvae"]["batch_size"] = 1;
  EXPECT_THROW(train::TrainConfig::from_json(j), std::invalid_argument);
  // Every key is optional.
  EXPECT_EQ(train::TrainConfig::from_json(nlohmann::json::object()).to_json(), train::TrainConfig{}.to_json());
}

TEST(Config, LoadFromFile) {
  const auto dir = temp_dir("config");
  {
    std::ofstream(dir / "c.json") << R"({"schema_version": 1, "seed": 77, "dsf": {"lambda": 0.25}})";
    std::ofstream(dir / "bad.json") << "{ not json";
  }
  const train::TrainConfig c = train::load_config(dir / "c.json");
  EXPECT_EQ(c.seed, 77u);
  EXPECT_EQ(c.dsf.lambda, 0.25);
  EXPECT_THROW(train::load_config(dir / "bad.json"), std::invalid_argument);
  EXPECT_THROW(train::load_config(dir / "missing.json"), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST(Cvae, DeterministicAndRestoresBestEpoch) {
  const train::TrainConfig cfg = tiny_config();
  model::CvaeModel a(cfg.model, cfg.seed), b(cfg.model, cfg.seed);
  const train::CvaeRun ra = train::train_cvae(a, tiny_dataset(), cfg);
  const train::CvaeRun rb = train::train_cvae(b, tiny_dataset(), cfg);
  EXPECT_EQ(train::log_csv(ra.log), train::log_csv(rb.log));
  EXPECT_TRUE(same_entries(values_of(a.parameters()), values_of(b.parameters())));

  // 20 scenes in batches of 8: 8, 8, 4.
  ASSERT_EQ(ra.val_reconstruction.size(), cfg.cvae.epochs);
  EXPECT_EQ(ra.log.size(), cfg.cvae.epochs * 3);
  for (std::size_t i = 1; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].step, ra.log[i - 1].step + 1);
  const double best = *std::min_element(ra.val_reconstruction.begin(), ra.val_reconstruction.end());
  EXPECT_EQ(ra.val_reconstruction[ra.best_epoch - 1], best);
  for (const auto& r : ra.log) {
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_GE(r.kl, 0.0);
  }
}

TEST(Cvae, DifferentSeedsDiffer) {
  train::TrainConfig cfg = tiny_config();
  cfg.cvae.epochs = 1;
  model::CvaeModel a(cfg.model, 1), b(cfg.model, 1);
  const train::CvaeRun ra = train::train_cvae(a, tiny_dataset(), cfg);
  cfg.seed = 12;
  const train::CvaeRun rb = train::train_cvae(b, tiny_dataset(), cfg);
  EXPECT_NE(train::log_csv(ra.log), train::log_csv(rb.log));
}

TEST(Cvae, DivergenceRollsBack) {
  train::TrainConfig cfg = tiny_config();
  cfg.cvae.epochs = 2;
  cfg.cvae.learning_rate = 1e300;
  model::CvaeModel net(cfg.model, cfg.seed);
  const auto initial = values_of(net.parameters());
  EXPECT_THROW(train::train_cvae(net, tiny_dataset(), cfg), train::TrainingDiverged);
  // No epoch completed, so the initial parameters are the last good ones.
  EXPECT_TRUE(same_entries(values_of(net.parameters()), initial));
}

TEST(Log, CsvHeaderAndRows) {
  std::vector<train::LogRecord> log(2);
  log[0].step = 1;
  log[0].epoch = 1;
  log[0].total = 0.5;
  log[0].rng_digest = "ab";
  log[1].step = 2;
  log[1].epoch = 1;
  log[1].wall_seconds = 12.0;
  const std::string csv = train::log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,epoch,reconstruction,kl,dpp,layout,total,rng_digest");
  EXPECT_NE(csv.find("\n1,1,0,0,0,0,0.5,ab\n"), std::string::npos);
  EXPECT_EQ(csv.find("12"), std::string::npos);
}

class Stage2 : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = tiny_config();
    backbone_ = std::make_unique<model::CvaeModel>(cfg_.model, cfg_.seed);
    train::train_cvae(*backbone_, tiny_dataset(), cfg_);
  }
  static void TearDownTestSuite() { backbone_.reset(); }

  static train::TrainConfig cfg_;
  static std::unique_ptr<model::CvaeModel> backbone_;
};
train::TrainConfig Stage2::cfg_;
std::unique_ptr<model::CvaeModel> Stage2::backbone_;

TEST_F(Stage2, BackboneUnchangedAndRunDeterministic) {
  const auto before = values_of(backbone_->parameters());
  model::DiversitySampler a(cfg_.model, 3), b(cfg_.model, 3);
  const train::DsfRun ra = train::train_dsf(*backbone_, a, tiny_dataset(), cfg_);
  const train::DsfRun rb = train::train_dsf(*backbone_, b, tiny_dataset(), cfg_);
  EXPECT_TRUE(same_entries(values_of(backbone_->parameters()), before));
  EXPECT_EQ(train::log_csv(ra.log), train::log_csv(rb.log));
  EXPECT_TRUE(same_entries(values_of(a.parameters()), values_of(b.parameters())));
  ASSERT_EQ(ra.val_fsd.size(), cfg_.dsf.epochs);
  for (std::size_t e = 0; e < ra.val_fsd.size(); ++e)
    EXPECT_LE(ra.val_fsd[e] * ra.val_dac[e], ra.val_fsd[ra.best_epoch - 1] * ra.val_dac[ra.best_epoch - 1]);
  for (const auto& r : ra.log) EXPECT_EQ(r.reconstruction, 0.0);
}

TEST_F(Stage2, ArchitectureMismatchRejected) {
  train::TrainConfig other = cfg_;
  other.model.d_h = 9;
  model::DiversitySampler dsf(other.model, 3);
  try {
    train::train_dsf(*backbone_, dsf, tiny_dataset(), other);
    FAIL() << "expected a mismatch error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("backbone architecture hash mismatch"), std::string::npos);
  }
}

TEST_F(Stage2, OneBranchCellsTrain) {
  for (auto br : {model::BranchMode::diversity_only, model::BranchMode::layout_only}) {
    train::TrainConfig c = cfg_;
    c.model.branches = br;
    c.dsf.epochs = 1;
    model::DiversitySampler dsf(c.model, 3);
    const train::DsfRun r = train::train_dsf(*backbone_, dsf, tiny_dataset(), c);
    EXPECT_EQ(r.val_fsd.size(), 1u);
  }
}

TEST_F(Stage2, PredictAndEvaluateAreDeterministic) {
  const auto& val = tiny_dataset().val;
  const auto p1 = train::predict(*backbone_, nullptr, val, train::Sampler::prior, 5, 7);
  const auto p2 = train::predict(*backbone_, nullptr, val, train::Sampler::prior, 5, 7);
  const auto p3 = train::predict(*backbone_, nullptr, val, train::Sampler::prior, 5, 8);
  ASSERT_EQ(p1.size(), val.size());
  EXPECT_EQ(p1[0].shape(), (Shape{5, 2 * cfg_.model.future_len}));
  bool any_diff = false;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_TRUE(std::equal(p1[i].data().begin(), p1[i].data().end(), p2[i].data().begin()));
    any_diff = any_diff || !std::equal(p1[i].data().begin(), p1[i].data().end(), p3[i].data().begin());
  }
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(train::predict(*backbone_, nullptr, val, train::Sampler::dsf, 5, 7), std::invalid_argument);

  // Thread count does not change the report.
  const auto r1 = train::evaluate(*backbone_, nullptr, val, train::Sampler::prior, 5, 7, 1);
  const auto r3 = train::evaluate(*backbone_, nullptr, val, train::Sampler::prior, 5, 7, 3);
  EXPECT_EQ(r1.to_csv(), r3.to_csv());
  EXPECT_EQ(r1.to_json().dump(), r3.to_json().dump());
  EXPECT_EQ(r1.scenes.size(), val.size());
}

TEST_F(Stage2, CheckpointsRoundTripWithSidecar) {
  const auto dir = temp_dir("ckpt");
  train::save_cvae(dir / "cvae.ckpt", *backbone_);
  ASSERT_TRUE(std::filesystem::exists(dir / "cvae.ckpt.json"));
  const auto loaded = train::load_cvae(dir / "cvae.ckpt");
  EXPECT_TRUE(same_entries(values_of(loaded->parameters()), values_of(backbone_->parameters())));

  model::DiversitySampler dsf(cfg_.model, 9);
  train::save_dsf(dir / "dsf.ckpt", dsf, *backbone_);
  const auto dsf2 = train::load_dsf(dir / "dsf.ckpt", *loaded);
  EXPECT_TRUE(same_entries(values_of(dsf2->parameters()), values_of(dsf.parameters())));
  const auto& val = tiny_dataset().val;
  EXPECT_EQ(train::evaluate(*loaded, dsf2.get(), val, train::Sampler::dsf, 4, 1, 1).to_csv(),
            train::evaluate(*backbone_, &dsf, val, train::Sampler::dsf, 4, 1, 1).to_csv());

  model::ModelConfig other = cfg_.model;
  other.d_m = 6;
  model::CvaeModel different(other, 1);
  EXPECT_THROW(train::load_dsf(dir / "dsf.ckpt", different), std::runtime_error);
  EXPECT_THROW(train::load_cvae(dir / "missing.ckpt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Ablation, CellsAndSeeds) {
  const auto cells = train::ablation_cells(0.5, true);
  std::vector<std::string> names;
  for (const auto& c : cells) names.push_back(c.name);
  EXPECT_EQ(names, (std::vector<std::string>{"cvae-prior", "1B-D", "1B-L", "2B-D", "2B-D+L", "2B-D+L-concat",
                                             "2B-D+L-sum"}));
  EXPECT_TRUE(cells[0].prior);
  EXPECT_EQ(cells[1].branches, model::BranchMode::diversity_only);
  EXPECT_EQ(cells[1].lambda, 1.0);
  EXPECT_EQ(cells[2].branches, model::BranchMode::layout_only);
  EXPECT_EQ(cells[2].lambda, 0.0);
  EXPECT_EQ(cells[3].lambda, 1.0);
  EXPECT_EQ(cells[4].fusion, model::FusionMode::product);
  EXPECT_EQ(cells[5].fusion, model::FusionMode::concat);
  EXPECT_EQ(train::ablation_cells(0.5, false).size(), 5u);

  // The seed depends on what is trained, not on the label.
  train::AblationCell renamed = cells[4];
  renamed.name = "anything";
  EXPECT_EQ(train::cell_seed(1, renamed), train::cell_seed(1, cells[4]));
  // Lambda does not enter the seed: 2B-D and 2B-D+L share initial weights.
  EXPECT_EQ(train::cell_seed(1, cells[3]), train::cell_seed(1, cells[4]));
  std::set<std::uint64_t> seeds;
  for (const auto& c : cells) seeds.insert(train::cell_seed(1, c));
  // prior, 1B-D, 1B-L, 2B product, concat, sum
  EXPECT_EQ(seeds.size(), 6u);
  EXPECT_NE(train::cell_seed(1, cells[4]), train::cell_seed(2, cells[4]));
}

TEST(Sampler, Names) {
  EXPECT_EQ(train::parse_sampler("prior"), train::Sampler::prior);
  EXPECT_EQ(train::parse_sampler(train::to_string(train::Sampler::dsf)), train::Sampler::dsf);
  EXPECT_THROW(train::parse_sampler("beam"), std::invalid_argument);
}
