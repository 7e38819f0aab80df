#pragma once

// Two-stage training (cVAE backbone, then the diversity sampler on a frozen
// backbone), evaluation, the ablation grid and the lambda sweep.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajdiv/dataset.hpp"
#include "trajdiv/forecaster.hpp"
#include "trajdiv/losses.hpp"
#include "trajdiv/metrics.hpp"

namespace trajdiv::train {

inline constexpr int kSchemaVersion = 1;

struct CvaeOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta = 1.0;
  double clip_norm = 0.0;
};

struct DsfOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double lambda = 0.5;
  double clip_norm = 0.0;
  dpp::AlphaMode alpha_mode = dpp::AlphaMode::reciprocal_mean;
  /// Plain sum over all N * T_f points by default; the per-point mean makes
  /// the layout gradient too weak for lambda to matter.
  bool normalize_layout = false;
};

/// JSON schema (every key optional, unknown keys rejected):
///   {"schema_version": 1, "seed": u64, "model": {ModelConfig},
///    "cvae": {epochs, batch_size, learning_rate, beta, clip_norm},
///    "dsf": {epochs, batch_size, learning_rate, lambda, clip_norm,
///            alpha_mode, normalize_layout},
///    "dataset": path, "cvae_checkpoint": path, "dsf_checkpoint": path,
///    "log": path, "threads": n}
struct TrainConfig {
  std::uint64_t seed = 1;
  model::ModelConfig model;
  CvaeOptions cvae;
  DsfOptions dsf;
  std::string dataset = "data";
  std::string cvae_checkpoint = "cvae.ckpt";
  std::string dsf_checkpoint = "dsf.ckpt";
  std::string log;
  /// Evaluation workers; 0 picks the hardware concurrency.
  std::size_t threads = 0;

  nlohmann::json to_json() const;
  /// Throws std::invalid_argument on unknown keys, a schema mismatch or
  /// values outside their ranges.
  static TrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

TrainConfig load_config(const std::filesystem::path& path);

/// Raised when a loss or gradient turns non-finite; the model has been
/// rolled back to its last good parameters.
class TrainingDiverged : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct LogRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double dpp = 0.0;
  double layout = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;
  std::string rng_digest;
};

/// CSV with step, epoch, reconstruction, kl, dpp, layout, total, rng_digest.
/// Wall time is left out so the file is reproducible byte for byte.
std::string log_csv(const std::vector<LogRecord>& log);

using Progress = std::function<void(const std::string&)>;

struct CvaeRun {
  std::vector<LogRecord> log;
  std::vector<double> val_reconstruction;  // per epoch
  std::size_t best_epoch = 0;
};

/// Leaves the parameters of the best validation epoch in `model`.
CvaeRun train_cvae(model::CvaeModel& model, const data::Dataset& dataset, const TrainConfig& config,
                   const Progress& progress = {});

struct DsfRun {
  std::vector<LogRecord> log;
  std::vector<double> val_fsd;  // per epoch
  std::vector<double> val_dac;
  std::size_t best_epoch = 0;
};

/// Trains only the sampler. Throws std::logic_error if a backbone parameter
/// receives a gradient or changes. Leaves the best (FSD * DAC) epoch loaded.
DsfRun train_dsf(model::CvaeModel& backbone, model::DiversitySampler& dsf, const data::Dataset& dataset,
                 const TrainConfig& config, const Progress& progress = {});

enum class Sampler { prior, dsf };
std::string to_string(Sampler s);
Sampler parse_sampler(std::string_view name);

/// Agent-frame predictions (N rows of 2 T_f) for each scene.
std::vector<Tensor> predict(model::CvaeModel& backbone, model::DiversitySampler* dsf,
                            const std::vector<scene::SceneRecord>& scenes, Sampler sampler, std::size_t n,
                            std::uint64_t seed);

metrics::EvalReport evaluate(model::CvaeModel& backbone, model::DiversitySampler* dsf,
                             const std::vector<scene::SceneRecord>& scenes, Sampler sampler, std::size_t n,
                             std::uint64_t seed, std::size_t threads = 0);

// Checkpoints with a JSON sidecar (<path>.json) holding the model config and
// its hashes.
void save_cvae(const std::filesystem::path& path, model::CvaeModel& model);
std::unique_ptr<model::CvaeModel> load_cvae(const std::filesystem::path& path);
void save_dsf(const std::filesystem::path& path, model::DiversitySampler& dsf, const model::CvaeModel& backbone);
/// Throws std::runtime_error when the sampler was trained on another backbone architecture.
std::unique_ptr<model::DiversitySampler> load_dsf(const std::filesystem::path& path,
                                                  const model::CvaeModel& backbone);

struct AblationCell {
  std::string name;
  bool prior = false;
  model::BranchMode branches = model::BranchMode::two_branch;
  model::FusionMode fusion = model::FusionMode::product;
  double lambda = 0.5;
};

/// cvae-prior, 1B-D, 1B-L, 2B-D and 2B-D+L; with `fusion_modes` also
/// 2B-D+L under concat and sum.
std::vector<AblationCell> ablation_cells(double lambda, bool fusion_modes);

struct CellResult {
  AblationCell cell;
  std::uint64_t seed = 0;
  metrics::EvalReport report;
};

/// Trains one sampler per cell on the given backbone and evaluates it on the
/// validation split.
std::vector<CellResult> run_ablation_grid(model::CvaeModel& backbone, const data::Dataset& dataset,
                                          const TrainConfig& config, const std::vector<AblationCell>& cells,
                                          const Progress& progress = {});

/// Per-seed sampler seed for one cell. Independent of lambda and the label.
std::uint64_t cell_seed(std::uint64_t seed, const AblationCell& cell);

struct SweepPoint {
  double lambda = 0.0;
  double fsd = 0.0;
  double dac = 0.0;
};

std::vector<SweepPoint> run_lambda_sweep(model::CvaeModel& backbone, const data::Dataset& dataset,
                                         const TrainConfig& config, const std::vector<double>& lambdas,
                                         const Progress& progress = {});

/// Text table with one row per cell.
std::string ablation_table(const std::vector<CellResult>& results);

}  // namespace trajdiv::train
