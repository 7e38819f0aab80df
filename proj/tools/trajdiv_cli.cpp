// trajdiv command-line driver.
//
// Exit codes: 0 success, 1 runtime failure (I/O, missing scene), 2 usage
// error (bad flag, bad config value), 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trajdiv/checkpoint.hpp"
#include "trajdiv/dataset.hpp"
#include "trajdiv/dpp.hpp"
#include "trajdiv/svg.hpp"
#include "trajdiv/training.hpp"

namespace fs = std::filesystem;
using namespace trajdiv;

namespace {

constexpr const char* kConfigEnv = "TRAJDIV_CONFIG";

struct Common {
  std::string config_path;
  std::uint64_t seed = 1;
  bool quiet = false;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path,
                  std::string("JSON training config (default: $") + kConfigEnv + " when set)");
  c.seed_opt = cmd->add_option("--seed", c.seed, "master seed")->capture_default_str();
  cmd->add_flag("--quiet", c.quiet, "suppress progress output on stderr");
}

train::TrainConfig resolve_config(const Common& c) {
  std::string path = c.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv)) path = env;
  }
  train::TrainConfig cfg = path.empty() ? train::TrainConfig{} : train::load_config(path);
  if (c.seed_opt->count() > 0 || path.empty()) cfg.seed = c.seed;
  return cfg;
}

train::Progress progress_of(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& line) { std::cerr << line << "\n"; };
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

const std::vector<scene::SceneRecord>& split_of(const data::Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val.empty() ? ds.train : ds.val;
  throw std::invalid_argument("unknown split '" + split + "' (expected train or val)");
}

void check_compatible(const data::Dataset& ds, const model::ModelConfig& mc) {
  if (ds.spec.grid_size != mc.grid_size) {
    throw std::invalid_argument("dataset grid size " + std::to_string(ds.spec.grid_size) +
                                " does not match the model's " + std::to_string(mc.grid_size));
  }
}

template <typename T>
void override(CLI::Option* opt, const T& value, T& target) {
  if (opt->count() > 0) target = value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajdiv: diverse and admissible trajectory forecasting on synthetic road scenes"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  // gen-scenes
  Common gen_c;
  std::string gen_out = "data", gen_mix = "0.4,0.3,0.2,0.1";
  std::size_t gen_n = 2000, gen_val = 400, gen_grid = 64;
  auto* gen = app.add_subcommand("gen-scenes", "generate a synthetic dataset");
  add_common(gen, gen_c);
  auto* gen_out_opt = gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--n-scenes", gen_n, "training scenes")->check(CLI::PositiveNumber);
  gen->add_option("--n-val", gen_val, "validation scenes")->check(CLI::NonNegativeNumber);
  auto* gen_grid_opt = gen->add_option("--grid-size", gen_grid, "raster size in cells")->check(CLI::Range(32, 1024));
  gen->add_option("--layout-mix", gen_mix, "straight,t-intersection,crossroad,curve weights or kind=weight list");

  // train-cvae
  Common tc_c;
  std::string tc_dataset, tc_out, tc_log;
  std::size_t tc_epochs = 100, tc_batch = 32;
  double tc_lr = 1e-3, tc_beta = 1.0;
  auto* tc = app.add_subcommand("train-cvae", "train the cVAE backbone");
  add_common(tc, tc_c);
  auto* tc_dataset_opt = tc->add_option("--dataset", tc_dataset, "dataset directory (config: dataset)");
  auto* tc_out_opt = tc->add_option("--out", tc_out, "checkpoint path (config: cvae_checkpoint)");
  auto* tc_log_opt = tc->add_option("--log", tc_log, "training log CSV (config: log)");
  auto* tc_epochs_opt = tc->add_option("--epochs", tc_epochs, "epochs")->check(CLI::PositiveNumber);
  auto* tc_batch_opt = tc->add_option("--batch-size", tc_batch, "batch size")->check(CLI::Range(2, 100000));
  auto* tc_lr_opt = tc->add_option("--lr", tc_lr, "learning rate")->check(CLI::PositiveNumber);
  auto* tc_beta_opt = tc->add_option("--beta", tc_beta, "KL weight")->check(CLI::NonNegativeNumber);

  // train-dsf
  Common td_c;
  std::string td_dataset, td_cvae, td_out, td_log, td_fusion = "product", td_branches = "two-branch",
                                                     td_kernel = "compound";
  std::size_t td_epochs = 50, td_batch = 32;
  double td_lr = 1e-4, td_lambda = 0.5;
  auto* td = app.add_subcommand("train-dsf", "train the diversity sampling function on a frozen backbone");
  add_common(td, td_c);
  auto* td_dataset_opt = td->add_option("--dataset", td_dataset, "dataset directory (config: dataset)");
  auto* td_cvae_opt = td->add_option("--cvae", td_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  auto* td_out_opt = td->add_option("--out", td_out, "sampler checkpoint (config: dsf_checkpoint)");
  auto* td_log_opt = td->add_option("--log", td_log, "training log CSV (config: log)");
  auto* td_epochs_opt = td->add_option("--epochs", td_epochs, "epochs")->check(CLI::PositiveNumber);
  auto* td_batch_opt = td->add_option("--batch-size", td_batch, "batch size")->check(CLI::Range(2, 100000));
  auto* td_lr_opt = td->add_option("--lr", td_lr, "learning rate")->check(CLI::PositiveNumber);
  auto* td_lambda_opt = td->add_option("--lambda", td_lambda, "diversity weight in [0, 1]")->check(CLI::Range(0.0, 1.0));
  auto* td_fusion_opt =
      td->add_option("--fusion", td_fusion, "code fusion")->check(CLI::IsMember({"product", "sum", "concat"}));
  auto* td_branches_opt = td->add_option("--branches", td_branches, "branch ablation")
                              ->check(CLI::IsMember({"two-branch", "one-branch-diversity", "one-branch-layout"}));
  auto* td_kernel_opt =
      td->add_option("--kernel", td_kernel, "DPP kernel")->check(CLI::IsMember({"compound", "distance", "angle"}));

  // eval
  Common ev_c;
  std::string ev_dataset, ev_cvae, ev_dsf, ev_sampler = "prior", ev_split = "val", ev_json = "eval.json",
                                           ev_csv = "eval.csv";
  std::size_t ev_threads = 0;
  auto* ev = app.add_subcommand("eval", "evaluate a sampler and write JSON and CSV reports");
  add_common(ev, ev_c);
  auto* ev_dataset_opt = ev->add_option("--dataset", ev_dataset, "dataset directory (config: dataset)");
  auto* ev_cvae_opt = ev->add_option("--cvae", ev_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  auto* ev_dsf_opt = ev->add_option("--dsf", ev_dsf, "sampler checkpoint (config: dsf_checkpoint)");
  ev->add_option("--sampler", ev_sampler, "prior or dsf")->check(CLI::IsMember({"prior", "dsf"}));
  ev->add_option("--split", ev_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--out-json", ev_json, "JSON report");
  ev->add_option("--out-csv", ev_csv, "per-scene CSV report");
  auto* ev_threads_opt = ev->add_option("--threads", ev_threads, "workers, 0 = all cores");

  // ablate
  Common ab_c;
  std::string ab_dataset, ab_cvae, ab_out = "ablation";
  bool ab_fusion = false;
  auto* ab = app.add_subcommand("ablate", "train and evaluate the branch/loss ablation grid");
  add_common(ab, ab_c);
  auto* ab_dataset_opt = ab->add_option("--dataset", ab_dataset, "dataset directory (config: dataset)");
  auto* ab_cvae_opt = ab->add_option("--cvae", ab_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  ab->add_option("--out", ab_out, "output directory");
  ab->add_flag("--fusion-modes", ab_fusion, "add the concat and sum fusion cells");

  // sweep-lambda
  Common sw_c;
  std::string sw_dataset, sw_cvae, sw_out = "sweep";
  std::vector<double> sw_lambdas = {0.0, 0.25, 0.5, 0.75, 1.0};
  auto* sw = app.add_subcommand("sweep-lambda", "train one sampler per lambda and plot FSD and DAC");
  add_common(sw, sw_c);
  auto* sw_dataset_opt = sw->add_option("--dataset", sw_dataset, "dataset directory (config: dataset)");
  auto* sw_cvae_opt = sw->add_option("--cvae", sw_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  sw->add_option("--lambdas", sw_lambdas, "lambda values")->delimiter(',')->check(CLI::Range(0.0, 1.0));
  sw->add_option("--out", sw_out, "output directory");

  // plot-scene
  Common pl_c;
  std::string pl_dataset, pl_cvae, pl_dsf, pl_scene, pl_sampler = "prior", pl_out = "scene.svg";
  auto* pl = app.add_subcommand("plot-scene", "render a scene with its predictions as SVG");
  add_common(pl, pl_c);
  auto* pl_dataset_opt = pl->add_option("--dataset", pl_dataset, "dataset directory (config: dataset)");
  auto* pl_cvae_opt = pl->add_option("--cvae", pl_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  auto* pl_dsf_opt = pl->add_option("--dsf", pl_dsf, "sampler checkpoint (config: dsf_checkpoint)");
  pl->add_option("--scene", pl_scene, "scene id")->required();
  pl->add_option("--sampler", pl_sampler, "prior or dsf")->check(CLI::IsMember({"prior", "dsf"}));
  pl->add_option("--out", pl_out, "SVG path");

  // dump-kernel
  Common dk_c;
  std::string dk_dataset, dk_cvae, dk_dsf, dk_scene, dk_sampler = "prior", dk_out = "kernel.bin",
                                                     dk_kernel = "compound", dk_alpha = "reciprocal-mean";
  auto* dk = app.add_subcommand("dump-kernel", "write the DPP kernel of one scene's predictions");
  add_common(dk, dk_c);
  auto* dk_dataset_opt = dk->add_option("--dataset", dk_dataset, "dataset directory (config: dataset)");
  auto* dk_cvae_opt = dk->add_option("--cvae", dk_cvae, "backbone checkpoint (config: cvae_checkpoint)");
  auto* dk_dsf_opt = dk->add_option("--dsf", dk_dsf, "sampler checkpoint (config: dsf_checkpoint)");
  dk->add_option("--scene", dk_scene, "scene id")->required();
  dk->add_option("--sampler", dk_sampler, "prior or dsf")->check(CLI::IsMember({"prior", "dsf"}));
  dk->add_option("--kernel", dk_kernel, "DPP kernel")->check(CLI::IsMember({"compound", "distance", "angle"}));
  dk->add_option("--alpha-mode", dk_alpha, "bandwidth rule")
      ->check(CLI::IsMember({"reciprocal-mean", "literal-mean"}));
  dk->add_option("--out", dk_out, "output file in checkpoint format");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  // Shared loaders for the inference commands.
  auto load_models = [](const train::TrainConfig& cfg, const std::string& dsf_path, train::Sampler sampler) {
    std::pair<std::unique_ptr<model::CvaeModel>, std::unique_ptr<model::DiversitySampler>> out;
    out.first = train::load_cvae(cfg.cvae_checkpoint);
    if (sampler == train::Sampler::dsf) out.second = train::load_dsf(dsf_path, *out.first);
    return out;
  };

  try {
    if (gen->parsed()) {
      const train::TrainConfig cfg = resolve_config(gen_c);
      data::DatasetSpec spec;
      spec.n_train = gen_n;
      spec.n_val = gen_val;
      spec.grid_size = gen_grid_opt->count() ? gen_grid : cfg.model.grid_size;
      spec.seed = cfg.seed;
      spec.mix = data::LayoutMix::parse(gen_mix);
      const fs::path out = gen_out_opt->count() ? gen_out : (gen_c.config_path.empty() ? gen_out : cfg.dataset);
      const data::Dataset ds = data::generate(spec);
      data::write(ds, out);
      if (!gen_c.quiet) std::cerr << "wrote " << ds.train.size() << " + " << ds.val.size() << " scenes to " << out << "\n";
      return 0;
    }

    if (tc->parsed()) {
      train::TrainConfig cfg = resolve_config(tc_c);
      override(tc_dataset_opt, tc_dataset, cfg.dataset);
      override(tc_out_opt, tc_out, cfg.cvae_checkpoint);
      override(tc_log_opt, tc_log, cfg.log);
      override(tc_epochs_opt, tc_epochs, cfg.cvae.epochs);
      override(tc_batch_opt, tc_batch, cfg.cvae.batch_size);
      override(tc_lr_opt, tc_lr, cfg.cvae.learning_rate);
      override(tc_beta_opt, tc_beta, cfg.cvae.beta);
      cfg.validate();
      const data::Dataset ds = data::read(cfg.dataset);
      check_compatible(ds, cfg.model);
      model::CvaeModel m(cfg.model, scene::mix_seed(cfg.seed, 1));
      train::CvaeRun run;
      try {
        run = train::train_cvae(m, ds, cfg, progress_of(tc_c));
      } catch (const train::TrainingDiverged&) {
        train::save_cvae(cfg.cvae_checkpoint, m);
        throw;
      }
      train::save_cvae(cfg.cvae_checkpoint, m);
      if (!cfg.log.empty()) write_file(cfg.log, train::log_csv(run.log));
      if (!tc_c.quiet) std::cerr << "best epoch " << run.best_epoch << ", saved " << cfg.cvae_checkpoint << "\n";
      return 0;
    }

    if (td->parsed()) {
      train::TrainConfig cfg = resolve_config(td_c);
      override(td_dataset_opt, td_dataset, cfg.dataset);
      override(td_cvae_opt, td_cvae, cfg.cvae_checkpoint);
      override(td_out_opt, td_out, cfg.dsf_checkpoint);
      override(td_log_opt, td_log, cfg.log);
      override(td_epochs_opt, td_epochs, cfg.dsf.epochs);
      override(td_batch_opt, td_batch, cfg.dsf.batch_size);
      override(td_lr_opt, td_lr, cfg.dsf.learning_rate);
      override(td_lambda_opt, td_lambda, cfg.dsf.lambda);
      if (td_fusion_opt->count()) cfg.model.fusion = model::parse_fusion_mode(td_fusion);
      if (td_branches_opt->count()) cfg.model.branches = model::parse_branch_mode(td_branches);
      if (td_kernel_opt->count()) cfg.model.kernel = dpp::parse_kernel_kind(td_kernel);
      cfg.validate();
      const data::Dataset ds = data::read(cfg.dataset);
      auto backbone = train::load_cvae(cfg.cvae_checkpoint);
      check_compatible(ds, backbone->config());
      model::DiversitySampler dsf(cfg.model, scene::mix_seed(cfg.seed, 2));
      train::DsfRun run;
      try {
        run = train::train_dsf(*backbone, dsf, ds, cfg, progress_of(td_c));
      } catch (const train::TrainingDiverged&) {
        train::save_dsf(cfg.dsf_checkpoint, dsf, *backbone);
        throw;
      }
      train::save_dsf(cfg.dsf_checkpoint, dsf, *backbone);
      if (!cfg.log.empty()) write_file(cfg.log, train::log_csv(run.log));
      if (!td_c.quiet) std::cerr << "best epoch " << run.best_epoch << ", saved " << cfg.dsf_checkpoint << "\n";
      return 0;
    }

    if (ev->parsed()) {
      train::TrainConfig cfg = resolve_config(ev_c);
      override(ev_dataset_opt, ev_dataset, cfg.dataset);
      override(ev_cvae_opt, ev_cvae, cfg.cvae_checkpoint);
      override(ev_dsf_opt, ev_dsf, cfg.dsf_checkpoint);
      override(ev_threads_opt, ev_threads, cfg.threads);
      const train::Sampler sampler = train::parse_sampler(ev_sampler);
      const data::Dataset ds = data::read(cfg.dataset);
      auto [backbone, dsf] = load_models(cfg, cfg.dsf_checkpoint, sampler);
      check_compatible(ds, backbone->config());
      const std::size_t n = dsf ? dsf->config().n_samples : cfg.model.n_samples;
      const metrics::EvalReport report =
          train::evaluate(*backbone, dsf.get(), split_of(ds, ev_split), sampler, n, cfg.seed, cfg.threads);
      nlohmann::json j = report.to_json();
      j["sampler"] = ev_sampler;
      j["split"] = ev_split;
      write_file(ev_json, j.dump(1) + "\n");
      write_file(ev_csv, report.to_csv());
      train::CellResult row;
      row.cell.name = ev_sampler;
      row.report = report;
      std::cout << train::ablation_table({row});
      return 0;
    }

    if (ab->parsed()) {
      train::TrainConfig cfg = resolve_config(ab_c);
      override(ab_dataset_opt, ab_dataset, cfg.dataset);
      override(ab_cvae_opt, ab_cvae, cfg.cvae_checkpoint);
      const data::Dataset ds = data::read(cfg.dataset);
      auto backbone = train::load_cvae(cfg.cvae_checkpoint);
      check_compatible(ds, backbone->config());
      const auto results = train::run_ablation_grid(*backbone, ds, cfg, train::ablation_cells(cfg.dsf.lambda, ab_fusion),
                                                    progress_of(ab_c));
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : results) {
        j.push_back({{"cell", r.cell.name}, {"seed", r.seed}, {"lambda", r.cell.lambda}, {"report", r.report.to_json()}});
      }
      write_file(fs::path(ab_out) / "ablation.json", j.dump(1) + "\n");
      const std::string table = train::ablation_table(results);
      write_file(fs::path(ab_out) / "ablation.txt", table);
      std::cout << table;
      return 0;
    }

    if (sw->parsed()) {
      train::TrainConfig cfg = resolve_config(sw_c);
      override(sw_dataset_opt, sw_dataset, cfg.dataset);
      override(sw_cvae_opt, sw_cvae, cfg.cvae_checkpoint);
      const data::Dataset ds = data::read(cfg.dataset);
      auto backbone = train::load_cvae(cfg.cvae_checkpoint);
      check_compatible(ds, backbone->config());
      const auto points = train::run_lambda_sweep(*backbone, ds, cfg, sw_lambdas, progress_of(sw_c));
      std::ostringstream csv;
      csv << "lambda,fsd,dac\n";
      std::vector<double> ls, fs_, dac;
      char buf[96];
      for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.lambda, p.fsd, p.dac);
        csv << buf;
        ls.push_back(p.lambda);
        fs_.push_back(p.fsd);
        dac.push_back(p.dac);
      }
      write_file(fs::path(sw_out) / "sweep.csv", csv.str());
      write_file(fs::path(sw_out) / "sweep.svg", svg::lambda_plot(ls, fs_, dac));
      std::cout << csv.str();
      return 0;
    }

    if (pl->parsed() || dk->parsed()) {
      const bool plot = pl->parsed();
      const Common& c = plot ? pl_c : dk_c;
      train::TrainConfig cfg = resolve_config(c);
      override(plot ? pl_dataset_opt : dk_dataset_opt, plot ? pl_dataset : dk_dataset, cfg.dataset);
      override(plot ? pl_cvae_opt : dk_cvae_opt, plot ? pl_cvae : dk_cvae, cfg.cvae_checkpoint);
      override(plot ? pl_dsf_opt : dk_dsf_opt, plot ? pl_dsf : dk_dsf, cfg.dsf_checkpoint);
      const std::string& scene_id = plot ? pl_scene : dk_scene;
      const train::Sampler sampler = train::parse_sampler(plot ? pl_sampler : dk_sampler);
      const data::Dataset ds = data::read(cfg.dataset);
      const scene::SceneRecord* rec = ds.find(scene_id);
      if (!rec) {
        std::cerr << "error: scene '" << scene_id << "' not found in " << cfg.dataset << "\n";
        return 1;
      }
      auto [backbone, dsf] = load_models(cfg, cfg.dsf_checkpoint, sampler);
      check_compatible(ds, backbone->config());
      const std::size_t n = dsf ? dsf->config().n_samples : cfg.model.n_samples;
      const std::vector<scene::SceneRecord> one{*rec};
      const Tensor rows = train::predict(*backbone, dsf.get(), one, sampler, n, cfg.seed).front();
      if (plot) {
        write_file(pl_out, svg::scene_plot(*rec, model::to_world(rows, 0, n, rec->map)));
        return 0;
      }
      const ad::Var world = model::agent_to_world(ad::constant(rows), rec->map);
      const dpp::KernelKind kind = dpp::parse_kernel_kind(dk_kernel);
      const dpp::DppKernelMatrix k = dpp::build_calibrated_kernel(world, rec->trajectory.current(), kind,
                                                                  dpp::parse_alpha_mode(dk_alpha));
      if (fs::path(dk_out).has_parent_path()) fs::create_directories(fs::path(dk_out).parent_path());
      checkpoint::write_entries(dk_out, {{"kernel", k.entries.value()},
                                         {"marginal_kernel", dpp::marginal_kernel(k.entries.value())},
                                         {"alpha", Tensor::scalar(k.alpha)},
                                         {"jitter", Tensor::scalar(k.jitter)}});
      std::cout << "expected cardinality " << dpp::expected_cardinality(k.entries.value()) << "\n";
      return 0;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
