#include "trajdiv/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "trajdiv/checkpoint.hpp"
#include "trajdiv/optim.hpp"

namespace trajdiv::train {
namespace {

using nlohmann::json;
using model::Var;

// Scenes per inference chunk. Fixed so results do not depend on the number
// of evaluation workers.
constexpr std::size_t kChunk = 64;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) throw std::invalid_argument("unknown config key '" + where + item.key() + "'");
  }
}

std::uint64_t fnv64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string rng_digest(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv64(os.str())));
  return buf;
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

/// Contiguous batches over `order`; a trailing single scene joins the
/// previous batch because batch norm needs two rows.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

model::Batch batch_of(const std::vector<scene::SceneRecord>& scenes, const std::vector<std::size_t>& idx,
                      const model::ModelConfig& config) {
  std::vector<const scene::SceneRecord*> ptrs;
  ptrs.reserve(idx.size());
  for (std::size_t i : idx) ptrs.push_back(&scenes[i]);
  return model::make_batch(ptrs, config);
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t cols = t.cols();
  Tensor out({idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return out;
}

/// Disables gradient recording on the given parameters for its lifetime.
class NoGrad {
 public:
  explicit NoGrad(std::vector<nn::ParameterList> lists) : lists_(std::move(lists)) {
    for (const auto& list : lists_) {
      for (const auto& p : list.params()) {
        saved_.push_back(p.var->requires_grad());
        p.var->set_requires_grad(false);
      }
    }
  }
  ~NoGrad() {
    std::size_t k = 0;
    for (const auto& list : lists_)
      for (const auto& p : list.params()) p.var->set_requires_grad(saved_[k++]);
  }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  std::vector<nn::ParameterList> lists_;
  std::vector<bool> saved_;
};

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = begin + i;
  return v;
}

model::Embeddings embed_all(model::CvaeModel& backbone, const std::vector<scene::SceneRecord>& scenes) {
  model::Embeddings all;
  const auto& cfg = backbone.config();
  all.h = Tensor({scenes.size(), cfg.d_h});
  all.m = Tensor({scenes.size(), cfg.d_m});
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    const std::size_t end = std::min(scenes.size(), start + kChunk);
    const model::Embeddings e = model::embed(backbone, batch_of(scenes, range(start, end), cfg));
    std::copy(e.h.data().begin(), e.h.data().end(),
              all.h.data().begin() + static_cast<std::ptrdiff_t>(start * cfg.d_h));
    std::copy(e.m.data().begin(), e.m.data().end(),
              all.m.data().begin() + static_cast<std::ptrdiff_t>(start * cfg.d_m));
  }
  return all;
}

/// Predictions for scenes [start, end) as one (count * n) x 2T_f tensor.
Tensor predict_chunk(model::CvaeModel& backbone, model::DiversitySampler* dsf,
                     const std::vector<scene::SceneRecord>& scenes, std::size_t start, std::size_t end,
                     Sampler sampler, std::size_t n, std::uint64_t seed) {
  const auto& cfg = backbone.config();
  const model::Embeddings e = model::embed(backbone, batch_of(scenes, range(start, end), cfg));
  if (sampler == Sampler::dsf) return model::dsf_sample(backbone, *dsf, e.h, e.m, false).value();
  // One stream per scene keeps prior draws independent of batching.
  Tensor z({(end - start) * n, cfg.d_z});
  for (std::size_t i = start; i < end; ++i) {
    std::mt19937_64 rng(scene::mix_seed(seed, scenes[i].seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t k = 0; k < n * cfg.d_z; ++k) z[(i - start) * n * cfg.d_z + k] = normal(rng);
  }
  return backbone
      .decode(ad::constant(std::move(z)), ad::constant(model::repeat_rows(e.h, n)),
              ad::constant(model::repeat_rows(e.m, n)))
      .value();
}

std::vector<scene::Point2> truth_future(const scene::SceneRecord& rec) {
  const auto f = rec.trajectory.future();
  return {f.begin(), f.end()};
}

/// Mean FSD and DAC of agent-frame predictions.
std::pair<double, double> fsd_dac(const Tensor& rows, const std::vector<scene::SceneRecord>& scenes, std::size_t n) {
  double fsd = 0.0, dac = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const metrics::TrajectorySet set = model::to_world(rows, i * n, n, scenes[i].map);
    fsd += metrics::asd_fsd(set).fsd;
    dac += metrics::dac(set, scenes[i].map);
  }
  const double count = static_cast<double>(scenes.size());
  return {fsd / count, dac / count};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json read_sidecar(const std::filesystem::path& path) {
  const std::filesystem::path side = path.string() + ".json";
  std::ifstream in(side);
  if (!in) throw std::runtime_error("checkpoint sidecar not found: " + side.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint sidecar is not valid JSON: " + std::string(e.what()));
  }
}

void write_sidecar(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string() + ".json");
  out << j.dump(1) << "\n";
}

model::ModelConfig sidecar_model(const json& side, const std::string& kind, const std::filesystem::path& path) {
  if (side.value("kind", "") != kind) {
    throw std::runtime_error(path.string() + " is not a " + kind + " checkpoint");
  }
  const model::ModelConfig cfg = model::ModelConfig::from_json(side.at("model"));
  if (cfg.architecture_hash() != side.value("architecture_hash", "")) {
    throw std::runtime_error("architecture hash mismatch in " + path.string() + ".json");
  }
  return cfg;
}

}  // namespace

json TrainConfig::to_json() const {
  return {{"schema_version", kSchemaVersion},
          {"seed", seed},
          {"model", model.to_json()},
          {"cvae",
           {{"epochs", cvae.epochs},
            {"batch_size", cvae.batch_size},
            {"learning_rate", cvae.learning_rate},
            {"beta", cvae.beta},
            {"clip_norm", cvae.clip_norm}}},
          {"dsf",
           {{"epochs", dsf.epochs},
            {"batch_size", dsf.batch_size},
            {"learning_rate", dsf.learning_rate},
            {"lambda", dsf.lambda},
            {"clip_norm", dsf.clip_norm},
            {"alpha_mode", dpp::to_string(dsf.alpha_mode)},
            {"normalize_layout", dsf.normalize_layout}}},
          {"dataset", dataset},
          {"cvae_checkpoint", cvae_checkpoint},
          {"dsf_checkpoint", dsf_checkpoint},
          {"log", log},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j,
             {"schema_version", "seed", "model", "cvae", "dsf", "dataset", "cvae_checkpoint", "dsf_checkpoint", "log",
              "threads"},
             "");
  TrainConfig c;
  try {
    if (j.value("schema_version", kSchemaVersion) != kSchemaVersion) {
      throw std::invalid_argument("unsupported config schema_version " + j.at("schema_version").dump());
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
      std::set<std::string> keys;
      const json defaults = model::ModelConfig{}.to_json();
      for (const auto& item : defaults.items()) keys.insert(item.key());
      check_keys(j.at("model"), keys, "model.");
      c.model = model::ModelConfig::from_json(j.at("model"));
    }
    if (j.contains("cvae")) {
      const json& s = j.at("cvae");
      check_keys(s, {"epochs", "batch_size", "learning_rate", "beta", "clip_norm"}, "cvae.");
      c.cvae.epochs = s.value("epochs", c.cvae.epochs);
      c.cvae.batch_size = s.value("batch_size", c.cvae.batch_size);
      c.cvae.learning_rate = s.value("learning_rate", c.cvae.learning_rate);
      c.cvae.beta = s.value("beta", c.cvae.beta);
      c.cvae.clip_norm = s.value("clip_norm", c.cvae.clip_norm);
    }
    if (j.contains("dsf")) {
      const json& s = j.at("dsf");
      check_keys(s,
                 {"epochs", "batch_size", "learning_rate", "lambda", "clip_norm", "alpha_mode", "normalize_layout"},
                 "dsf.");
      c.dsf.epochs = s.value("epochs", c.dsf.epochs);
      c.dsf.batch_size = s.value("batch_size", c.dsf.batch_size);
      c.dsf.learning_rate = s.value("learning_rate", c.dsf.learning_rate);
      c.dsf.lambda = s.value("lambda", c.dsf.lambda);
      c.dsf.clip_norm = s.value("clip_norm", c.dsf.clip_norm);
      if (s.contains("alpha_mode")) c.dsf.alpha_mode = dpp::parse_alpha_mode(s.at("alpha_mode").get<std::string>());
      c.dsf.normalize_layout = s.value("normalize_layout", c.dsf.normalize_layout);
    }
    c.dataset = j.value("dataset", c.dataset);
    c.cvae_checkpoint = j.value("cvae_checkpoint", c.cvae_checkpoint);
    c.dsf_checkpoint = j.value("dsf_checkpoint", c.dsf_checkpoint);
    c.log = j.value("log", c.log);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config has a value of the wrong type: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid config: " + what);
  };
  require(cvae.epochs > 0 && dsf.epochs > 0, "epochs must be positive");
  require(cvae.batch_size >= 2 && dsf.batch_size >= 2, "batch_size must be at least 2");
  require(cvae.learning_rate > 0 && dsf.learning_rate > 0, "learning_rate must be positive");
  require(dsf.lambda >= 0.0 && dsf.lambda <= 1.0, "dsf.lambda must lie in [0, 1]");
  require(cvae.beta >= 0.0, "cvae.beta must be non-negative");
  require(model.past_len >= 2 && model.future_len >= 1, "horizons too short");
  require(model.grid_size >= 32, "grid_size must be at least 32");
  require(model.d_h > 0 && model.d_m > 0 && model.d_z > 0, "embedding sizes must be positive");
  require(model.n_samples >= 2 && model.n_samples <= 64, "n_samples must lie in [2, 64]");
  require(model.fusion != model::FusionMode::concat || model.d_z % 2 == 0, "concat fusion needs an even d_z");
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file is not valid JSON: " + std::string(e.what()));
  }
  return TrainConfig::from_json(j);
}

std::string log_csv(const std::vector<LogRecord>& log) {
  std::string out = "step,epoch,reconstruction,kl,dpp,layout,total,rng_digest\n";
  for (const LogRecord& r : log) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.reconstruction) + "," + fmt(r.kl) +
           "," + fmt(r.dpp) + "," + fmt(r.layout) + "," + fmt(r.total) + "," + r.rng_digest + "\n";
  }
  return out;
}

CvaeRun train_cvae(model::CvaeModel& model, const data::Dataset& dataset, const TrainConfig& config,
                   const Progress& progress) {
  config.validate();
  if (dataset.train.empty()) throw std::invalid_argument("train_cvae: empty training split");
  const model::ModelConfig& mc = model.config();
  const auto& val = dataset.val.empty() ? dataset.train : dataset.val;
  nn::ParameterList params = model.parameters();
  params.set_requires_grad(true);
  optim::Adam opt(params, {.lr = config.cvae.learning_rate, .clip_norm = config.cvae.clip_norm});
  std::mt19937_64 rng(scene::mix_seed(config.seed, fnv64("cvae")));
  std::normal_distribution<double> normal(0.0, 1.0);

  CvaeRun run;
  std::vector<checkpoint::Entry> best = checkpoint::snapshot(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = range(0, dataset.train.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.cvae.epochs; ++epoch) {
    shuffle(order, rng);
    try {
      for (const auto& idx : make_batches(order, config.cvae.batch_size)) {
        const model::Batch b = batch_of(dataset.train, idx, mc);
        const Var h = model.encode_past(ad::constant(b.past));
        const Var m = model.encode_map(ad::constant(b.maps), true);
        const model::LatentDistribution q = model.posterior(h, m, ad::constant(b.future));
        Tensor eps({b.size(), mc.d_z});
        for (double& v : eps.data()) v = normal(rng);
        const Var pred = model.decode(model::reparameterize(q, eps), h, m);
        const losses::LossBreakdown loss = losses::cvae_loss(pred, b.future, q, config.cvae.beta);
        opt.zero_grad();
        ad::backward(loss.total);
        opt.step();
        LogRecord rec;
        rec.step = ++step;
        rec.epoch = epoch;
        rec.reconstruction = loss.reconstruction.item();
        rec.kl = loss.kl.item();
        rec.total = loss.total.item();
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.rng_digest = rng_digest(rng);
        run.log.push_back(std::move(rec));
      }
    } catch (const NumericalError& e) {
      checkpoint::restore(best, params);
      throw TrainingDiverged("cVAE training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }

    // Validation reconstruction decodes the posterior mean in eval mode.
    double val_sum = 0.0;
    {
      NoGrad guard({params});
      for (std::size_t start = 0; start < val.size(); start += kChunk) {
        const std::size_t end = std::min(val.size(), start + kChunk);
        const model::Batch b = batch_of(val, range(start, end), mc);
        const Var h = model.encode_past(ad::constant(b.past));
        const Var m = model.encode_map(ad::constant(b.maps), false);
        const model::LatentDistribution q = model.posterior(h, m, ad::constant(b.future));
        const Var pred = model.decode(q.mean, h, m);
        const Tensor diff = ad::sub(pred, ad::constant(b.future)).value();
        for (double d : diff.data()) val_sum += d * d;
      }
    }
    const double val_recon = val_sum / static_cast<double>(val.size() * 2 * mc.future_len);
    run.val_reconstruction.push_back(val_recon);
    if (val_recon < best_val) {
      best_val = val_recon;
      run.best_epoch = epoch;
      best = checkpoint::snapshot(params);
    }
    if (progress) {
      const LogRecord& last = run.log.back();
      char buf[160];
      std::snprintf(buf, sizeof(buf), "cvae epoch %zu/%zu recon %.4f kl %.4f val_recon %.4f (%.1fs)", epoch,
                    config.cvae.epochs, last.reconstruction, last.kl, val_recon, last.wall_seconds);
      progress(buf);
    }
  }
  checkpoint::restore(best, params);
  return run;
}

DsfRun train_dsf(model::CvaeModel& backbone, model::DiversitySampler& dsf, const data::Dataset& dataset,
                 const TrainConfig& config, const Progress& progress) {
  config.validate();
  if (dataset.train.empty()) throw std::invalid_argument("train_dsf: empty training split");
  const model::ModelConfig& mc = backbone.config();
  if (mc.backbone_hash() != config.model.backbone_hash() || mc.backbone_hash() != dsf.config().backbone_hash()) {
    throw std::runtime_error("backbone architecture hash mismatch: checkpoint " + mc.backbone_hash() +
                             ", config " + config.model.backbone_hash());
  }
  const auto& val = dataset.val.empty() ? dataset.train : dataset.val;
  const std::size_t n = dsf.config().n_samples;

  nn::ParameterList frozen = backbone.parameters();
  frozen.set_requires_grad(false);
  frozen.zero_grad();
  const std::vector<checkpoint::Entry> frozen_values = checkpoint::snapshot(frozen);

  nn::ParameterList params = dsf.parameters();
  params.set_requires_grad(true);
  optim::Adam opt(params, {.lr = config.dsf.learning_rate, .clip_norm = config.dsf.clip_norm});
  std::mt19937_64 rng(scene::mix_seed(config.seed, fnv64("dsf")));

  const model::Embeddings train_emb = embed_all(backbone, dataset.train);
  const model::Embeddings val_emb = embed_all(backbone, val);
  std::vector<scene::ChamferField> fields;
  fields.reserve(dataset.train.size());
  for (const auto& rec : dataset.train) fields.push_back(scene::chamfer_transform(rec.map));
  const losses::DsfLossOptions loss_options{.lambda = config.dsf.lambda,
                                            .kernel = dsf.config().kernel,
                                            .alpha_mode = config.dsf.alpha_mode,
                                            .normalize_layout = config.dsf.normalize_layout};

  DsfRun run;
  std::vector<checkpoint::Entry> best = checkpoint::snapshot(params);
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = range(0, dataset.train.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.dsf.epochs; ++epoch) {
    shuffle(order, rng);
    try {
      for (const auto& idx : make_batches(order, config.dsf.batch_size)) {
        const Var rows = model::dsf_sample(backbone, dsf, gather_rows(train_emb.h, idx),
                                           gather_rows(train_emb.m, idx), true);
        Var total, dpp_sum, layout_sum;
        for (std::size_t b = 0; b < idx.size(); ++b) {
          const scene::SceneRecord& rec = dataset.train[idx[b]];
          const Var world = model::agent_to_world(ad::slice(rows, 0, b * n, (b + 1) * n), rec.map);
          const losses::LossBreakdown l =
              losses::dsf_loss(world, rec.trajectory.current(), fields[idx[b]], loss_options);
          total = b == 0 ? l.total : ad::add(total, l.total);
          dpp_sum = b == 0 ? l.dpp : ad::add(dpp_sum, l.dpp);
          layout_sum = b == 0 ? l.layout : ad::add(layout_sum, l.layout);
        }
        const double inv = 1.0 / static_cast<double>(idx.size());
        const Var loss = ad::scale(total, inv);
        opt.zero_grad();
        ad::backward(loss);
        for (const auto& p : frozen.params()) {
          if (!p.var->grad().empty()) throw std::logic_error("gradient reached frozen parameter " + p.path);
        }
        opt.step();
        LogRecord rec;
        rec.step = ++step;
        rec.epoch = epoch;
        rec.dpp = dpp_sum.item() * inv;
        rec.layout = layout_sum.item() * inv;
        rec.total = loss.item();
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.rng_digest = rng_digest(rng);
        run.log.push_back(std::move(rec));
      }
    } catch (const NumericalError& e) {
      checkpoint::restore(best, params);
      throw TrainingDiverged("sampler training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }

    Tensor preds;
    {
      NoGrad guard({params});
      preds = model::dsf_sample(backbone, dsf, val_emb.h, val_emb.m, false).value();
    }
    const auto [fsd, dac] = fsd_dac(preds, val, n);
    run.val_fsd.push_back(fsd);
    run.val_dac.push_back(dac);
    if (fsd * dac > best_score) {
      best_score = fsd * dac;
      run.best_epoch = epoch;
      best = checkpoint::snapshot(params);
    }
    if (progress) {
      const LogRecord& last = run.log.back();
      char buf[200];
      std::snprintf(buf, sizeof(buf), "dsf epoch %zu/%zu dpp %.4f layout %.4f val_fsd %.3f val_dac %.3f (%.1fs)",
                    epoch, config.dsf.epochs, last.dpp, last.layout, fsd, dac, last.wall_seconds);
      progress(buf);
    }
  }
  checkpoint::restore(best, params);
  const std::vector<checkpoint::Entry> after = checkpoint::snapshot(frozen);
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (!(after[i].second == frozen_values[i].second)) {
      throw std::logic_error("frozen parameter " + after[i].first + " changed during sampler training");
    }
  }
  return run;
}

std::string to_string(Sampler s) { return s == Sampler::prior ? "prior" : "dsf"; }

Sampler parse_sampler(std::string_view name) {
  if (name == "prior") return Sampler::prior;
  if (name == "dsf") return Sampler::dsf;
  throw std::invalid_argument("unknown sampler '" + std::string(name) + "'");
}

std::vector<Tensor> predict(model::CvaeModel& backbone, model::DiversitySampler* dsf,
                            const std::vector<scene::SceneRecord>& scenes, Sampler sampler, std::size_t n,
                            std::uint64_t seed) {
  if (sampler == Sampler::dsf) {
    if (!dsf) throw std::invalid_argument("the dsf sampler needs a trained sampler checkpoint");
    if (dsf->config().n_samples != n) {
      throw std::invalid_argument("sampler emits " + std::to_string(dsf->config().n_samples) + " samples, not " +
                                  std::to_string(n));
    }
  }
  std::vector<nn::ParameterList> lists{backbone.parameters()};
  if (dsf) lists.push_back(dsf->parameters());
  NoGrad guard(lists);
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    const std::size_t end = std::min(scenes.size(), start + kChunk);
    const Tensor rows = predict_chunk(backbone, dsf, scenes, start, end, sampler, n, seed);
    for (std::size_t i = 0; i < end - start; ++i) {
      const std::size_t cols = rows.cols();
      Tensor t({n, cols});
      std::copy_n(rows.data().begin() + static_cast<std::ptrdiff_t>(i * n * cols), n * cols, t.data().begin());
      out.push_back(std::move(t));
    }
  }
  return out;
}

metrics::EvalReport evaluate(model::CvaeModel& backbone, model::DiversitySampler* dsf,
                             const std::vector<scene::SceneRecord>& scenes, Sampler sampler, std::size_t n,
                             std::uint64_t seed, std::size_t threads) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
  if (sampler == Sampler::dsf && !dsf) throw std::invalid_argument("the dsf sampler needs a trained sampler checkpoint");
  if (sampler == Sampler::dsf && dsf->config().n_samples != n) {
    throw std::invalid_argument("sampler emits " + std::to_string(dsf->config().n_samples) + " samples, not " +
                                std::to_string(n));
  }
  std::vector<nn::ParameterList> lists{backbone.parameters()};
  if (dsf) lists.push_back(dsf->parameters());
  NoGrad guard(lists);

  const std::size_t chunks = (scenes.size() + kChunk - 1) / kChunk;
  std::vector<metrics::SceneMetrics> per_scene(scenes.size());
  auto work = [&](std::size_t chunk) {
    const std::size_t start = chunk * kChunk, end = std::min(scenes.size(), start + kChunk);
    const Tensor rows = predict_chunk(backbone, dsf, scenes, start, end, sampler, n, seed);
    for (std::size_t i = start; i < end; ++i) {
      const metrics::TrajectorySet set = model::to_world(rows, (i - start) * n, n, scenes[i].map);
      per_scene[i] = metrics::evaluate_scene(scenes[i].id, set, truth_future(scenes[i]), scenes[i].map);
    }
  };
  std::size_t workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  workers = std::min(workers, chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) work(c);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += workers) work(c);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return metrics::summarize(std::move(per_scene), n);
}

void save_cvae(const std::filesystem::path& path, model::CvaeModel& model) {
  checkpoint::save(path, model.parameters());
  const auto& cfg = model.config();
  write_sidecar(path, {{"kind", "cvae"},
                       {"model", cfg.to_json()},
                       {"architecture_hash", cfg.architecture_hash()},
                       {"backbone_hash", cfg.backbone_hash()}});
}

std::unique_ptr<model::CvaeModel> load_cvae(const std::filesystem::path& path) {
  const model::ModelConfig cfg = sidecar_model(read_sidecar(path), "cvae", path);
  auto m = std::make_unique<model::CvaeModel>(cfg, 0);
  checkpoint::load(path, m->parameters());
  return m;
}

void save_dsf(const std::filesystem::path& path, model::DiversitySampler& dsf, const model::CvaeModel& backbone) {
  checkpoint::save(path, dsf.parameters());
  const auto& cfg = dsf.config();
  write_sidecar(path, {{"kind", "dsf"},
                       {"model", cfg.to_json()},
                       {"architecture_hash", cfg.architecture_hash()},
                       {"backbone_hash", backbone.config().backbone_hash()}});
}

std::unique_ptr<model::DiversitySampler> load_dsf(const std::filesystem::path& path,
                                                  const model::CvaeModel& backbone) {
  const json side = read_sidecar(path);
  const model::ModelConfig cfg = sidecar_model(side, "dsf", path);
  if (side.value("backbone_hash", "") != backbone.config().backbone_hash() ||
      cfg.backbone_hash() != backbone.config().backbone_hash()) {
    throw std::runtime_error("sampler " + path.string() + " was trained on a different backbone architecture");
  }
  auto d = std::make_unique<model::DiversitySampler>(cfg, 0);
  checkpoint::load(path, d->parameters());
  return d;
}

std::vector<AblationCell> ablation_cells(double lambda, bool fusion_modes) {
  using model::BranchMode;
  using model::FusionMode;
  std::vector<AblationCell> cells = {
      {"cvae-prior", true, BranchMode::two_branch, FusionMode::product, 0.0},
      {"1B-D", false, BranchMode::diversity_only, FusionMode::product, 1.0},
      {"1B-L", false, BranchMode::layout_only, FusionMode::product, 0.0},
      {"2B-D", false, BranchMode::two_branch, FusionMode::product, 1.0},
      {"2B-D+L", false, BranchMode::two_branch, FusionMode::product, lambda},
  };
  if (fusion_modes) {
    cells.push_back({"2B-D+L-concat", false, BranchMode::two_branch, FusionMode::concat, lambda});
    cells.push_back({"2B-D+L-sum", false, BranchMode::two_branch, FusionMode::sum, lambda});
  }
  return cells;
}

std::uint64_t cell_seed(std::uint64_t seed, const AblationCell& cell) {
  // Depends on the sampler architecture only: cells that differ in lambda
  // start from the same weights and see the same batch order, so their
  // comparison isolates the loss weighting. The label never matters.
  const std::string key = cell.prior ? std::string("prior")
                                     : model::to_string(cell.branches) + "/" + model::to_string(cell.fusion);
  return scene::mix_seed(seed, fnv64(key));
}

std::vector<CellResult> run_ablation_grid(model::CvaeModel& backbone, const data::Dataset& dataset,
                                          const TrainConfig& config, const std::vector<AblationCell>& cells,
                                          const Progress& progress) {
  const auto& val = dataset.val.empty() ? dataset.train : dataset.val;
  const std::size_t n = config.model.n_samples;
  std::vector<CellResult> out;
  for (const AblationCell& cell : cells) {
    CellResult r;
    r.cell = cell;
    r.seed = cell_seed(config.seed, cell);
    if (progress) progress("cell " + cell.name);
    if (cell.prior) {
      r.report = evaluate(backbone, nullptr, val, Sampler::prior, n, config.seed, config.threads);
    } else {
      model::ModelConfig mc = config.model;
      mc.branches = cell.branches;
      mc.fusion = cell.fusion;
      TrainConfig tc = config;
      tc.model = mc;
      tc.dsf.lambda = cell.lambda;
      tc.seed = r.seed;
      model::DiversitySampler dsf(mc, r.seed);
      train_dsf(backbone, dsf, dataset, tc, progress);
      r.report = evaluate(backbone, &dsf, val, Sampler::dsf, n, config.seed, config.threads);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SweepPoint> run_lambda_sweep(model::CvaeModel& backbone, const data::Dataset& dataset,
                                         const TrainConfig& config, const std::vector<double>& lambdas,
                                         const Progress& progress) {
  std::vector<AblationCell> cells;
  for (double lambda : lambdas) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    cells.push_back({"lambda=" + fmt(lambda), false, model::BranchMode::two_branch, config.model.fusion, lambda});
  }
  std::vector<SweepPoint> out;
  for (const CellResult& r : run_ablation_grid(backbone, dataset, config, cells, progress)) {
    out.push_back({r.cell.lambda, r.report.mean.fsd, r.report.mean.dac});
  }
  return out;
}

std::string ablation_table(const std::vector<CellResult>& results) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-16s %8s %8s %8s %7s %9s %7s %7s\n", "cell", "mADE", "mFDE", "rF", "DAC", "DAO",
                "ASD", "FSD");
  out += buf;
  for (const CellResult& r : results) {
    const auto& m = r.report.mean;
    std::snprintf(buf, sizeof(buf), "%-16s %8.3f %8.3f %8.3f %7.3f %9.2f %7.3f %7.3f\n", r.cell.name.c_str(), m.made,
                  m.mfde, m.rf, m.dac, m.dao, m.asd, m.fsd);
    out += buf;
  }
  return out;
}

}  // namespace trajdiv::train
