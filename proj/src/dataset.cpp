#include "trajdiv/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace trajdiv::data {
namespace {

using nlohmann::json;

constexpr char kRasterMagic[8] = {'T', 'D', 'R', 'A', 'S', 'T', 'E', 'R'};
constexpr std::uint64_t kValStream = 1ULL << 32;

double parse_number(std::string_view text) {
  const std::string s(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("layout mix: '" + s + "' is not a number");
  }
  if (used != s.size()) throw std::invalid_argument("layout mix: '" + s + "' is not a number");
  return v;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    out.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
void put(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("raster blob truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_values(std::ostream& os, const std::vector<double>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) put<double>(os, v);
  }
}

void get_values(std::istream& is, std::vector<double>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw std::runtime_error("raster blob truncated");
    }
  } else {
    for (double& v : values) v = get<double>(is);
  }
}

json affine_json(const scene::Affine2& a) {
  const auto v = a.to_array();
  return json(std::vector<double>(v.begin(), v.end()));
}

scene::Affine2 affine_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 6) throw std::runtime_error("dataset index: affine transform needs 6 values");
  return scene::Affine2::from_array({v[0], v[1], v[2], v[3], v[4], v[5]});
}

std::vector<scene::SceneRecord> generate_split(const DatasetSpec& spec, std::size_t n, std::uint64_t stream_base) {
  const std::array<std::size_t, 4> counts = spec.mix.counts(n);
  std::vector<scene::LayoutKind> kinds;
  for (std::size_t k = 0; k < counts.size(); ++k) kinds.insert(kinds.end(), counts[k], scene::kAllLayoutKinds[k]);
  std::mt19937_64 rng(scene::mix_seed(spec.seed, stream_base + 0xfffffULL));
  // Fisher-Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::size_t i = kinds.size(); i > 1; --i) {
    std::swap(kinds[i - 1], kinds[static_cast<std::size_t>(rng() % i)]);
  }
  std::vector<scene::SceneRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(scene::generate_record(kinds[i], scene::mix_seed(spec.seed, stream_base + i), spec.grid_size));
  }
  return out;
}

json record_json(const scene::SceneRecord& rec, const char* split_name, std::size_t raster_index) {
  json pts = json::array();
  for (scene::Point2 p : rec.trajectory.points) pts.push_back({p.x, p.y});
  return {{"id", rec.id},
          {"split", split_name},
          {"kind", scene::to_string(rec.kind)},
          {"seed", rec.seed},
          {"rate_hz", rec.trajectory.rate_hz},
          {"past_len", rec.trajectory.past_len},
          {"points", pts},
          {"raster", {{"file", kRasterFile}, {"index", raster_index}}},
          {"world_to_grid", affine_json(rec.map.world_to_grid)},
          {"world_to_agent", affine_json(rec.map.world_to_agent)}};
}

}  // namespace

LayoutMix LayoutMix::parse(std::string_view text) {
  LayoutMix mix;
  const auto parts = split(text, ',');
  if (parts.empty() || text.empty()) throw std::invalid_argument("layout mix is empty");
  if (text.find('=') != std::string_view::npos) {
    mix.weights = {0, 0, 0, 0};
    for (std::string_view part : parts) {
      const auto kv = split(part, '=');
      if (kv.size() != 2) throw std::invalid_argument("layout mix: malformed entry '" + std::string(part) + "'");
      const scene::LayoutKind kind = scene::parse_layout_kind(kv[0]);
      mix.weights[static_cast<std::size_t>(kind)] = parse_number(kv[1]);
    }
  } else {
    if (parts.size() != 4) throw std::invalid_argument("layout mix needs 4 weights or kind=weight pairs");
    for (std::size_t i = 0; i < 4; ++i) mix.weights[i] = parse_number(parts[i]);
  }
  double total = 0.0;
  for (double w : mix.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("layout mix weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("layout mix weights sum to zero");
  return mix;
}

std::string LayoutMix::to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    os << (i ? "," : "") << scene::to_string(scene::kAllLayoutKinds[i]) << "=" << weights[i];
  }
  return os.str();
}

std::array<std::size_t, 4> LayoutMix::counts(std::size_t n) const {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::array<std::size_t, 4> out{};
  std::array<double, 4> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double exact = static_cast<double>(n) * weights[i] / total;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::array<std::size_t, 4> order = {0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[order[k % 4]];
  return out;
}

const scene::SceneRecord* Dataset::find(std::string_view id) const {
  for (const auto* split : {&train, &val}) {
    for (const auto& rec : *split) {
      if (rec.id == id) return &rec;
    }
  }
  return nullptr;
}

Dataset generate(const DatasetSpec& spec) {
  if (spec.n_train == 0) throw std::invalid_argument("dataset needs at least one training scene");
  Dataset ds;
  ds.spec = spec;
  ds.train = generate_split(spec, spec.n_train, 0);
  ds.val = generate_split(spec, spec.n_val, kValStream);
  return ds;
}

void write(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t g = dataset.spec.grid_size;
  json records = json::array();
  std::ofstream blob(dir / kRasterFile, std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + (dir / kRasterFile).string());
  blob.write(kRasterMagic, sizeof(kRasterMagic));
  put<std::uint32_t>(blob, kFormatVersion);
  put<std::uint32_t>(blob, static_cast<std::uint32_t>(g));
  put<std::uint32_t>(blob, static_cast<std::uint32_t>(g));
  put<std::uint32_t>(blob, static_cast<std::uint32_t>(scene::kChannels));
  put<std::uint64_t>(blob, dataset.train.size() + dataset.val.size());
  std::size_t index = 0;
  for (const auto& [split, name] : {std::pair{&dataset.train, "train"}, std::pair{&dataset.val, "val"}}) {
    for (const auto& rec : *split) {
      if (rec.map.height != g || rec.map.width != g) throw std::runtime_error("record " + rec.id + " has a stray raster size");
      put_values(blob, rec.map.grid);
      records.push_back(record_json(rec, name, index++));
    }
  }
  if (!blob) throw std::runtime_error("failed writing " + (dir / kRasterFile).string());
  const json index_json = {{"format", "trajdiv-dataset"},
                           {"version", kFormatVersion},
                           {"grid_size", g},
                           {"master_seed", dataset.spec.seed},
                           {"n_train", dataset.spec.n_train},
                           {"n_val", dataset.spec.n_val},
                           {"layout_mix", dataset.spec.mix.to_string()},
                           {"records", records}};
  std::ofstream idx(dir / kIndexFile, std::ios::trunc);
  if (!idx) throw std::runtime_error("cannot write " + (dir / kIndexFile).string());
  idx << index_json.dump(1) << "\n";
}

Dataset read(const std::filesystem::path& dir) {
  std::ifstream idx(dir / kIndexFile);
  if (!idx) throw std::runtime_error("dataset index not found: " + (dir / kIndexFile).string());
  json index_json;
  try {
    index_json = json::parse(idx);
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset index is not valid JSON: " + std::string(e.what()));
  }
  if (index_json.value("format", "") != "trajdiv-dataset" || index_json.value("version", 0u) != kFormatVersion) {
    throw std::runtime_error("unsupported dataset format in " + (dir / kIndexFile).string());
  }
  Dataset ds;
  ds.spec.grid_size = index_json.at("grid_size").get<std::size_t>();
  ds.spec.seed = index_json.at("master_seed").get<std::uint64_t>();
  ds.spec.n_train = index_json.at("n_train").get<std::size_t>();
  ds.spec.n_val = index_json.at("n_val").get<std::size_t>();
  ds.spec.mix = LayoutMix::parse(index_json.at("layout_mix").get<std::string>());

  std::ifstream blob(dir / kRasterFile, std::ios::binary);
  if (!blob) throw std::runtime_error("raster blob not found: " + (dir / kRasterFile).string());
  char magic[8];
  if (!blob.read(magic, sizeof(magic)) || std::memcmp(magic, kRasterMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("raster blob has a bad magic");
  }
  if (get<std::uint32_t>(blob) != kFormatVersion) throw std::runtime_error("raster blob version mismatch");
  const std::size_t h = get<std::uint32_t>(blob), w = get<std::uint32_t>(blob), c = get<std::uint32_t>(blob);
  const std::uint64_t count = get<std::uint64_t>(blob);
  if (h != ds.spec.grid_size || w != ds.spec.grid_size || c != scene::kChannels) {
    throw std::runtime_error("raster blob dimensions do not match the index");
  }
  std::vector<std::vector<double>> rasters(count, std::vector<double>(h * w * c));
  for (auto& r : rasters) get_values(blob, r);

  for (const json& j : index_json.at("records")) {
    scene::SceneRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.kind = scene::parse_layout_kind(j.at("kind").get<std::string>());
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.trajectory.rate_hz = j.at("rate_hz").get<double>();
    rec.trajectory.past_len = j.at("past_len").get<std::size_t>();
    for (const json& p : j.at("points")) rec.trajectory.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    const std::size_t ri = j.at("raster").at("index").get<std::size_t>();
    if (ri >= rasters.size()) throw std::runtime_error("record " + rec.id + " references a missing raster");
    rec.map.height = h;
    rec.map.width = w;
    rec.map.grid = rasters[ri];
    rec.map.world_to_grid = affine_from(j.at("world_to_grid"));
    rec.map.world_to_agent = affine_from(j.at("world_to_agent"));
    const std::string split = j.at("split").get<std::string>();
    if (split == "train") {
      ds.train.push_back(std::move(rec));
    } else if (split == "val") {
      ds.val.push_back(std::move(rec));
    } else {
      throw std::runtime_error("unknown split '" + split + "'");
    }
  }
  return ds;
}

}  // namespace trajdiv::data
