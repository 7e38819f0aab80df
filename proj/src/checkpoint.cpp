#include "trajdiv/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace trajdiv::checkpoint {
namespace {

constexpr char kMagic[8] = {'T', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::ostream& os, T value) {
  auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  std::array<char, sizeof(T)> bytes{};
  if (!is.read(bytes.data(), sizeof(T))) throw std::runtime_error("checkpoint: unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace

void write_entries(const std::filesystem::path& path, const std::vector<Entry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    for (double v : t.data()) put<double>(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

std::vector<Entry> read_entries(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(is);
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated entry name");
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    Tensor t(shape);
    for (double& v : t.data()) v = get<double>(is);
    entries.emplace_back(std::move(name), std::move(t));
  }
  return entries;
}

std::vector<Entry> snapshot(const nn::ParameterList& params) {
  std::vector<Entry> entries;
  for (const auto& p : params.params()) entries.emplace_back(p.path, p.var->value());
  for (const auto& b : params.buffers()) entries.emplace_back(b.path, *b.tensor);
  return entries;
}

void restore(const std::vector<Entry>& entries, const nn::ParameterList& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  auto lookup = [&](const std::string& path, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(path);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing entry '" + path + "'");
    if (it->second->shape() != shape) {
      throw std::runtime_error("checkpoint: entry '" + path + "' has shape " + shape_str(it->second->shape()) +
                               ", expected " + shape_str(shape));
    }
    return *it->second;
  };
  for (const auto& p : params.params()) p.var->mutable_value() = lookup(p.path, p.var->shape());
  for (const auto& b : params.buffers()) *b.tensor = lookup(b.path, b.tensor->shape());
}

void save(const std::filesystem::path& path, const nn::ParameterList& params) {
  write_entries(path, snapshot(params));
}

void load(const std::filesystem::path& path, const nn::ParameterList& params) {
  restore(read_entries(path), params);
}

}  // namespace trajdiv::checkpoint
