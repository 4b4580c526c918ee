#include "msp/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "msp/error.hpp"

namespace msp {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (params_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  return params_.emplace(name, std::move(value)).first->second;
}

Tensor& ParameterStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor& ParameterStore::add_constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

namespace {
bool matches(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  for (const auto& p : prefixes)
    if (name.starts_with(p)) return true;
  return false;
}
}  // namespace

std::vector<std::pair<std::string, Tensor>> ParameterStore::select(const std::vector<std::string>& prefixes) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params_)
    if (matches(name, prefixes)) out.emplace_back(name, t);
  return out;
}

void ParameterStore::zero_grad(const std::vector<std::string>& prefixes) {
  for (auto& [name, t] : params_)
    if (matches(name, prefixes)) t.zero_grad();
}

std::uint64_t ParameterStore::hash(const std::vector<std::string>& prefixes) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params_) {
    if (!matches(name, prefixes)) continue;
    mix(name.data(), name.size());
    mix(t.data().data(), t.data().size() * sizeof(double));
  }
  return h;
}

void ParamContainer::put(const std::string& name, const Tensor& t) {
  entries[name] = {t.shape(), t.to_vector()};
}

void ParamContainer::put_all(const ParameterStore& store, const std::string& prefix) {
  for (const auto& [name, t] : store.all()) put(prefix + name, t);
}

void ParamContainer::load_into(ParameterStore& store, const std::string& prefix) const {
  for (const auto& [name, t] : store.all()) {
    auto it = entries.find(prefix + name);
    if (it == entries.end()) throw DataError("checkpoint is missing parameter '" + prefix + name + "'");
    if (it->second.first != t.shape()) {
      throw DataError("checkpoint parameter '" + prefix + name + "' has shape " +
                      shape_to_string(it->second.first) + ", model expects " + shape_to_string(t.shape()));
    }
    Tensor target = t;
    std::copy(it->second.second.begin(), it->second.second.end(), target.mutable_data().begin());
  }
}

namespace {

constexpr char kMagic[8] = {'M', 'S', 'P', 'P', 'A', 'R', 'A', 'M'};

template <typename T>
void put_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated container while reading " + what);
  return v;
}

std::string get_bytes(std::istream& is, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("truncated container while reading " + what);
  return s;
}

}  // namespace

void ParamContainer::write(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put_raw<std::uint32_t>(os, version);
  std::string text;
  for (const auto& [k, v] : header) text += k + "=" + v + "\n";
  put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_raw<std::uint64_t>(os, entries.size());
  for (const auto& [name, entry] : entries) {
    const auto& [shape, values] = entry;
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_raw<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

ParamContainer ParamContainer::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open container '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("'" + path.string() + "' is not a parameter container");
  }
  ParamContainer c;
  c.version = get_raw<std::uint32_t>(is, "version");
  if (c.version != kFormatVersion) {
    throw DataError("unsupported container version " + std::to_string(c.version));
  }
  const auto header_len = get_raw<std::uint32_t>(is, "header length");
  const std::string text = get_bytes(is, header_len, "header");
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(pos, nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed container header line '" + line + "'");
    c.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = get_raw<std::uint64_t>(is, "entry count");
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = get_raw<std::uint32_t>(is, "name length");
    auto name = get_bytes(is, name_len, "name");
    const auto rank = get_raw<std::uint32_t>(is, "rank of " + name);
    Shape shape(rank);
    for (auto& d : shape) d = get_raw<std::uint64_t>(is, "shape of " + name);
    std::vector<double> values(shape_numel(shape));
    if (!values.empty() &&
        !is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw DataError("truncated data for '" + name + "'");
    }
    c.entries[std::move(name)] = {std::move(shape), std::move(values)};
  }
  return c;
}

}  // namespace msp
