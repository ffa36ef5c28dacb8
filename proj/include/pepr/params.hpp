#pragma once

// Named parameter arrays and the checkpoint archive.
//
// Checkpoint layout (all integers little-endian):
//   8 bytes   magic "PEPRCKPT"
//   u32       format version (1)
//   u64       header length L, then L bytes of UTF-8 JSON (model config, task)
//   u32       array count
//   per array:
//     u32 name length, name bytes
//     u8  kind (0 weight, 1 bias, 2 norm, 3 embedding)
//     u32 ndim, u32 dims[ndim]
//     f32 values[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/autodiff.hpp"
#include "pepr/error.hpp"
#include "pepr/file_audit.hpp"

namespace pepr {

enum class ParamKind : std::uint8_t { weight = 0, bias = 1, norm = 2, embedding = 3 };

template <class T>
struct Parameter {
  std::string name;
  ad::Var<T> var;
  ParamKind kind = ParamKind::weight;
};

template <class T>
class ParameterStore {
 public:
  void add(const std::string& name, ad::Shape shape, std::vector<T> values, ParamKind kind) {
    require(!index_.count(name), "duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({name, ad::Var<T>::parameter(std::move(shape), std::move(values)), kind});
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const ad::Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("missing parameter: " + name);
    return params_[it->second].var;
  }
  ad::Var<T>& get(const std::string& name) {
    return const_cast<ad::Var<T>&>(static_cast<const ParameterStore&>(*this).get(name));
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) return true;
    return false;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Copy holding only parameters accepted by `keep`.
  ParameterStore filtered(const std::function<bool(const std::string&)>& keep) const {
    ParameterStore out;
    for (const auto& p : params_)
      if (keep(p.name))
        out.add(p.name, p.var.shape(), std::vector<T>(p.var.value().begin(), p.var.value().end()), p.kind);
    return out;
  }

  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      std::vector<U> v(p.var.value().begin(), p.var.value().end());
      out.add(p.name, p.var.shape(), std::move(v), p.kind);
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace checkpoint {

inline constexpr char kMagic[8] = {'P', 'E', 'P', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class V>
void put(std::string& out, V v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

template <class V>
V get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw ValidationError("checkpoint truncated");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace detail

template <class T>
std::string serialize(const ParameterStore<T>& store, const nlohmann::json& header) {
  std::string out(kMagic, kMagic + 8);
  detail::put<std::uint32_t>(out, kVersion);
  const std::string h = header.dump();
  detail::put<std::uint64_t>(out, h.size());
  out += h;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.kind));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.var.shape().size()));
    for (auto d : p.var.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : p.var.value()) detail::put<float>(out, static_cast<float>(v));
  }
  return out;
}

template <class T>
struct Archive {
  nlohmann::json header;
  ParameterStore<T> store;
};

template <class T>
Archive<T> deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ValidationError("checkpoint: bad magic");
  std::size_t pos = 8;
  if (detail::get<std::uint32_t>(bytes, pos) != kVersion) throw ValidationError("checkpoint: unsupported version");
  const auto hlen = detail::get<std::uint64_t>(bytes, pos);
  if (hlen > bytes.size() - pos) throw ValidationError("checkpoint truncated");
  Archive<T> a;
  a.header = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  const auto count = detail::get<std::uint32_t>(bytes, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = detail::get<std::uint32_t>(bytes, pos);
    if (nlen > bytes.size() - pos) throw ValidationError("checkpoint truncated");
    std::string name = bytes.substr(pos, nlen);
    pos += nlen;
    const auto kind = detail::get<std::uint8_t>(bytes, pos);
    if (kind > 3) throw ValidationError("checkpoint: bad parameter kind for " + name);
    const auto ndim = detail::get<std::uint32_t>(bytes, pos);
    ad::Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(detail::get<std::uint32_t>(bytes, pos));
    const std::size_t n = ad::numel(shape);
    if (n > (bytes.size() - pos) / sizeof(float)) throw ValidationError("checkpoint truncated");
    std::vector<T> values(n);
    for (std::size_t k = 0; k < n; ++k) values[k] = static_cast<T>(detail::get<float>(bytes, pos));
    a.store.add(name, std::move(shape), std::move(values), static_cast<ParamKind>(kind));
  }
  if (pos != bytes.size()) throw ValidationError("checkpoint: trailing bytes");
  return a;
}

template <class T>
void save(const ParameterStore<T>& store, const nlohmann::json& header, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing", path);
  const std::string s = serialize(store, header);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("write failed", path);
}

template <class T>
Archive<T> load(const std::string& path) {
  audit::record_open(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint", path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize<T>(ss.str());
}

}  // namespace checkpoint
}  // namespace pepr
