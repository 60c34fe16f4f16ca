#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "dmamba/model.hpp"

namespace dmamba {

// Checkpoint container, little-endian binary:
//   magic "DMCK" | u32 version | u32 param count |
//   per param: u32 name length, UTF-8 name, u32 rank, u64 extents, f64 values
// Parameter names are the canonical dotted paths of named_params().
inline constexpr uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace detail {
template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "checkpoint truncated");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const NamedParams& params) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "cannot open checkpoint for writing: ", path);
  os.write("DMCK", 4);
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.dim()));
    for (int64_t d = 0; d < t.dim(); ++d)
      detail::write_pod<uint64_t>(os, static_cast<uint64_t>(t.extent(d)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  require(static_cast<bool>(os), "checkpoint write failed: ", path);
}

// Fills the tensors of an already-constructed parameter set; every name and
// shape must match exactly.
inline void load_checkpoint(const std::string& path, const NamedParams& params) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "cannot open checkpoint: ", path);
  char magic[4];
  is.read(magic, 4);
  require(static_cast<bool>(is) && std::memcmp(magic, "DMCK", 4) == 0,
          "not a DMCK checkpoint: ", path);
  const uint32_t version = detail::read_pod<uint32_t>(is);
  require(version == kCheckpointVersion, "unsupported checkpoint version ", version);
  const uint32_t count = detail::read_pod<uint32_t>(is);

  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : params) by_name.emplace(name, t);
  require(by_name.size() == params.size(), "duplicate parameter names");
  require(count == params.size(), "checkpoint holds ", count, " parameters, model expects ",
          params.size());

  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = detail::read_pod<uint32_t>(is);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<int64_t>(detail::read_pod<uint64_t>(is));
    auto it = by_name.find(name);
    require(it != by_name.end(), "checkpoint parameter '", name, "' unknown to this model");
    Tensor t = it->second;
    require(t.shape() == shape, "checkpoint parameter '", name, "' has shape ", shape_str(shape),
            ", model expects ", shape_str(t.shape()));
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    require(static_cast<bool>(is), "checkpoint truncated while reading '", name, "'");
    by_name.erase(it);
  }
  require(by_name.empty(), "checkpoint missing ", by_name.size(), " parameters, first: '",
          by_name.empty() ? "" : by_name.begin()->first, "'");
}

}  // namespace dmamba
