#pragma once

// Binary parameter checkpoints.
//
//   "ZORD" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u32 ndim | u32 dims... | f32 data (row-major)
//
// All integers and floats little-endian. A JSON sidecar (<path>.json) holds the
// model and training configuration.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "zorder/nn.hpp"

namespace zorder {

inline constexpr char kCheckpointMagic[4] = {'Z', 'O', 'R', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ParseError("checkpoint truncated reading " + what);
  return v;
}
}  // namespace detail

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".json";
  return p;
}

template <class S>
void save_checkpoint(const ParamStore<S>& store, const std::filesystem::path& path,
                     const nlohmann::json& sidecar = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, std::uint32_t(store.size()));
  for (const auto& p : store) {
    detail::put_u32(os, std::uint32_t(p.name.size()));
    os.write(p.name.data(), std::streamsize(p.name.size()));
    detail::put_u32(os, 2);
    detail::put_u32(os, std::uint32_t(p.value.rows()));
    detail::put_u32(os, std::uint32_t(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const float f = float(p.value.data()[i]);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
  std::ofstream js(sidecar_path(path), std::ios::binary);
  if (!js) throw Error("cannot write checkpoint sidecar " + sidecar_path(path).string());
  js << sidecar.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_sidecar(const std::filesystem::path& path) {
  std::ifstream js(sidecar_path(path), std::ios::binary);
  if (!js) throw ParseError("missing checkpoint sidecar " + sidecar_path(path).string());
  try {
    return nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corrupt checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
}

/// Loads every entry into the parameter of the same name. Every parameter in
/// the store must be present with a matching shape.
template <class S>
void load_checkpoint(ParamStore<S>& store, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ParseError("not a checkpoint file: " + path.string());
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "entry count");
  std::vector<bool> seen(store.size(), false);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = detail::get_u32(is, "name length");
    if (len > 4096) throw ParseError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("checkpoint truncated reading entry name");
    const std::uint32_t ndim = detail::get_u32(is, name + " ndim");
    if (ndim == 0 || ndim > 2) throw ParseError("checkpoint entry " + name + ": unsupported rank");
    std::uint32_t dims[2] = {1, 1};
    for (std::uint32_t d = 0; d < ndim; ++d) dims[d + 2 - ndim] = detail::get_u32(is, name + " shape");
    Param<S>* p = store.find(name);
    if (!p) throw ParseError("checkpoint entry " + name + " has no matching parameter");
    if (p->value.rows() != Eigen::Index(dims[0]) || p->value.cols() != Eigen::Index(dims[1]))
      throw ParseError("checkpoint entry " + name + ": shape mismatch");
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      float f = 0;
      if (!is.read(reinterpret_cast<char*>(&f), 4)) throw ParseError("checkpoint truncated in entry " + name);
      p->value.data()[i] = S(f);
    }
    seen[p->index] = true;
  }
  for (const auto& p : store)
    if (!seen[p.index]) throw ParseError("checkpoint lacks parameter " + p.name);
}

}  // namespace zorder
