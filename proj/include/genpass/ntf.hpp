#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "genpass/errors.hpp"

// Named-tensor file: a little-endian container for flat double arrays.
//
//   [u64 header_len][header_len bytes of UTF-8 JSON][payload of f64]
//
// The JSON header carries {"schema_version": 1, "tensors": [{"name", "dims",
// "offset", "count"}, ...]} with offsets counted in elements from the start
// of the payload. Entry order is preserved, names must be unique, and count
// must equal the product of dims, so a reader can validate the whole layout
// before touching the payload.

namespace genpass {

struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<double> data;
};

namespace detail {

inline std::uint64_t count_of(const std::vector<int>& dims) {
  std::uint64_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw InputError("ntf: non-positive dim");
    n *= static_cast<std::uint64_t>(d);
  }
  return n;
}

inline std::uint64_t bswap64(std::uint64_t v) {
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
  return r;
}

static_assert(sizeof(double) == 8);

}  // namespace detail

inline void save_ntf(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors) {
  nlohmann::json header;
  header["schema_version"] = 1;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& t : tensors) {
    const std::uint64_t count = detail::count_of(t.dims);
    if (count != t.data.size())
      throw InputError("ntf: '" + t.name + "' dims say " +
                       std::to_string(count) + " elements, data has " +
                       std::to_string(t.data.size()));
    for (const auto& prev : header["tensors"])
      if (prev["name"] == t.name)
        throw InputError("ntf: duplicate tensor name '" + t.name + "'");
    header["tensors"].push_back({{"name", t.name},
                                 {"dims", t.dims},
                                 {"offset", offset},
                                 {"count", count}});
    offset += count;
  }
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("ntf: cannot open " + path.string() + " for write");
  std::uint64_t hlen = hs.size();
  if constexpr (std::endian::native == std::endian::big)
    hlen = genpass::detail::bswap64(hlen);
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const NamedTensor& t : tensors) {
    if constexpr (std::endian::native == std::endian::little) {
      os.write(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * 8));
    } else {
      for (double v : t.data) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        bits = genpass::detail::bswap64(bits);
        os.write(reinterpret_cast<const char*>(&bits), 8);
      }
    }
  }
  if (!os) throw IoError("ntf: write failed for " + path.string());
}

inline std::vector<NamedTensor> load_ntf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("ntf: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw IoError("ntf: truncated header length");
  std::uint64_t hlen;
  std::memcpy(&hlen, bytes.data(), 8);
  if constexpr (std::endian::native == std::endian::big)
    hlen = genpass::detail::bswap64(hlen);
  if (8 + hlen > bytes.size()) throw IoError("ntf: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8,
                                   bytes.begin() + 8 + static_cast<long>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("ntf: bad header json: ") + e.what());
  }
  if (!header.contains("schema_version") ||
      header["schema_version"].get<int>() != 1)
    throw IoError("ntf: unsupported schema_version");
  if (!header.contains("tensors") || !header["tensors"].is_array())
    throw IoError("ntf: header missing tensors array");

  const std::size_t payload_off = 8 + static_cast<std::size_t>(hlen);
  const std::size_t payload_bytes = bytes.size() - payload_off;
  if (payload_bytes % 8 != 0) throw IoError("ntf: ragged payload");
  const std::uint64_t payload_count = payload_bytes / 8;

  std::vector<NamedTensor> out;
  for (const auto& e : header["tensors"]) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.dims = e.at("dims").get<std::vector<int>>();
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    const std::uint64_t count = e.at("count").get<std::uint64_t>();
    if (count != detail::count_of(t.dims))
      throw IoError("ntf: '" + t.name + "' count does not match dims");
    if (offset + count > payload_count)
      throw IoError("ntf: '" + t.name + "' extends past payload");
    for (const auto& prev : out)
      if (prev.name == t.name)
        throw IoError("ntf: duplicate tensor name '" + t.name + "'");
    t.data.resize(count);
    std::memcpy(t.data.data(), bytes.data() + payload_off + offset * 8,
                count * 8);
    if constexpr (std::endian::native == std::endian::big) {
      for (double& v : t.data) {
        auto b = genpass::detail::bswap64(std::bit_cast<std::uint64_t>(v));
        v = std::bit_cast<double>(b);
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts,
                                      const std::string& name) {
  for (const NamedTensor& t : ts)
    if (t.name == name) return t;
  throw IoError("ntf: missing tensor '" + name + "'");
}

}  // namespace genpass
