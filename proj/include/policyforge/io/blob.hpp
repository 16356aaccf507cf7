#ifndef POLICYFORGE_IO_BLOB_HPP_
#define POLICYFORGE_IO_BLOB_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "policyforge/numeric/optim.hpp"
#include "policyforge/numeric/rng.hpp"
#include "policyforge/numeric/tensor.hpp"

namespace policyforge {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian");

using Json = nlohmann::json;

// On-disk container: optional 4-byte magic, u32 header length, JSON header,
// then a raw little-endian float32 payload.
inline void write_json_blob(const std::filesystem::path& path,
                            const std::string& magic, const Json& header,
                            const float* data, std::size_t count) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  if (!magic.empty()) {
    if (magic.size() != 4) throw std::invalid_argument("magic must be 4 bytes");
    out.write(magic.data(), 4);
  }
  const std::string h = header.dump();
  const std::uint32_t len = static_cast<std::uint32_t>(h.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct JsonBlob {
  Json header;
  std::vector<float> data;
};

inline JsonBlob read_json_blob(const std::filesystem::path& path,
                               const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  if (!magic.empty()) {
    char m[4];
    in.read(m, 4);
    if (!in || std::memcmp(m, magic.data(), 4) != 0) {
      throw std::runtime_error("bad magic in " + path.string());
    }
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in) throw std::runtime_error("truncated header in " + path.string());
  std::string h(len, '\0');
  in.read(h.data(), len);
  if (!in) throw std::runtime_error("truncated header in " + path.string());
  JsonBlob out;
  out.header = Json::parse(h);
  std::vector<char> rest((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(float) != 0) {
    throw std::runtime_error("payload not float-aligned in " + path.string());
  }
  out.data.resize(rest.size() / sizeof(float));
  std::memcpy(out.data.data(), rest.data(), rest.size());
  return out;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for hash: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return hash_hex(h);
}

// Model weights: all tensors concatenated in registration order, shapes in
// the header.
inline void save_param_set(const std::filesystem::path& path,
                           const ParamSet& params, Json extra) {
  Json header = std::move(extra);
  Json tensors = Json::array();
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(params.total_size()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    tensors.push_back({{"name", params.names[i]},
                       {"shape", params.values[i].shape()}});
    const auto f = params.values[i].flat();
    payload.insert(payload.end(), f.data(), f.data() + f.size());
  }
  header["tensors"] = std::move(tensors);
  write_json_blob(path, "PFW1", header, payload.data(), payload.size());
}

inline Json load_param_set(const std::filesystem::path& path,
                           ParamSet* params) {
  JsonBlob blob = read_json_blob(path, "PFW1");
  params->names.clear();
  params->values.clear();
  std::size_t off = 0;
  for (const auto& t : blob.header.at("tensors")) {
    const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
    Tensor v = Tensor::uninit(shape);
    const std::size_t n = static_cast<std::size_t>(v.size());
    if (off + n > blob.data.size()) {
      throw std::runtime_error("weights payload too short: " + path.string());
    }
    std::copy(blob.data.begin() + static_cast<std::ptrdiff_t>(off),
              blob.data.begin() + static_cast<std::ptrdiff_t>(off + n),
              v.data_mut());
    off += n;
    params->add(t.at("name").get<std::string>(), std::move(v));
  }
  blob.header.erase("tensors");
  return blob.header;
}

}  // namespace policyforge

#endif  // POLICYFORGE_IO_BLOB_HPP_
