#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/nn.hpp"

#include "json.hpp"

namespace dcpn {

// Checkpoint file: magic line, 8-byte little-endian header length, JSON
// header (metadata + parameter table + blob checksum), then the parameter and
// buffer values as raw little-endian doubles in header order.
inline constexpr const char* kCheckpointMagic = "DCPN1\n";

inline void save_checkpoint(const std::filesystem::path& path,
                            const StateDict& sd, nlohmann::json meta) {
  std::vector<double> blob;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : sd.params) {
    params.push_back({{"name", name}, {"shape", t.shape()}});
    blob.insert(blob.end(), t.data().begin(), t.data().end());
  }
  nlohmann::json buffers = nlohmann::json::array();
  for (const auto& [name, v] : sd.buffers) {
    buffers.push_back({{"name", name}, {"size", v->size()}});
    blob.insert(blob.end(), v->begin(), v->end());
  }
  nlohmann::json header;
  header["meta"] = std::move(meta);
  header["params"] = std::move(params);
  header["buffers"] = std::move(buffers);
  header["blob_checksum"] = hex64(fnv1a64(blob));
  std::string htxt = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, 6);
  std::uint64_t hlen = htxt.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htxt.data(), static_cast<std::streamsize>(htxt.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(double)));
}

inline nlohmann::json read_checkpoint_header(std::ifstream& in,
                                             const std::string& path) {
  char magic[6];
  in.read(magic, 6);
  if (!in || std::string(magic, 6) != kCheckpointMagic)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htxt(hlen, '\0');
  in.read(htxt.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  return nlohmann::json::parse(htxt);
}

inline nlohmann::json checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
  return read_checkpoint_header(in, path.string())["meta"];
}

// Loads into an already-constructed state dict. Names and shapes must match;
// `required_prefix` restricts loading to a sub-tree (missing other entries in
// the file is then fine).
inline nlohmann::json load_checkpoint(const std::filesystem::path& path,
                                      StateDict& sd,
                                      const std::string& required_prefix = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
  nlohmann::json header = read_checkpoint_header(in, path.string());

  std::size_t total = 0;
  for (const auto& p : header["params"]) {
    std::size_t n = 1;
    for (int d : p["shape"].get<std::vector<int>>()) n *= std::size_t(d);
    total += n;
  }
  for (const auto& b : header["buffers"]) total += b["size"].get<std::size_t>();
  std::vector<double> blob(total);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (!in) throw std::runtime_error("truncated checkpoint blob: " + path.string());
  if (hex64(fnv1a64(blob)) != header["blob_checksum"].get<std::string>())
    throw std::runtime_error("checkpoint checksum mismatch: " + path.string());

  std::map<std::string, std::pair<std::size_t, std::vector<int>>> offsets;
  std::size_t pos = 0;
  for (const auto& p : header["params"]) {
    auto shape = p["shape"].get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    offsets[p["name"].get<std::string>()] = {pos, shape};
    pos += n;
  }
  std::map<std::string, std::pair<std::size_t, std::size_t>> buf_offsets;
  for (const auto& b : header["buffers"]) {
    std::size_t n = b["size"].get<std::size_t>();
    buf_offsets[b["name"].get<std::string>()] = {pos, n};
    pos += n;
  }

  for (auto& [name, t] : sd.params) {
    if (!required_prefix.empty() && name.rfind(required_prefix, 0) != 0)
      continue;
    auto it = offsets.find(name);
    if (it == offsets.end())
      throw std::runtime_error("checkpoint is missing parameter '" + name +
                               "': " + path.string());
    if (it->second.second != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for '" + name +
                               "': " + path.string());
    std::copy_n(blob.begin() + it->second.first, t.size(), t.data().begin());
  }
  for (auto& [name, v] : sd.buffers) {
    if (!required_prefix.empty() && name.rfind(required_prefix, 0) != 0)
      continue;
    auto it = buf_offsets.find(name);
    if (it == buf_offsets.end())
      throw std::runtime_error("checkpoint is missing buffer '" + name +
                               "': " + path.string());
    if (it->second.second != v->size())
      throw std::runtime_error("checkpoint buffer size mismatch for '" + name +
                               "': " + path.string());
    std::copy_n(blob.begin() + it->second.first, v->size(), v->begin());
  }
  return header["meta"];
}

}  // namespace dcpn
