#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "tsdp/dataset.hpp"
#include "tsdp/graph.hpp"

// Binary container shared by models (.tsdp) and datasets (.tsds):
//   "TSDP" | u16 version | u16 kind | u32 n_blobs | u32 n_chunks
//   n_blobs x { u16 name_len, name, u8 rank, u64 dims[rank], u64 offset }
//   blob section: little-endian f64 arrays at the recorded offsets
//   n_chunks x { u32 tag_len, tag, u64 len, bytes }
// Models additionally carry a JSON topology sidecar (<path>.json).
namespace tsdp::io {

inline constexpr std::uint16_t kFormatVersion = 1;
enum class ContainerKind : std::uint16_t { Model = 1, Dataset = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Container {
  ContainerKind kind = ContainerKind::Model;
  std::map<std::string, Tensor> blobs;
  // Extension chunks keyed by tag, e.g. "meta" or "slices".
  std::map<std::string, std::string> chunks;
};

std::string encode(const Container& c);
Container decode(std::string_view bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

nlohmann::json topology_json(const ModelGraph& g);
// Rebuilds a graph from topology plus parameter blobs keyed "<node>/<param>".
ModelGraph graph_from(const nlohmann::json& topology,
                      const std::map<std::string, Tensor>& blobs);

// `extension`, when non-empty, is stored as a "slices" chunk.
void save_model(const ModelGraph& g, const std::filesystem::path& path,
                const nlohmann::json& extension = nullptr);
ModelGraph load_model(const std::filesystem::path& path,
                      nlohmann::json* extension = nullptr);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace tsdp::io
