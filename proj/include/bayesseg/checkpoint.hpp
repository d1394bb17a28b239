#pragma once
// Versioned binary container of named f64 blocks with a JSON header.
//
//   "BSEGCKPT" | u32 version | u64 header_len | header (UTF-8 JSON)
//   u64 block_count | blocks...
//   block: u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//
// All integers and doubles are little-endian.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bayesseg/config.hpp"
#include "bayesseg/segnet.hpp"
#include "bayesseg/trainer.hpp"

namespace bayesseg {

inline constexpr char kContainerMagic[8] = {'B', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Block {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Container {
  Json header = Json::object();
  std::vector<Block> blocks;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& is, const std::string& what) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw CheckpointError("truncated container while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline std::string get_string(std::istream& is, std::uint64_t n, const std::string& what) {
  constexpr std::uint64_t kLimit = 1ULL << 32;
  if (n > kLimit) throw CheckpointError("implausible length for " + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated container while reading " + what);
  return s;
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os.write(kContainerMagic, sizeof kContainerMagic);
  detail::put_le<std::uint32_t>(os, kContainerVersion);
  const std::string header = c.header.dump();
  detail::put_le<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_le<std::uint64_t>(os, c.blocks.size());
  for (const auto& b : c.blocks) {
    if (shape_size(b.shape) != b.data.size()) throw ShapeError("write_container", "size", "block '" + b.name + "'");
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) detail::put_le<std::uint64_t>(os, d);
    for (double v : b.data) detail::put_le<double>(os, v);
  }
  if (!os) throw DataError("error while writing '" + path.string() + "'");
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  char magic[sizeof kContainerMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kContainerMagic, sizeof magic) != 0)
    throw CheckpointError("'" + path.string() + "' is not a bayesseg container");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kContainerVersion)
    throw CheckpointError("'" + path.string() + "': unsupported container version " + std::to_string(version) +
                          " (expected " + std::to_string(kContainerVersion) + ")");
  Container c;
  const auto header_len = detail::get_le<std::uint64_t>(is, "header length");
  try {
    c.header = Json::parse(detail::get_string(is, header_len, "header"));
  } catch (const Json::parse_error& e) {
    throw CheckpointError("'" + path.string() + "': corrupt header: " + e.what());
  }
  const auto count = detail::get_le<std::uint64_t>(is, "block count");
  for (std::uint64_t k = 0; k < count; ++k) {
    Block b;
    b.name = detail::get_string(is, detail::get_le<std::uint32_t>(is, "name length"), "block name");
    const auto rank = detail::get_le<std::uint32_t>(is, "rank");
    if (rank > 8) throw CheckpointError("block '" + b.name + "': implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) b.shape.push_back(detail::get_le<std::uint64_t>(is, "dims"));
    const std::size_t n = shape_size(b.shape);
    if (n > (1ULL << 32)) throw CheckpointError("block '" + b.name + "': implausible size");
    b.data.resize(n);
    for (auto& v : b.data) v = detail::get_le<double>(is, "block data");
    c.blocks.push_back(std::move(b));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model checkpoints.

inline constexpr const char* kCheckpointFormat = "bayesseg-checkpoint";
inline constexpr const char* kPredictionsFormat = "bayesseg-predictions";

inline void save_checkpoint(const std::filesystem::path& path, const SegModel& model, const RunConfig& run,
                            const Json& extra = Json::object()) {
  Container c;
  c.header = Json{{"format", kCheckpointFormat},
                  {"version", kContainerVersion},
                  {"architecture", to_json(model.config())},
                  {"run", to_json(run)}};
  if (!extra.empty()) c.header["training"] = extra;
  for (const auto& p : model.parameters()) c.blocks.push_back({p.name, p.value.shape(), p.value.values()});
  write_container(path, c);
}

struct LoadedCheckpoint {
  SegModel model;
  RunConfig run;
  Json header;
};

/// Writes the stored parameter values into `model`; names and shapes must
/// match exactly.
inline void assign_parameters(const SegModel& model, const std::vector<Block>& blocks) {
  std::map<std::string, const Block*> by_name;
  for (const auto& b : blocks)
    if (!by_name.emplace(b.name, &b).second) throw CheckpointError("duplicate block '" + b.name + "'");
  auto params = model.parameters();
  if (params.size() != blocks.size())
    throw CheckpointError("checkpoint holds " + std::to_string(blocks.size()) + " blocks, model expects " +
                          std::to_string(params.size()));
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks block '" + p.name + "'");
    if (it->second->shape != p.value.shape())
      throw CheckpointError("block '" + p.name + "' has shape " + shape_str(it->second->shape) + ", model expects " +
                            shape_str(p.value.shape()));
    std::copy(it->second->data.begin(), it->second->data.end(), p.value.mutable_data().begin());
  }
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (!c.header.is_object() || c.header.value("format", "") != kCheckpointFormat)
    throw CheckpointError("'" + path.string() + "' is not a model checkpoint");
  if (c.header.value("version", 0U) != kContainerVersion)
    throw CheckpointError("'" + path.string() + "': unsupported checkpoint schema version");
  LoadedCheckpoint out;
  try {
    out.run = parse_run_config(c.header.at("run"), false);
    out.run.architecture = parse_architecture(c.header.at("architecture"));
  } catch (const ConfigError& e) {
    throw CheckpointError("'" + path.string() + "': incompatible header: " + e.what());
  } catch (const Json::exception& e) {
    throw CheckpointError("'" + path.string() + "': incompatible header: " + e.what());
  }
  Rng rng(0);
  out.model = SegModel(out.run.architecture, rng);
  assign_parameters(out.model, c.blocks);
  out.header = std::move(c.header);
  return out;
}

// ---------------------------------------------------------------------------
// Per-image prediction dumps: blocks "<id>/mean_probs" and "<id>/mask".

inline void save_predictions(const std::filesystem::path& path, const std::vector<ImagePrediction>& preds,
                             const McConfig& cfg) {
  Container c;
  Json ids = Json::array();
  for (const auto& p : preds) ids.push_back(p.id);
  c.header = Json{{"format", kPredictionsFormat}, {"version", kContainerVersion}, {"mc", to_json(cfg)}, {"ids", ids}};
  for (const auto& p : preds) {
    c.blocks.push_back({p.id + "/mean_probs", p.mean_probs.shape(), p.mean_probs.values()});
    c.blocks.push_back({p.id + "/mask", p.mask.shape(), p.mask.values()});
  }
  write_container(path, c);
}

inline std::vector<ImagePrediction> load_predictions(const std::filesystem::path& path, McConfig* cfg = nullptr) {
  Container c = read_container(path);
  if (c.header.value("format", "") != kPredictionsFormat)
    throw CheckpointError("'" + path.string() + "' is not a prediction dump");
  std::map<std::string, const Block*> by_name;
  for (const auto& b : c.blocks) by_name[b.name] = &b;
  if (cfg) *cfg = parse_mc(c.header.at("mc"));
  std::vector<ImagePrediction> out;
  for (const auto& id : c.header.at("ids")) {
    const auto name = id.get<std::string>();
    const Block* p = by_name.count(name + "/mean_probs") ? by_name.at(name + "/mean_probs") : nullptr;
    const Block* m = by_name.count(name + "/mask") ? by_name.at(name + "/mask") : nullptr;
    if (!p || !m) throw CheckpointError("prediction dump lacks blocks for '" + name + "'");
    out.push_back({name, Tensor(p->shape, p->data), Tensor(m->shape, m->data)});
  }
  return out;
}

}  // namespace bayesseg
