#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hcmamba/errors.hpp"
#include "hcmamba/model.hpp"
#include "hcmamba/tensor.hpp"

namespace hcm {

// Blobs are raw native-order values; the format is defined as little-endian.
static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs require a little-endian host");

template <typename T>
using NamedTensorList = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
constexpr const char* precision_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "float32";
  } else {
    static_assert(std::is_same_v<T, double>, "checkpoints support float32/float64 only");
    return "float64";
  }
}

inline int64_t precision_width(const std::string& precision) {
  if (precision == "float32") return 4;
  if (precision == "float64") return 8;
  throw FormatError("unknown checkpoint precision '" + precision + "'");
}

struct CheckpointMeta {
  std::string precision;  // filled by save/load
  uint64_t seed = 0;
  int64_t epoch = 0;
  std::vector<std::pair<std::string, std::string>> config_echo;
};

struct CheckpointManifest {
  struct Entry {
    std::string name;
    Shape shape;
    int64_t offset = 0;  // bytes into the blob
    int64_t count = 0;   // elements
  };
  CheckpointMeta meta;
  std::vector<Entry> entries;
  int64_t blob_bytes = 0;
};

template <typename T>
NamedTensorList<T> named_parameters(ModelParams<T>& params, const ModelConfig& cfg) {
  NamedTensorList<T> items;
  visit_params<T>(params, cfg,
                  [&](const std::string& name, Tensor<T>& t) { items.emplace_back(name, t); });
  return items;
}

template <typename T>
void save_checkpoint(const std::string& base, const NamedTensorList<T>& items,
                     const CheckpointMeta& meta) {
  std::ofstream manifest(base + ".manifest", std::ios::trunc);
  if (!manifest) throw IoError("cannot open '" + base + ".manifest' for writing");
  std::ofstream blob(base + ".blob", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot open '" + base + ".blob' for writing");

  manifest << "hcm-checkpoint v1\n";
  manifest << "precision " << precision_name<T>() << "\n";
  manifest << "seed " << meta.seed << "\n";
  manifest << "epoch " << meta.epoch << "\n";
  for (const auto& [key, value] : meta.config_echo) manifest << "config " << key << " " << value << "\n";

  std::unordered_map<std::string, bool> seen;
  int64_t offset = 0;
  for (const auto& [name, tensor] : items) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw ContractError("checkpoint tensor name '" + name + "' contains whitespace");
    if (!seen.emplace(name, true).second)
      throw ContractError("duplicate checkpoint tensor name '" + name + "'");
    manifest << "tensor " << name << " " << offset << " " << tensor.numel();
    manifest << " " << tensor.rank();
    for (int64_t d = 0; d < tensor.rank(); ++d) manifest << " " << tensor.dim(d);
    manifest << "\n";
    blob.write(reinterpret_cast<const char*>(tensor.data()),
               static_cast<std::streamsize>(sizeof(T)) * tensor.numel());
    offset += static_cast<int64_t>(sizeof(T)) * tensor.numel();
  }
  manifest << "end\n";
  manifest.close();
  blob.close();
  if (!manifest || !blob) throw IoError("write failed for checkpoint '" + base + "'");
}

inline CheckpointManifest peek_checkpoint(const std::string& base) {
  std::ifstream in(base + ".manifest");
  if (!in) throw IoError("cannot open '" + base + ".manifest'");
  CheckpointManifest mf;
  std::string line;
  int64_t lineno = 0;
  bool ended = false;
  auto fail = [&](const std::string& msg) -> void {
    throw FormatError("'" + base + ".manifest' line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "hcm-checkpoint v1") fail("bad header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    if (ended) fail("content after end marker");
    std::istringstream ss(line);
    std::string directive;
    ss >> directive;
    if (directive == "precision") {
      ss >> mf.meta.precision;
      precision_width(mf.meta.precision);  // validates
    } else if (directive == "seed") {
      if (!(ss >> mf.meta.seed)) fail("bad seed");
    } else if (directive == "epoch") {
      if (!(ss >> mf.meta.epoch)) fail("bad epoch");
    } else if (directive == "config") {
      std::string key, value;
      if (!(ss >> key)) fail("config line without key");
      std::getline(ss, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      mf.meta.config_echo.emplace_back(key, value);
    } else if (directive == "tensor") {
      CheckpointManifest::Entry entry;
      int64_t rank = 0;
      if (!(ss >> entry.name >> entry.offset >> entry.count >> rank) || rank < 0)
        fail("malformed tensor entry");
      entry.shape.resize(static_cast<size_t>(rank));
      int64_t prod = 1;
      for (int64_t d = 0; d < rank; ++d) {
        if (!(ss >> entry.shape[static_cast<size_t>(d)])) fail("missing tensor dimension");
        prod *= entry.shape[static_cast<size_t>(d)];
      }
      if (prod != entry.count) fail("tensor '" + entry.name + "' count/shape disagree");
      mf.entries.push_back(std::move(entry));
    } else if (directive == "end") {
      ended = true;
    } else {
      fail("unknown directive '" + directive + "'");
    }
  }
  if (!ended)
    throw FormatError("'" + base + ".manifest' is truncated: no end marker");
  if (mf.meta.precision.empty())
    throw FormatError("'" + base + ".manifest' declares no precision");
  int64_t width = precision_width(mf.meta.precision);
  int64_t expected = 0;
  for (const auto& entry : mf.entries) {
    if (entry.offset != expected)
      throw FormatError("'" + base + ".manifest': tensor '" + entry.name + "' offset " +
                        std::to_string(entry.offset) + " does not continue the blob at " +
                        std::to_string(expected));
    expected += entry.count * width;
  }
  mf.blob_bytes = expected;
  return mf;
}

template <typename T>
CheckpointMeta load_checkpoint(const std::string& base, NamedTensorList<T>& items) {
  CheckpointManifest mf = peek_checkpoint(base);
  if (mf.meta.precision != precision_name<T>())
    throw FormatError("checkpoint '" + base + "' holds " + mf.meta.precision +
                      " but the loader expects " + precision_name<T>());
  std::error_code ec;
  auto actual = std::filesystem::file_size(base + ".blob", ec);
  if (ec) throw IoError("cannot stat '" + base + ".blob'");
  if (static_cast<int64_t>(actual) != mf.blob_bytes)
    throw FormatError("'" + base + ".blob' is " + std::to_string(actual) +
                      " bytes, manifest expects " + std::to_string(mf.blob_bytes));

  std::unordered_map<std::string, const CheckpointManifest::Entry*> index;
  for (const auto& entry : mf.entries) {
    if (!index.emplace(entry.name, &entry).second)
      throw FormatError("'" + base + ".manifest' repeats tensor '" + entry.name + "'");
  }
  std::ifstream blob(base + ".blob", std::ios::binary);
  if (!blob) throw IoError("cannot open '" + base + ".blob'");
  for (auto& [name, tensor] : items) {
    auto it = index.find(name);
    if (it == index.end())
      throw DataError("checkpoint '" + base + "' has no tensor named '" + name + "'");
    const CheckpointManifest::Entry& entry = *it->second;
    if (entry.shape != tensor.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(entry.shape) +
                      ", expected " + shape_str(tensor.shape()));
    blob.seekg(entry.offset);
    blob.read(reinterpret_cast<char*>(tensor.mutable_data()),
              static_cast<std::streamsize>(sizeof(T)) * entry.count);
    if (!blob)
      throw FormatError("'" + base + ".blob': short read for tensor '" + name + "'");
  }
  return mf.meta;
}

}  // namespace hcm
