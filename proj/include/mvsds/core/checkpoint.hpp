#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>

#include "mvsds/core/json_util.hpp"
#include "mvsds/core/nn_modules.hpp"

namespace mvsds {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

// Shared tensor-manifest container: manifest.json lists name/shape/dtype and
// byte offset of every tensor inside the contiguous weights.bin blob.
// Tensors are stored float32 regardless of the in-memory scalar type.
struct CheckpointManifest {
  std::vector<std::pair<std::string, Shape>> tensors;
  Json meta;
};

template <typename T>
void save_tensors(const std::filesystem::path& dir,
                  const std::vector<std::pair<std::string, Tensor<T>>>& tensors,
                  const Json& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Json manifest;
  manifest["format"] = "mvsds.tensors.v1";
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["meta"] = meta;
  Json list = Json::array();
  std::string blob;
  for (const auto& [name, tensor] : tensors) {
    Json entry;
    entry["name"] = name;
    entry["shape"] = tensor.shape();
    entry["offset"] = blob.size();
    entry["nbytes"] = tensor.numel() * sizeof(float);
    list.push_back(entry);
    size_t old = blob.size();
    blob.resize(old + static_cast<size_t>(tensor.numel()) * sizeof(float));
    float* dst = reinterpret_cast<float*>(blob.data() + old);
    for (int64_t i = 0; i < tensor.numel(); ++i)
      dst[i] = static_cast<float>(tensor[i]);
  }
  manifest["tensors"] = list;
  save_json_file(dir / "manifest.json", manifest);
  write_file_atomic(dir / "weights.bin", blob);
}

template <typename T>
void save_param_tree(const std::filesystem::path& dir, const ParamTree<T>& tree,
                     const Json& meta) {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  tensors.reserve(tree.size());
  for (const auto& name : tree.names()) tensors.emplace_back(name, tree.get(name)->value);
  save_tensors(dir, tensors, meta);
}

struct LoadedTensors {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  Json meta;
};

inline LoadedTensors load_tensors(const std::filesystem::path& dir) {
  Json manifest = load_json_file(dir / "manifest.json");
  MVSDS_CHECK(manifest.at("format") == "mvsds.tensors.v1",
              "unsupported tensor container in ", dir.string());
  MVSDS_CHECK(manifest.at("dtype") == "float32", "unsupported dtype");
  std::string blob = read_text_file(dir / "weights.bin");
  LoadedTensors out;
  out.meta = manifest.value("meta", Json::object());
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    size_t offset = entry.at("offset").get<size_t>();
    size_t nbytes = entry.at("nbytes").get<size_t>();
    MVSDS_CHECK(offset + nbytes <= blob.size(), "weights.bin truncated for ",
                entry.at("name").get<std::string>());
    int64_t count = shape_numel(shape);
    MVSDS_CHECK(nbytes == static_cast<size_t>(count) * sizeof(float),
                "tensor byte count mismatch");
    Tensor<float> t(shape);
    std::memcpy(t.data(), blob.data() + offset, nbytes);
    MVSDS_CHECK(t.all_finite(), "non-finite values in tensor ",
                entry.at("name").get<std::string>());
    out.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

template <typename T>
Json load_param_tree(const std::filesystem::path& dir, ParamTree<T>& tree) {
  LoadedTensors loaded = load_tensors(dir);
  for (auto& [name, tensor] : loaded.tensors)
    tree.load_tensor(name, tensor.template cast<T>());
  return loaded.meta;
}

}  // namespace mvsds
