#pragma once

// On-disk format shared by generator, encoder, backbone and direction files:
//
//   <dir>/manifest.json   {"format": "dse-arrays/1", "kind": ..., "meta": {...},
//                          "arrays": [{"name", "shape", "dtype", "file"}, ...]}
//   <dir>/<name>.bin      raw little-endian, C-contiguous element data
//
// Array names for modules are the dotted libtorch parameter/buffer paths
// (e.g. "blocks.2.conv1.weight"), so external conversion scripts can target
// them directly. Supported dtypes: "float32", "float64".

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace dse {

inline constexpr const char* kArrayFormat = "dse-arrays/1";

struct ArrayBundle {
    std::string kind;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, torch::Tensor>> arrays;

    const torch::Tensor* find(const std::string& name) const;
};

/// Writes to a sibling temp directory, then renames over `dir`.
void write_bundle(const std::filesystem::path& dir, const ArrayBundle& bundle);
ArrayBundle read_bundle(const std::filesystem::path& dir);

ArrayBundle module_bundle(const torch::nn::Module& module, std::string kind, nlohmann::json meta);

/// Copies every parameter and buffer of `module` from `bundle`. Missing names or
/// shape mismatches raise IoError naming the offending array and `source`.
void load_module_state(torch::nn::Module& module, const ArrayBundle& bundle,
                       const std::string& source);

/// FNV-1a over the bytes of every parameter and buffer, in registration order.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

/// Write-temp-then-rename for single files.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace dse
