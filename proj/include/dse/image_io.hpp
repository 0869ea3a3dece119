#pragma once

// PNG/JPEG files ↔ (3, H, W) float tensors in [-1, 1], RGB channel order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace dse {

torch::Tensor load_image(const std::filesystem::path& path);

/// Writes (3, H, W) in [-1, 1]; values outside are clamped. The parent
/// directory must exist.
void save_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Centre-crops to a square, then resizes (bilinear) to size × size.
/// Face alignment, if wanted, belongs before this step.
torch::Tensor preprocess(const torch::Tensor& image, int64_t size);

/// Loads and preprocesses every file, stacked into (n, 3, size, size).
torch::Tensor load_batch(const std::vector<std::filesystem::path>& files, int64_t size);

/// (id, path) for each .png/.jpg/.jpeg in `dir`, sorted by id (the file stem).
std::vector<std::pair<std::string, std::filesystem::path>> list_images(const std::filesystem::path& dir);

}  // namespace dse
