#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "dse/backbone.hpp"
#include "dse/encoder.hpp"
#include "dse/generators.hpp"
#include "dse/layers.hpp"

namespace dse::test {

inline at::Generator rng(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

inline torch::Tensor randn(at::IntArrayRef shape, uint64_t seed, torch::Dtype dtype = torch::kFloat) {
    auto g = rng(seed);
    return torch::randn(shape, g, torch::TensorOptions().dtype(dtype));
}

/// Uniform images in [-1, 1].
inline torch::Tensor images(int64_t n, int64_t size, uint64_t seed, torch::Dtype dtype = torch::kFloat) {
    auto g = rng(seed);
    return torch::rand({n, 3, size, size}, g, torch::TensorOptions().dtype(dtype)) * 2.0 - 1.0;
}

inline Backbone desk_backbone(uint64_t seed = 3) {
    Backbone b(BackboneSpec::desk(), seed);
    freeze(*b);
    return b;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("dse_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

}  // namespace dse::test
