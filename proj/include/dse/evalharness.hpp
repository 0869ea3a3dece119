#pragma once

// Image-set comparison: PSNR, SSIM, MSE, LPIPS and CS per pair, plus a CSV
// report and a printed table.
//
// Scales: PSNR, SSIM, MSE and CS are computed on images mapped to [0, 1]
// (dynamic range 1); LPIPS runs on the [-1, 1] images the backbone expects.
// MSE is reported ×100 ("MSE(e2)"). CS is the cosine similarity of the two
// flattened [0, 1] images.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/backbone.hpp"

namespace dse {

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();
inline constexpr const char* kCsDefinition = "CS = cosine similarity of flattened [0,1] images (image space)";

/// 10·log10(L² / MSE) over the whole batch; identical inputs give +inf.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range = 1.0);
/// One PSNR per leading-dimension sample.
std::vector<double> psnr_per_sample(const torch::Tensor& a, const torch::Tensor& b, double dynamic_range = 1.0);

struct MetricRow {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
    double mse_e2 = 0.0;
    double lpips = 0.0;
    double cs = 0.0;
};

/// Per-sample metrics for two (n, 3, H, W) batches in [-1, 1].
std::vector<MetricRow> compare_images(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone,
                                      const std::vector<std::string>& ids = {});

struct MetricReport {
    std::vector<MetricRow> rows;  // sorted by id
    MetricRow mean;               // id "mean"
    nlohmann::json config = nlohmann::json::object();

    static MetricRow average(const std::vector<MetricRow>& rows);
    std::string csv() const;
    std::string table() const;
    void write_csv(const std::filesystem::path& path) const;
};

/// A directory of images (id = file stem), or a manifest file: either JSON
/// lines with "id" and "image" fields, or "id,path" text lines. Relative
/// paths resolve against the manifest's directory.
struct ImageSource {
    std::vector<std::pair<std::string, std::filesystem::path>> entries;

    static ImageSource from_path(const std::filesystem::path& path);
};

/// Pairs images by id. Unmatched ids raise ContractViolation listing them.
/// `resolution` (if set) preprocesses both sides to that size first.
MetricReport evaluate_pairs(const ImageSource& a, const ImageSource& b, Backbone& backbone,
                            std::optional<int64_t> resolution = std::nullopt);

struct GridLayout {
    int64_t rows = 1;
    int64_t cols = 1;
    std::vector<std::string> captions;  // one per tile, or empty
    int64_t padding = 2;
};

/// Tiles (3, H, W) images in [-1, 1] row-major into one PNG.
void emit_grid(const std::vector<torch::Tensor>& images, const GridLayout& layout, const std::filesystem::path& path);

}  // namespace dse
