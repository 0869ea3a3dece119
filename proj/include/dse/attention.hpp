#pragma once

// Three-scale views. Centre mode crops fixed nested squares (aligned imagery);
// Grad-CAM mode renders the class-activation heat map as AT1 and crops the
// thresholded hot region as AT2 (misaligned imagery).

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/backbone.hpp"
#include "dse/views.hpp"

namespace dse {

enum class AttentionMode { Centre, GradCam };

struct AttentionConfig {
    AttentionMode mode = AttentionMode::Centre;
    double crop_frac_at1 = 0.625;
    double crop_frac_at2 = 0.375;
    std::string tap_layer = "conv5_3";
    double heat_threshold = 0.5;

    void validate() const;
    nlohmann::json to_json() const;
    static AttentionConfig from_json(const nlohmann::json& j);
};

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string& s);

CropBox centre_box(int64_t size, double fraction);

/// Crops box i out of sample i and resizes it (bilinear) to size × size.
torch::Tensor crop_resize(const torch::Tensor& images, const std::vector<CropBox>& boxes, int64_t size);

TripleScaleViews centre_views(const torch::Tensor& images, const AttentionConfig& config);

/// ReLU(Σ_k α_k·A_k) with α = spatial mean of `gradients`, each map divided by
/// its maximum. All-zero maps stay zero. Shapes: (n, K, h, w) → (n, 1, h, w).
torch::Tensor gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients);

struct GradCam {
    torch::Tensor heat;             // (n, 1, h, w) at tap resolution, in [0, 1]
    torch::Tensor channel_weights;  // (n, K), detached
    std::vector<int64_t> classes;
};

/// Class defaults to the argmax of the backbone logits. Runs its own gradient
/// tape on a detached copy of `images`.
GradCam gradcam_heatmap(const torch::Tensor& images, Backbone& backbone, const std::string& tap,
                        const std::optional<std::vector<int64_t>>& classes = std::nullopt);

/// Maps heat in [0, 1] through a fixed five-stop viridis ramp (piecewise
/// linear) and returns (n, 3, size, size) in [-1, 1].
torch::Tensor render_heat(const torch::Tensor& heat, int64_t size);

/// Bounding box of {heat ≥ threshold · max} per sample, in `size`-pixel
/// coordinates. An all-zero map yields the full frame and sets *fallback.
std::vector<CropBox> heat_boxes(const torch::Tensor& heat, int64_t size, double threshold, bool* fallback);

/// Geometry (class, channel weights, box) comes from a detached copy; AT1 and
/// AT2 are then re-applied to `images` so they stay differentiable when
/// `images` carries a gradient. `classes` pins the class (use the target's
/// classes when building views of a reconstruction).
TripleScaleViews gradcam_views(const torch::Tensor& images, Backbone& backbone, const AttentionConfig& config,
                               const std::optional<std::vector<int64_t>>& classes = std::nullopt);

/// Dispatches on config.mode. `backbone` may be null in centre mode.
TripleScaleViews make_views(const torch::Tensor& images, Backbone* backbone, const AttentionConfig& config,
                            const std::optional<std::vector<int64_t>>& classes = std::nullopt);

}  // namespace dse
