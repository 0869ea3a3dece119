#include "dse/attention.hpp"

#include <algorithm>
#include <cmath>

#include "dse/errors.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace dse {

namespace {

// Viridis at 0, 0.25, 0.5, 0.75, 1.
constexpr double kViridis[5][3] = {{0.267, 0.005, 0.329},
                                   {0.229, 0.322, 0.546},
                                   {0.128, 0.567, 0.551},
                                   {0.369, 0.789, 0.383},
                                   {0.993, 0.906, 0.144}};

torch::Tensor resize(const torch::Tensor& x, int64_t size) {
    if (x.size(-2) == size && x.size(-1) == size) return x;
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{size, size})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

void check_images(const torch::Tensor& images, const char* op) {
    if (!images.defined() || images.dim() != 4)
        throw ContractViolation(std::string(op) + ": expected an (n, C, H, W) batch");
}

}  // namespace

void AttentionConfig::validate() const {
    auto frac_ok = [](double f) { return f > 0.0 && f <= 1.0; };
    if (!frac_ok(crop_frac_at1) || !frac_ok(crop_frac_at2))
        throw ConfigError("attention crop fractions must lie in (0, 1]");
    if (crop_frac_at2 > crop_frac_at1)
        throw ConfigError("attention.crop_frac_at2 must not exceed attention.crop_frac_at1");
    if (!(heat_threshold > 0.0 && heat_threshold < 1.0))
        throw ConfigError("attention.heat_threshold must lie in (0, 1)");
}

json AttentionConfig::to_json() const {
    return {{"mode", to_string(mode)}, {"crop_frac_at1", crop_frac_at1}, {"crop_frac_at2", crop_frac_at2},
            {"tap_layer", tap_layer}, {"heat_threshold", heat_threshold}};
}

AttentionConfig AttentionConfig::from_json(const json& j) {
    AttentionConfig c;
    c.mode = attention_mode_from_string(j.value("mode", to_string(c.mode)));
    c.crop_frac_at1 = j.value("crop_frac_at1", c.crop_frac_at1);
    c.crop_frac_at2 = j.value("crop_frac_at2", c.crop_frac_at2);
    c.tap_layer = j.value("tap_layer", c.tap_layer);
    c.heat_threshold = j.value("heat_threshold", c.heat_threshold);
    c.validate();
    return c;
}

std::string to_string(AttentionMode m) { return m == AttentionMode::Centre ? "centre" : "gradcam"; }

AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "centre" || s == "center") return AttentionMode::Centre;
    if (s == "gradcam") return AttentionMode::GradCam;
    throw ConfigError("unknown attention.mode '" + s + "' (expected centre or gradcam)");
}

CropBox centre_box(int64_t size, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractViolation("crop fraction must lie in (0, 1]");
    const int64_t side = std::clamp<int64_t>(std::llround(fraction * static_cast<double>(size)), 1, size);
    const int64_t offset = (size - side) / 2;
    return {offset, offset, side, side};
}

torch::Tensor crop_resize(const torch::Tensor& images, const std::vector<CropBox>& boxes, int64_t size) {
    check_images(images, "crop_resize");
    if (static_cast<int64_t>(boxes.size()) != images.size(0))
        throw ContractViolation("crop_resize: one box per sample required");
    const bool uniform = std::all_of(boxes.begin(), boxes.end(), [&](const CropBox& b) { return b == boxes[0]; });
    auto crop = [&](const torch::Tensor& x, const CropBox& b) {
        if (b.top < 0 || b.left < 0 || b.height <= 0 || b.width <= 0 || b.top + b.height > x.size(2) ||
            b.left + b.width > x.size(3))
            throw ContractViolation("crop_resize: box outside the image");
        return resize(x.narrow(2, b.top, b.height).narrow(3, b.left, b.width), size);
    };
    if (uniform) return crop(images, boxes[0]);
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0; i < images.size(0); ++i) parts.push_back(crop(images.narrow(0, i, 1), boxes[i]));
    return torch::cat(parts, 0);
}

TripleScaleViews centre_views(const torch::Tensor& images, const AttentionConfig& config) {
    check_images(images, "centre_views");
    config.validate();
    if (images.size(2) != images.size(3)) throw ContractViolation("centre_views expects square images");
    const int64_t size = images.size(2);
    const int64_t n = images.size(0);
    TripleScaleViews v;
    v.orig = images;
    v.at1_boxes.assign(n, centre_box(size, config.crop_frac_at1));
    v.at2_boxes.assign(n, centre_box(size, config.crop_frac_at2));
    v.at1 = crop_resize(images, v.at1_boxes, size);
    v.at2 = crop_resize(images, v.at2_boxes, size);
    return v;
}

torch::Tensor gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients) {
    if (activations.dim() != 4 || activations.sizes() != gradients.sizes())
        throw ContractViolation("gradcam: activations and gradients must share an (n, K, h, w) shape");
    const auto alpha = gradients.mean({2, 3}, true);
    const auto cam = torch::relu((alpha * activations).sum(1, true));
    const auto peak = cam.amax({2, 3}, true);
    // Zero maps divide by 1 and stay zero.
    return cam / torch::where(peak > 0, peak, torch::ones_like(peak));
}

GradCam gradcam_heatmap(const torch::Tensor& images, Backbone& backbone, const std::string& tap,
                        const std::optional<std::vector<int64_t>>& classes) {
    check_images(images, "gradcam_heatmap");
    if (!backbone->has_layer(tap)) throw ConfigError("Grad-CAM tap layer '" + tap + "' not found in backbone");
    torch::AutoGradMode enable(true);
    const auto input = images.detach().clone().set_requires_grad(true);
    auto fwd = backbone->run(input, tap, true);
    const int64_t n = images.size(0);

    GradCam out;
    if (classes) {
        if (static_cast<int64_t>(classes->size()) != n)
            throw ContractViolation("gradcam_heatmap: one class index per sample required");
        out.classes = *classes;
    } else {
        const auto arg = fwd.logits.detach().argmax(1);
        for (int64_t i = 0; i < n; ++i) out.classes.push_back(arg[i].item<int64_t>());
    }
    for (auto c : out.classes)
        if (c < 0 || c >= fwd.logits.size(1)) throw ContractViolation("gradcam_heatmap: class index out of range");

    const auto index = torch::tensor(out.classes, torch::kLong).view({n, 1});
    const auto score = fwd.logits.gather(1, index).sum();
    const auto grads = torch::autograd::grad({score}, {fwd.captured})[0];
    const auto acts = fwd.captured.detach();
    out.channel_weights = grads.mean({2, 3});
    out.heat = gradcam_from_activations(acts, grads.detach());
    return out;
}

torch::Tensor render_heat(const torch::Tensor& heat, int64_t size) {
    if (heat.dim() != 4 || heat.size(1) != 1) throw ContractViolation("render_heat expects (n, 1, h, w)");
    const auto h = resize(heat, size).clamp(0.0, 1.0) * 4.0;
    std::vector<torch::Tensor> channels;
    for (int c = 0; c < 3; ++c) {
        auto acc = torch::zeros_like(h);
        for (int i = 0; i < 5; ++i) acc = acc + kViridis[i][c] * torch::relu(1.0 - (h - i).abs());
        channels.push_back(acc);
    }
    return torch::cat(channels, 1) * 2.0 - 1.0;
}

std::vector<CropBox> heat_boxes(const torch::Tensor& heat, int64_t size, double threshold, bool* fallback) {
    const auto up = resize(heat.detach(), size);
    const int64_t n = up.size(0);
    std::vector<CropBox> boxes;
    bool any_fallback = false;
    for (int64_t i = 0; i < n; ++i) {
        const auto map = up[i][0];
        const double peak = map.max().item<double>();
        if (!(peak > 0.0)) {
            boxes.push_back({0, 0, size, size});
            any_fallback = true;
            continue;
        }
        const auto mask = map >= threshold * peak;
        const auto rows = torch::nonzero(mask.any(1)).flatten();
        const auto cols = torch::nonzero(mask.any(0)).flatten();
        const int64_t top = rows.min().item<int64_t>();
        const int64_t bottom = rows.max().item<int64_t>();
        const int64_t left = cols.min().item<int64_t>();
        const int64_t right = cols.max().item<int64_t>();
        boxes.push_back({top, left, bottom - top + 1, right - left + 1});
    }
    if (fallback) *fallback = any_fallback;
    return boxes;
}

TripleScaleViews gradcam_views(const torch::Tensor& images, Backbone& backbone, const AttentionConfig& config,
                               const std::optional<std::vector<int64_t>>& classes) {
    check_images(images, "gradcam_views");
    config.validate();
    const int64_t size = images.size(2);
    const auto cam = gradcam_heatmap(images, backbone, config.tap_layer, classes);

    TripleScaleViews v;
    v.orig = images;
    v.classes = cam.classes;

    torch::Tensor heat = cam.heat;
    if (images.requires_grad() && torch::GradMode::is_enabled()) {
        // Channel weights stay detached; the activations carry the gradient.
        const auto acts = backbone->run(images, config.tap_layer, false).captured;
        const auto alpha = cam.channel_weights.view({images.size(0), -1, 1, 1}).to(acts.dtype());
        const auto map = torch::relu((alpha * acts).sum(1, true));
        const auto peak = map.amax({2, 3}, true).detach();
        heat = map / torch::where(peak > 0, peak, torch::ones_like(peak));
    }
    v.at1 = render_heat(heat, size);

    bool fallback = false;
    v.at2_boxes = heat_boxes(cam.heat, size, config.heat_threshold, &fallback);
    v.at2 = crop_resize(images, v.at2_boxes, size);
    if (fallback) {
        v.fallback = true;
        v.warnings.emplace_back("gradcam: empty heat region, AT2 uses the full frame");
    }
    return v;
}

TripleScaleViews make_views(const torch::Tensor& images, Backbone* backbone, const AttentionConfig& config,
                            const std::optional<std::vector<int64_t>>& classes) {
    if (config.mode == AttentionMode::Centre) return centre_views(images, config);
    if (!backbone) throw ConfigError("gradcam attention requires a backbone");
    return gradcam_views(images, *backbone, config, classes);
}

}  // namespace dse
