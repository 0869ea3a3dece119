#pragma once

// VGG16-topology feature extractor + classifier. It serves two roles: the five
// block-final conv activations feed the perceptual (LPIPS-style) distance, and
// the classifier head gives Grad-CAM a class score to differentiate.
//
// Real VGG16 weights can be supplied in the array-store format (see
// tools/convert_vgg16.py); without them a seeded narrow surrogate is used.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/layers.hpp"

namespace dse {

enum class BackboneHead { GapLinear, VggClassifier };

struct BackboneSpec {
    std::vector<int64_t> widths{8, 16, 32, 64, 64};
    std::vector<int64_t> convs_per_block{2, 2, 3, 3, 3};
    BackboneHead head = BackboneHead::GapLinear;
    int64_t n_classes = 10;
    int64_t hidden = 4096;  // VggClassifier only

    static BackboneSpec vgg16();
    static BackboneSpec desk();

    void validate() const;
    nlohmann::json to_json() const;
    static BackboneSpec from_json(const nlohmann::json& j);
};

struct BackboneForward {
    std::vector<torch::Tensor> taps;  // one per block, last conv after ReLU
    torch::Tensor captured;           // activation at the requested tap, if any
    torch::Tensor logits;
};

class BackboneImpl : public torch::nn::Module {
public:
    BackboneImpl(BackboneSpec spec, uint64_t seed);

    const BackboneSpec& spec() const { return spec_; }

    /// Input: images in [-1, 1]. Normalization to ImageNet statistics happens here.
    /// `capture` names a conv layer ("conv5_3"); unknown names raise ConfigError.
    BackboneForward run(const torch::Tensor& images, const std::string& capture = {},
                        bool with_logits = true);

    std::vector<torch::Tensor> features(const torch::Tensor& images);
    torch::Tensor logits(const torch::Tensor& images);

    std::vector<std::string> conv_names() const;
    bool has_layer(const std::string& name) const;

    /// The final classification layer (for rescaling tests).
    torch::nn::Linear& final_layer();

private:
    torch::Tensor head_forward(torch::Tensor x);

    BackboneSpec spec_;
    std::vector<std::vector<torch::nn::Conv2d>> blocks_;
    std::vector<std::vector<std::string>> names_;
    torch::nn::Linear fc6_{nullptr}, fc7_{nullptr}, fc_{nullptr};
    torch::Tensor mean_, std_;
};
TORCH_MODULE(Backbone);

inline constexpr const char* kBackboneEnv = "DSE_BACKBONE";

void save_backbone(const std::filesystem::path& dir, Backbone& backbone);

/// Loads a backbone directory; errors explain how to supply weights.
Backbone load_backbone(const std::filesystem::path& dir);

/// Resolution order: explicit path, then $DSE_BACKBONE, then the seeded desk
/// surrogate when `allow_surrogate` is set. Otherwise ConfigError with
/// instructions for supplying VGG16 weights.
Backbone resolve_backbone(const std::optional<std::filesystem::path>& path, bool allow_surrogate,
                          uint64_t seed = 0);

}  // namespace dse
