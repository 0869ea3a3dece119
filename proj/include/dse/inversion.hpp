#pragma once

// Real-image inversion and latent editing.
//   invert_batch       one encoder pass, then G
//   finetune_encoder   "DSE (E)": re-optimizes a copy of the encoder on the
//                      images, with a learnable stand-in for the unknown latent
//   optimize_w_direct  gradient descent on the latents themselves
//   edit               w′ = w + α·d on selected style layers

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/attention.hpp"
#include "dse/backbone.hpp"
#include "dse/encoder.hpp"
#include "dse/evalharness.hpp"
#include "dse/generators.hpp"
#include "dse/similarity.hpp"

namespace dse {

struct InversionResult {
    LatentBundle latents;
    torch::Tensor reconstruction;
    std::vector<MetricRow> metrics;
    int64_t steps_used = 0;
    bool diverged = false;
    std::vector<double> loss_trace;  // loss before each step, then the final loss
    double best_loss = 0.0;
};

struct InversionConfig {
    int64_t steps = 200;
    double learning_rate = 1e-4;     // encoder fine-tuning
    double w_learning_rate = 0.1;    // direct latent optimization
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.99;
    double w_adam_beta1 = 0.9;       // direct latent optimization
    LossWeights weights;
    LossOptions options;
    AttentionConfig attention;
    bool optimize_zc = true;         // optimize_w_direct: also free z_c
    bool cosine_decay = true;        // optimize_w_direct: w_learning_rate decays to 0 along a half cosine
    uint64_t seed = 0;               // random init for optimize_w_direct
    double divergence_factor = 10.0;
    int64_t divergence_window = 100;

    void validate() const;
    nlohmann::json to_json() const;
    static InversionConfig from_json(const nlohmann::json& j);
};

/// `y` must already be (n, 3, R, R) at the generator resolution.
InversionResult invert_batch(Encoder& enc, Generator& gen, const torch::Tensor& y, Backbone& backbone,
                             const std::vector<std::string>& ids = {});

/// Works on a copy; `enc` is never modified.
InversionResult finetune_encoder(Encoder& enc, Generator& gen, const torch::Tensor& y, Backbone& backbone,
                                 const InversionConfig& config, const std::vector<std::string>& ids = {});

/// Initialization: `init` if given, else the encoder output when `enc` is
/// set, else the generator's sample from a random z (config.seed).
InversionResult optimize_w_direct(Generator& gen, const torch::Tensor& y, Backbone& backbone,
                                  const InversionConfig& config, const std::optional<LatentBundle>& init = std::nullopt,
                                  Encoder* enc = nullptr, const std::vector<std::string>& ids = {});

struct EditRequest {
    torch::Tensor direction;                    // (n_layers, d_w) or (d_w,)
    double alpha = 0.0;
    std::optional<std::vector<int64_t>> layers; // default: every layer
};

/// w (n, n_layers, d_w) → w + α·d on the masked layers.
torch::Tensor edit(const torch::Tensor& w, const EditRequest& request);

/// A direction on disk: array-store bundle of kind "direction" holding array
/// "d", with name, layer mask and recommended α range in the manifest.
struct Direction {
    std::string name;
    torch::Tensor d;
    std::vector<int64_t> layers;  // empty: all
    double alpha_min = -3.0;
    double alpha_max = 3.0;
};

void save_direction(const std::filesystem::path& dir, const Direction& direction);
Direction load_direction(const std::filesystem::path& dir);

}  // namespace dse
