#pragma once

// Self-supervised encoder training against a frozen generator. Each step
// samples z, synthesizes x = G(M(z)), encodes x, reconstructs x′ = G(E(x)) and
// minimizes the three-scale image loss plus ε times the latent loss.
//
// Strategy 1 feeds the full-frame term through a detached copy of x′ (only the
// attention crops drive the encoder), with μ1 = μ2 = 1. Strategy 2 keeps every
// gradient, uses μ1 = 5, μ2 = 9 and fuses the ×2 pooling into the convs.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/attention.hpp"
#include "dse/backbone.hpp"
#include "dse/encoder.hpp"
#include "dse/generators.hpp"
#include "dse/similarity.hpp"

namespace dse {

enum class LatentSource {
    EncodeOnce,            // w′ = E(x)
    EncodeReconstruction,  // w′ = E(G(E(x)))
};

std::string to_string(LatentSource s);
LatentSource latent_source_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 0.0015;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.99;
    int64_t samples_per_epoch = 30000;
    int64_t epochs = 7;
    int64_t batch_size = 8;
    int strategy = 1;
    LossWeights weights;
    std::optional<double> mu1, mu2;  // override the strategy's scale weights
    MseMode mse_mode = MseMode::MeanSquare;
    int64_t ssim_window = 11;
    LatentSource latent_source = LatentSource::EncodeOnce;
    uint64_t seed = 0;
    int64_t fixed_pool = 0;        // > 0: train on this many samples drawn once
    double skip_threshold = 1e-4;  // stop once batch reconstruction MSE falls below
    int64_t max_steps = 0;         // > 0: cap on optimizer steps
    std::string checkpoint_dir;    // empty: no files written
    int64_t checkpoint_every = 0;  // 0: only at the end

    void validate() const;
    int64_t total_steps() const;
    /// Loss weights with μ1/μ2 set by the strategy (or the overrides).
    LossWeights effective_weights() const;
    LossOptions loss_options() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// μ1, μ2 for a strategy: (1, 1) or (5, 9). ConfigError otherwise.
std::pair<double, double> strategy_scale_weights(int strategy);

/// Strategy 1 replaces the full-frame view of the reconstruction with a
/// detached copy; strategy 2 returns the views unchanged.
TripleScaleViews apply_strategy_gating(int strategy, const TripleScaleViews& views_hat);

/// Latents the generator consumes when reconstructing from encoder output:
/// style uses w′ and z_c′ with zero noise.
LatentBundle reconstruction_latents(Family family, const LatentBundle& encoded);

struct StepOutput {
    LossBreakdown loss;
    LatentBundle encoded;
    torch::Tensor reconstruction;
    double reconstruction_mse = 0.0;
};

/// One forward pass of the training objective for targets `x` generated from
/// `target`. `target_views` may be passed in when precomputed.
StepOutput dse_forward(Generator& gen, Encoder& enc, Backbone& backbone, const AttentionConfig& attention,
                       const TrainConfig& config, const torch::Tensor& x, const LatentBundle& target,
                       const TripleScaleViews* target_views = nullptr);

struct StepRecord {
    int64_t step = 0;
    std::map<std::string, double> terms;
    double total = 0.0;
    double reconstruction_mse = 0.0;
    double seconds = 0.0;

    nlohmann::json to_json() const;
    static StepRecord from_json(const nlohmann::json& j);
};

enum class TrainStatus { Completed, Converged, Aborted };
std::string to_string(TrainStatus s);

struct TrainHistory {
    std::vector<StepRecord> steps;
    double wall_seconds = 0.0;
    std::vector<std::string> checkpoints;
    TrainStatus status = TrainStatus::Completed;
    std::string message;
};

/// Reads a history.jsonl log back.
std::vector<StepRecord> read_history(const std::filesystem::path& file);

/// Trains `enc` in place. A non-finite loss restores the last checkpointed
/// weights and returns with status Aborted. When config.checkpoint_dir is set
/// the directory receives config.json, history.jsonl and encoder/.
TrainHistory train_dse(Generator& gen, Encoder& enc, Backbone& backbone, const AttentionConfig& attention,
                       const TrainConfig& config, const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace dse
