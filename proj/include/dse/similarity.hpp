#pragma once

// Similarity metrics and the composite encoder loss:
//
//   per scale  L_s   = KL + α·MSE + β·COS + γ·LPIPS + δ·(1 − SSIM)
//   image      L_IMG = L_orig + μ1·L_at1 + μ2·L_at2
//   latent     L_LV  = KL + α·MSE + β·COS
//   total      L_DSE = L_IMG + ε·L_LV
//
// All functions are differentiable through libtorch autograd and work in
// float or double.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/backbone.hpp"
#include "dse/views.hpp"

namespace dse {

struct LossWeights {
    double alpha = 5.0;     // MSE
    double beta = 3.0;      // COS
    double gamma = 2.0;     // LPIPS
    double delta = 1.0;     // SSIM
    double epsilon = 0.01;  // latent part
    double mu1 = 1.0;       // AT1 scale
    double mu2 = 1.0;       // AT2 scale

    void validate() const;
    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
};

enum class MseMode {
    MeanSquare,   // mean of element-wise squared differences
    L2OverBatch,  // ‖a − b‖₂ / n, n = leading (batch) dimension
};

struct LossOptions {
    MseMode mse_mode = MseMode::MeanSquare;
    int64_t ssim_window = 11;
    double ssim_sigma = 1.5;
    double dynamic_range = 2.0;  // images live in [-1, 1]
};

std::string to_string(MseMode m);
MseMode mse_mode_from_string(const std::string& s);

/// Unweighted terms plus the weighted total. Image terms are "<scale>.<metric>"
/// with scale ∈ {orig, at1, at2} and metric ∈ {kl, mse, cos, lpips, ssim};
/// latent terms are "lv.<metric>". "ssim" stores the index, which enters the
/// total as (1 − ssim).
enum class LossPart { Image, Latent, Combined };

struct LossBreakdown {
    LossPart part = LossPart::Combined;
    std::map<std::string, torch::Tensor> terms;
    torch::Tensor total;
    std::vector<std::string> warnings;

    std::map<std::string, double> values() const;
    double total_value() const;

    /// Weighted per-scale loss L_s, still attached to the autograd graph.
    torch::Tensor scale_total(const std::string& scale, const LossWeights& w) const;
    torch::Tensor latent_total(const LossWeights& w) const;
};

/// Rebuilds the total from the stored terms; independent of the code path that
/// produced `breakdown.total`.
double recompute_total(LossPart part, const std::map<std::string, double>& terms, const LossWeights& w);

torch::Tensor mse_loss(const torch::Tensor& a, const torch::Tensor& b,
                       MseMode mode = MseMode::MeanSquare);

/// 1 − cos(a, b) per sample (rank ≥ 2: leading axis is the batch), averaged.
/// A zero-norm sample scores 1 and sets *zero_norm.
torch::Tensor cos_loss(const torch::Tensor& a, const torch::Tensor& b, bool* zero_norm = nullptr);

/// KL(S(b) ‖ S(a)) = −Σ S(b)·log(S(a)/S(b)), softmax over the last axis (spatial
/// axes flattened for 4-D image batches), summed over that axis and averaged
/// over the remaining rows.
torch::Tensor kl_softmax_loss(const torch::Tensor& a, const torch::Tensor& b);

/// Gaussian-window SSIM, valid region only, C1 = (0.01·L)², C2 = (0.03·L)².
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, int64_t window = 11,
                   double dynamic_range = 2.0, double sigma = 1.5);
torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b, int64_t window = 11,
                              double dynamic_range = 2.0, double sigma = 1.5);

/// Unit-calibrated perceptual distance: channel-normalized squared feature
/// differences at the five backbone taps, spatially averaged and summed.
torch::Tensor lpips_distance(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone);
torch::Tensor lpips_per_sample(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone);

LossBreakdown latent_loss(const torch::Tensor& w, const torch::Tensor& w_hat, const LossWeights& weights,
                          const LossOptions& options = {});

LossBreakdown image_loss(const TripleScaleViews& views, const TripleScaleViews& views_hat,
                         const LossWeights& weights, Backbone& backbone, const LossOptions& options = {});

LossBreakdown total_loss(const LossBreakdown& image_part, const LossBreakdown& latent_part,
                         const LossWeights& weights);

}  // namespace dse
