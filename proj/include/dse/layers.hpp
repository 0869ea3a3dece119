#pragma once

// Equalized-learning-rate building blocks shared by the toy generators and the
// encoder. Raw weights are stored unscaled, drawn from N(0, 1); the fan-in
// scaling gain / sqrt(fan_in) is applied at every forward pass.

#include <cmath>
#include <cstdint>

#include <torch/torch.h>

namespace dse {

inline constexpr double kLeakySlope = 0.2;
inline const double kReluGain = std::sqrt(2.0);

double equalized_scale(int64_t fan_in, double gain);

/// y = x · (raw_weight · scale)ᵀ + bias, scale = gain / sqrt(fan_in).
torch::Tensor equalized_linear_forward(const torch::Tensor& raw_weight, const torch::Tensor& bias,
                                       const torch::Tensor& input, double gain);

torch::Tensor lrelu(const torch::Tensor& x);

/// Per-sample, per-channel normalization over the spatial axes.
torch::Tensor instance_norm(const torch::Tensor& x, double eps = 1e-8);

/// Normalizes each latent row to unit root-mean-square.
torch::Tensor pixel_norm(const torch::Tensor& x, double eps = 1e-8);

class EqualizedLinearImpl : public torch::nn::Module {
public:
    EqualizedLinearImpl(int64_t in_features, int64_t out_features, double gain,
                        at::Generator& gen, double bias_init = 0.0);

    torch::Tensor forward(const torch::Tensor& x);

    int64_t in_features() const { return weight.size(1); }
    int64_t out_features() const { return weight.size(0); }
    double scale() const { return equalized_scale(in_features(), gain_); }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    double gain_;
};
TORCH_MODULE(EqualizedLinear);

class EqualizedConv2dImpl : public torch::nn::Module {
public:
    EqualizedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel, double gain,
                        at::Generator& gen);

    torch::Tensor forward(const torch::Tensor& x);

    /// Convolution followed by a 2× average-pool, computed as one stride-2 conv
    /// with the kernel padded by one and box-filtered ("fused scale").
    torch::Tensor forward_fused_downscale(const torch::Tensor& x);

    int64_t in_channels() const { return weight.size(1); }
    int64_t out_channels() const { return weight.size(0); }
    int64_t kernel() const { return weight.size(2); }
    double scale() const { return equalized_scale(in_channels() * kernel() * kernel(), gain_); }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    double gain_;
};
TORCH_MODULE(EqualizedConv2d);

/// Adds weight[c] · noise to channel c; noise is (n|1, 1, H, W).
class NoiseInjectionImpl : public torch::nn::Module {
public:
    explicit NoiseInjectionImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& noise);

    torch::Tensor weight;
};
TORCH_MODULE(NoiseInjection);

/// Makes every parameter non-trainable and switches to eval mode.
void freeze(torch::nn::Module& module);

torch::Tensor downsample2x(const torch::Tensor& x);
torch::Tensor upsample2x(const torch::Tensor& x);

}  // namespace dse
