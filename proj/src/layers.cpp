#include "dse/layers.hpp"

namespace F = torch::nn::functional;

namespace dse {

double equalized_scale(int64_t fan_in, double gain) {
    return gain / std::sqrt(static_cast<double>(fan_in));
}

torch::Tensor equalized_linear_forward(const torch::Tensor& raw_weight, const torch::Tensor& bias,
                                       const torch::Tensor& input, double gain) {
    const double scale = equalized_scale(raw_weight.size(1), gain);
    return F::linear(input, raw_weight * scale, bias);
}

torch::Tensor lrelu(const torch::Tensor& x) {
    return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
}

torch::Tensor instance_norm(const torch::Tensor& x, double eps) {
    const auto mean = x.mean({2, 3}, true);
    const auto centred = x - mean;
    const auto var = centred.pow(2).mean({2, 3}, true);
    return centred * torch::rsqrt(var + eps);
}

torch::Tensor pixel_norm(const torch::Tensor& x, double eps) {
    return x * torch::rsqrt(x.pow(2).mean(-1, true) + eps);
}

EqualizedLinearImpl::EqualizedLinearImpl(int64_t in_features, int64_t out_features, double gain,
                                         at::Generator& gen, double bias_init)
    : gain_(gain) {
    weight = register_parameter("weight", torch::empty({out_features, in_features}).normal_(0.0, 1.0, gen));
    bias = register_parameter("bias", torch::full({out_features}, bias_init));
}

torch::Tensor EqualizedLinearImpl::forward(const torch::Tensor& x) {
    return equalized_linear_forward(weight, bias, x, gain_);
}

EqualizedConv2dImpl::EqualizedConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                                         double gain, at::Generator& gen)
    : gain_(gain) {
    weight = register_parameter(
        "weight", torch::empty({out_channels, in_channels, kernel, kernel}).normal_(0.0, 1.0, gen));
    bias = register_parameter("bias", torch::zeros({out_channels}));
}

torch::Tensor EqualizedConv2dImpl::forward(const torch::Tensor& x) {
    return F::conv2d(x, weight * scale(), F::Conv2dFuncOptions().bias(bias).padding(kernel() / 2));
}

torch::Tensor EqualizedConv2dImpl::forward_fused_downscale(const torch::Tensor& x) {
    using torch::indexing::None;
    using torch::indexing::Slice;
    auto w = F::pad(weight * scale(), F::PadFuncOptions({1, 1, 1, 1}));
    w = (w.index({Slice(), Slice(), Slice(1, None), Slice(1, None)}) +
         w.index({Slice(), Slice(), Slice(None, -1), Slice(1, None)}) +
         w.index({Slice(), Slice(), Slice(1, None), Slice(None, -1)}) +
         w.index({Slice(), Slice(), Slice(None, -1), Slice(None, -1)})) *
        0.25;
    return F::conv2d(x, w, F::Conv2dFuncOptions().bias(bias).stride(2).padding(kernel() / 2));
}

NoiseInjectionImpl::NoiseInjectionImpl(int64_t channels) {
    weight = register_parameter("weight", torch::zeros({channels}));
}

torch::Tensor NoiseInjectionImpl::forward(const torch::Tensor& x, const torch::Tensor& noise) {
    return x + weight.view({1, -1, 1, 1}) * noise;
}

void freeze(torch::nn::Module& module) {
    for (auto& p : module.parameters(true)) p.set_requires_grad(false);
    module.eval();
}

torch::Tensor downsample2x(const torch::Tensor& x) {
    return F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
}

torch::Tensor upsample2x(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

}  // namespace dse
