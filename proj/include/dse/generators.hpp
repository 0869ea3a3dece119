#pragma once

// Frozen desk-scale decoders in three families:
//   style              mapping z → w, learned 4×4 constant, per-layer AdaIN from w,
//                      additive per-channel noise (StyleGAN1-like, no demodulation)
//   progressive        z projected to 4×4, pixel-norm trunk
//   class_conditional  z projected to 4×4, conditional batch norm driven by a
//                      label embedding c

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/layers.hpp"

namespace dse {

enum class Family { Style, Progressive, ClassConditional };

std::string to_string(Family f);
Family family_from_string(const std::string& s);

struct GeneratorSpec {
    Family family = Family::Style;
    int64_t resolution = 32;
    std::vector<int64_t> channels;  // per block, 4×4 block first
    int64_t d_w = 64;               // style width
    int64_t d_z = 64;               // input latent width
    int64_t d_c = 256;              // label embedding width (class_conditional)
    int64_t n_classes = 10;         // class_conditional
    int64_t mapping_layers = 4;     // style

    int64_t n_blocks() const;
    /// Style taps: two per block (= 2·log2(R/4) + 2). Zero for other families.
    int64_t n_layers() const;
    int64_t block_resolution(int64_t block) const { return int64_t{4} << block; }

    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorSpec from_json(const nlohmann::json& j);

    /// Channel schedule min(128, 1024 / res), d_w = d_z = 64 (d_z = 128 for class_conditional).
    static GeneratorSpec desk(Family family, int64_t resolution = 32);
    /// Channel schedule min(512, 16384 / res); widths as in the full-size networks.
    static GeneratorSpec full_scale(Family family, int64_t resolution);
};

/// Latents for one batch. Which fields are used depends on the family.
struct LatentBundle {
    torch::Tensor w;                 // style: (n, n_layers, d_w)
    torch::Tensor z_c;               // style: (n, channels[0], 4, 4); undefined → learned constant
    std::vector<torch::Tensor> z_n;  // style: per layer (n, 1, H, W) noise maps; empty → zero noise
    torch::Tensor z;                 // progressive / class_conditional: (n, d_z); style: mapping input
    torch::Tensor c;                 // class_conditional: (n, d_c)
    torch::Tensor labels;            // class_conditional: (n,) int64 when known

    int64_t batch() const;
};

struct Synthesis {
    torch::Tensor image;  // (n, 3, R, R) in [-1, 1]
    torch::Tensor z_c;    // style: the constant input actually used
};

class Generator : public torch::nn::Module {
public:
    explicit Generator(GeneratorSpec spec) : spec_(std::move(spec)) {}
    ~Generator() override = default;

    const GeneratorSpec& spec() const { return spec_; }
    Family family() const { return spec_.family; }

    virtual Synthesis synthesize(const LatentBundle& latents) = 0;

    /// Draws z (and labels) and fills the derived latents (w via mapping, c via
    /// the label embedding). Noise maps are left empty.
    virtual LatentBundle sample(int64_t n, at::Generator& rng) = 0;

    /// The latent the encoder imitates and the latent loss compares:
    /// w for style, z for progressive, [z, c] for class_conditional.
    virtual torch::Tensor loss_latent(const LatentBundle& latents) const = 0;

protected:
    GeneratorSpec spec_;
};

using GeneratorPtr = std::shared_ptr<Generator>;

class StyleGenerator : public Generator {
public:
    StyleGenerator(GeneratorSpec spec, at::Generator& gen);

    Synthesis synthesize(const LatentBundle& latents) override;
    LatentBundle sample(int64_t n, at::Generator& rng) override;
    torch::Tensor loss_latent(const LatentBundle& latents) const override;

    /// z (n, d_z) → w (n, n_layers, d_w), one vector broadcast to every tap.
    torch::Tensor map(const torch::Tensor& z);

    /// Standard-normal noise maps, one (n, 1, H, W) tensor per style layer.
    std::vector<torch::Tensor> random_noise(int64_t n, at::Generator& rng) const;
    const torch::Tensor& constant() const { return constant_; }

private:
    torch::Tensor adain(const torch::Tensor& x, const torch::Tensor& w_slice, int64_t layer);

    std::vector<EqualizedLinear> mapping_;
    torch::Tensor constant_;
    std::vector<EqualizedConv2d> convs_;  // 2·n_blocks − 1 (the first layer has no conv)
    std::vector<EqualizedLinear> styles_;
    std::vector<NoiseInjection> noises_;
    EqualizedConv2d to_rgb_{nullptr};
};

class ProgressiveGenerator : public Generator {
public:
    ProgressiveGenerator(GeneratorSpec spec, at::Generator& gen);

    Synthesis synthesize(const LatentBundle& latents) override;
    LatentBundle sample(int64_t n, at::Generator& rng) override;
    torch::Tensor loss_latent(const LatentBundle& latents) const override;

private:
    EqualizedLinear input_{nullptr};
    std::vector<EqualizedConv2d> convs_;
    EqualizedConv2d to_rgb_{nullptr};
};

/// Batch norm with fixed statistics and an affine map driven by the embedding c.
class ConditionalBatchNormImpl : public torch::nn::Module {
public:
    ConditionalBatchNormImpl(int64_t channels, int64_t d_c, at::Generator& gen);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& c);
    /// Replaces the stored statistics with those of `x`, then normalizes with them.
    torch::Tensor calibrate(const torch::Tensor& x, const torch::Tensor& c);

    EqualizedLinear gain{nullptr}, shift{nullptr};
    torch::Tensor running_mean, running_var;
};
TORCH_MODULE(ConditionalBatchNorm);

class ClassConditionalGenerator : public Generator {
public:
    ClassConditionalGenerator(GeneratorSpec spec, at::Generator& gen, bool calibrate = true);

    Synthesis synthesize(const LatentBundle& latents) override;
    LatentBundle sample(int64_t n, at::Generator& rng) override;
    torch::Tensor loss_latent(const LatentBundle& latents) const override;

    /// One-hot labels → c (n, d_c).
    torch::Tensor embed(const torch::Tensor& labels);

private:
    torch::Tensor run(const LatentBundle& latents, bool calibrating);

    EqualizedLinear embedding_{nullptr};
    EqualizedLinear input_{nullptr};
    std::vector<EqualizedConv2d> convs_;
    std::vector<ConditionalBatchNorm> norms_;
    EqualizedConv2d to_rgb_{nullptr};
};

/// Deterministic weights from `seed`; the result is frozen (no trainable
/// parameters, eval mode).
GeneratorPtr build_toy_generator(const GeneratorSpec& spec, uint64_t seed);

/// Convenience for the style family: mapping(gen, z) = gen.map(z).
torch::Tensor mapping(Generator& gen, const torch::Tensor& z);

/// Checks the latent shapes against the spec; ContractViolation on mismatch.
void check_latents(const GeneratorSpec& spec, const LatentBundle& latents);

void save_generator(const std::filesystem::path& dir, Generator& gen);

/// Loads a generator directory written by save_generator (or a conversion
/// script targeting the same array names). A family other than `family`
/// raises ConfigError naming both.
GeneratorPtr load_pretrained(const std::filesystem::path& dir, Family family);

}  // namespace dse
