#pragma once

// The encoder mirrors a generator: one residual two-conv block per generator
// block, highest resolution first. Style family blocks are
//
//   [style-FC ← GAP(x)] → IN → CONV → +z_n′ → L-ReLU     (×2)
//
// with a 1×1 projection (+2× pool) bypass. Each style-FC emits one w′ slice for
// the mirrored generator layer; the last block replaces its second stage with
// an FC over the flattened 4×4 features, and a 1×1 head emits z_c′.
// Progressive drops style-FCs and noise and ends in FC → z′. Class-conditional
// uses conditional batch norm and ends in FC → c′ → FC → z′.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dse/generators.hpp"
#include "dse/layers.hpp"

namespace dse {

enum class Normalization { Instance, ConditionalBatch };

struct EncoderSpec {
    Family family = Family::Style;
    int64_t resolution = 32;
    std::vector<int64_t> channels;  // block input widths, highest resolution first
    int64_t d_w = 64;
    int64_t d_z = 64;
    int64_t d_c = 256;
    int64_t n_classes = 10;
    int64_t zc_channels = 128;  // generator channels[0]
    Normalization normalization = Normalization::Instance;

    int64_t n_blocks() const { return static_cast<int64_t>(channels.size()); }
    int64_t n_layers() const { return family == Family::Style ? 2 * n_blocks() : 0; }
    /// Output width of block i (input width of block i + 1; the last block keeps its width).
    int64_t block_out(int64_t i) const;

    /// Reverses the generator's schedule; normalization follows the family.
    static EncoderSpec mirror(const GeneratorSpec& g);

    void validate() const;
    /// ConfigError naming the first block whose widths disagree with `g`.
    void check_matches(const GeneratorSpec& g) const;

    nlohmann::json to_json() const;
    static EncoderSpec from_json(const nlohmann::json& j);
};

struct DSEBlockSpec {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    bool has_style_fc = false;
    bool has_noise = false;
    Normalization normalization = Normalization::Instance;
    bool downsample = true;
    bool last = false;  // second stage replaced by the family head
    int64_t resolution = 0;
    int64_t d_w = 0;
    int64_t d_c = 0;
    int64_t n_classes = 0;
};

/// Instance norm, or batch norm with an affine map chosen by the class
/// embedding when one is supplied and a learned unconditional affine otherwise.
class EncoderNormImpl : public torch::nn::Module {
public:
    EncoderNormImpl(int64_t channels, Normalization kind, int64_t d_c, at::Generator& gen);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& class_embedding);

    Normalization kind;
    EqualizedLinear gain{nullptr}, shift{nullptr};
    torch::Tensor uncond_gain, uncond_shift, running_mean, running_var;
};
TORCH_MODULE(EncoderNorm);

struct BlockOutput {
    torch::Tensor features;
    std::vector<torch::Tensor> styles;  // stage order: stage 1, stage 2 (if any)
};

class DSEBlockImpl : public torch::nn::Module {
public:
    DSEBlockImpl(const DSEBlockSpec& spec, at::Generator& gen);

    BlockOutput forward(const torch::Tensor& x, const torch::Tensor& class_embedding, bool fused_scale);

    const DSEBlockSpec& spec() const { return spec_; }

    EqualizedConv2d conv1{nullptr}, conv2{nullptr}, bypass{nullptr};
    EqualizedLinear style1{nullptr}, style2{nullptr};
    EncoderNorm norm1{nullptr}, norm2{nullptr};
    NoiseInjection noise1{nullptr}, noise2{nullptr};
    torch::Tensor noise_map;  // fixed (1, 1, res, res) buffer; keeps encoding deterministic

private:
    DSEBlockSpec spec_;
};
TORCH_MODULE(DSEBlock);

/// One row per block listing its layers as "CONV(in,out,k)" / "FC(in,out)",
/// read off the built weights.
using LayerTable = std::vector<std::vector<std::string>>;

class EncoderImpl : public torch::nn::Module {
public:
    EncoderImpl(EncoderSpec spec, uint64_t seed);

    /// Style: w′ (n, n_layers, d_w) and z_c′ (n, zc_channels, 4, 4).
    /// Progressive: z′ (n, d_z). Class-conditional: z′ (n, d_z) and c′ (n, d_c).
    LatentBundle encode(const torch::Tensor& x, const std::optional<torch::Tensor>& class_hint = std::nullopt);

    const EncoderSpec& spec() const { return spec_; }
    LayerTable layer_table() const;

    /// Fused conv+pool in every downsampling block (training strategy 2).
    void set_fused_scale(bool on) { fused_scale_ = on; }
    bool fused_scale() const { return fused_scale_; }

    /// The learnable z_n′: per-layer, per-channel noise weights.
    std::vector<torch::Tensor> noise_weights() const;

    std::vector<DSEBlock>& blocks() { return blocks_; }

    EqualizedConv2d from_rgb{nullptr};
    EqualizedLinear tail_fc{nullptr};   // style: → last w′ slice; progressive: → z′; cc: → c′
    EqualizedLinear tail_fc2{nullptr};  // cc: c′ → z′
    EqualizedConv2d zc_head{nullptr};   // style
    EqualizedLinear class_embedding{nullptr};  // cc

private:
    EncoderSpec spec_;
    std::vector<DSEBlock> blocks_;
    bool fused_scale_ = false;
};
TORCH_MODULE(Encoder);

Encoder build_encoder(const EncoderSpec& spec, uint64_t seed);

/// Independent copy (same spec, same parameter and buffer values).
Encoder clone_encoder(Encoder& enc);

void save_encoder(const std::filesystem::path& dir, Encoder& enc);
Encoder load_encoder(const std::filesystem::path& dir);

}  // namespace dse
