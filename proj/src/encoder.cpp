#include "dse/encoder.hpp"

#include <algorithm>
#include <bit>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"

using nlohmann::json;

namespace dse {

namespace {

std::string conv_entry(const torch::Tensor& w) {
    return "CONV(" + std::to_string(w.size(1)) + "," + std::to_string(w.size(0)) + "," + std::to_string(w.size(2)) + ")";
}

std::string fc_entry(const torch::Tensor& w) {
    return "FC(" + std::to_string(w.size(1)) + "," + std::to_string(w.size(0)) + ")";
}

std::string norm_name(Normalization n) { return n == Normalization::Instance ? "instance" : "conditional_batch"; }

Normalization norm_from(const std::string& s) {
    if (s == "instance") return Normalization::Instance;
    if (s == "conditional_batch") return Normalization::ConditionalBatch;
    throw ConfigError("unknown encoder normalization '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// EncoderSpec

int64_t EncoderSpec::block_out(int64_t i) const {
    return i + 1 < n_blocks() ? channels[i + 1] : channels[i];
}

EncoderSpec EncoderSpec::mirror(const GeneratorSpec& g) {
    EncoderSpec e;
    e.family = g.family;
    e.resolution = g.resolution;
    e.channels.assign(g.channels.rbegin(), g.channels.rend());
    e.d_w = g.d_w;
    e.d_z = g.d_z;
    e.d_c = g.d_c;
    e.n_classes = g.n_classes;
    e.zc_channels = g.channels.front();
    e.normalization = g.family == Family::ClassConditional ? Normalization::ConditionalBatch : Normalization::Instance;
    return e;
}

void EncoderSpec::validate() const {
    if (resolution < 16 || !std::has_single_bit(static_cast<uint64_t>(resolution)))
        throw ConfigError("unsupported encoder resolution " + std::to_string(resolution));
    const int64_t expected = static_cast<int64_t>(std::bit_width(static_cast<uint64_t>(resolution))) - 2;
    if (n_blocks() != expected)
        throw ConfigError("encoder channel schedule has " + std::to_string(n_blocks()) + " blocks; resolution " +
                          std::to_string(resolution) + " needs " + std::to_string(expected));
    if (std::any_of(channels.begin(), channels.end(), [](int64_t c) { return c <= 0; }) || d_w <= 0 || d_z <= 0 ||
        d_c <= 0 || n_classes <= 0 || zc_channels <= 0)
        throw ConfigError("encoder widths must be positive");
}

void EncoderSpec::check_matches(const GeneratorSpec& g) const {
    if (family != g.family)
        throw ConfigError("encoder family '" + to_string(family) + "' does not match generator family '" +
                          to_string(g.family) + "'");
    if (resolution != g.resolution)
        throw ConfigError("encoder resolution " + std::to_string(resolution) + " does not match generator resolution " +
                          std::to_string(g.resolution));
    if (n_blocks() != g.n_blocks())
        throw ConfigError("encoder has " + std::to_string(n_blocks()) + " blocks, generator has " +
                          std::to_string(g.n_blocks()));
    for (int64_t i = 0; i < n_blocks(); ++i) {
        const int64_t gi = g.n_blocks() - 1 - i;
        if (channels[i] != g.channels[gi])
            throw ConfigError("encoder block " + std::to_string(i + 1) + " has width " + std::to_string(channels[i]) +
                              " but mirrored generator block " + std::to_string(gi + 1) + " (" +
                              std::to_string(g.block_resolution(gi)) + "x" + std::to_string(g.block_resolution(gi)) +
                              ") has width " + std::to_string(g.channels[gi]));
    }
    if (family == Family::Style && (d_w != g.d_w || zc_channels != g.channels.front()))
        throw ConfigError("encoder style widths (d_w, z_c channels) do not match the generator");
    if (family != Family::Style && d_z != g.d_z) throw ConfigError("encoder d_z does not match the generator");
    if (family == Family::ClassConditional && (d_c != g.d_c || n_classes != g.n_classes))
        throw ConfigError("encoder label widths (d_c, n_classes) do not match the generator");
}

json EncoderSpec::to_json() const {
    return {{"family", to_string(family)}, {"resolution", resolution}, {"channels", channels},
            {"d_w", d_w}, {"d_z", d_z}, {"d_c", d_c}, {"n_classes", n_classes},
            {"zc_channels", zc_channels}, {"normalization", norm_name(normalization)}};
}

EncoderSpec EncoderSpec::from_json(const json& j) {
    EncoderSpec e;
    e.family = family_from_string(j.at("family").get<std::string>());
    e.resolution = j.at("resolution").get<int64_t>();
    e.channels = j.at("channels").get<std::vector<int64_t>>();
    e.d_w = j.at("d_w").get<int64_t>();
    e.d_z = j.at("d_z").get<int64_t>();
    e.d_c = j.at("d_c").get<int64_t>();
    e.n_classes = j.at("n_classes").get<int64_t>();
    e.zc_channels = j.at("zc_channels").get<int64_t>();
    e.normalization = norm_from(j.at("normalization").get<std::string>());
    e.validate();
    return e;
}

// ---------------------------------------------------------------------------
// Normalization

EncoderNormImpl::EncoderNormImpl(int64_t channels, Normalization k, int64_t d_c, at::Generator& gen) : kind(k) {
    if (kind == Normalization::ConditionalBatch) {
        gain = register_module("gain", EqualizedLinear(d_c, channels, 1.0, gen));
        shift = register_module("shift", EqualizedLinear(d_c, channels, 1.0, gen));
        uncond_gain = register_parameter("uncond_gain", torch::zeros({channels}));
        uncond_shift = register_parameter("uncond_shift", torch::zeros({channels}));
        running_mean = register_buffer("running_mean", torch::zeros({channels}));
        running_var = register_buffer("running_var", torch::ones({channels}));
    }
}

torch::Tensor EncoderNormImpl::forward(const torch::Tensor& x, const torch::Tensor& class_embedding) {
    if (kind == Normalization::Instance) return instance_norm(x);

    torch::Tensor mean, var;
    if (is_training()) {
        mean = x.mean({0, 2, 3});
        var = x.var({0, 2, 3}, false);
        torch::NoGradGuard no_grad;
        running_mean.mul_(0.9).add_(mean.detach(), 0.1);
        running_var.mul_(0.9).add_(var.detach(), 0.1);
    } else {
        mean = running_mean;
        var = running_var;
    }
    const auto normed = (x - mean.view({1, -1, 1, 1})) * torch::rsqrt(var.view({1, -1, 1, 1}) + 1e-5);
    const int64_t c = x.size(1);
    if (class_embedding.defined())
        return normed * (1.0 + gain->forward(class_embedding).view({-1, c, 1, 1})) +
               shift->forward(class_embedding).view({-1, c, 1, 1});
    return normed * (1.0 + uncond_gain.view({1, c, 1, 1})) + uncond_shift.view({1, c, 1, 1});
}

// ---------------------------------------------------------------------------
// Block

DSEBlockImpl::DSEBlockImpl(const DSEBlockSpec& spec, at::Generator& gen) : spec_(spec) {
    const int64_t in = spec.in_channels;
    const int64_t out = spec.out_channels;
    if (spec.has_style_fc) style1 = register_module("style1", EqualizedLinear(in, spec.d_w, 1.0, gen));
    norm1 = register_module("norm1", EncoderNorm(in, spec.normalization, spec.d_c, gen));
    conv1 = register_module("conv1", EqualizedConv2d(in, in, 3, kReluGain, gen));
    if (spec.has_noise) noise1 = register_module("noise1", NoiseInjection(in));
    if (!spec.last) {
        if (spec.has_style_fc) style2 = register_module("style2", EqualizedLinear(in, spec.d_w, 1.0, gen));
        norm2 = register_module("norm2", EncoderNorm(in, spec.normalization, spec.d_c, gen));
        conv2 = register_module("conv2", EqualizedConv2d(in, out, 3, kReluGain, gen));
        if (spec.has_noise) noise2 = register_module("noise2", NoiseInjection(out));
        if (in != out || spec.downsample) bypass = register_module("bypass", EqualizedConv2d(in, out, 1, 1.0, gen));
    }
    if (spec.has_noise)
        noise_map = register_buffer("noise_map", torch::empty({1, 1, spec.resolution, spec.resolution}).normal_(0.0, 1.0, gen));
}

BlockOutput DSEBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& class_embedding, bool fused_scale) {
    BlockOutput out;
    auto h = x;
    if (spec_.has_style_fc) out.styles.push_back(style1->forward(h.mean({2, 3})));
    h = conv1->forward(norm1->forward(h, class_embedding));
    if (spec_.has_noise) h = noise1->forward(h, noise_map.to(h.dtype()));
    h = lrelu(h);
    if (spec_.last) {
        out.features = h + x;
        return out;
    }

    if (spec_.has_style_fc) out.styles.push_back(style2->forward(h.mean({2, 3})));
    h = norm2->forward(h, class_embedding);
    const bool fuse = fused_scale && spec_.downsample;
    if (fuse) {
        h = conv2->forward_fused_downscale(h);
        if (spec_.has_noise) h = noise2->forward(h, downsample2x(noise_map.to(h.dtype())) * 2.0);
        h = lrelu(h);
    } else {
        h = conv2->forward(h);
        if (spec_.has_noise) h = noise2->forward(h, noise_map.to(h.dtype()));
        h = lrelu(h);
        if (spec_.downsample) h = downsample2x(h);
    }
    auto skip = x;
    if (bypass) {
        skip = bypass->forward(x);
        if (spec_.downsample) skip = downsample2x(skip);
    }
    out.features = h + skip;
    return out;
}

// ---------------------------------------------------------------------------
// Encoder

EncoderImpl::EncoderImpl(EncoderSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard no_grad;
    const bool style = spec_.family == Family::Style;

    from_rgb = register_module("from_rgb", EqualizedConv2d(3, spec_.channels[0], 1, kReluGain, gen));
    const int64_t n = spec_.n_blocks();
    for (int64_t i = 0; i < n; ++i) {
        DSEBlockSpec b;
        b.in_channels = spec_.channels[i];
        b.out_channels = spec_.block_out(i);
        b.has_style_fc = style;
        b.has_noise = style;
        b.normalization = spec_.normalization;
        b.last = i == n - 1;
        b.downsample = !b.last;
        b.resolution = spec_.resolution >> i;
        b.d_w = spec_.d_w;
        b.d_c = spec_.d_c;
        b.n_classes = spec_.n_classes;
        blocks_.push_back(register_module("block" + std::to_string(i), DSEBlock(b, gen)));
    }

    const int64_t flat = spec_.channels.back() * 16;
    switch (spec_.family) {
        case Family::Style:
            tail_fc = register_module("tail_fc", EqualizedLinear(flat, spec_.d_w, 1.0, gen));
            zc_head = register_module("zc_head", EqualizedConv2d(spec_.channels.back(), spec_.zc_channels, 1, 1.0, gen));
            break;
        case Family::Progressive:
            tail_fc = register_module("tail_fc", EqualizedLinear(flat, spec_.d_z, 1.0, gen));
            break;
        case Family::ClassConditional:
            class_embedding = register_module("class_embedding", EqualizedLinear(spec_.n_classes, spec_.d_c, 1.0, gen));
            tail_fc = register_module("tail_fc", EqualizedLinear(flat, spec_.d_c, 1.0, gen));
            tail_fc2 = register_module("tail_fc2", EqualizedLinear(spec_.d_c, spec_.d_z, 1.0, gen));
            break;
    }
}

LatentBundle EncoderImpl::encode(const torch::Tensor& x, const std::optional<torch::Tensor>& class_hint) {
    if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != spec_.resolution || x.size(3) != spec_.resolution) {
        std::ostringstream os;
        os << "encoder expects (n, 3, " << spec_.resolution << ", " << spec_.resolution << ") images, got " << x.sizes();
        throw ContractViolation(os.str());
    }
    const int64_t n = x.size(0);
    torch::Tensor embedding;
    if (class_hint && class_hint->defined() && class_embedding) {
        if (class_hint->dim() != 1 || class_hint->size(0) != n)
            throw ContractViolation("class hint must hold one label per image");
        embedding = class_embedding->forward(
            torch::one_hot(class_hint->to(torch::kLong), spec_.n_classes).to(x.dtype()));
    }

    const int64_t blocks = spec_.n_blocks();
    std::vector<torch::Tensor> slices(static_cast<size_t>(spec_.n_layers()));
    auto h = lrelu(from_rgb->forward(x));
    for (int64_t j = 0; j < blocks; ++j) {
        auto out = blocks_[j]->forward(h, embedding, fused_scale_);
        h = out.features;
        const int64_t g = blocks - 1 - j;
        if (!out.styles.empty()) slices[2 * g + 1] = out.styles[0];
        if (out.styles.size() > 1) slices[2 * g] = out.styles[1];
    }

    LatentBundle result;
    const auto flat = h.flatten(1);
    switch (spec_.family) {
        case Family::Style:
            slices[0] = tail_fc->forward(flat);
            result.w = torch::stack(slices, 1);
            result.z_c = zc_head->forward(h);
            break;
        case Family::Progressive: result.z = tail_fc->forward(flat); break;
        case Family::ClassConditional:
            result.c = tail_fc->forward(flat);
            result.z = tail_fc2->forward(result.c);
            if (class_hint) result.labels = *class_hint;
            break;
    }
    return result;
}

LayerTable EncoderImpl::layer_table() const {
    LayerTable table;
    for (size_t i = 0; i < blocks_.size(); ++i) {
        std::vector<std::string> row{conv_entry(blocks_[i]->conv1->weight)};
        if (blocks_[i]->conv2) row.push_back(conv_entry(blocks_[i]->conv2->weight));
        table.push_back(std::move(row));
    }
    table.back().push_back(fc_entry(tail_fc->weight));
    if (tail_fc2) table.back().push_back(fc_entry(tail_fc2->weight));
    return table;
}

std::vector<torch::Tensor> EncoderImpl::noise_weights() const {
    std::vector<torch::Tensor> out;
    for (const auto& b : blocks_) {
        if (b->noise1) out.push_back(b->noise1->weight);
        if (b->noise2) out.push_back(b->noise2->weight);
    }
    return out;
}

Encoder build_encoder(const EncoderSpec& spec, uint64_t seed) { return Encoder(spec, seed); }

Encoder clone_encoder(Encoder& enc) {
    Encoder copy(enc->spec(), 0);
    load_module_state(*copy, module_bundle(*enc, "encoder", {}), "encoder clone");
    copy->set_fused_scale(enc->fused_scale());
    copy->train(enc->is_training());
    return copy;
}

void save_encoder(const std::filesystem::path& dir, Encoder& enc) {
    auto meta = enc->spec().to_json();
    meta["fused_scale"] = enc->fused_scale();
    write_bundle(dir, module_bundle(*enc, "encoder", meta));
}

Encoder load_encoder(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir)) throw IoError("encoder checkpoint not found: " + dir.string());
    const auto bundle = read_bundle(dir);
    if (bundle.kind != "encoder") throw ConfigError(dir.string() + " holds a '" + bundle.kind + "' bundle, not an encoder");
    EncoderSpec spec;
    try {
        spec = EncoderSpec::from_json(bundle.meta);
    } catch (const json::exception& e) {
        throw IoError("corrupt encoder manifest in " + dir.string() + ": " + e.what());
    }
    Encoder enc(spec, 0);
    load_module_state(*enc, bundle, dir.string());
    enc->set_fused_scale(bundle.meta.value("fused_scale", false));
    return enc;
}

}  // namespace dse
