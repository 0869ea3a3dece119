#include "dse/generators.hpp"

#include <algorithm>
#include <bit>
#include <sstream>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"

using nlohmann::json;

namespace dse {

namespace {

constexpr double kInputGain = 0.3535533905932738;  // √2 / 4 for the 4×4 projection
// Untrained random decoders are far more sensitive to w than trained ones;
// damped style modulation and output gain keep the toy images unsaturated.
constexpr double kStyleGain = 0.3;
constexpr double kRgbGain = 0.5;

torch::Tensor channel_pixel_norm(const torch::Tensor& x) {
    return x * torch::rsqrt(x.pow(2).mean(1, true) + 1e-8);
}

std::string shape_str(const torch::Tensor& t) {
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

void expect_shape(const torch::Tensor& t, std::vector<int64_t> shape, const char* what) {
    if (!t.defined()) throw ContractViolation(std::string(what) + " is required for this generator family");
    if (t.sizes() != c10::IntArrayRef(shape)) {
        std::ostringstream os;
        os << what << " has shape " << t.sizes() << ", expected " << c10::IntArrayRef(shape);
        throw ContractViolation(os.str());
    }
}

}  // namespace

std::string to_string(Family f) {
    switch (f) {
        case Family::Style: return "style";
        case Family::Progressive: return "progressive";
        case Family::ClassConditional: return "class_conditional";
    }
    return "?";
}

Family family_from_string(const std::string& s) {
    if (s == "style") return Family::Style;
    if (s == "progressive") return Family::Progressive;
    if (s == "class_conditional") return Family::ClassConditional;
    throw ConfigError("unknown generator family '" + s + "' (expected style, progressive or class_conditional)");
}

// ---------------------------------------------------------------------------
// GeneratorSpec

int64_t GeneratorSpec::n_blocks() const {
    return static_cast<int64_t>(std::bit_width(static_cast<uint64_t>(resolution))) - 2;
}

int64_t GeneratorSpec::n_layers() const { return family == Family::Style ? 2 * n_blocks() : 0; }

void GeneratorSpec::validate() const {
    if (resolution < 16 || !std::has_single_bit(static_cast<uint64_t>(resolution)))
        throw ConfigError("unsupported generator resolution " + std::to_string(resolution) +
                          " (must be a power of two >= 16)");
    if (static_cast<int64_t>(channels.size()) != n_blocks())
        throw ConfigError("channel schedule has " + std::to_string(channels.size()) + " entries; resolution " +
                          std::to_string(resolution) + " needs " + std::to_string(n_blocks()));
    if (std::any_of(channels.begin(), channels.end(), [](int64_t c) { return c <= 0; }))
        throw ConfigError("channel counts must be positive");
    if (d_w <= 0 || d_z <= 0 || d_c <= 0 || n_classes <= 0 || mapping_layers <= 0)
        throw ConfigError("latent widths, n_classes and mapping_layers must be positive");
}

json GeneratorSpec::to_json() const {
    return {{"family", to_string(family)}, {"resolution", resolution}, {"channels", channels},
            {"d_w", d_w}, {"d_z", d_z}, {"d_c", d_c}, {"n_classes", n_classes},
            {"mapping_layers", mapping_layers}};
}

GeneratorSpec GeneratorSpec::from_json(const json& j) {
    const Family family = family_from_string(j.value("family", std::string("style")));
    const int64_t resolution = j.value("resolution", int64_t{32});
    GeneratorSpec s = desk(family, std::max<int64_t>(resolution, 16));
    s.resolution = resolution;
    if (j.contains("channels")) s.channels = j.at("channels").get<std::vector<int64_t>>();
    s.d_w = j.value("d_w", s.d_w);
    s.d_z = j.value("d_z", s.d_z);
    s.d_c = j.value("d_c", s.d_c);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.mapping_layers = j.value("mapping_layers", s.mapping_layers);
    s.validate();
    return s;
}

GeneratorSpec GeneratorSpec::desk(Family family, int64_t resolution) {
    GeneratorSpec s;
    s.family = family;
    s.resolution = resolution;
    for (int64_t res = 4; res <= resolution; res *= 2) s.channels.push_back(std::min<int64_t>(128, 1024 / res));
    s.d_w = 64;
    s.d_z = family == Family::ClassConditional ? 128 : 64;
    s.d_c = 256;
    s.n_classes = 10;
    s.mapping_layers = 4;
    return s;
}

GeneratorSpec GeneratorSpec::full_scale(Family family, int64_t resolution) {
    GeneratorSpec s;
    s.family = family;
    s.resolution = resolution;
    for (int64_t res = 4; res <= resolution; res *= 2) s.channels.push_back(std::min<int64_t>(512, 16384 / res));
    s.d_w = 512;
    s.d_z = family == Family::ClassConditional ? 128 : 512;
    s.d_c = 256;
    s.n_classes = 1000;
    s.mapping_layers = 8;
    return s;
}

int64_t LatentBundle::batch() const {
    for (const auto* t : {&w, &z, &c, &z_c})
        if (t->defined()) return t->size(0);
    return 0;
}

void check_latents(const GeneratorSpec& spec, const LatentBundle& l) {
    const int64_t n = l.batch();
    switch (spec.family) {
        case Family::Style: {
            expect_shape(l.w, {n, spec.n_layers(), spec.d_w}, "w");
            if (l.z_c.defined()) expect_shape(l.z_c, {n, spec.channels[0], 4, 4}, "z_c");
            if (!l.z_n.empty()) {
                if (static_cast<int64_t>(l.z_n.size()) != spec.n_layers())
                    throw ContractViolation("z_n needs one noise map per style layer (" +
                                            std::to_string(spec.n_layers()) + ")");
                for (int64_t i = 0; i < spec.n_layers(); ++i) {
                    const int64_t res = spec.block_resolution(i / 2);
                    const auto& m = l.z_n[i];
                    if (m.dim() != 4 || (m.size(0) != n && m.size(0) != 1) || m.size(1) != 1 || m.size(2) != res ||
                        m.size(3) != res)
                        throw ContractViolation("z_n[" + std::to_string(i) + "] has shape " + shape_str(m) +
                                                ", expected (n, 1, " + std::to_string(res) + ", " +
                                                std::to_string(res) + ")");
                }
            }
            break;
        }
        case Family::Progressive: expect_shape(l.z, {n, spec.d_z}, "z"); break;
        case Family::ClassConditional:
            expect_shape(l.z, {n, spec.d_z}, "z");
            expect_shape(l.c, {n, spec.d_c}, "c");
            break;
    }
}

// ---------------------------------------------------------------------------
// Style family

StyleGenerator::StyleGenerator(GeneratorSpec spec, at::Generator& gen) : Generator(std::move(spec)) {
    spec_.validate();
    torch::NoGradGuard no_grad;
    for (int64_t i = 0; i < spec_.mapping_layers; ++i) {
        const int64_t in = i == 0 ? spec_.d_z : spec_.d_w;
        mapping_.push_back(register_module("mapping" + std::to_string(i), EqualizedLinear(in, spec_.d_w, kReluGain, gen)));
    }
    constant_ = register_parameter("constant", torch::empty({1, spec_.channels[0], 4, 4}).normal_(0.0, 1.0, gen));

    const int64_t layers = spec_.n_layers();
    for (int64_t l = 0; l < layers; ++l) {
        const int64_t block = l / 2;
        const int64_t out = spec_.channels[block];
        if (l > 0) {
            const int64_t in = (l % 2 == 0) ? spec_.channels[block - 1] : out;
            convs_.push_back(register_module("conv" + std::to_string(l), EqualizedConv2d(in, out, 3, kReluGain, gen)));
        }
        auto style = register_module("style" + std::to_string(l), EqualizedLinear(spec_.d_w, 2 * out, kStyleGain, gen));
        style->bias.narrow(0, 0, out).fill_(1.0);
        styles_.push_back(style);
        auto noise = register_module("noise" + std::to_string(l), NoiseInjection(out));
        noise->weight.normal_(0.0, 0.1, gen);
        noises_.push_back(noise);
    }
    to_rgb_ = register_module("to_rgb", EqualizedConv2d(spec_.channels.back(), 3, 1, kRgbGain, gen));
}

torch::Tensor StyleGenerator::map(const torch::Tensor& z) {
    if (z.dim() != 2 || z.size(1) != spec_.d_z)
        throw ContractViolation("mapping expects z of shape (n, " + std::to_string(spec_.d_z) + "), got " +
                                shape_str(z));
    auto x = pixel_norm(z);
    for (auto& fc : mapping_) x = lrelu(fc->forward(x));
    return x.unsqueeze(1).expand({z.size(0), spec_.n_layers(), spec_.d_w}).contiguous();
}

torch::Tensor StyleGenerator::adain(const torch::Tensor& x, const torch::Tensor& w_slice, int64_t layer) {
    const auto style = styles_[layer]->forward(w_slice);
    const int64_t c = x.size(1);
    const auto scale = style.narrow(1, 0, c).view({-1, c, 1, 1});
    const auto shift = style.narrow(1, c, c).view({-1, c, 1, 1});
    return instance_norm(x) * scale + shift;
}

Synthesis StyleGenerator::synthesize(const LatentBundle& latents) {
    check_latents(spec_, latents);
    const int64_t n = latents.batch();
    Synthesis out;
    out.z_c = latents.z_c.defined() ? latents.z_c : constant_.expand({n, -1, -1, -1});
    auto x = out.z_c;
    for (int64_t l = 0; l < spec_.n_layers(); ++l) {
        if (l > 0) {
            if (l % 2 == 0) x = upsample2x(x);
            x = convs_[l - 1]->forward(x);
        }
        if (!latents.z_n.empty()) x = noises_[l]->forward(x, latents.z_n[l]);
        x = lrelu(x);
        x = adain(x, latents.w.select(1, l), l);
    }
    out.image = torch::tanh(to_rgb_->forward(x));
    return out;
}

LatentBundle StyleGenerator::sample(int64_t n, at::Generator& rng) {
    LatentBundle l;
    l.z = torch::randn({n, spec_.d_z}, rng, constant_.options().requires_grad(false));
    l.w = map(l.z);
    return l;
}

torch::Tensor StyleGenerator::loss_latent(const LatentBundle& latents) const { return latents.w; }

std::vector<torch::Tensor> StyleGenerator::random_noise(int64_t n, at::Generator& rng) const {
    std::vector<torch::Tensor> maps;
    for (int64_t l = 0; l < spec_.n_layers(); ++l) {
        const int64_t res = spec_.block_resolution(l / 2);
        maps.push_back(torch::randn({n, 1, res, res}, rng, constant_.options().requires_grad(false)));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Progressive family

ProgressiveGenerator::ProgressiveGenerator(GeneratorSpec spec, at::Generator& gen) : Generator(std::move(spec)) {
    spec_.validate();
    input_ = register_module("input", EqualizedLinear(spec_.d_z, spec_.channels[0] * 16, kInputGain, gen));
    convs_.push_back(register_module("conv0", EqualizedConv2d(spec_.channels[0], spec_.channels[0], 3, kReluGain, gen)));
    for (int64_t b = 1; b < spec_.n_blocks(); ++b) {
        const int64_t in = spec_.channels[b - 1];
        const int64_t out = spec_.channels[b];
        convs_.push_back(register_module("conv" + std::to_string(2 * b - 1), EqualizedConv2d(in, out, 3, kReluGain, gen)));
        convs_.push_back(register_module("conv" + std::to_string(2 * b), EqualizedConv2d(out, out, 3, kReluGain, gen)));
    }
    to_rgb_ = register_module("to_rgb", EqualizedConv2d(spec_.channels.back(), 3, 1, kRgbGain, gen));
}

Synthesis ProgressiveGenerator::synthesize(const LatentBundle& latents) {
    check_latents(spec_, latents);
    const int64_t n = latents.batch();
    auto x = input_->forward(pixel_norm(latents.z)).view({n, spec_.channels[0], 4, 4});
    x = channel_pixel_norm(lrelu(x));
    for (size_t i = 0; i < convs_.size(); ++i) {
        if (i > 0 && i % 2 == 1) x = upsample2x(x);
        x = channel_pixel_norm(lrelu(convs_[i]->forward(x)));
    }
    return {torch::tanh(to_rgb_->forward(x)), {}};
}

LatentBundle ProgressiveGenerator::sample(int64_t n, at::Generator& rng) {
    LatentBundle l;
    l.z = torch::randn({n, spec_.d_z}, rng, input_->weight.options().requires_grad(false));
    return l;
}

torch::Tensor ProgressiveGenerator::loss_latent(const LatentBundle& latents) const { return latents.z; }

// ---------------------------------------------------------------------------
// Class-conditional family

ConditionalBatchNormImpl::ConditionalBatchNormImpl(int64_t channels, int64_t d_c, at::Generator& gen) {
    gain = register_module("gain", EqualizedLinear(d_c, channels, 1.0, gen));
    shift = register_module("shift", EqualizedLinear(d_c, channels, 1.0, gen));
    running_mean = register_buffer("running_mean", torch::zeros({channels}));
    running_var = register_buffer("running_var", torch::ones({channels}));
}

torch::Tensor ConditionalBatchNormImpl::forward(const torch::Tensor& x, const torch::Tensor& c) {
    const auto mean = running_mean.view({1, -1, 1, 1});
    const auto var = running_var.view({1, -1, 1, 1});
    const auto normed = (x - mean) * torch::rsqrt(var + 1e-5);
    const int64_t ch = x.size(1);
    return normed * (1.0 + gain->forward(c).view({-1, ch, 1, 1})) + shift->forward(c).view({-1, ch, 1, 1});
}

torch::Tensor ConditionalBatchNormImpl::calibrate(const torch::Tensor& x, const torch::Tensor& c) {
    torch::NoGradGuard no_grad;
    running_mean.copy_(x.mean({0, 2, 3}));
    running_var.copy_(x.var({0, 2, 3}, false));
    return forward(x, c);
}

ClassConditionalGenerator::ClassConditionalGenerator(GeneratorSpec spec, at::Generator& gen, bool calibrate)
    : Generator(std::move(spec)) {
    spec_.validate();
    embedding_ = register_module("embedding", EqualizedLinear(spec_.n_classes, spec_.d_c, 1.0, gen));
    input_ = register_module("input", EqualizedLinear(spec_.d_z, spec_.channels[0] * 16, kInputGain, gen));
    int64_t idx = 0;
    auto add = [&](int64_t in, int64_t out) {
        norms_.push_back(register_module("norm" + std::to_string(idx), ConditionalBatchNorm(in, spec_.d_c, gen)));
        convs_.push_back(register_module("conv" + std::to_string(idx), EqualizedConv2d(in, out, 3, kReluGain, gen)));
        ++idx;
    };
    add(spec_.channels[0], spec_.channels[0]);
    for (int64_t b = 1; b < spec_.n_blocks(); ++b) {
        add(spec_.channels[b - 1], spec_.channels[b]);
        add(spec_.channels[b], spec_.channels[b]);
    }
    norms_.push_back(register_module("norm" + std::to_string(idx), ConditionalBatchNorm(spec_.channels.back(), spec_.d_c, gen)));
    to_rgb_ = register_module("to_rgb", EqualizedConv2d(spec_.channels.back(), 3, 1, kRgbGain, gen));

    if (calibrate) {
        // Fixed normalization statistics from one large batch, so synthesis is
        // per-sample and independent of batch composition.
        auto calib_rng = at::detail::createCPUGenerator(0x5eed);
        torch::NoGradGuard no_grad;
        run(sample(256, calib_rng), true);
    }
}

torch::Tensor ClassConditionalGenerator::embed(const torch::Tensor& labels) {
    if (labels.dim() != 1) throw ContractViolation("labels must be a 1-D tensor of class indices");
    if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= spec_.n_classes))
        throw ContractViolation("label out of range [0, " + std::to_string(spec_.n_classes) + ")");
    const auto one_hot = torch::one_hot(labels.to(torch::kLong), spec_.n_classes).to(embedding_->weight.dtype());
    return embedding_->forward(one_hot);
}

torch::Tensor ClassConditionalGenerator::run(const LatentBundle& latents, bool calibrating) {
    check_latents(spec_, latents);
    const int64_t n = latents.batch();
    auto x = input_->forward(latents.z).view({n, spec_.channels[0], 4, 4});
    for (size_t i = 0; i < convs_.size(); ++i) {
        x = calibrating ? norms_[i]->calibrate(x, latents.c) : norms_[i]->forward(x, latents.c);
        x = lrelu(x);
        if (i > 0 && i % 2 == 1) x = upsample2x(x);
        x = convs_[i]->forward(x);
    }
    x = calibrating ? norms_.back()->calibrate(x, latents.c) : norms_.back()->forward(x, latents.c);
    return torch::tanh(to_rgb_->forward(lrelu(x)));
}

Synthesis ClassConditionalGenerator::synthesize(const LatentBundle& latents) { return {run(latents, false), {}}; }

LatentBundle ClassConditionalGenerator::sample(int64_t n, at::Generator& rng) {
    LatentBundle l;
    const auto opts = input_->weight.options().requires_grad(false);
    l.z = torch::randn({n, spec_.d_z}, rng, opts);
    l.labels = torch::randint(spec_.n_classes, {n}, rng, torch::TensorOptions().dtype(torch::kLong));
    torch::NoGradGuard no_grad;
    l.c = embed(l.labels);
    return l;
}

torch::Tensor ClassConditionalGenerator::loss_latent(const LatentBundle& latents) const {
    return torch::cat({latents.z, latents.c}, 1);
}

// ---------------------------------------------------------------------------

GeneratorPtr build_toy_generator(const GeneratorSpec& spec, uint64_t seed) {
    spec.validate();
    auto gen = at::detail::createCPUGenerator(seed);
    GeneratorPtr g;
    switch (spec.family) {
        case Family::Style: g = std::make_shared<StyleGenerator>(spec, gen); break;
        case Family::Progressive: g = std::make_shared<ProgressiveGenerator>(spec, gen); break;
        case Family::ClassConditional: g = std::make_shared<ClassConditionalGenerator>(spec, gen); break;
    }
    freeze(*g);
    return g;
}

torch::Tensor mapping(Generator& gen, const torch::Tensor& z) {
    auto* style = dynamic_cast<StyleGenerator*>(&gen);
    if (!style) throw ContractViolation("mapping network exists only for the style family");
    return style->map(z);
}

void save_generator(const std::filesystem::path& dir, Generator& gen) {
    write_bundle(dir, module_bundle(gen, "generator", gen.spec().to_json()));
}

GeneratorPtr load_pretrained(const std::filesystem::path& dir, Family family) {
    if (!std::filesystem::exists(dir)) throw IoError("generator checkpoint not found: " + dir.string());
    const auto bundle = read_bundle(dir);
    if (bundle.kind != "generator")
        throw ConfigError(dir.string() + " holds a '" + bundle.kind + "' bundle, not a generator");
    GeneratorSpec spec;
    try {
        spec = GeneratorSpec::from_json(bundle.meta);
    } catch (const json::exception& e) {
        throw IoError("corrupt generator manifest in " + dir.string() + ": " + e.what());
    }
    if (spec.family != family)
        throw ConfigError("generator checkpoint " + dir.string() + " is family '" + to_string(spec.family) +
                          "' but '" + to_string(family) + "' was requested");

    auto gen = at::detail::createCPUGenerator(0);
    GeneratorPtr g;
    switch (spec.family) {
        case Family::Style: g = std::make_shared<StyleGenerator>(spec, gen); break;
        case Family::Progressive: g = std::make_shared<ProgressiveGenerator>(spec, gen); break;
        case Family::ClassConditional:
            g = std::make_shared<ClassConditionalGenerator>(spec, gen, false);
            break;
    }
    load_module_state(*g, bundle, dir.string());
    freeze(*g);
    return g;
}

}  // namespace dse
