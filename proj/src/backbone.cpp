#include "dse/backbone.hpp"

#include <cstdlib>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace dse {

namespace {

// ImageNet channel statistics, applied after mapping [-1, 1] to [0, 1].
constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};

std::string head_name(BackboneHead h) {
    return h == BackboneHead::GapLinear ? "gap_linear" : "vgg_classifier";
}

BackboneHead head_from(const std::string& s) {
    if (s == "gap_linear") return BackboneHead::GapLinear;
    if (s == "vgg_classifier") return BackboneHead::VggClassifier;
    throw ConfigError("unknown backbone head '" + s + "' (expected gap_linear or vgg_classifier)");
}

torch::Tensor pool_if_possible(const torch::Tensor& x) {
    if (x.size(-1) < 2 || x.size(-2) < 2) return x;
    return F::max_pool2d(x, F::MaxPool2dFuncOptions(2));
}

}  // namespace

BackboneSpec BackboneSpec::vgg16() {
    BackboneSpec s;
    s.widths = {64, 128, 256, 512, 512};
    s.head = BackboneHead::VggClassifier;
    s.n_classes = 1000;
    return s;
}

BackboneSpec BackboneSpec::desk() { return BackboneSpec{}; }

void BackboneSpec::validate() const {
    if (widths.size() != 5 || convs_per_block.size() != 5)
        throw ConfigError("backbone needs exactly 5 blocks (one LPIPS tap per block)");
    for (size_t i = 0; i < 5; ++i)
        if (widths[i] <= 0 || convs_per_block[i] <= 0)
            throw ConfigError("backbone widths and conv counts must be positive");
    if (n_classes <= 0) throw ConfigError("backbone n_classes must be positive");
}

json BackboneSpec::to_json() const {
    return {{"widths", widths}, {"convs_per_block", convs_per_block}, {"head", head_name(head)},
            {"n_classes", n_classes}, {"hidden", hidden}};
}

BackboneSpec BackboneSpec::from_json(const json& j) {
    BackboneSpec s;
    s.widths = j.at("widths").get<std::vector<int64_t>>();
    s.convs_per_block = j.at("convs_per_block").get<std::vector<int64_t>>();
    s.head = head_from(j.at("head").get<std::string>());
    s.n_classes = j.at("n_classes").get<int64_t>();
    s.hidden = j.value("hidden", int64_t{4096});
    s.validate();
    return s;
}

BackboneImpl::BackboneImpl(BackboneSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard no_grad;

    auto he_init = [&](torch::Tensor& w, int64_t fan_in) {
        w.normal_(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), gen);
    };

    int64_t in = 3;
    for (size_t b = 0; b < 5; ++b) {
        std::vector<torch::nn::Conv2d> convs;
        std::vector<std::string> names;
        for (int64_t i = 0; i < spec_.convs_per_block[b]; ++i) {
            const int64_t out = spec_.widths[b];
            const std::string name = "conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1);
            auto conv = register_module(name, torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
            he_init(conv->weight, in * 9);
            conv->bias.zero_();
            convs.push_back(conv);
            names.push_back(name);
            in = out;
        }
        blocks_.push_back(std::move(convs));
        names_.push_back(std::move(names));
    }

    int64_t head_in = spec_.widths.back();
    if (spec_.head == BackboneHead::VggClassifier) {
        fc6_ = register_module("fc6", torch::nn::Linear(head_in * 7 * 7, spec_.hidden));
        fc7_ = register_module("fc7", torch::nn::Linear(spec_.hidden, spec_.hidden));
        he_init(fc6_->weight, head_in * 49);
        he_init(fc7_->weight, spec_.hidden);
        fc6_->bias.zero_();
        fc7_->bias.zero_();
        head_in = spec_.hidden;
    }
    fc_ = register_module("fc", torch::nn::Linear(head_in, spec_.n_classes));
    fc_->weight.normal_(0.0, 1.0 / std::sqrt(static_cast<double>(head_in)), gen);
    fc_->bias.zero_();

    mean_ = register_buffer("input_mean", torch::tensor({kMean[0], kMean[1], kMean[2]}).view({1, 3, 1, 1}).to(torch::kFloat));
    std_ = register_buffer("input_std", torch::tensor({kStd[0], kStd[1], kStd[2]}).view({1, 3, 1, 1}).to(torch::kFloat));
}

std::vector<std::string> BackboneImpl::conv_names() const {
    std::vector<std::string> out;
    for (const auto& block : names_) out.insert(out.end(), block.begin(), block.end());
    return out;
}

bool BackboneImpl::has_layer(const std::string& name) const {
    for (const auto& block : names_)
        for (const auto& n : block)
            if (n == name) return true;
    return false;
}

torch::nn::Linear& BackboneImpl::final_layer() { return fc_; }

torch::Tensor BackboneImpl::head_forward(torch::Tensor x) {
    x = pool_if_possible(x);
    if (spec_.head == BackboneHead::VggClassifier) {
        x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({7, 7})).flatten(1);
        x = torch::relu(fc6_->forward(x));
        x = torch::relu(fc7_->forward(x));
    } else {
        x = x.mean({2, 3});
    }
    return fc_->forward(x);
}

BackboneForward BackboneImpl::run(const torch::Tensor& images, const std::string& capture, bool with_logits) {
    if (!capture.empty() && !has_layer(capture))
        throw ConfigError("backbone has no layer '" + capture + "'");
    if (images.dim() != 4 || images.size(1) != 3)
        throw ContractViolation("backbone expects (n, 3, H, W) images");

    BackboneForward out;
    auto x = ((images + 1.0) * 0.5 - mean_.to(images.dtype())) / std_.to(images.dtype());
    for (size_t b = 0; b < blocks_.size(); ++b) {
        if (b > 0) x = pool_if_possible(x);
        for (size_t i = 0; i < blocks_[b].size(); ++i) {
            x = torch::relu(blocks_[b][i]->forward(x));
            if (names_[b][i] == capture) out.captured = x;
        }
        out.taps.push_back(x);
    }
    if (with_logits) out.logits = head_forward(x);
    return out;
}

std::vector<torch::Tensor> BackboneImpl::features(const torch::Tensor& images) {
    return run(images, {}, false).taps;
}

torch::Tensor BackboneImpl::logits(const torch::Tensor& images) { return run(images).logits; }

void save_backbone(const std::filesystem::path& dir, Backbone& backbone) {
    write_bundle(dir, module_bundle(*backbone, "backbone", backbone->spec().to_json()));
}

Backbone load_backbone(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "manifest.json"))
        throw IoError("backbone weights not found at " + dir.string() +
                      ": expected manifest.json plus per-array .bin files. Convert torchvision "
                      "VGG16 weights with tools/convert_vgg16.py and point backbone.path or $" +
                      std::string(kBackboneEnv) + " at the output directory.");
    auto bundle = read_bundle(dir);
    if (bundle.kind != "backbone")
        throw ConfigError(dir.string() + " holds a '" + bundle.kind + "' bundle, not a backbone");
    BackboneSpec spec;
    try {
        spec = BackboneSpec::from_json(bundle.meta);
    } catch (const json::exception& e) {
        throw IoError("corrupt backbone manifest in " + dir.string() + ": " + e.what());
    }
    Backbone backbone(spec, 0);
    load_module_state(*backbone, bundle, dir.string());
    freeze(*backbone);
    return backbone;
}

Backbone resolve_backbone(const std::optional<std::filesystem::path>& path, bool allow_surrogate, uint64_t seed) {
    if (path && !path->empty()) return load_backbone(*path);
    if (const char* env = std::getenv(kBackboneEnv); env && *env) return load_backbone(env);
    if (!allow_surrogate)
        throw ConfigError(
            "no backbone available: set backbone.path in the config or $" + std::string(kBackboneEnv) +
            " to a directory produced by tools/convert_vgg16.py (manifest.json + *.bin), or set "
            "backbone.source = \"surrogate\" to use the seeded desk-scale network.");
    Backbone backbone(BackboneSpec::desk(), seed);
    freeze(*backbone);
    return backbone;
}

}  // namespace dse
