#include "dse/similarity.hpp"

#include <cmath>
#include <sstream>

#include "dse/errors.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace dse {

namespace {

constexpr const char* kScales[3] = {"orig", "at1", "at2"};

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
    if (!a.defined() || !b.defined()) throw ContractViolation(std::string(op) + ": undefined input");
    if (a.sizes() != b.sizes()) {
        std::ostringstream os;
        os << op << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
        throw ContractViolation(os.str());
    }
}

void require_finite(const torch::Tensor& t, const char* op) {
    if (!torch::isfinite(t.detach()).all().item<bool>())
        throw InvalidInput(std::string(op) + ": non-finite input");
}

torch::Tensor rows_for_softmax(const torch::Tensor& t) {
    if (t.dim() == 4) return t.flatten(2);
    if (t.dim() == 0) return t.view({1});
    return t;
}

torch::Tensor gaussian_window(int64_t size, double sigma, const torch::TensorOptions& opts) {
    auto coords = torch::arange(size, opts.dtype(torch::kDouble)) - static_cast<double>(size / 2);
    auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g).to(opts.dtype());
}

double term(const std::map<std::string, double>& terms, const std::string& key) {
    auto it = terms.find(key);
    if (it == terms.end()) throw ContractViolation("loss breakdown is missing term '" + key + "'");
    return it->second;
}

bool has_prefix(const std::map<std::string, double>& terms, const std::string& prefix) {
    for (const auto& [k, v] : terms)
        if (k.rfind(prefix, 0) == 0) return true;
    return false;
}

const torch::Tensor& view_at(const TripleScaleViews& v, int scale) {
    return scale == 0 ? v.orig : scale == 1 ? v.at1 : v.at2;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weights and breakdowns

void LossWeights::validate() const {
    const std::pair<const char*, double> all[] = {{"alpha", alpha}, {"beta", beta},   {"gamma", gamma},
                                                  {"delta", delta}, {"epsilon", epsilon},
                                                  {"mu1", mu1},     {"mu2", mu2}};
    for (const auto& [name, v] : all)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw ConfigError(std::string("loss weight ") + name + " must be a finite value >= 0");
}

json LossWeights::to_json() const {
    return {{"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"delta", delta},
            {"epsilon", epsilon}, {"mu1", mu1}, {"mu2", mu2}};
}

LossWeights LossWeights::from_json(const json& j) {
    LossWeights w;
    w.alpha = j.value("alpha", w.alpha);
    w.beta = j.value("beta", w.beta);
    w.gamma = j.value("gamma", w.gamma);
    w.delta = j.value("delta", w.delta);
    w.epsilon = j.value("epsilon", w.epsilon);
    w.mu1 = j.value("mu1", w.mu1);
    w.mu2 = j.value("mu2", w.mu2);
    w.validate();
    return w;
}

std::string to_string(MseMode m) { return m == MseMode::MeanSquare ? "mean_sq" : "l2_over_batch"; }

MseMode mse_mode_from_string(const std::string& s) {
    if (s == "mean_sq") return MseMode::MeanSquare;
    if (s == "l2_over_batch") return MseMode::L2OverBatch;
    throw ConfigError("unknown mse_mode '" + s + "' (expected mean_sq or l2_over_batch)");
}

std::map<std::string, double> LossBreakdown::values() const {
    std::map<std::string, double> out;
    for (const auto& [k, t] : terms) out[k] = t.item<double>();
    return out;
}

double LossBreakdown::total_value() const { return total.item<double>(); }

torch::Tensor LossBreakdown::scale_total(const std::string& scale, const LossWeights& w) const {
    auto get = [&](const char* metric) {
        auto it = terms.find(scale + "." + metric);
        if (it == terms.end()) throw ContractViolation("loss breakdown has no scale '" + scale + "'");
        return it->second;
    };
    return get("kl") + w.alpha * get("mse") + w.beta * get("cos") + w.gamma * get("lpips") +
           w.delta * (1.0 - get("ssim"));
}

torch::Tensor LossBreakdown::latent_total(const LossWeights& w) const {
    auto get = [&](const char* metric) {
        auto it = terms.find(std::string("lv.") + metric);
        if (it == terms.end()) throw ContractViolation("loss breakdown has no latent terms");
        return it->second;
    };
    return get("kl") + w.alpha * get("mse") + w.beta * get("cos");
}

double recompute_total(LossPart part, const std::map<std::string, double>& terms, const LossWeights& w) {
    double image = 0.0;
    const double mu[3] = {1.0, w.mu1, w.mu2};
    for (int s = 0; s < 3; ++s) {
        const std::string p = std::string(kScales[s]) + ".";
        if (!has_prefix(terms, p)) continue;
        image += mu[s] * (term(terms, p + "kl") + w.alpha * term(terms, p + "mse") +
                          w.beta * term(terms, p + "cos") + w.gamma * term(terms, p + "lpips") +
                          w.delta * (1.0 - term(terms, p + "ssim")));
    }
    double latent = 0.0;
    if (has_prefix(terms, "lv."))
        latent = term(terms, "lv.kl") + w.alpha * term(terms, "lv.mse") + w.beta * term(terms, "lv.cos");
    switch (part) {
        case LossPart::Image: return image;
        case LossPart::Latent: return latent;
        case LossPart::Combined: return image + w.epsilon * latent;
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Metrics

torch::Tensor mse_loss(const torch::Tensor& a, const torch::Tensor& b, MseMode mode) {
    require_same_shape(a, b, "mse_loss");
    require_finite(a, "mse_loss");
    require_finite(b, "mse_loss");
    const auto diff = a - b;
    if (mode == MseMode::MeanSquare) return diff.pow(2).mean();
    const double n = a.dim() == 0 ? 1.0 : static_cast<double>(a.size(0));
    // The tiny offset keeps the gradient finite at a == b.
    return torch::sqrt(diff.pow(2).sum() + 1e-24) / n;
}

torch::Tensor cos_loss(const torch::Tensor& a, const torch::Tensor& b, bool* zero_norm) {
    require_same_shape(a, b, "cos_loss");
    require_finite(a, "cos_loss");
    require_finite(b, "cos_loss");
    const auto fa = a.dim() >= 2 ? a.flatten(1) : a.reshape({1, -1});
    const auto fb = b.dim() >= 2 ? b.flatten(1) : b.reshape({1, -1});
    const auto na = fa.norm(2, 1);
    const auto nb = fb.norm(2, 1);
    const double tiny = a.scalar_type() == torch::kDouble ? 1e-300 : 1e-30;
    const auto degenerate = (na <= tiny) | (nb <= tiny);
    if (zero_norm) *zero_norm = degenerate.any().item<bool>();
    // Clamped norms give cos = 0 (loss 1) for zero vectors.
    const auto cos = (fa * fb).sum(1) / (na.clamp_min(tiny) * nb.clamp_min(tiny));
    return (1.0 - cos).mean();
}

torch::Tensor kl_softmax_loss(const torch::Tensor& a, const torch::Tensor& b) {
    require_same_shape(a, b, "kl_softmax_loss");
    require_finite(a, "kl_softmax_loss");
    require_finite(b, "kl_softmax_loss");
    const auto pa = torch::softmax(rows_for_softmax(a), -1);
    const auto pb = torch::softmax(rows_for_softmax(b), -1);
    const auto log_ratio = pa.clamp_min(1e-12).log() - pb.clamp_min(1e-12).log();
    return (-(pb * log_ratio)).sum(-1).mean();
}

torch::Tensor ssim_per_sample(const torch::Tensor& a, const torch::Tensor& b, int64_t window,
                              double dynamic_range, double sigma) {
    require_same_shape(a, b, "ssim");
    if (a.dim() != 4) throw ContractViolation("ssim expects (n, C, H, W) batches");
    if (window < 1 || window % 2 == 0) throw ContractViolation("ssim window must be a positive odd integer");
    if (a.size(2) < window || a.size(3) < window) {
        std::ostringstream os;
        os << "ssim: image " << a.size(2) << "x" << a.size(3) << " is smaller than the " << window
           << "x" << window << " window";
        throw InvalidInput(os.str());
    }
    const int64_t channels = a.size(1);
    const auto kernel = gaussian_window(window, sigma, a.options())
                            .view({1, 1, window, window})
                            .expand({channels, 1, window, window})
                            .contiguous();
    auto filt = [&](const torch::Tensor& x) {
        return F::conv2d(x, kernel, F::Conv2dFuncOptions().groups(channels));
    };
    const double c1 = std::pow(0.01 * dynamic_range, 2);
    const double c2 = std::pow(0.03 * dynamic_range, 2);
    const auto mu_a = filt(a);
    const auto mu_b = filt(b);
    const auto mu_aa = mu_a * mu_a;
    const auto mu_bb = mu_b * mu_b;
    const auto mu_ab = mu_a * mu_b;
    const auto var_a = filt(a * a) - mu_aa;
    const auto var_b = filt(b * b) - mu_bb;
    const auto cov = filt(a * b) - mu_ab;
    const auto map = ((2.0 * mu_ab + c1) * (2.0 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2));
    return map.mean({1, 2, 3});
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, int64_t window, double dynamic_range,
                   double sigma) {
    return ssim_per_sample(a, b, window, dynamic_range, sigma).mean();
}

torch::Tensor lpips_per_sample(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone) {
    require_same_shape(a, b, "lpips_distance");
    if (a.dim() != 4) throw ContractViolation("lpips_distance expects (n, 3, H, W) batches");
    const int64_t n = a.size(0);
    const auto both = backbone->features(torch::cat({a, b}, 0));
    auto total = torch::zeros({n}, a.options());
    for (const auto& f : both) {
        const auto normed = f * torch::rsqrt(f.pow(2).sum(1, true) + 1e-10);
        const auto fa = normed.narrow(0, 0, n);
        const auto fb = normed.narrow(0, n, n);
        total = total + (fa - fb).pow(2).sum(1).mean({1, 2});
    }
    return total;
}

torch::Tensor lpips_distance(const torch::Tensor& a, const torch::Tensor& b, Backbone& backbone) {
    return lpips_per_sample(a, b, backbone).mean();
}

// ---------------------------------------------------------------------------
// Composite losses

LossBreakdown latent_loss(const torch::Tensor& w, const torch::Tensor& w_hat, const LossWeights& weights,
                          const LossOptions& options) {
    weights.validate();
    require_same_shape(w, w_hat, "latent_loss");
    LossBreakdown out;
    out.part = LossPart::Latent;
    bool zero_norm = false;
    out.terms["lv.kl"] = kl_softmax_loss(w, w_hat);
    out.terms["lv.mse"] = mse_loss(w, w_hat, options.mse_mode);
    out.terms["lv.cos"] = cos_loss(w, w_hat, &zero_norm);
    if (zero_norm) out.warnings.emplace_back("lv.cos: zero-norm latent, cosine term set to 1");
    out.total = out.latent_total(weights);
    return out;
}

LossBreakdown image_loss(const TripleScaleViews& views, const TripleScaleViews& views_hat,
                         const LossWeights& weights, Backbone& backbone, const LossOptions& options) {
    weights.validate();
    LossBreakdown out;
    out.part = LossPart::Image;
    const double mu[3] = {1.0, weights.mu1, weights.mu2};
    torch::Tensor total;
    for (int s = 0; s < 3; ++s) {
        if (mu[s] == 0.0) continue;
        const auto& x = view_at(views, s);
        const auto& xh = view_at(views_hat, s);
        if (!x.defined() || !xh.defined())
            throw ContractViolation(std::string("image_loss: missing '") + kScales[s] +
                                    "' view with nonzero weight");
        require_same_shape(x, xh, "image_loss");
        const std::string p = std::string(kScales[s]) + ".";
        bool zero_norm = false;
        out.terms[p + "kl"] = kl_softmax_loss(x, xh);
        out.terms[p + "mse"] = mse_loss(x, xh, options.mse_mode);
        out.terms[p + "cos"] = cos_loss(x, xh, &zero_norm);
        out.terms[p + "lpips"] = lpips_distance(x, xh, backbone);
        out.terms[p + "ssim"] = ssim(x, xh, options.ssim_window, options.dynamic_range, options.ssim_sigma);
        if (zero_norm) out.warnings.push_back(p + "cos: zero-norm image, cosine term set to 1");
        const auto scaled = mu[s] * out.scale_total(kScales[s], weights);
        total = total.defined() ? total + scaled : scaled;
    }
    out.total = total;
    return out;
}

LossBreakdown total_loss(const LossBreakdown& image_part, const LossBreakdown& latent_part,
                         const LossWeights& weights) {
    weights.validate();
    LossBreakdown out;
    out.part = LossPart::Combined;
    out.terms = image_part.terms;
    for (const auto& [k, v] : latent_part.terms) out.terms[k] = v;
    out.warnings = image_part.warnings;
    out.warnings.insert(out.warnings.end(), latent_part.warnings.begin(), latent_part.warnings.end());
    out.total = image_part.total + weights.epsilon * latent_part.total;
    return out;
}

}  // namespace dse
