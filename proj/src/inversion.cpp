#include "dse/inversion.hpp"

#include <cmath>
#include <sstream>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"
#include "dse/training.hpp"

using nlohmann::json;

namespace dse {

namespace {

void check_images(const Generator& gen, const torch::Tensor& y) {
    const int64_t r = gen.spec().resolution;
    if (y.dim() != 4 || y.size(1) != 3 || y.size(2) != r || y.size(3) != r) {
        std::ostringstream os;
        os << "images must be preprocessed to (n, 3, " << r << ", " << r << "), got " << y.sizes();
        throw InvalidInput(os.str());
    }
}

LatentBundle detached(const LatentBundle& l) {
    LatentBundle out;
    auto d = [](const torch::Tensor& t) { return t.defined() ? t.detach().clone() : t; };
    out.w = d(l.w);
    out.z_c = d(l.z_c);
    out.z = d(l.z);
    out.c = d(l.c);
    out.labels = d(l.labels);
    return out;
}

// Restores the module's train/eval flag on scope exit.
class EvalScope {
public:
    explicit EvalScope(torch::nn::Module& m) : module_(m), was_training_(m.is_training()) { module_.eval(); }
    ~EvalScope() { module_.train(was_training_); }

private:
    torch::nn::Module& module_;
    bool was_training_;
};

struct BestTracker {
    double loss = std::numeric_limits<double>::infinity();
    LatentBundle latents;
    torch::Tensor reconstruction;

    void offer(double l, const LatentBundle& lat, const torch::Tensor& rec) {
        if (l < loss) {
            loss = l;
            latents = detached(lat);
            reconstruction = rec.detach().clone();
        }
    }
};

// Consecutive-step divergence watch: loss above factor × initial.
class DivergenceWatch {
public:
    DivergenceWatch(double factor, int64_t window) : factor_(factor), window_(window) {}
    bool update(double loss) {
        if (!std::isfinite(initial_)) initial_ = loss;
        run_ = (!std::isfinite(loss) || loss > factor_ * initial_) ? run_ + 1 : 0;
        return run_ >= window_;
    }

private:
    double factor_;
    int64_t window_;
    double initial_ = std::numeric_limits<double>::quiet_NaN();
    int64_t run_ = 0;
};

}  // namespace

void InversionConfig::validate() const {
    if (steps < 0) throw ConfigError("inversion steps must be >= 0");
    if (!(learning_rate > 0.0) || !(w_learning_rate > 0.0)) throw ConfigError("inversion learning rates must be > 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || w_adam_beta1 < 0.0 || w_adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(divergence_factor > 1.0) || divergence_window <= 0) throw ConfigError("divergence guard must have factor > 1 and window > 0");
    weights.validate();
    attention.validate();
}

json InversionConfig::to_json() const {
    return {{"steps", steps},
            {"learning_rate", learning_rate},
            {"w_learning_rate", w_learning_rate},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"w_adam_beta1", w_adam_beta1},
            {"optimize_zc", optimize_zc},
            {"cosine_decay", cosine_decay},
            {"seed", seed},
            {"divergence_factor", divergence_factor},
            {"divergence_window", divergence_window}};
}

InversionConfig InversionConfig::from_json(const json& j) {
    InversionConfig c;
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.w_learning_rate = j.value("w_learning_rate", c.w_learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.w_adam_beta1 = j.value("w_adam_beta1", c.w_adam_beta1);
    c.optimize_zc = j.value("optimize_zc", c.optimize_zc);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    c.seed = j.value("seed", c.seed);
    c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
    c.divergence_window = j.value("divergence_window", c.divergence_window);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

InversionResult invert_batch(Encoder& enc, Generator& gen, const torch::Tensor& y, Backbone& backbone,
                             const std::vector<std::string>& ids) {
    check_images(gen, y);
    enc->spec().check_matches(gen.spec());
    EvalScope scope(*enc);
    torch::NoGradGuard no_grad;
    InversionResult r;
    r.latents = detached(enc->encode(y));
    r.reconstruction = gen.synthesize(reconstruction_latents(gen.family(), r.latents)).image;
    r.metrics = compare_images(y, r.reconstruction, backbone, ids);
    return r;
}

InversionResult finetune_encoder(Encoder& enc, Generator& gen, const torch::Tensor& y, Backbone& backbone,
                                 const InversionConfig& config, const std::vector<std::string>& ids) {
    config.validate();
    check_images(gen, y);
    enc->spec().check_matches(gen.spec());

    torch::AutoGradMode grad_on(true);
    auto copy = clone_encoder(enc);
    copy->eval();
    const auto target_views = make_views(y, &backbone, config.attention);
    std::optional<std::vector<int64_t>> classes;
    if (!target_views.classes.empty()) classes = target_views.classes;

    torch::Tensor surrogate;
    {
        torch::NoGradGuard no_grad;
        surrogate = gen.loss_latent(copy->encode(y)).detach().clone();
    }
    surrogate.set_requires_grad(true);

    auto params = copy->parameters();
    params.push_back(surrogate);
    torch::optim::Adam optimizer(
        params, torch::optim::AdamOptions(config.learning_rate).betas({config.adam_beta1, config.adam_beta2}));

    auto objective = [&](LatentBundle& encoded, torch::Tensor& reconstruction) {
        encoded = copy->encode(y);
        reconstruction = gen.synthesize(reconstruction_latents(gen.family(), encoded)).image;
        const auto views_hat = make_views(reconstruction, &backbone, config.attention, classes);
        auto img = image_loss(target_views, views_hat, config.weights, backbone, config.options);
        auto lat = latent_loss(surrogate, gen.loss_latent(encoded), config.weights, config.options);
        return total_loss(img, lat, config.weights).total;
    };

    InversionResult r;
    BestTracker best;
    DivergenceWatch watch(config.divergence_factor, config.divergence_window);
    for (int64_t step = 0; step <= config.steps; ++step) {
        optimizer.zero_grad();
        LatentBundle encoded;
        torch::Tensor reconstruction;
        auto loss = objective(encoded, reconstruction);
        const double value = loss.item<double>();
        r.loss_trace.push_back(value);
        if (std::isfinite(value)) best.offer(value, encoded, reconstruction);
        if (step == config.steps) break;
        if (watch.update(value)) {
            r.diverged = true;
            break;
        }
        loss.backward();
        optimizer.step();
        r.steps_used = step + 1;
    }

    r.latents = best.latents;
    r.reconstruction = best.reconstruction;
    r.best_loss = best.loss;
    if (!r.reconstruction.defined()) throw InvalidInput("encoder fine-tuning produced no finite loss");
    r.metrics = compare_images(y, r.reconstruction, backbone, ids);
    return r;
}

InversionResult optimize_w_direct(Generator& gen, const torch::Tensor& y, Backbone& backbone,
                                  const InversionConfig& config, const std::optional<LatentBundle>& init, Encoder* enc,
                                  const std::vector<std::string>& ids) {
    config.validate();
    check_images(gen, y);
    torch::AutoGradMode grad_on(true);
    const int64_t n = y.size(0);

    LatentBundle start;
    if (init) {
        start = reconstruction_latents(gen.family(), *init);
    } else if (enc) {
        torch::NoGradGuard no_grad;
        EvalScope scope(**enc);
        start = reconstruction_latents(gen.family(), (*enc)->encode(y));
    } else {
        torch::NoGradGuard no_grad;
        auto rng = at::detail::createCPUGenerator(config.seed);
        start = reconstruction_latents(gen.family(), gen.sample(n, rng));
    }
    check_latents(gen.spec(), start);

    LatentBundle free;
    std::vector<torch::Tensor> params;
    auto make_free = [&](const torch::Tensor& t) {
        auto p = t.detach().clone();
        p.set_requires_grad(true);
        params.push_back(p);
        return p;
    };
    switch (gen.family()) {
        case Family::Style: {
            free.w = make_free(start.w);
            if (config.optimize_zc) {
                torch::Tensor zc = start.z_c;
                if (!zc.defined()) {
                    auto* style = dynamic_cast<StyleGenerator*>(&gen);
                    if (!style) throw ContractViolation("style-family generator expected");
                    zc = style->constant().expand({n, -1, -1, -1});
                }
                free.z_c = make_free(zc);
            } else {
                free.z_c = start.z_c;
            }
            break;
        }
        case Family::Progressive: free.z = make_free(start.z); break;
        case Family::ClassConditional:
            free.z = make_free(start.z);
            free.c = make_free(start.c);
            break;
    }

    torch::optim::Adam optimizer(
        params, torch::optim::AdamOptions(config.w_learning_rate).betas({config.w_adam_beta1, config.adam_beta2}));
    const auto target_views = make_views(y, &backbone, config.attention);
    std::optional<std::vector<int64_t>> classes;
    if (!target_views.classes.empty()) classes = target_views.classes;

    InversionResult r;
    BestTracker best;
    DivergenceWatch watch(config.divergence_factor, config.divergence_window);
    for (int64_t step = 0; step <= config.steps; ++step) {
        optimizer.zero_grad();
        auto reconstruction = gen.synthesize(free).image;
        const auto views_hat = make_views(reconstruction, &backbone, config.attention, classes);
        auto loss = image_loss(target_views, views_hat, config.weights, backbone, config.options).total;
        const double value = loss.item<double>();
        r.loss_trace.push_back(value);
        if (std::isfinite(value)) best.offer(value, free, reconstruction);
        if (step == config.steps) break;
        if (watch.update(value)) {
            r.diverged = true;
            break;
        }
        loss.backward();
        if (config.cosine_decay) {
            const double t = static_cast<double>(step) / static_cast<double>(config.steps);
            for (auto& group : optimizer.param_groups())
                static_cast<torch::optim::AdamOptions&>(group.options()).lr(config.w_learning_rate * 0.5 *
                                                                            (1.0 + std::cos(M_PI * t)));
        }
        optimizer.step();
        r.steps_used = step + 1;
    }

    r.latents = best.latents;
    r.reconstruction = best.reconstruction;
    r.best_loss = best.loss;
    if (!r.reconstruction.defined()) throw InvalidInput("latent optimization produced no finite loss");
    r.metrics = compare_images(y, r.reconstruction, backbone, ids);
    return r;
}

// ---------------------------------------------------------------------------
// Editing

torch::Tensor edit(const torch::Tensor& w, const EditRequest& request) {
    if (w.dim() != 3) throw ContractViolation("edit expects w of shape (n, n_layers, d_w)");
    const int64_t layers = w.size(1), width = w.size(2);
    const auto& d = request.direction;
    if (!d.defined()) throw ContractViolation("edit: missing direction");
    if (!torch::isfinite(d).all().item<bool>()) throw InvalidInput("edit: direction contains non-finite values");
    if (!std::isfinite(request.alpha)) throw InvalidInput("edit: alpha must be finite");

    torch::Tensor full;
    if (d.dim() == 1 && d.size(0) == width) {
        full = d.view({1, width}).expand({layers, width});
    } else if (d.dim() == 2 && d.size(0) == layers && d.size(1) == width) {
        full = d;
    } else {
        std::ostringstream os;
        os << "edit: direction shape " << d.sizes() << " incompatible with w " << w.sizes();
        throw ContractViolation(os.str());
    }

    auto mask = torch::ones({layers, 1}, w.options());
    if (request.layers) {
        mask.zero_();
        for (int64_t l : *request.layers) {
            if (l < 0 || l >= layers)
                throw ContractViolation("edit: layer " + std::to_string(l) + " outside [0, " + std::to_string(layers) + ")");
            mask[l] = 1.0;
        }
    }
    return w + request.alpha * (full.to(w.options()) * mask).unsqueeze(0);
}

void save_direction(const std::filesystem::path& dir, const Direction& direction) {
    ArrayBundle b;
    b.kind = "direction";
    b.meta = {{"name", direction.name},
              {"layers", direction.layers},
              {"alpha_range", {direction.alpha_min, direction.alpha_max}}};
    b.arrays.emplace_back("d", direction.d.detach().contiguous());
    write_bundle(dir, b);
}

Direction load_direction(const std::filesystem::path& dir) {
    const auto b = read_bundle(dir);
    if (b.kind != "direction") throw ConfigError(dir.string() + " holds a '" + b.kind + "' bundle, not a direction");
    const auto* d = b.find("d");
    if (!d) throw IoError("direction bundle " + dir.string() + " lacks array 'd'");
    Direction out;
    out.d = *d;
    try {
        out.name = b.meta.value("name", dir.filename().string());
        out.layers = b.meta.value("layers", std::vector<int64_t>{});
        if (b.meta.contains("alpha_range")) {
            out.alpha_min = b.meta["alpha_range"].at(0).get<double>();
            out.alpha_max = b.meta["alpha_range"].at(1).get<double>();
        }
    } catch (const json::exception& e) {
        throw IoError("corrupt direction manifest in " + dir.string() + ": " + e.what());
    }
    return out;
}

}  // namespace dse
