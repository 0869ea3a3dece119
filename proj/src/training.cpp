#include "dse/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"

using nlohmann::json;

namespace dse {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

TripleScaleViews select_views(const TripleScaleViews& v, const torch::Tensor& idx) {
    TripleScaleViews out;
    out.orig = v.orig.index_select(0, idx);
    out.at1 = v.at1.index_select(0, idx);
    out.at2 = v.at2.index_select(0, idx);
    const auto ids = idx.accessor<int64_t, 1>();
    for (int64_t i = 0; i < idx.size(0); ++i) {
        if (!v.at1_boxes.empty()) out.at1_boxes.push_back(v.at1_boxes[ids[i]]);
        if (!v.at2_boxes.empty()) out.at2_boxes.push_back(v.at2_boxes[ids[i]]);
        if (!v.classes.empty()) out.classes.push_back(v.classes[ids[i]]);
    }
    out.fallback = v.fallback;
    return out;
}

LatentBundle select_latents(const LatentBundle& l, const torch::Tensor& idx) {
    LatentBundle out;
    auto pick = [&](const torch::Tensor& t) { return t.defined() ? t.index_select(0, idx) : t; };
    out.w = pick(l.w);
    out.z_c = pick(l.z_c);
    out.z = pick(l.z);
    out.c = pick(l.c);
    out.labels = pick(l.labels);
    for (const auto& m : l.z_n) out.z_n.push_back(m.size(0) == 1 ? m : m.index_select(0, idx));
    return out;
}

void append_line(const std::filesystem::path& file, const std::string& line) {
    std::ofstream out(file, std::ios::app);
    if (!out) throw IoError("cannot append to " + file.string());
    out << line << '\n';
}

}  // namespace

std::string to_string(LatentSource s) {
    return s == LatentSource::EncodeOnce ? "encode_once" : "encode_reconstruction";
}

LatentSource latent_source_from_string(const std::string& s) {
    if (s == "encode_once") return LatentSource::EncodeOnce;
    if (s == "encode_reconstruction") return LatentSource::EncodeReconstruction;
    throw ConfigError("unknown latent_source '" + s + "' (expected encode_once or encode_reconstruction)");
}

std::string to_string(TrainStatus s) {
    switch (s) {
        case TrainStatus::Completed: return "completed";
        case TrainStatus::Converged: return "converged";
        case TrainStatus::Aborted: return "aborted";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// TrainConfig

std::pair<double, double> strategy_scale_weights(int strategy) {
    if (strategy == 1) return {1.0, 1.0};
    if (strategy == 2) return {5.0, 9.0};
    throw ConfigError("unknown training strategy " + std::to_string(strategy) + " (expected 1 or 2)");
}

void TrainConfig::validate() const {
    strategy_scale_weights(strategy);
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (batch_size <= 0 || samples_per_epoch <= 0 || epochs <= 0) throw ConfigError("batch_size, samples_per_epoch and epochs must be > 0");
    if (fixed_pool < 0 || max_steps < 0 || checkpoint_every < 0) throw ConfigError("fixed_pool, max_steps and checkpoint_every must be >= 0");
    if (skip_threshold < 0.0) throw ConfigError("skip_threshold must be >= 0");
    if (ssim_window <= 0 || ssim_window % 2 == 0) throw ConfigError("ssim_window must be a positive odd size");
    effective_weights().validate();
}

int64_t TrainConfig::total_steps() const {
    const int64_t per_epoch = (samples_per_epoch + batch_size - 1) / batch_size;
    const int64_t planned = per_epoch * epochs;
    return max_steps > 0 ? std::min(planned, max_steps) : planned;
}

LossWeights TrainConfig::effective_weights() const {
    LossWeights w = weights;
    const auto [m1, m2] = strategy_scale_weights(strategy);
    w.mu1 = mu1.value_or(m1);
    w.mu2 = mu2.value_or(m2);
    return w;
}

LossOptions TrainConfig::loss_options() const {
    LossOptions o;
    o.mse_mode = mse_mode;
    o.ssim_window = ssim_window;
    return o;
}

json TrainConfig::to_json() const {
    json j = {{"learning_rate", learning_rate},
              {"adam_beta1", adam_beta1},
              {"adam_beta2", adam_beta2},
              {"samples_per_epoch", samples_per_epoch},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"strategy", strategy},
              {"weights", weights.to_json()},
              {"mu1", mu1 ? json(*mu1) : json(nullptr)},
              {"mu2", mu2 ? json(*mu2) : json(nullptr)},
              {"mse_mode", to_string(mse_mode)},
              {"ssim_window", ssim_window},
              {"latent_source", to_string(latent_source)},
              {"seed", seed},
              {"fixed_pool", fixed_pool},
              {"skip_threshold", skip_threshold},
              {"max_steps", max_steps},
              {"checkpoint_dir", checkpoint_dir},
              {"checkpoint_every", checkpoint_every}};
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.strategy = j.value("strategy", c.strategy);
    if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
    if (j.contains("mu1") && !j.at("mu1").is_null()) c.mu1 = j.at("mu1").get<double>();
    if (j.contains("mu2") && !j.at("mu2").is_null()) c.mu2 = j.at("mu2").get<double>();
    if (j.contains("mse_mode")) c.mse_mode = mse_mode_from_string(j.at("mse_mode").get<std::string>());
    c.ssim_window = j.value("ssim_window", c.ssim_window);
    if (j.contains("latent_source")) c.latent_source = latent_source_from_string(j.at("latent_source").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.fixed_pool = j.value("fixed_pool", c.fixed_pool);
    c.skip_threshold = j.value("skip_threshold", c.skip_threshold);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Step

TripleScaleViews apply_strategy_gating(int strategy, const TripleScaleViews& views_hat) {
    strategy_scale_weights(strategy);
    if (strategy == 2) return views_hat;
    TripleScaleViews gated = views_hat;
    gated.orig = views_hat.orig.detach();
    return gated;
}

LatentBundle reconstruction_latents(Family family, const LatentBundle& encoded) {
    LatentBundle l;
    switch (family) {
        case Family::Style:
            l.w = encoded.w;
            l.z_c = encoded.z_c;
            break;
        case Family::Progressive: l.z = encoded.z; break;
        case Family::ClassConditional:
            l.z = encoded.z;
            l.c = encoded.c;
            break;
    }
    return l;
}

StepOutput dse_forward(Generator& gen, Encoder& enc, Backbone& backbone, const AttentionConfig& attention,
                       const TrainConfig& config, const torch::Tensor& x, const LatentBundle& target,
                       const TripleScaleViews* target_views) {
    const auto weights = config.effective_weights();
    const auto options = config.loss_options();
    const bool conditional = gen.family() == Family::ClassConditional;

    TripleScaleViews own_views;
    if (!target_views) {
        own_views = make_views(x, &backbone, attention);
        target_views = &own_views;
    }

    std::optional<torch::Tensor> hint;
    if (conditional && target.labels.defined()) hint = target.labels;

    StepOutput out;
    out.encoded = enc->encode(x, hint);
    out.reconstruction = gen.synthesize(reconstruction_latents(gen.family(), out.encoded)).image;

    std::optional<std::vector<int64_t>> classes;
    if (!target_views->classes.empty()) classes = target_views->classes;
    const auto views_hat = apply_strategy_gating(
        config.strategy, make_views(out.reconstruction, &backbone, attention, classes));
    auto image_part = image_loss(*target_views, views_hat, weights, backbone, options);

    LatentBundle latent_hat = out.encoded;
    if (config.latent_source == LatentSource::EncodeReconstruction) latent_hat = enc->encode(out.reconstruction, hint);
    auto latent_part = latent_loss(gen.loss_latent(target).detach(), gen.loss_latent(latent_hat), weights, options);

    out.loss = total_loss(image_part, latent_part, weights);
    out.reconstruction_mse = (out.reconstruction.detach() - x.detach()).pow(2).mean().item<double>();
    return out;
}

// ---------------------------------------------------------------------------
// History

json StepRecord::to_json() const {
    return {{"step", step}, {"terms", terms}, {"total", total}, {"reconstruction_mse", reconstruction_mse},
            {"seconds", seconds}};
}

StepRecord StepRecord::from_json(const json& j) {
    StepRecord r;
    r.step = j.at("step").get<int64_t>();
    r.terms = j.at("terms").get<std::map<std::string, double>>();
    r.total = j.at("total").get<double>();
    r.reconstruction_mse = j.at("reconstruction_mse").get<double>();
    r.seconds = j.at("seconds").get<double>();
    return r;
}

std::vector<StepRecord> read_history(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot read history log " + file.string());
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(StepRecord::from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw IoError("corrupt history record in " + file.string() + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loop

TrainHistory train_dse(Generator& gen, Encoder& enc, Backbone& backbone, const AttentionConfig& attention,
                       const TrainConfig& config, const std::function<void(const StepRecord&)>& on_step) {
    config.validate();
    attention.validate();
    enc->spec().check_matches(gen.spec());
    for (const auto& p : gen.parameters())
        if (p.requires_grad()) throw ConfigError("generator must be frozen before training");

    const auto t0 = Clock::now();
    torch::AutoGradMode grad_on(true);
    TrainHistory history;
    auto rng = at::detail::createCPUGenerator(config.seed);

    enc->train();
    enc->set_fused_scale(config.strategy == 2);
    torch::optim::Adam optimizer(
        enc->parameters(),
        torch::optim::AdamOptions(config.learning_rate).betas({config.adam_beta1, config.adam_beta2}));

    const std::filesystem::path dir = config.checkpoint_dir;
    const bool writing = !config.checkpoint_dir.empty();
    if (writing) {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
        json snapshot = {{"train", config.to_json()},
                         {"effective_weights", config.effective_weights().to_json()},
                         {"attention", attention.to_json()},
                         {"generator", gen.spec().to_json()},
                         {"encoder", enc->spec().to_json()}};
        write_file_atomic(dir / "config.json", snapshot.dump(2) + "\n");
        write_file_atomic(dir / "history.jsonl", "");
    }

    auto snapshot = module_bundle(*enc, "encoder", {});
    auto checkpoint = [&](int64_t step) {
        snapshot = module_bundle(*enc, "encoder", {});
        if (!writing) return;
        save_encoder(dir / "encoder", enc);
        history.checkpoints.push_back((dir / "encoder").string() + "@" + std::to_string(step));
    };

    LatentBundle pool;
    torch::Tensor pool_images;
    TripleScaleViews pool_views;
    if (config.fixed_pool > 0) {
        torch::NoGradGuard no_grad;
        pool = gen.sample(config.fixed_pool, rng);
        pool_images = gen.synthesize(pool).image;
        pool_views = make_views(pool_images, &backbone, attention);
    }

    const int64_t steps = config.total_steps();
    for (int64_t step = 0; step < steps; ++step) {
        const auto ts = Clock::now();
        LatentBundle target;
        torch::Tensor x;
        TripleScaleViews views;
        if (config.fixed_pool > 0) {
            const int64_t n = std::min(config.batch_size, config.fixed_pool);
            const auto idx = (torch::arange(n, torch::kLong) + step * n) % config.fixed_pool;
            target = select_latents(pool, idx);
            x = pool_images.index_select(0, idx);
            views = select_views(pool_views, idx);
        } else {
            torch::NoGradGuard no_grad;
            target = gen.sample(config.batch_size, rng);
            x = gen.synthesize(target).image;
            views = make_views(x, &backbone, attention);
        }

        optimizer.zero_grad();
        auto out = dse_forward(gen, enc, backbone, attention, config, x, target, &views);

        StepRecord record;
        record.step = step;
        record.terms = out.loss.values();
        record.total = out.loss.total_value();
        record.reconstruction_mse = out.reconstruction_mse;

        if (!std::isfinite(record.total)) {
            load_module_state(*enc, snapshot, "last checkpoint");
            history.status = TrainStatus::Aborted;
            history.message = "non-finite loss at step " + std::to_string(step) + "; encoder restored to the last checkpoint";
            break;
        }
        if (out.reconstruction_mse < config.skip_threshold) {
            history.status = TrainStatus::Converged;
            history.message = "reconstruction MSE below skip threshold at step " + std::to_string(step);
            record.seconds = seconds_since(ts);
            history.steps.push_back(record);
            if (writing) append_line(dir / "history.jsonl", record.to_json().dump());
            if (on_step) on_step(record);
            break;
        }

        out.loss.total.backward();
        optimizer.step();

        record.seconds = seconds_since(ts);
        history.steps.push_back(record);
        if (writing) append_line(dir / "history.jsonl", record.to_json().dump());
        if (on_step) on_step(record);
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) checkpoint(step + 1);
    }

    if (history.status != TrainStatus::Aborted) checkpoint(static_cast<int64_t>(history.steps.size()));
    enc->eval();
    history.wall_seconds = seconds_since(t0);
    return history;
}

}  // namespace dse
