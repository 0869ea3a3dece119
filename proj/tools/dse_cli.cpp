// dse: synth | train | invert | edit | eval
//
// Every command reads one RunConfig (--config file, then --set key=value
// overrides, then the command's own flags) and echoes it next to its outputs.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dse/array_store.hpp"
#include "dse/config.hpp"
#include "dse/errors.hpp"
#include "dse/evalharness.hpp"
#include "dse/image_io.hpp"
#include "dse/inversion.hpp"
#include "dse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::optional<uint64_t> seed;
    bool show_config = false;
    std::vector<std::string> overrides;

    std::optional<int64_t> count;
    std::string output;

    // train
    std::optional<double> lr;
    std::optional<int64_t> epochs, batch_size, samples_per_epoch, max_steps, fixed_pool, checkpoint_every;
    std::optional<int> strategy;
    std::string latent_source, checkpoint_dir;

    // invert / edit
    std::string images, encoder, mode = "encoder", direction, layers;
    std::optional<int64_t> steps;
    double alpha = 0.0;

    // eval
    std::string set_a, set_b;
    std::optional<int64_t> resolution;
};

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw dse::IoError("cannot create output directory " + dir.string());
}

std::string idx_name(int64_t i) {
    std::ostringstream os;
    os << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

json tensor_json(const torch::Tensor& t) {
    const auto d = t.detach().to(torch::kDouble).contiguous();
    std::vector<double> flat(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
    if (d.dim() <= 1) return flat;
    json rows = json::array();
    const int64_t inner = d.numel() / d.size(0);
    for (int64_t r = 0; r < d.size(0); ++r)
        rows.push_back(std::vector<double>(flat.begin() + r * inner, flat.begin() + (r + 1) * inner));
    return rows;
}

void save_latents(const fs::path& dir, const dse::LatentBundle& l, const std::vector<std::string>& ids) {
    dse::ArrayBundle b;
    b.kind = "latents";
    b.meta = {{"ids", ids}};
    auto add = [&](const char* name, const torch::Tensor& t) {
        if (t.defined()) b.arrays.emplace_back(name, t.detach().to(torch::kFloat).contiguous());
    };
    add("w", l.w);
    add("z_c", l.z_c);
    add("z", l.z);
    add("c", l.c);
    dse::write_bundle(dir, b);
}

std::vector<int64_t> parse_layers(const std::string& text) {
    std::vector<int64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw dse::ConfigError("--layers expects comma-separated integers, got '" + text + "'");
        }
    }
    return out;
}

struct LoadedImages {
    std::vector<std::string> ids;
    torch::Tensor batch;
};

LoadedImages load_images(const std::string& source, int64_t resolution) {
    if (source.empty()) throw dse::ConfigError("--images is required");
    const auto src = dse::ImageSource::from_path(source);
    LoadedImages out;
    std::vector<fs::path> files;
    for (const auto& [id, path] : src.entries) {
        out.ids.push_back(id);
        files.push_back(path);
    }
    if (files.empty()) throw dse::IoError("no images found in " + source);
    out.batch = dse::load_batch(files, resolution);
    return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const dse::RunConfig& cfg) {
    const fs::path out = cfg.output;
    ensure_dir(out);
    auto gen = dse::make_generator(cfg);
    auto rng = at::detail::createCPUGenerator(cfg.seed);
    std::string manifest;
    if (cfg.count > 0) {
        torch::NoGradGuard no_grad;
        const auto latents = gen->sample(cfg.count, rng);
        const auto images = gen->synthesize(latents).image;
        for (int64_t i = 0; i < cfg.count; ++i) {
            const auto id = idx_name(i);
            dse::save_image(out / (id + ".png"), images[i]);
            json row = {{"id", id}, {"image", id + ".png"}};
            if (latents.z.defined()) row["z"] = tensor_json(latents.z[i]);
            if (latents.w.defined()) row["w"] = tensor_json(latents.w[i]);
            if (latents.labels.defined()) row["label"] = latents.labels[i].item<int64_t>();
            manifest += row.dump() + "\n";
        }
    }
    dse::write_file_atomic(out / "latents.jsonl", manifest);
    dse::write_file_atomic(out / "config.json", cfg.to_json().dump(2) + "\n");
    std::cout << "wrote " << cfg.count << " images to " << out.string() << "\n";
    return 0;
}

int cmd_train(dse::RunConfig cfg) {
    if (cfg.train.checkpoint_dir.empty()) cfg.train.checkpoint_dir = (fs::path(cfg.output) / "train").string();
    auto gen = dse::make_generator(cfg);
    auto enc = dse::make_encoder(cfg, gen->spec());
    auto backbone = dse::make_backbone(cfg);
    ensure_dir(cfg.train.checkpoint_dir);
    dse::write_file_atomic(fs::path(cfg.train.checkpoint_dir) / "run_config.json", cfg.to_json().dump(2) + "\n");
    const auto w = cfg.train.effective_weights();
    std::cout << "strategy " << cfg.train.strategy << " (mu1, mu2) = (" << w.mu1 << ", " << w.mu2 << "), "
              << cfg.train.total_steps() << " steps\n";
    const auto history = dse::train_dse(*gen, enc, backbone, cfg.attention, cfg.train, [](const dse::StepRecord& r) {
        if (r.step % 50 == 0)
            std::cout << "step " << r.step << "  loss " << r.total << "  recon_mse " << r.reconstruction_mse << std::endl;
    });
    std::cout << to_string(history.status) << " after " << history.steps.size() << " steps in " << history.wall_seconds
              << " s";
    if (!history.message.empty()) std::cout << ": " << history.message;
    std::cout << "\nencoder: " << (fs::path(cfg.train.checkpoint_dir) / "encoder").string() << "\n";
    if (history.status == dse::TrainStatus::Aborted) throw dse::InvalidInput(history.message);
    return 0;
}

int cmd_invert(const dse::RunConfig& cfg, const Options& opt) {
    auto gen = dse::make_generator(cfg);
    auto backbone = dse::make_backbone(cfg);
    const auto images = load_images(opt.images, gen->spec().resolution);
    dse::InversionResult result;
    if (opt.mode == "encoder" || opt.mode == "finetune") {
        auto enc = dse::make_encoder(cfg, gen->spec());
        result = opt.mode == "encoder"
                     ? dse::invert_batch(enc, *gen, images.batch, backbone, images.ids)
                     : dse::finetune_encoder(enc, *gen, images.batch, backbone, cfg.inversion, images.ids);
    } else if (opt.mode == "optimize") {
        std::optional<dse::Encoder> enc;
        if (!cfg.encoder_path.empty()) enc = dse::make_encoder(cfg, gen->spec());
        result = dse::optimize_w_direct(*gen, images.batch, backbone, cfg.inversion, std::nullopt,
                                        enc ? &*enc : nullptr, images.ids);
    } else {
        throw dse::ConfigError("--mode must be encoder, finetune or optimize, got '" + opt.mode + "'");
    }

    const fs::path out = cfg.output;
    ensure_dir(out / "reconstructions");
    std::vector<torch::Tensor> tiles;
    std::vector<std::string> captions;
    for (size_t i = 0; i < images.ids.size(); ++i) {
        dse::save_image(out / "reconstructions" / (images.ids[i] + ".png"), result.reconstruction[i]);
        tiles.push_back(images.batch[i]);
        tiles.push_back(result.reconstruction[i]);
        captions.push_back(images.ids[i]);
        captions.push_back("rec");
    }
    save_latents(out / "latents", result.latents, images.ids);
    dse::MetricReport report;
    report.rows = result.metrics;
    report.mean = dse::MetricReport::average(report.rows);
    report.write_csv(out / "metrics.csv");
    dse::emit_grid(tiles, {static_cast<int64_t>(images.ids.size()), 2, captions, 2}, out / "grid.png");
    dse::write_file_atomic(out / "config.json", cfg.to_json().dump(2) + "\n");
    std::cout << report.table();
    if (result.diverged) std::cout << "warning: optimization diverged; best-so-far result kept\n";
    std::cout << "mode " << opt.mode << ", steps used " << result.steps_used << "\n";
    return 0;
}

int cmd_edit(const dse::RunConfig& cfg, const Options& opt) {
    auto gen = dse::make_generator(cfg);
    if (gen->family() != dse::Family::Style) throw dse::ConfigError("edit requires a style-family generator");
    auto enc = dse::make_encoder(cfg, gen->spec());
    enc->eval();
    const auto images = load_images(opt.images, gen->spec().resolution);

    dse::EditRequest request;
    request.alpha = opt.alpha;
    if (!opt.direction.empty()) {
        const auto d = dse::load_direction(opt.direction);
        request.direction = d.d;
        if (!d.layers.empty()) request.layers = d.layers;
    } else {
        request.direction = torch::zeros({gen->spec().d_w});
    }
    if (!opt.layers.empty()) request.layers = parse_layers(opt.layers);

    torch::NoGradGuard no_grad;
    auto latents = dse::reconstruction_latents(gen->family(), enc->encode(images.batch));
    latents.w = dse::edit(latents.w, request);
    const auto edited = gen->synthesize(latents).image;

    const fs::path out = cfg.output;
    ensure_dir(out);
    for (size_t i = 0; i < images.ids.size(); ++i) dse::save_image(out / (images.ids[i] + ".png"), edited[i]);
    save_latents(out / "latents", latents, images.ids);
    json echo = cfg.to_json();
    echo["edit"] = {{"direction", opt.direction}, {"alpha", opt.alpha}, {"layers", opt.layers}};
    dse::write_file_atomic(out / "config.json", echo.dump(2) + "\n");
    std::cout << "edited " << images.ids.size() << " images (alpha " << opt.alpha << ") into " << out.string() << "\n";
    return 0;
}

int cmd_eval(const dse::RunConfig& cfg, const Options& opt) {
    if (opt.set_a.empty() || opt.set_b.empty()) throw dse::ConfigError("eval needs two image sets: --a and --b");
    auto backbone = dse::make_backbone(cfg);
    const auto report = dse::evaluate_pairs(dse::ImageSource::from_path(opt.set_a), dse::ImageSource::from_path(opt.set_b),
                                            backbone, opt.resolution);
    const fs::path out = cfg.output;
    ensure_dir(out);
    report.write_csv(out / "report.csv");
    std::cout << report.table();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diverse Similarity Encoder toolkit"};
    app.require_subcommand(0, 1);
    Options opt;
    app.add_option("--config", opt.config, "JSON run configuration");
    app.add_option("--seed", opt.seed, "Global seed (sampling and training)");
    app.add_flag("--show-config", opt.show_config, "Print the resolved configuration and exit");
    app.add_option("--set", opt.overrides, "Override a config key: section.key=value")->take_all();

    auto* synth = app.add_subcommand("synth", "Sample the generator; write PNGs and latents.jsonl");
    synth->add_option("--count", opt.count, "Number of images");
    synth->add_option("--output,-o", opt.output, "Output directory");

    auto* train = app.add_subcommand("train", "Train an encoder against the frozen generator");
    train->add_option("--lr", opt.lr);
    train->add_option("--epochs", opt.epochs);
    train->add_option("--batch-size", opt.batch_size);
    train->add_option("--samples-per-epoch", opt.samples_per_epoch);
    train->add_option("--strategy", opt.strategy);
    train->add_option("--latent-source", opt.latent_source, "encode_once | encode_reconstruction");
    train->add_option("--max-steps", opt.max_steps);
    train->add_option("--fixed-pool", opt.fixed_pool);
    train->add_option("--checkpoint-dir", opt.checkpoint_dir);
    train->add_option("--checkpoint-every", opt.checkpoint_every);
    train->add_option("--output,-o", opt.output);

    auto* invert = app.add_subcommand("invert", "Invert images to latents and reconstruct them");
    invert->add_option("--images", opt.images, "Directory or manifest of images")->required();
    invert->add_option("--encoder", opt.encoder, "Trained encoder directory");
    invert->add_option("--mode", opt.mode, "encoder | finetune | optimize");
    invert->add_option("--steps", opt.steps);
    invert->add_option("--output,-o", opt.output);

    auto* edit = app.add_subcommand("edit", "Shift encoded style latents along a direction");
    edit->add_option("--images", opt.images)->required();
    edit->add_option("--encoder", opt.encoder);
    edit->add_option("--direction", opt.direction, "Direction bundle directory");
    edit->add_option("--alpha", opt.alpha);
    edit->add_option("--layers", opt.layers, "Comma-separated style layer indices");
    edit->add_option("--output,-o", opt.output);

    auto* eval = app.add_subcommand("eval", "Compare two image sets by id");
    eval->add_option("--a", opt.set_a)->required();
    eval->add_option("--b", opt.set_b)->required();
    eval->add_option("--resolution", opt.resolution);
    eval->add_option("--output,-o", opt.output);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(dse::ExitCode::Configuration);
    }

    try {
        auto overrides = opt.overrides;
        auto set = [&](const std::string& key, const std::string& value) { overrides.push_back(key + "=" + value); };
        if (opt.seed) {
            set("seed", std::to_string(*opt.seed));
            set("train.seed", std::to_string(*opt.seed));
        }
        if (opt.count) set("io.count", std::to_string(*opt.count));
        if (!opt.output.empty()) set("io.output", json(opt.output).dump());
        if (opt.lr) set("train.learning_rate", json(*opt.lr).dump());
        if (opt.epochs) set("train.epochs", std::to_string(*opt.epochs));
        if (opt.batch_size) set("train.batch_size", std::to_string(*opt.batch_size));
        if (opt.samples_per_epoch) set("train.samples_per_epoch", std::to_string(*opt.samples_per_epoch));
        if (opt.strategy) set("train.strategy", std::to_string(*opt.strategy));
        if (!opt.latent_source.empty()) set("train.latent_source", json(opt.latent_source).dump());
        if (opt.max_steps) set("train.max_steps", std::to_string(*opt.max_steps));
        if (opt.fixed_pool) set("train.fixed_pool", std::to_string(*opt.fixed_pool));
        if (!opt.checkpoint_dir.empty()) set("train.checkpoint_dir", json(opt.checkpoint_dir).dump());
        if (opt.checkpoint_every) set("train.checkpoint_every", std::to_string(*opt.checkpoint_every));
        if (!opt.encoder.empty()) set("encoder.path", json(opt.encoder).dump());
        if (opt.steps) set("inversion.steps", std::to_string(*opt.steps));

        std::optional<fs::path> file;
        if (!opt.config.empty()) file = opt.config;
        const auto cfg = dse::RunConfig::load(file, overrides);

        if (opt.show_config) {
            std::cout << cfg.to_json().dump(2) << "\n";
            return 0;
        }
        if (synth->parsed()) return cmd_synth(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (invert->parsed()) return cmd_invert(cfg, opt);
        if (edit->parsed()) return cmd_edit(cfg, opt);
        if (eval->parsed()) return cmd_eval(cfg, opt);
        std::cout << app.help();
        return 0;
    } catch (const dse::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const c10::Error& e) {
        std::cerr << "error: " << e.what_without_backtrace() << "\n";
        return static_cast<int>(dse::ExitCode::ContractViolation);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(dse::ExitCode::ContractViolation);
    }
}
