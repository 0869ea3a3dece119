#include "dse/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dse/errors.hpp"

using nlohmann::json;

namespace dse {

namespace {

json generator_json(const RunConfig& c) {
    json g = c.generator.to_json();
    g["preset"] = c.generator_preset;
    g["seed"] = c.generator_seed;
    g["path"] = c.generator_path;
    return g;
}

GeneratorSpec generator_from(const json& g) {
    const auto preset = g.value("preset", std::string("desk"));
    const auto family = family_from_string(g.value("family", std::string("style")));
    const int64_t resolution = g.value("resolution", int64_t{32});
    if (resolution < 16 || (resolution & (resolution - 1)) != 0)
        throw ConfigError("generator.resolution must be a power of two >= 16, got " + std::to_string(resolution));
    GeneratorSpec s;
    if (preset == "desk") s = GeneratorSpec::desk(family, resolution);
    else if (preset == "full_scale") s = GeneratorSpec::full_scale(family, resolution);
    else throw ConfigError("generator.preset must be desk or full_scale, got '" + preset + "'");
    auto take = [&](const char* key, int64_t& field) {
        if (g.contains(key) && !g.at(key).is_null()) field = g.at(key).get<int64_t>();
    };
    if (g.contains("channels") && !g.at("channels").is_null()) s.channels = g.at("channels").get<std::vector<int64_t>>();
    take("d_w", s.d_w);
    take("d_z", s.d_z);
    take("d_c", s.d_c);
    take("n_classes", s.n_classes);
    take("mapping_layers", s.mapping_layers);
    s.validate();
    return s;
}

}  // namespace

void RunConfig::validate() const {
    if (device != "cpu") throw ConfigError("device '" + device + "' is not supported by this build (cpu only)");
    generator.validate();
    if (backbone_source != "surrogate" && backbone_source != "vgg16")
        throw ConfigError("backbone.source must be surrogate or vgg16, got '" + backbone_source + "'");
    if (count < 0) throw ConfigError("io.count must be >= 0");
    attention.validate();
    train.validate();
    inversion.validate();
}

json RunConfig::to_json() const {
    auto inv = inversion.to_json();
    inv["weights"] = inversion.weights.to_json();
    return {{"seed", seed},
            {"device", device},
            {"generator", generator_json(*this)},
            {"encoder", {{"seed", encoder_seed}, {"path", encoder_path}}},
            {"backbone", {{"source", backbone_source}, {"path", backbone_path}, {"seed", backbone_seed}}},
            {"attention", attention.to_json()},
            {"train", train.to_json()},
            {"inversion", inv},
            {"io", {{"output", output}, {"count", count}}}};
}

void reject_unknown_keys(const json& doc, const json& schema, const std::string& prefix) {
    if (!doc.is_object()) return;
    for (const auto& [key, value] : doc.items()) {
        const auto path = prefix.empty() ? key : prefix + "." + key;
        if (!schema.is_object() || !schema.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (value.is_object()) reject_unknown_keys(value, schema.at(key), path);
    }
}

RunConfig RunConfig::from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
    reject_unknown_keys(doc, RunConfig{}.to_json());
    RunConfig c;
    try {
        c.seed = doc.value("seed", c.seed);
        c.device = doc.value("device", c.device);
        if (const char* env = std::getenv(kDeviceEnv); env && *env) c.device = env;
        if (doc.contains("generator")) {
            const auto& g = doc.at("generator");
            c.generator_preset = g.value("preset", c.generator_preset);
            c.generator = generator_from(g);
            c.generator_seed = g.value("seed", c.generator_seed);
            c.generator_path = g.value("path", c.generator_path);
        }
        if (doc.contains("encoder")) {
            c.encoder_seed = doc["encoder"].value("seed", c.encoder_seed);
            c.encoder_path = doc["encoder"].value("path", c.encoder_path);
        }
        if (doc.contains("backbone")) {
            const auto& b = doc.at("backbone");
            c.backbone_source = b.value("source", c.backbone_source);
            c.backbone_path = b.value("path", c.backbone_path);
            c.backbone_seed = b.value("seed", c.backbone_seed);
        }
        if (doc.contains("attention")) c.attention = AttentionConfig::from_json(doc.at("attention"));
        if (doc.contains("train")) c.train = TrainConfig::from_json(doc.at("train"));
        if (doc.contains("inversion")) {
            const auto& inv = doc.at("inversion");
            c.inversion = InversionConfig::from_json(inv);
            if (inv.contains("weights")) c.inversion.weights = LossWeights::from_json(inv.at("weights"));
        }
        c.inversion.attention = c.attention;
        if (doc.contains("io")) {
            c.output = doc["io"].value("output", c.output);
            c.count = doc["io"].value("count", c.count);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &doc;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
        node = &(*node)[parts[i]];
        if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object value");
    }
    (*node)[parts.back()] = value;
}

RunConfig RunConfig::load(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (file) {
        std::ifstream in(*file);
        if (!in) throw IoError("cannot read config file " + file->string());
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return from_json(doc);
}

GeneratorPtr make_generator(const RunConfig& cfg) {
    if (!cfg.generator_path.empty()) return load_pretrained(cfg.generator_path, cfg.generator.family);
    return build_toy_generator(cfg.generator, cfg.generator_seed);
}

Encoder make_encoder(const RunConfig& cfg, const GeneratorSpec& gen) {
    if (!cfg.encoder_path.empty()) {
        auto enc = load_encoder(cfg.encoder_path);
        enc->spec().check_matches(gen);
        return enc;
    }
    return build_encoder(EncoderSpec::mirror(gen), cfg.encoder_seed);
}

Backbone make_backbone(const RunConfig& cfg) {
    if (cfg.backbone_source == "surrogate") {
        Backbone b(BackboneSpec::desk(), cfg.backbone_seed);
        freeze(*b);
        return b;
    }
    return resolve_backbone(cfg.backbone_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(cfg.backbone_path),
                            false);
}

}  // namespace dse
