#pragma once

// The run configuration shared by every CLI command: one JSON document with
// sections generator, encoder, backbone, attention, train, inversion, io.
// Unknown keys are rejected; `overrides` ("train.strategy=2") are applied on
// top of the file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dse/attention.hpp"
#include "dse/backbone.hpp"
#include "dse/encoder.hpp"
#include "dse/generators.hpp"
#include "dse/inversion.hpp"
#include "dse/training.hpp"

namespace dse {

inline constexpr const char* kDeviceEnv = "DSE_DEVICE";

struct RunConfig {
    uint64_t seed = 0;
    std::string device = "cpu";

    std::string generator_preset = "desk";  // desk | full_scale
    GeneratorSpec generator = GeneratorSpec::desk(Family::Style, 32);
    uint64_t generator_seed = 1;
    std::string generator_path;  // pretrained directory; empty → toy generator

    uint64_t encoder_seed = 2;
    std::string encoder_path;  // trained encoder; empty → fresh

    std::string backbone_source = "surrogate";  // surrogate | vgg16
    std::string backbone_path;
    uint64_t backbone_seed = 3;

    AttentionConfig attention;
    TrainConfig train;
    InversionConfig inversion;

    std::string output = "dse_out";
    int64_t count = 16;

    void validate() const;
    nlohmann::json to_json() const;

    /// Parses `doc` (after applying overrides). Missing keys keep defaults;
    /// generator widths left out follow the preset for the chosen family and
    /// resolution.
    static RunConfig from_json(const nlohmann::json& doc);
    static RunConfig load(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides = {});
};

/// Sets a dotted key ("train.weights.alpha") to a value parsed as JSON, or as
/// a string when it is not valid JSON.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// ConfigError naming the first key of `doc` absent from `schema`.
void reject_unknown_keys(const nlohmann::json& doc, const nlohmann::json& schema, const std::string& prefix = "");

GeneratorPtr make_generator(const RunConfig& cfg);
Encoder make_encoder(const RunConfig& cfg, const GeneratorSpec& gen);
Backbone make_backbone(const RunConfig& cfg);

}  // namespace dse
