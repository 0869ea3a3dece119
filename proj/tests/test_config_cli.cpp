#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dse/config.hpp"
#include "dse/errors.hpp"
#include "support.hpp"

using namespace dse;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

// Runs the dse binary with `args`, capturing stdout and stderr.
Run cli(const std::string& args) {
    const std::string cmd = std::string(DSE_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p);
    out << s;
}

size_t count_lines(const std::string& s) { return static_cast<size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Config, DefaultsRoundTrip) {
    RunConfig c;
    auto back = RunConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.generator.channels, (std::vector<int64_t>{128, 128, 64, 32}));
}

TEST(Config, UnknownKeysRejectedWithPath) {
    try {
        RunConfig::from_json(json{{"train", {{"lerning_rate", 0.1}}}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.lerning_rate"), std::string::npos);
    }
    EXPECT_THROW(RunConfig::from_json(json{{"bogus", 1}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json(json::array()), ConfigError);
}

TEST(Config, OverridesParseJsonOrString) {
    json doc = json::object();
    apply_override(doc, "train.strategy=2");
    apply_override(doc, "train.latent_source=encode_reconstruction");
    apply_override(doc, "attention.mode=\"gradcam\"");
    apply_override(doc, "generator.family=progressive");
    EXPECT_EQ(doc["train"]["strategy"], 2);
    EXPECT_EQ(doc["train"]["latent_source"], "encode_reconstruction");
    auto c = RunConfig::from_json(doc);
    EXPECT_EQ(c.train.strategy, 2);
    EXPECT_EQ(c.attention.mode, AttentionMode::GradCam);
    EXPECT_EQ(c.inversion.attention.mode, AttentionMode::GradCam);
    EXPECT_EQ(c.generator.family, Family::Progressive);
    EXPECT_THROW(apply_override(doc, "no_equals_sign"), ConfigError);
    EXPECT_THROW(apply_override(doc, "train.strategy.x=1"), ConfigError);
}

TEST(Config, ValueErrorsAreConfigErrors) {
    EXPECT_THROW(RunConfig::load(std::nullopt, {"train.strategy=3"}), ConfigError);
    EXPECT_THROW(RunConfig::load(std::nullopt, {"generator.resolution=24"}), ConfigError);
    EXPECT_THROW(RunConfig::load(std::nullopt, {"train.learning_rate=\"fast\""}), ConfigError);
    EXPECT_THROW(RunConfig::load(std::nullopt, {"backbone.source=resnet"}), ConfigError);
    EXPECT_THROW(RunConfig::load(std::filesystem::path("/nonexistent/cfg.json")), IoError);
    auto dir = dse::test::scratch("cfg");
    write_text(dir / "bad.json", "{ not json");
    EXPECT_THROW(RunConfig::load(dir / "bad.json"), ConfigError);
}

TEST(Config, DeviceMustBeCpu) {
    EXPECT_THROW(RunConfig::load(std::nullopt, {"device=cuda"}), ConfigError);
}

TEST(Config, FactoriesHonourSpec) {
    auto c = RunConfig::load(std::nullopt, {"generator.resolution=16", "generator.family=class_conditional"});
    auto gen = make_generator(c);
    EXPECT_EQ(gen->spec().resolution, 16);
    auto enc = make_encoder(c, gen->spec());
    EXPECT_EQ(enc->spec().normalization, Normalization::ConditionalBatch);
    auto bb = make_backbone(c);
    EXPECT_EQ(bb->spec().widths, BackboneSpec::desk().widths);
}

TEST(Cli, HelpAndParseErrors) {
    EXPECT_EQ(cli("--help").code, 0);
    EXPECT_EQ(cli("synth --no-such-flag").code, 3);
    EXPECT_EQ(cli("invert").code, 3);
}

TEST(Cli, ConfigErrorsExitThree) {
    auto dir = dse::test::scratch("cli_cfg");
    write_text(dir / "cfg.json", "{\"train\": {\"typo\": 1}}");
    auto r = cli("--config " + (dir / "cfg.json").string() + " --show-config");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("train.typo"), std::string::npos);
    EXPECT_EQ(cli("--set train.strategy=7 --show-config").code, 3);
    EXPECT_EQ(cli("--set device=gpu --show-config").code, 3);
}

TEST(Cli, ShowConfigEchoesOverrides) {
    auto r = cli("--seed 5 --set train.weights.alpha=2.5 --show-config");
    ASSERT_EQ(r.code, 0) << r.output;
    auto j = json::parse(r.output);
    EXPECT_EQ(j["seed"], 5);
    EXPECT_EQ(j["train"]["weights"]["alpha"], 2.5);
}

TEST(Cli, SynthWritesCountAndIsDeterministic) {
    auto dir = dse::test::scratch("cli_synth");
    auto a = cli("--seed 3 synth --count 3 -o " + (dir / "a").string());
    ASSERT_EQ(a.code, 0) << a.output;
    auto b = cli("--seed 3 synth --count 3 -o " + (dir / "b").string());
    ASSERT_EQ(b.code, 0) << b.output;
    EXPECT_EQ(count_lines(slurp(dir / "a" / "latents.jsonl")), 3u);
    for (const char* f : {"0000.png", "0001.png", "0002.png", "latents.jsonl"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    EXPECT_FALSE(std::filesystem::exists(dir / "a" / "0003.png"));
    auto row = json::parse(slurp(dir / "a" / "latents.jsonl").substr(0, slurp(dir / "a" / "latents.jsonl").find('\n')));
    EXPECT_EQ(row["w"].size(), 8u);
    auto c = cli("--seed 4 synth --count 1 -o " + (dir / "c").string());
    ASSERT_EQ(c.code, 0);
    EXPECT_NE(slurp(dir / "a" / "0000.png"), slurp(dir / "c" / "0000.png"));
}

TEST(Cli, TrainEchoesStrategyWeights) {
    auto dir = dse::test::scratch("cli_train");
    auto r = cli("--set generator.resolution=16 train --strategy 2 --max-steps 1 --batch-size 2 -o " + dir.string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("(mu1, mu2) = (5, 9)"), std::string::npos) << r.output;
    auto cfg = json::parse(slurp(dir / "train" / "config.json"));
    EXPECT_EQ(cfg["effective_weights"]["mu1"], 5.0);
    EXPECT_EQ(cfg["effective_weights"]["mu2"], 9.0);
    EXPECT_TRUE(std::filesystem::exists(dir / "train" / "encoder" / "manifest.json"));
    EXPECT_EQ(count_lines(slurp(dir / "train" / "history.jsonl")), 1u);

    auto inv = cli("--set generator.resolution=16 invert --images " + (dir / "imgs").string() + " -o " + (dir / "inv").string());
    EXPECT_EQ(inv.code, 2);
    ASSERT_EQ(cli("--set generator.resolution=16 synth --count 2 -o " + (dir / "imgs").string()).code, 0);
    auto ok = cli("--set generator.resolution=16 invert --images " + (dir / "imgs").string() + " --encoder " +
                  (dir / "train" / "encoder").string() + " -o " + (dir / "inv").string());
    ASSERT_EQ(ok.code, 0) << ok.output;
    EXPECT_TRUE(std::filesystem::exists(dir / "inv" / "grid.png"));
    EXPECT_EQ(count_lines(slurp(dir / "inv" / "metrics.csv")), 3u);
    auto wrong = cli("invert --images " + (dir / "imgs").string() + " --encoder " + (dir / "train" / "encoder").string());
    EXPECT_EQ(wrong.code, 3) << wrong.output;
}

TEST(Cli, EvalExitCodes) {
    auto dir = dse::test::scratch("cli_eval");
    ASSERT_EQ(cli("--seed 1 synth --count 2 -o " + (dir / "a").string()).code, 0);
    ASSERT_EQ(cli("--seed 2 synth --count 2 -o " + (dir / "b").string()).code, 0);
    auto r = cli("eval --a " + (dir / "a").string() + " --b " + (dir / "b").string() + " -o " + (dir / "r").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("CS = cosine"), std::string::npos);
    EXPECT_EQ(count_lines(slurp(dir / "r" / "report.csv")), 3u);
    std::filesystem::remove(dir / "b" / "0001.png");
    auto mismatch = cli("eval --a " + (dir / "a").string() + " --b " + (dir / "b").string() + " -o " + (dir / "r").string());
    EXPECT_EQ(mismatch.code, 1);
    EXPECT_NE(mismatch.output.find("A:0001"), std::string::npos);
    EXPECT_EQ(cli("eval --a /nonexistent/x --b " + (dir / "b").string()).code, 2);
}
