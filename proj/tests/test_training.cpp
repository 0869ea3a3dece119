#include <fstream>

#include <gtest/gtest.h>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"
#include "dse/training.hpp"
#include "support.hpp"

using namespace dse;

namespace {

struct Rig {
    GeneratorPtr gen;
    Encoder enc{nullptr};
    Backbone backbone{nullptr};
    AttentionConfig attention;

    explicit Rig(Family family = Family::Style, int64_t res = 16) {
        gen = build_toy_generator(GeneratorSpec::desk(family, res), 1);
        enc = build_encoder(EncoderSpec::mirror(gen->spec()), 2);
        backbone = dse::test::desk_backbone();
    }

    std::pair<torch::Tensor, LatentBundle> batch(int64_t n, uint64_t seed) {
        torch::NoGradGuard no_grad;
        auto rng = dse::test::rng(seed);
        auto l = gen->sample(n, rng);
        return {gen->synthesize(l).image, l};
    }
};

TrainConfig short_config(int strategy, int64_t steps) {
    TrainConfig c;
    c.strategy = strategy;
    c.batch_size = 2;
    c.max_steps = steps;
    c.seed = 11;
    return c;
}

// Sum of |grad| over encoder parameters for `loss`, zero where unused.
double grad_mass(const torch::Tensor& loss, Encoder& enc) {
    if (!loss.requires_grad()) return 0.0;
    auto params = enc->parameters();
    auto grads = torch::autograd::grad({loss}, params, {}, /*retain_graph=*/true, false, /*allow_unused=*/true);
    double total = 0.0;
    for (const auto& g : grads)
        if (g.defined()) total += g.abs().sum().item<double>();
    return total;
}

}  // namespace

TEST(Training, StrategyScaleWeights) {
    EXPECT_EQ(strategy_scale_weights(1), (std::pair<double, double>{1.0, 1.0}));
    EXPECT_EQ(strategy_scale_weights(2), (std::pair<double, double>{5.0, 9.0}));
    EXPECT_THROW(strategy_scale_weights(3), ConfigError);
    TrainConfig c;
    c.strategy = 2;
    EXPECT_DOUBLE_EQ(c.effective_weights().mu1, 5.0);
    EXPECT_DOUBLE_EQ(c.effective_weights().mu2, 9.0);
    c.mu2 = 4.0;
    EXPECT_DOUBLE_EQ(c.effective_weights().mu2, 4.0);
}

TEST(Training, GatingDetachesOriginalScaleOnlyUnderStrategyOne) {
    Rig rig;
    auto [x, target] = rig.batch(2, 3);
    for (int strategy : {1, 2}) {
        rig.enc->set_fused_scale(strategy == 2);
        auto out = dse_forward(*rig.gen, rig.enc, rig.backbone, rig.attention, short_config(strategy, 1), x, target);
        const double orig = grad_mass(out.loss.terms.at("orig.mse"), rig.enc);
        const double at1 = grad_mass(out.loss.terms.at("at1.mse"), rig.enc);
        if (strategy == 1) {
            EXPECT_FALSE(out.loss.terms.at("orig.mse").requires_grad());
            EXPECT_EQ(orig, 0.0);
        } else {
            EXPECT_GT(orig, 0.0);
        }
        EXPECT_GT(at1, 0.0);
    }
}

TEST(Training, GatingLeavesTotalGradientOfCrops) {
    TripleScaleViews v;
    v.orig = torch::ones({1, 3, 16, 16}, torch::requires_grad());
    v.at1 = v.orig * 2.0;
    v.at2 = v.orig * 3.0;
    auto g1 = apply_strategy_gating(1, v);
    auto g2 = apply_strategy_gating(2, v);
    EXPECT_FALSE(g1.orig.requires_grad());
    EXPECT_TRUE(g1.at1.requires_grad());
    EXPECT_TRUE(g2.orig.requires_grad());
    EXPECT_TRUE(torch::equal(g1.orig, v.orig));
    EXPECT_THROW(apply_strategy_gating(0, v), ConfigError);
}

TEST(Training, EpsilonZeroReducesToImageLoss) {
    Rig rig;
    auto [x, target] = rig.batch(2, 4);
    auto config = short_config(2, 1);
    config.weights.epsilon = 0.0;
    rig.enc->eval();
    auto out = dse_forward(*rig.gen, rig.enc, rig.backbone, rig.attention, config, x, target);
    auto img = recompute_total(LossPart::Image, out.loss.values(), config.effective_weights());
    EXPECT_NEAR(out.loss.total_value(), img, 1e-6 * std::max(1.0, img));
}

TEST(Training, ReconstructionUsesZeroNoise) {
    LatentBundle encoded;
    encoded.w = torch::zeros({1, 8, 64});
    encoded.z_c = torch::zeros({1, 128, 4, 4});
    encoded.z_n = {torch::zeros({1, 1, 4, 4})};
    auto l = reconstruction_latents(Family::Style, encoded);
    EXPECT_TRUE(l.z_n.empty());
    EXPECT_TRUE(l.z_c.defined());
}

TEST(Training, FrozenModulesUntouchedAndEncoderUpdated) {
    Rig rig;
    const auto gen_sum = parameter_checksum(*rig.gen);
    const auto bb_sum = parameter_checksum(*rig.backbone);
    const auto enc_sum = parameter_checksum(*rig.enc);
    auto h = train_dse(*rig.gen, rig.enc, rig.backbone, rig.attention, short_config(1, 3));
    EXPECT_EQ(h.steps.size(), 3u);
    EXPECT_EQ(h.status, TrainStatus::Completed);
    EXPECT_EQ(parameter_checksum(*rig.gen), gen_sum);
    EXPECT_EQ(parameter_checksum(*rig.backbone), bb_sum);
    EXPECT_NE(parameter_checksum(*rig.enc), enc_sum);
    EXPECT_FALSE(rig.enc->is_training());
}

TEST(Training, SameSeedSameEncoder) {
    Rig a, b;
    auto config = short_config(2, 2);
    train_dse(*a.gen, a.enc, a.backbone, a.attention, config);
    train_dse(*b.gen, b.enc, b.backbone, b.attention, config);
    EXPECT_EQ(parameter_checksum(*a.enc), parameter_checksum(*b.enc));
    EXPECT_TRUE(b.enc->fused_scale());
}

TEST(Training, CheckpointDirectoryAndHistory) {
    Rig rig;
    auto dir = dse::test::scratch("train_ckpt");
    auto config = short_config(1, 4);
    config.checkpoint_dir = dir.string();
    config.checkpoint_every = 2;
    std::vector<int64_t> seen;
    auto h = train_dse(*rig.gen, rig.enc, rig.backbone, rig.attention, config,
                       [&](const StepRecord& r) { seen.push_back(r.step); });
    EXPECT_EQ(seen, (std::vector<int64_t>{0, 1, 2, 3}));
    EXPECT_EQ(h.checkpoints.size(), 3u);
    auto records = read_history(dir / "history.jsonl");
    ASSERT_EQ(records.size(), 4u);
    EXPECT_NEAR(records[2].total, h.steps[2].total, 1e-9);
    EXPECT_EQ(records[0].terms.size(), 18u);
    auto loaded = load_encoder(dir / "encoder");
    EXPECT_EQ(parameter_checksum(*loaded), parameter_checksum(*rig.enc));
    std::ifstream in(dir / "config.json");
    auto cfg = nlohmann::json::parse(in);
    EXPECT_EQ(cfg["effective_weights"]["mu1"], 1.0);
    EXPECT_EQ(cfg["train"]["strategy"], 1);
}

TEST(Training, EarlyExitWhenReconstructionMatches) {
    Rig rig;
    auto config = short_config(1, 5);
    config.skip_threshold = 100.0;
    const auto before = parameter_checksum(*rig.enc);
    auto h = train_dse(*rig.gen, rig.enc, rig.backbone, rig.attention, config);
    EXPECT_EQ(h.status, TrainStatus::Converged);
    EXPECT_EQ(h.steps.size(), 1u);
    EXPECT_EQ(parameter_checksum(*rig.enc), before);
}

TEST(Training, FixedPoolCyclesSamples) {
    Rig rig;
    auto config = short_config(1, 4);
    config.fixed_pool = 4;
    auto h = train_dse(*rig.gen, rig.enc, rig.backbone, rig.attention, config);
    EXPECT_EQ(h.steps.size(), 4u);
}

TEST(Training, LatentSourceChangesLatentTerm) {
    Rig rig;
    rig.enc->eval();
    auto [x, target] = rig.batch(2, 5);
    auto once = short_config(1, 1);
    auto again = once;
    again.latent_source = LatentSource::EncodeReconstruction;
    auto a = dse_forward(*rig.gen, rig.enc, rig.backbone, rig.attention, once, x, target);
    auto b = dse_forward(*rig.gen, rig.enc, rig.backbone, rig.attention, again, x, target);
    EXPECT_NEAR(a.loss.values().at("orig.mse"), b.loss.values().at("orig.mse"), 1e-7);
    EXPECT_NE(a.loss.values().at("lv.mse"), b.loss.values().at("lv.mse"));
}

TEST(Training, ClassConditionalAndProgressiveSteps) {
    for (auto family : {Family::Progressive, Family::ClassConditional}) {
        Rig rig(family);
        auto h = train_dse(*rig.gen, rig.enc, rig.backbone, rig.attention, short_config(2, 2));
        EXPECT_EQ(h.steps.size(), 2u) << to_string(family);
        EXPECT_TRUE(std::isfinite(h.steps.back().total));
    }
}

TEST(Training, RejectsBadSetups) {
    Rig rig;
    auto config = short_config(1, 1);
    config.learning_rate = 0.0;
    EXPECT_THROW(config.validate(), ConfigError);
    config = short_config(1, 1);
    config.ssim_window = 4;
    EXPECT_THROW(config.validate(), ConfigError);
    EXPECT_THROW(latent_source_from_string("twice"), ConfigError);
    auto mismatched = build_encoder(EncoderSpec::mirror(GeneratorSpec::desk(Family::Style, 32)), 1);
    EXPECT_THROW(train_dse(*rig.gen, mismatched, rig.backbone, rig.attention, short_config(1, 1)), ConfigError);
}

TEST(Training, ConfigJsonRoundTrip) {
    auto c = short_config(2, 7);
    c.latent_source = LatentSource::EncodeReconstruction;
    c.mu1 = 2.5;
    c.mse_mode = MseMode::L2OverBatch;
    auto back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(back.strategy, 2);
    EXPECT_EQ(back.max_steps, 7);
    EXPECT_EQ(back.latent_source, LatentSource::EncodeReconstruction);
    EXPECT_EQ(back.mse_mode, MseMode::L2OverBatch);
    ASSERT_TRUE(back.mu1.has_value());
    EXPECT_DOUBLE_EQ(*back.mu1, 2.5);
    EXPECT_EQ(TrainConfig{}.total_steps(), 3750 * 7);
}
