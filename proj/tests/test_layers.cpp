#include <cmath>

#include <gtest/gtest.h>

#include "dse/array_store.hpp"
#include "dse/errors.hpp"
#include "dse/layers.hpp"
#include "support.hpp"

using namespace dse;

TEST(Layers, EqualizedScale) {
    EXPECT_DOUBLE_EQ(equalized_scale(16, 1.0), 0.25);
    EXPECT_NEAR(equalized_scale(512, std::sqrt(2.0)), std::sqrt(2.0 / 512.0), 1e-15);
}

TEST(Layers, EqualizedLinearMatchesManualScale) {
    auto g = dse::test::rng(1);
    EqualizedLinear fc(8, 3, 2.0, g, 0.5);
    auto x = dse::test::randn({4, 8}, 2);
    auto expected = torch::matmul(x, (fc->weight * (2.0 / std::sqrt(8.0))).t()) + 0.5;
    EXPECT_LT(dse::test::max_abs_diff(fc->forward(x), expected), 1e-5);
}

TEST(Layers, RawWeightsAreStandardNormal) {
    auto g = dse::test::rng(3);
    EqualizedConv2d conv(64, 64, 3, 1.0, g);
    EXPECT_NEAR(conv->weight.mean().item<double>(), 0.0, 0.02);
    EXPECT_NEAR(conv->weight.std().item<double>(), 1.0, 0.02);
}

TEST(Layers, FusedDownscaleEqualsConvThenPool) {
    auto g = dse::test::rng(4);
    EqualizedConv2d conv(3, 5, 3, 1.0, g);
    {
        torch::NoGradGuard no_grad;
        conv->bias.normal_(0.0, 1.0, g);
    }
    auto x = dse::test::randn({2, 3, 8, 8}, 5, torch::kDouble);
    conv->to(torch::kDouble);
    auto fused = conv->forward_fused_downscale(x);
    auto plain = downsample2x(conv->forward(x));
    EXPECT_EQ(fused.sizes(), plain.sizes());
    EXPECT_LT(dse::test::max_abs_diff(fused, plain), 1e-10);
}

TEST(Layers, PixelAndInstanceNorm) {
    auto x = dse::test::randn({3, 16}, 6) * 4.0;
    auto p = pixel_norm(x);
    EXPECT_LT(dse::test::max_abs_diff(p.pow(2).mean(1), torch::ones({3})), 1e-5);
    auto y = dse::test::randn({2, 4, 8, 8}, 7) * 3.0 + 1.0;
    auto n = instance_norm(y);
    EXPECT_LT(n.mean({2, 3}).abs().max().item<double>(), 1e-5);
    EXPECT_LT(dse::test::max_abs_diff(n.pow(2).mean({2, 3}), torch::ones({2, 4})), 1e-4);
}

TEST(Layers, LeakyReluSlope) {
    auto x = torch::tensor({-2.0, 3.0});
    auto y = lrelu(x);
    EXPECT_FLOAT_EQ(y[0].item<float>(), -0.4f);
    EXPECT_FLOAT_EQ(y[1].item<float>(), 3.0f);
}

TEST(Layers, FreezeDisablesGradients) {
    auto g = dse::test::rng(8);
    EqualizedLinear fc(4, 4, 1.0, g);
    freeze(*fc);
    EXPECT_FALSE(fc->is_training());
    for (const auto& p : fc->parameters()) EXPECT_FALSE(p.requires_grad());
}

TEST(ArrayStore, RoundTripAndChecksum) {
    auto dir = dse::test::scratch("arrays");
    ArrayBundle b;
    b.kind = "test";
    b.meta = {{"answer", 42}};
    b.arrays.emplace_back("a.weight", dse::test::randn({3, 4}, 9));
    b.arrays.emplace_back("b", dse::test::randn({5}, 10, torch::kDouble));
    write_bundle(dir / "bundle", b);
    auto back = read_bundle(dir / "bundle");
    EXPECT_EQ(back.kind, "test");
    EXPECT_EQ(back.meta["answer"], 42);
    ASSERT_NE(back.find("b"), nullptr);
    EXPECT_EQ(back.find("b")->scalar_type(), torch::kDouble);
    EXPECT_TRUE(torch::equal(*back.find("a.weight"), b.arrays[0].second));
    EXPECT_EQ(back.find("nope"), nullptr);
}

TEST(ArrayStore, LoadModuleStateErrors) {
    auto dir = dse::test::scratch("arrays_err");
    auto g = dse::test::rng(11);
    EqualizedLinear fc(4, 2, 1.0, g);
    auto bundle = module_bundle(*fc, "fc", nlohmann::json::object());
    write_bundle(dir / "ok", bundle);
    auto g2 = dse::test::rng(12);
    EqualizedLinear other(4, 2, 1.0, g2);
    EXPECT_NE(parameter_checksum(*fc), parameter_checksum(*other));
    load_module_state(*other, read_bundle(dir / "ok"), "ok");
    EXPECT_EQ(parameter_checksum(*fc), parameter_checksum(*other));
    EqualizedLinear wrong(3, 2, 1.0, g2);
    EXPECT_THROW(load_module_state(*wrong, bundle, "ok"), IoError);
    EXPECT_THROW(read_bundle(dir / "absent"), IoError);
}

TEST(Layers, ScaleForFanInFourIsRootHalf) {
    EXPECT_NEAR(equalized_scale(4, std::sqrt(2.0)), 0.70710678118654752, 1e-15);
}

TEST(Layers, DoublingRawWeightsDoublesOutput) {
    auto g = dse::test::rng(13);
    EqualizedLinear fc(6, 3, 1.0, g);
    auto x = dse::test::randn({2, 6}, 14);
    auto y1 = fc->forward(x);
    {
        torch::NoGradGuard no_grad;
        fc->weight.mul_(2.0);
    }
    EXPECT_LT(dse::test::max_abs_diff(fc->forward(x), y1 * 2.0), 1e-5);
}

TEST(Layers, VariancePreservedMonteCarlo) {
    auto g = dse::test::rng(15);
    EqualizedLinear fc(256, 256, 1.0, g);
    torch::NoGradGuard no_grad;
    const double var = fc->forward(dse::test::randn({1000, 256}, 16)).var().item<double>();
    EXPECT_GE(var, 0.5);
    EXPECT_LE(var, 2.0);
}
