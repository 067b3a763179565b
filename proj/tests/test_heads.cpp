#include <catch_amalgamated.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace adaptkit;
using namespace testsupport;

namespace {

JointFeature random_joint(Rng& r, int g, int d, int layers) {
    JointFeature jf;
    jf.grid = {g, g};
    for (int l = 0; l < layers; ++l) jf.layers.push_back(random_matrix(r, g * g, d));
    return jf;
}

void randomize(SegHeadParams& p, Rng& r) {
    for (auto& ref : nn::params_of(p)) *ref.value = random_matrix(r, ref.value->rows(), ref.value->cols(), 0.5);
    for (auto& b : p.blocks) b.norm.gamma = (b.norm.gamma.array().abs() + 0.5).matrix();
}

}  // namespace

TEST_CASE("segmentation head output shape and range") {
    Rng r(1);
    const JointFeature jf = random_joint(r, 3, 4, 2);
    SegHeadParams p = SegHeadParams::create(8, r, 16, 2);
    CHECK(p.upsample_factor() == 4);
    const Map m = segment(jf, p, 20);
    CHECK(m.rows() == 20);
    CHECK(m.cols() == 20);
    CHECK(m.minCoeff() >= 0.0);
    CHECK(m.maxCoeff() <= 1.0);
    CHECK_THROWS_AS(segment(random_joint(r, 3, 5, 2), p, 20), ConfigError);
}

TEST_CASE("eval-mode segmentation of one image does not depend on the batch") {
    Rng r(2);
    const JointFeature a = random_joint(r, 2, 4, 2), b = random_joint(r, 2, 4, 2);
    SegHeadParams p = SegHeadParams::create(8, r, 8, 2);
    const auto batch = seg_head_forward(p, {&a, &b}, 8, false);
    CHECK(batch[0] == segment(a, p, 8));
    CHECK(batch[1] == segment(b, p, 8));
}

TEST_CASE("running statistics follow the momentum update") {
    Rng r(3);
    const JointFeature a = random_joint(r, 2, 4, 2), b = random_joint(r, 2, 4, 2);
    SegHeadParams p = SegHeadParams::create(8, r, 8, 1);
    SegHeadCache cache;
    seg_head_forward(p, {&a, &b}, 8, true, &cache);
    const Vector mean = cache.blocks[0][0].batch_mean;
    const Vector var = cache.blocks[0][0].batch_var;
    seg_head_update_running_stats(p, cache);
    const double n = 8.0;  // two 2x2 maps
    for (int c = 0; c < 8; ++c) {
        CHECK(p.blocks[0].norm.running_mean(0, c) == Catch::Approx(0.1 * mean(c)));
        CHECK(p.blocks[0].norm.running_var(0, c) == Catch::Approx(0.9 + 0.1 * var(c) * n / (n - 1)));
    }
}

TEST_CASE("segmentation head gradients match central differences") {
    Rng r(4);
    const JointFeature a = random_joint(r, 2, 3, 2), b = random_joint(r, 2, 3, 2);
    SegHeadParams p = SegHeadParams::create(6, r, 8, 2);
    randomize(p, r);
    const int res = 6;
    const Map w0 = random_matrix(r, res, res), w1 = random_matrix(r, res, res);
    auto loss = [&] {
        const auto maps = seg_head_forward(p, {&a, &b}, res, true);
        return maps[0].cwiseProduct(w0).sum() + maps[1].cwiseProduct(w1).sum();
    };
    SegHeadCache cache;
    seg_head_forward(p, {&a, &b}, res, true, &cache);
    SegHeadParams grad = nn::zeros_like(p);
    seg_head_backward(p, cache, {w0, w1}, grad);
    auto pp = nn::params_of(p);
    auto gp = nn::params_of(grad);
    double worst = 0;
    for (std::size_t k = 0; k < pp.size(); ++k)
        for (Eigen::Index i = 0; i < pp[k].value->size(); ++i)
            worst = std::max(worst, rel_error(gp[k].value->data()[i], central_difference(*pp[k].value, i, 1e-5, loss), 1e-7));
    CHECK(worst < 1e-3);
}

TEST_CASE("global head pools mean and max and maps to a probability") {
    Rng r(5);
    const JointFeature jf = random_joint(r, 3, 4, 2);
    const Vector pooled = pool_joint_feature(jf);
    REQUIRE(pooled.size() == 8);
    for (int l = 0; l < 2; ++l)
        for (int c = 0; c < 4; ++c) {
            double mean = 0, mx = -INFINITY;
            for (int i = 0; i < 9; ++i) {
                mean += jf.layers[static_cast<std::size_t>(l)](i, c) / 9;
                mx = std::max(mx, jf.layers[static_cast<std::size_t>(l)](i, c));
            }
            CHECK(pooled(l * 4 + c) == Catch::Approx((mean + mx) / 2).margin(1e-12));
        }
    GlobalHeadParams h = GlobalHeadParams::create(8, r, 16);
    CHECK(GlobalHeadParams::widths(8, 16) == std::vector<int>{8, 16, 8, 4, 2});
    CHECK(GlobalHeadParams::widths(1024, 128) == std::vector<int>{1024, 128, 64, 32, 16, 8, 4, 2});
    const double s = global_score(jf, h);
    CHECK(s > 0.0);
    CHECK(s < 1.0);
}

TEST_CASE("global head gradients match central differences") {
    Rng r(6);
    const JointFeature jf = random_joint(r, 3, 4, 2);
    GlobalHeadParams h = GlobalHeadParams::create(8, r, 16);
    for (auto& ref : nn::params_of(h)) *ref.value = random_matrix(r, ref.value->rows(), ref.value->cols(), 0.6);
    GlobalHeadCache cache;
    global_score(jf, h, &cache);
    GlobalHeadParams grad = nn::zeros_like(h);
    global_score_backward(h, cache, 1.0, grad);
    auto pp = nn::params_of(h);
    auto gp = nn::params_of(grad);
    for (std::size_t k = 0; k < pp.size(); ++k)
        for (Eigen::Index i = 0; i < pp[k].value->size(); ++i)
            REQUIRE(rel_error(gp[k].value->data()[i], central_difference(*pp[k].value, i, 1e-6, [&] { return global_score(jf, h); }), 1e-8) < 1e-3);
}

TEST_CASE("global score equals the pooled MLP oracle") {
    Rng r(7);
    for (int t = 0; t < 20; ++t) {
        const int d = 1 + static_cast<int>(r.below(16));
        const int layers = 1 + static_cast<int>(r.below(3));
        const JointFeature jf = random_joint(r, 1 + static_cast<int>(r.below(8)), d, layers);
        const GlobalHeadParams h = GlobalHeadParams::create(d * layers, r, 16);
        REQUIRE(std::abs(global_score(jf, h) - oracle::global_score(jf, h)) <= 1e-9);
    }
}
