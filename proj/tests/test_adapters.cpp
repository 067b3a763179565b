#include <catch_amalgamated.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace adaptkit;
using namespace testsupport;

namespace {

ClassEmbeddings random_embeddings(Rng& r, int d) {
    ClassEmbeddings e;
    e.normal = random_vector(r, d);
    e.abnormal = random_vector(r, d);
    return e;
}

// Residual MLP d -> d/4 -> d with ReLU, written with explicit loops.
Matrix residual_mlp_oracle(const Matrix& x, const nn::Mlp& mlp) {
    Matrix out = x;
    const auto& l0 = mlp.layers[0];
    const auto& l1 = mlp.layers[1];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        std::vector<double> h(static_cast<std::size_t>(l0.out_features()));
        for (int o = 0; o < l0.out_features(); ++o) {
            double acc = l0.bias(0, o);
            for (int k = 0; k < l0.in_features(); ++k) acc += l0.weight(o, k) * x(i, k);
            h[static_cast<std::size_t>(o)] = std::max(acc, 0.0);
        }
        for (int o = 0; o < l1.out_features(); ++o) {
            double acc = l1.bias(0, o);
            for (int k = 0; k < l1.in_features(); ++k) acc += l1.weight(o, k) * h[static_cast<std::size_t>(k)];
            out(i, o) += acc;
        }
    }
    return out;
}

VisualAdapterParams random_visual(Rng& r, int d) {
    VisualAdapterParams p = VisualAdapterParams::create(d, r);
    for (auto& ref : nn::params_of(p)) *ref.value = random_matrix(r, ref.value->rows(), ref.value->cols(), 0.3);
    return p;
}

}  // namespace

TEST_CASE("patch and image scores equal the two-class softmax oracle") {
    Rng r(1);
    for (int t = 0; t < 20; ++t) {
        const int d = 2 + static_cast<int>(r.below(15));
        const int g = 1 + static_cast<int>(r.below(8));
        const Matrix tokens = random_matrix(r, g * g, d);
        const ClassEmbeddings e = random_embeddings(r, d);
        const double tau = r.uniform(0.05, 1.0);
        const Map m = score_pixels(tokens, e, tau, {g, g});
        for (int i = 0; i < g * g; ++i) REQUIRE(std::abs(m(i / g, i % g) - oracle::softmax_score(tokens, i, e.normal, e.abnormal, tau)) <= 1e-9);
        const Vector glob = random_vector(r, d);
        const Matrix gm = glob.transpose();
        REQUIRE(std::abs(score_image(glob, e, tau) - oracle::softmax_score(gm, 0, e.normal, e.abnormal, tau)) <= 1e-9);
    }
}

TEST_CASE("scores are symmetric under swapping the class embeddings") {
    Rng r(2);
    const Matrix tokens = random_matrix(r, 9, 6);
    ClassEmbeddings e = random_embeddings(r, 6);
    const Vector s = score_tokens(tokens, e, 0.07);
    std::swap(e.normal, e.abnormal);
    const Vector s2 = score_tokens(tokens, e, 0.07);
    CHECK(((s + s2).array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("invalid temperature or width is rejected") {
    Rng r(3);
    const Matrix tokens = random_matrix(r, 4, 6);
    const ClassEmbeddings e = random_embeddings(r, 6);
    CHECK_THROWS_AS(score_tokens(tokens, e, 0.0), ArgumentError);
    CHECK_THROWS_AS(score_tokens(tokens, e, NAN), ArgumentError);
    CHECK_THROWS_AS(score_tokens(random_matrix(r, 4, 5), e, 0.1), ConfigError);
    CHECK_THROWS_AS(score_pixels(tokens, e, 0.1, {3, 3}), ConfigError);
}

TEST_CASE("a fresh visual adapter is the identity") {
    Rng r(4);
    const VisionFeatures f = random_features(r, 3, 8, 2);
    const VisualAdapterParams p = VisualAdapterParams::create(8, r);
    const VisionFeatures a = visual_adapt(f, p);
    CHECK(a.last() == f.last());
    CHECK(a.global == f.global);
}

TEST_CASE("visual adapter equals the residual MLP oracle on the last layer only") {
    Rng r(5);
    const VisionFeatures f = random_features(r, 3, 8, 3);
    const VisualAdapterParams p = random_visual(r, 8);
    const VisionFeatures a = visual_adapt(f, p);
    CHECK(a.layers[0] == f.layers[0]);
    CHECK(a.layers[1] == f.layers[1]);
    CHECK((a.last() - residual_mlp_oracle(f.last(), p.local)).cwiseAbs().maxCoeff() < 1e-12);
    const Matrix g = f.global.transpose();
    CHECK((a.global.transpose() - residual_mlp_oracle(g, p.global)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(visual_adapt(random_features(r, 3, 12, 1), p), ConfigError);
}

TEST_CASE("score backward matches central differences") {
    Rng r(6);
    Matrix tokens = random_matrix(r, 5, 6);
    ClassEmbeddings e = random_embeddings(r, 6);
    const Vector w = random_vector(r, 5);
    const double tau = 0.3;
    auto f = [&] { return score_tokens(tokens, e, tau).dot(w); };
    const ScoreGrad g = score_tokens_backward(tokens, e, tau, w);
    for (Eigen::Index i = 0; i < tokens.size(); ++i) REQUIRE(rel_error(g.tokens.data()[i], central_difference(tokens, i, 1e-6, f)) < 1e-6);
    for (Eigen::Index i = 0; i < 6; ++i) {
        Matrix wa = e.abnormal.transpose();
        const double na = central_difference(wa, i, 1e-6, [&] {
            e.abnormal = wa.row(0).transpose();
            return f();
        });
        e.abnormal = wa.row(0).transpose();
        REQUIRE(rel_error(g.abnormal(i), na) < 1e-6);
        Matrix wn = e.normal.transpose();
        const double nn_ = central_difference(wn, i, 1e-6, [&] {
            e.normal = wn.row(0).transpose();
            return f();
        });
        e.normal = wn.row(0).transpose();
        REQUIRE(rel_error(g.normal(i), nn_) < 1e-6);
    }
}

TEST_CASE("visual adapter gradients match central differences") {
    Rng r(7);
    const VisionFeatures f = random_features(r, 3, 8, 2);
    VisualAdapterParams p = random_visual(r, 8);
    const ClassEmbeddings e = random_embeddings(r, 8);
    const Vector w = random_vector(r, 9);
    const double wg = 0.7;
    auto loss = [&] {
        const VisionFeatures a = visual_adapt(f, p);
        return score_tokens(a.last(), e, 0.2).dot(w) + wg * score_image(a.global, e, 0.2);
    };
    VisualAdaptCache cache;
    const VisionFeatures a = visual_adapt(f, p, &cache);
    const ScoreGrad gt = score_tokens_backward(a.last(), e, 0.2, w);
    Vector dimg(1);
    dimg(0) = wg;
    const Matrix ga = a.global.transpose();
    const ScoreGrad gg = score_tokens_backward(ga, e, 0.2, dimg);
    VisualAdapterParams grad = nn::zeros_like(p);
    visual_adapt_backward(p, cache, gt.tokens, gg.tokens.row(0).transpose(), grad);
    auto pp = nn::params_of(p);
    auto gp = nn::params_of(grad);
    for (std::size_t k = 0; k < pp.size(); ++k)
        for (Eigen::Index i = 0; i < pp[k].value->size(); ++i)
            REQUIRE(rel_error(gp[k].value->data()[i], central_difference(*pp[k].value, i, 1e-6, loss)) < 1e-4);
}

TEST_CASE("textual adapter gradients match central differences") {
    auto bb = toy_backbone(8, 6);
    Rng r(8);
    TextualAdapterParams p = TextualAdapterParams::create(3, 6, r, 0.5);
    const Matrix tokens = random_matrix(r, 16, 8);
    const Vector w = random_vector(r, 16);
    auto loss = [&] { return score_tokens(tokens, textual_adapt(p, *bb), 0.2).dot(w); };
    const ScoreGrad g = score_tokens_backward(tokens, textual_adapt(p, *bb), 0.2, w);
    TextualAdapterParams grad = nn::zeros_like(p);
    textual_adapt_backward(p, *bb, g.normal, g.abnormal, grad);
    for (Eigen::Index i = 0; i < p.normal_tokens.size(); ++i) {
        REQUIRE(rel_error(grad.normal_tokens.data()[i], central_difference(p.normal_tokens, i, 1e-6, loss)) < 1e-4);
        REQUIRE(rel_error(grad.abnormal_tokens.data()[i], central_difference(p.abnormal_tokens, i, 1e-6, loss)) < 1e-4);
    }
}
