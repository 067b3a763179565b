#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "adaptkit/backbone.hpp"
#include "adaptkit/errors.hpp"
#include "adaptkit/nn.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit {

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr int kDefaultPromptLength = 12;

/// Residual MLPs for patch tokens (local) and the global token, d -> d/4 -> d.
struct VisualAdapterParams {
    nn::Mlp local;
    nn::Mlp global;

    int dim() const { return local.in_features(); }

    /// First layer small-uniform, last layer zero: the adapter starts as the identity.
    static VisualAdapterParams create(int d, Rng& rng) {
        const int hidden = d / 4;
        if (hidden <= 0) throw ConfigError("visual adapter: embed_dim must be at least 4");
        VisualAdapterParams p;
        p.local = nn::Mlp({d, hidden, d});
        p.global = nn::Mlp({d, hidden, d});
        p.local.layers[0].init_uniform(rng);
        p.global.layers[0].init_uniform(rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        local.visit(prefix + "local.", f);
        global.visit(prefix + "global.", f);
    }
};

/// Learned two-class prompt tokens [r x text_width].
struct TextualAdapterParams {
    Matrix normal_tokens;
    Matrix abnormal_tokens;

    int length() const { return static_cast<int>(normal_tokens.rows()); }

    static TextualAdapterParams create(int r, int text_width, Rng& rng, double init_std = 0.02) {
        if (r <= 0) throw ArgumentError("textual adapter: prompt length must be positive");
        TextualAdapterParams p;
        p.normal_tokens.resize(r, text_width);
        p.abnormal_tokens.resize(r, text_width);
        for (Eigen::Index i = 0; i < p.normal_tokens.size(); ++i) p.normal_tokens.data()[i] = init_std * rng.normal();
        for (Eigen::Index i = 0; i < p.abnormal_tokens.size(); ++i) p.abnormal_tokens.data()[i] = init_std * rng.normal();
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "normal_tokens", normal_tokens);
        f(prefix + "abnormal_tokens", abnormal_tokens);
    }
};

/// Caches for the visual adapter backward pass.
struct VisualAdaptCache {
    nn::Mlp::Cache local;
    nn::Mlp::Cache global;
};

/// Adapts the final layer's patch tokens and the global token; other layers pass through.
inline VisionFeatures visual_adapt(const VisionFeatures& features, const VisualAdapterParams& params, VisualAdaptCache* cache = nullptr) {
    features.validate();
    if (features.dim() != params.dim())
        throw ConfigError("visual_adapt: token width " + std::to_string(features.dim()) + " != adapter width " + std::to_string(params.dim()));
    VisionFeatures out = features;
    out.layers.back() += params.local.forward(features.last(), cache ? &cache->local : nullptr);
    Matrix g = features.global.transpose();
    out.global += params.global.forward(g, cache ? &cache->global : nullptr).row(0).transpose();
    return out;
}

/// Backpropagates gradients on the adapted final-layer tokens and global token into `grad`.
inline void visual_adapt_backward(const VisualAdapterParams& params, const VisualAdaptCache& cache, const Matrix& d_tokens, const Vector& d_global,
                                  VisualAdapterParams& grad) {
    params.local.backward(cache.local, d_tokens, grad.local);
    Matrix dg = d_global.transpose();
    params.global.backward(cache.global, dg, grad.global);
}

inline ClassEmbeddings textual_adapt(const TextualAdapterParams& params, const Backbone& backbone) {
    if (params.normal_tokens.rows() != params.abnormal_tokens.rows() || params.normal_tokens.cols() != params.abnormal_tokens.cols())
        throw ConfigError("textual_adapt: normal and abnormal prompts differ in shape");
    ClassEmbeddings e;
    e.normal = backbone.encode_prompt_tokens(params.normal_tokens);
    e.abnormal = backbone.encode_prompt_tokens(params.abnormal_tokens);
    e.source = ClassEmbeddings::Source::learned_prompts;
    return e;
}

inline void textual_adapt_backward(const TextualAdapterParams& params, const Backbone& backbone, const Vector& d_normal, const Vector& d_abnormal,
                                   TextualAdapterParams& grad) {
    grad.normal_tokens += backbone.prompt_tokens_vjp(params.normal_tokens, d_normal);
    grad.abnormal_tokens += backbone.prompt_tokens_vjp(params.abnormal_tokens, d_abnormal);
}

namespace detail {

inline constexpr double kNormFloor = 1e-12;

inline void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ArgumentError("temperature must be a positive finite number");
}

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace detail

/// Two-class softmax over cosine similarities, one probability per token row.
inline Vector score_tokens(const Matrix& tokens, const ClassEmbeddings& emb, double temperature) {
    detail::check_temperature(temperature);
    emb.validate(static_cast<int>(tokens.cols()));
    const Vector wa = emb.abnormal / std::max(emb.abnormal.norm(), detail::kNormFloor);
    const Vector wn = emb.normal / std::max(emb.normal.norm(), detail::kNormFloor);
    const Vector norms = tokens.rowwise().norm().cwiseMax(detail::kNormFloor);
    const Vector ca = (tokens * wa).cwiseQuotient(norms);
    const Vector cn = (tokens * wn).cwiseQuotient(norms);
    Vector s(tokens.rows());
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = detail::sigmoid((ca(i) - cn(i)) / temperature);
    return s;
}

/// Patch-level anomaly probabilities rearranged on the patch grid.
inline Map score_pixels(const Matrix& patch_tokens, const ClassEmbeddings& emb, double temperature, GridShape grid) {
    if (grid.count() != patch_tokens.rows()) throw ConfigError("score_pixels: grid does not match token count");
    const Vector s = score_tokens(patch_tokens, emb, temperature);
    Map out(grid.rows, grid.cols);
    for (int i = 0; i < grid.count(); ++i) out(i / grid.cols, i % grid.cols) = s(i);
    return out;
}

inline double score_image(const Vector& global_token, const ClassEmbeddings& emb, double temperature) {
    Matrix t = global_token.transpose();
    return score_tokens(t, emb, temperature)(0);
}

struct ScoreGrad {
    Matrix tokens;  // dL/dtokens
    Vector normal;  // dL/dw_n
    Vector abnormal;
};

/// Backward of score_tokens given dL/dscore per row.
inline ScoreGrad score_tokens_backward(const Matrix& tokens, const ClassEmbeddings& emb, double temperature, const Vector& d_scores) {
    detail::check_temperature(temperature);
    const double na = std::max(emb.abnormal.norm(), detail::kNormFloor);
    const double nn_ = std::max(emb.normal.norm(), detail::kNormFloor);
    const Vector wa = emb.abnormal / na;
    const Vector wn = emb.normal / nn_;
    const Vector norms = tokens.rowwise().norm().cwiseMax(detail::kNormFloor);
    const Vector ca = (tokens * wa).cwiseQuotient(norms);
    const Vector cn = (tokens * wn).cwiseQuotient(norms);

    ScoreGrad g;
    g.tokens.resize(tokens.rows(), tokens.cols());
    Vector d_wa_hat = Vector::Zero(wa.size());
    Vector d_wn_hat = Vector::Zero(wn.size());
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
        const double s = detail::sigmoid((ca(i) - cn(i)) / temperature);
        const double dlogit = d_scores(i) * s * (1.0 - s) / temperature;
        const double dca = dlogit, dcn = -dlogit;
        const auto f = tokens.row(i);
        const double fn = norms(i);
        // d cos(w, f) / d f = (w_hat - cos * f_hat) / |f|
        g.tokens.row(i) = (dca * (wa.transpose() - ca(i) * f / fn) + dcn * (wn.transpose() - cn(i) * f / fn)) / fn;
        d_wa_hat += dca * f.transpose() / fn;
        d_wn_hat += dcn * f.transpose() / fn;
    }
    // Through the normalization w_hat = w / |w|.
    g.abnormal = (d_wa_hat - wa * wa.dot(d_wa_hat)) / na;
    g.normal = (d_wn_hat - wn * wn.dot(d_wn_hat)) / nn_;
    return g;
}

}  // namespace adaptkit
