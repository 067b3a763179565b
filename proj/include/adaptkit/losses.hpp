#pragma once

#include <algorithm>
#include <cmath>

#include "adaptkit/errors.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit::loss {

inline constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

/// Binary cross-entropy of one probability.
inline double classification_loss(double pred, int label) {
    if (label != 0 && label != 1) throw ArgumentError("classification_loss: label must be 0 or 1");
    const double p = clamp_prob(pred);
    return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

inline double classification_loss_grad(double pred, int label) {
    const double p = clamp_prob(pred);
    if (p != pred) return 0.0;  // clamped region is flat
    return label == 1 ? -1.0 / p : 1.0 / (1.0 - p);
}

struct SegLossParams {
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_smooth = 1.0;
};

struct SegLossTerms {
    double focal = 0.0;
    double dice = 0.0;
    double total() const { return focal + dice; }
};

/// Pixel-mean focal loss -alpha_t (1-p_t)^gamma log p_t. The modulating factor uses
/// the unclamped p_t, so an exact prediction contributes exactly zero.
inline double focal_loss(const Map& pred, const Map& mask, double gamma, double alpha, Map* grad = nullptr) {
    if (pred.rows() != mask.rows() || pred.cols() != mask.cols()) throw ArgumentError("focal_loss: prediction and mask shapes differ");
    double acc = 0.0;
    if (grad) grad->resize(pred.rows(), pred.cols());
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        const double p = pred.data()[i];
        const bool pos = mask.data()[i] > 0.5;
        const double pt = pos ? p : 1.0 - p;
        const double at = pos ? alpha : 1.0 - alpha;
        const double ptc = clamp_prob(pt);
        const double one_minus = 1.0 - pt;
        const double mod = gamma == 0.0 ? 1.0 : std::pow(std::max(one_minus, 0.0), gamma);
        acc += -at * mod * std::log(ptc);
        if (grad) {
            // d/dpt of -at (1-pt)^g log(ptc)
            double dpt = 0.0;
            if (gamma != 0.0 && one_minus > 0.0) dpt += at * gamma * std::pow(one_minus, gamma - 1.0) * std::log(ptc);
            if (ptc == pt) dpt += -at * mod / pt;
            grad->data()[i] = (pos ? dpt : -dpt) * inv_n;
        }
    }
    return acc * inv_n;
}

/// 1 - (2 sum(p m) + s) / (sum p + sum m + s).
inline double dice_loss(const Map& pred, const Map& mask, double smooth, Map* grad = nullptr) {
    if (pred.rows() != mask.rows() || pred.cols() != mask.cols()) throw ArgumentError("dice_loss: prediction and mask shapes differ");
    const double inter = pred.cwiseProduct(mask).sum();
    const double sp = pred.sum();
    const double sm = mask.sum();
    const double num = 2.0 * inter + smooth;
    const double den = sp + sm + smooth;
    if (grad) *grad = (-(2.0 * mask.array() * den - num) / (den * den)).matrix();
    return 1.0 - num / den;
}

inline SegLossTerms segmentation_loss(const Map& pred, const Map& mask, const SegLossParams& cfg, Map* grad = nullptr) {
    Map gf, gd;
    SegLossTerms t;
    t.focal = focal_loss(pred, mask, cfg.focal_gamma, cfg.focal_alpha, grad ? &gf : nullptr);
    t.dice = dice_loss(pred, mask, cfg.dice_smooth, grad ? &gd : nullptr);
    if (grad) *grad = gf + gd;
    return t;
}

}  // namespace adaptkit::loss
