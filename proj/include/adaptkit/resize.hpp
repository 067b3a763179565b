#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "adaptkit/errors.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit {

/// 1-D linear interpolation taps with half-pixel centers (align_corners = false).
/// Negative source coordinates clamp to 0, matching the usual deep-learning convention.
struct LinearTaps {
    std::vector<int> lo, hi;
    std::vector<double> w_lo, w_hi;

    LinearTaps(int in_size, int out_size) : lo(out_size), hi(out_size), w_lo(out_size), w_hi(out_size) {
        if (in_size <= 0 || out_size <= 0) throw ArgumentError("resize: sizes must be positive");
        const double scale = static_cast<double>(in_size) / out_size;
        for (int o = 0; o < out_size; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            if (src < 0.0) src = 0.0;
            int i0 = static_cast<int>(std::floor(src));
            if (i0 > in_size - 1) i0 = in_size - 1;
            const int i1 = std::min(i0 + 1, in_size - 1);
            const double frac = src - i0;
            lo[o] = i0;
            hi[o] = i1;
            w_lo[o] = 1.0 - frac;
            w_hi[o] = frac;
        }
    }

    int size() const { return static_cast<int>(lo.size()); }
};

/// Bilinear resize of a single-channel map.
inline Map resize_bilinear(const Map& in, int out_h, int out_w) {
    const LinearTaps ty(static_cast<int>(in.rows()), out_h);
    const LinearTaps tx(static_cast<int>(in.cols()), out_w);
    Matrix rows_done(out_h, in.cols());
    for (int o = 0; o < out_h; ++o) rows_done.row(o) = ty.w_lo[o] * in.row(ty.lo[o]) + ty.w_hi[o] * in.row(ty.hi[o]);
    Map out(out_h, out_w);
    for (int o = 0; o < out_w; ++o) out.col(o) = tx.w_lo[o] * rows_done.col(tx.lo[o]) + tx.w_hi[o] * rows_done.col(tx.hi[o]);
    return out;
}

/// Adjoint of resize_bilinear: maps a gradient on the output grid back to the input grid.
inline Map resize_bilinear_backward(const Map& grad_out, int in_h, int in_w) {
    const LinearTaps ty(in_h, static_cast<int>(grad_out.rows()));
    const LinearTaps tx(in_w, static_cast<int>(grad_out.cols()));
    Matrix cols_done = Matrix::Zero(grad_out.rows(), in_w);
    for (int o = 0; o < tx.size(); ++o) {
        cols_done.col(tx.lo[o]) += tx.w_lo[o] * grad_out.col(o);
        cols_done.col(tx.hi[o]) += tx.w_hi[o] * grad_out.col(o);
    }
    Map g = Map::Zero(in_h, in_w);
    for (int o = 0; o < ty.size(); ++o) {
        g.row(ty.lo[o]) += ty.w_lo[o] * cols_done.row(o);
        g.row(ty.hi[o]) += ty.w_hi[o] * cols_done.row(o);
    }
    return g;
}

inline Image resize_bilinear(const Image& in, int out_h, int out_w) {
    if (in.height == out_h && in.width == out_w) return in;
    const LinearTaps ty(in.height, out_h);
    const LinearTaps tx(in.width, out_w);
    Image tmp(out_h, in.width);
    for (int o = 0; o < out_h; ++o)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < 3; ++c)
                tmp.at(o, x, c) = ty.w_lo[o] * in.at(ty.lo[o], x, c) + ty.w_hi[o] * in.at(ty.hi[o], x, c);
    Image out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int o = 0; o < out_w; ++o)
            for (int c = 0; c < 3; ++c)
                out.at(y, o, c) = tx.w_lo[o] * tmp.at(y, tx.lo[o], c) + tx.w_hi[o] * tmp.at(y, tx.hi[o], c);
    return out;
}

/// Nearest-neighbour resize (floor(o * in / out)); keeps the value set of the input.
inline Map resize_nearest(const Map& in, int out_h, int out_w) {
    Map out(out_h, out_w);
    const auto in_h = in.rows(), in_w = in.cols();
    for (int y = 0; y < out_h; ++y) {
        const auto sy = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(static_cast<double>(y) * in_h / out_h)), in_h - 1);
        for (int x = 0; x < out_w; ++x) {
            const auto sx = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(static_cast<double>(x) * in_w / out_w)), in_w - 1);
            out(y, x) = in(sy, sx);
        }
    }
    return out;
}

}  // namespace adaptkit
