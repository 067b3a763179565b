#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "adaptkit/errors.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit::nn {

/// Named reference to a trainable array; biases are stored as 1 x n matrices.
struct ParamRef {
    std::string name;
    Matrix* value;
};

using ParamList = std::vector<ParamRef>;

/// Collects the parameters of any struct exposing `visit(prefix, fn)`.
template <class P>
ParamList params_of(P& p, const std::string& prefix = "") {
    ParamList out;
    p.visit(prefix, [&](const std::string& name, Matrix& m) { out.push_back({name, &m}); });
    return out;
}

/// Same structure with every array zeroed; used as a gradient accumulator.
template <class P>
P zeros_like(const P& p) {
    P z = p;
    for (auto& ref : params_of(z)) ref.value->setZero();
    return z;
}

template <class P>
void add_into(P& dst, const P& src) {
    auto d = params_of(dst);
    auto s = params_of(const_cast<P&>(src));
    for (std::size_t i = 0; i < d.size(); ++i) *d[i].value += *s[i].value;
}

template <class P>
bool bitwise_equal(const P& a, const P& b) {
    auto pa = params_of(const_cast<P&>(a));
    auto pb = params_of(const_cast<P&>(b));
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const Matrix& x = *pa[i].value;
        const Matrix& y = *pb[i].value;
        if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
        if (std::memcmp(x.data(), y.data(), sizeof(double) * x.size()) != 0) return false;
    }
    return true;
}

struct Linear {
    Matrix weight;  // [out x in]
    Matrix bias;    // [1 x out]

    Linear() = default;
    Linear(int in, int out) : weight(Matrix::Zero(out, in)), bias(Matrix::Zero(1, out)) {}

    int in_features() const { return static_cast<int>(weight.cols()); }
    int out_features() const { return static_cast<int>(weight.rows()); }

    /// U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
    void init_uniform(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
        for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = rng.uniform(-bound, bound);
        for (Eigen::Index i = 0; i < bias.size(); ++i) bias.data()[i] = rng.uniform(-bound, bound);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "weight", weight);
        f(prefix + "bias", bias);
    }

    /// x: [n x in] -> [n x out]
    Matrix forward(const Matrix& x) const {
        Matrix y = x * weight.transpose();
        y.rowwise() += bias.row(0);
        return y;
    }

    /// Accumulates parameter gradients into `grad`, returns dL/dx.
    Matrix backward(const Matrix& x, const Matrix& dy, Linear& grad) const {
        grad.weight.noalias() += dy.transpose() * x;
        grad.bias.row(0) += dy.colwise().sum();
        return dy * weight;
    }
};

/// Stack of Linear layers with a ReLU between consecutive layers (none after the last).
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    explicit Mlp(const std::vector<int>& widths) {
        if (widths.size() < 2) throw ConfigError("Mlp: need at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            if (widths[i] <= 0 || widths[i + 1] <= 0) throw ConfigError("Mlp: widths must be positive");
            layers.emplace_back(widths[i], widths[i + 1]);
        }
    }

    int in_features() const { return layers.front().in_features(); }
    int out_features() const { return layers.back().out_features(); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + std::to_string(i) + ".", f);
    }

    struct Cache {
        std::vector<Matrix> inputs;  // input to each layer (post-activation of previous)
        std::vector<Matrix> pre;     // pre-activation outputs
    };

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        if (x.cols() != in_features()) throw ConfigError("Mlp: input width " + std::to_string(x.cols()) + " != " + std::to_string(in_features()));
        if (cache) {
            cache->inputs.clear();
            cache->pre.clear();
        }
        Matrix h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (cache) cache->inputs.push_back(h);
            Matrix z = layers[i].forward(h);
            if (cache) cache->pre.push_back(z);
            h = (i + 1 < layers.size()) ? Matrix(z.cwiseMax(0.0)) : std::move(z);
        }
        return h;
    }

    Matrix backward(const Cache& cache, const Matrix& dy, Mlp& grad) const {
        Matrix g = dy;
        for (std::size_t k = layers.size(); k-- > 0;) {
            if (k + 1 < layers.size()) g = g.cwiseProduct((cache.pre[k].array() > 0.0).cast<double>().matrix());
            g = layers[k].backward(cache.inputs[k], g, grad.layers[k]);
        }
        return g;
    }
};

}  // namespace adaptkit::nn
