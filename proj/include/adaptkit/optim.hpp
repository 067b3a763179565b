#pragma once

#include <cmath>
#include <map>
#include <string>

#include "adaptkit/errors.hpp"
#include "adaptkit/nn.hpp"

namespace adaptkit::optim {

/// Adam with bias correction; state is keyed by parameter name.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() : Adam(Options{}) {}

    explicit Adam(Options o) : opt_(o) {
        if (!(o.lr > 0.0)) throw ArgumentError("Adam: learning rate must be positive");
    }

    /// Applies one update; `params` and `grads` must list the same arrays in the same order.
    void step(const nn::ParamList& params, const nn::ParamList& grads) {
        if (params.size() != grads.size()) throw ConfigError("Adam: parameter/gradient lists differ in length");
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Matrix& w = *params[i].value;
            const Matrix& g = *grads[i].value;
            auto& st = state_[params[i].name];
            if (st.m.size() == 0) {
                st.m = Matrix::Zero(w.rows(), w.cols());
                st.v = Matrix::Zero(w.rows(), w.cols());
            }
            st.m = opt_.beta1 * st.m + (1.0 - opt_.beta1) * g;
            st.v = opt_.beta2 * st.v + (1.0 - opt_.beta2) * g.cwiseAbs2();
            w.array() -= opt_.lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + opt_.eps);
        }
    }

    long steps() const { return t_; }

private:
    struct Moments {
        Matrix m, v;
    };
    Options opt_;
    long t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace adaptkit::optim
