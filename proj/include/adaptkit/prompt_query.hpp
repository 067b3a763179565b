#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "adaptkit/backbone.hpp"
#include "adaptkit/errors.hpp"
#include "adaptkit/nn.hpp"
#include "adaptkit/resize.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit {

/// Patch tokens of k normal prompt images, stacked per layer.
struct PromptBank {
    std::vector<Matrix> layers;  // each [(k * n) x d]
    int shots = 0;
    std::optional<std::string> class_id;
    std::vector<std::uint64_t> source_hashes;

    bool empty() const { return layers.empty() || layers.front().rows() == 0; }
    Eigen::Index rows() const { return layers.empty() ? 0 : layers.front().rows(); }
};

/// Per-layer joint contextual + aligned-residual features of a query.
struct JointFeature {
    std::vector<Matrix> layers;  // each [n x d]
    GridShape grid;

    int channels() const {
        int c = 0;
        for (const auto& l : layers) c += static_cast<int>(l.cols());
        return c;
    }
};

inline std::uint64_t hash_image(const Image& im) {
    return fnv1a(std::span(reinterpret_cast<const unsigned char*>(im.pixels.data()), im.pixels.size() * sizeof(double)));
}

inline PromptBank build_prompt_bank(const std::vector<Image>& prompt_images, int k, const Backbone& backbone,
                                    std::optional<std::string> class_id = std::nullopt) {
    if (k < 1 || k > static_cast<int>(prompt_images.size()))
        throw ArgumentError("build_prompt_bank: k=" + std::to_string(k) + " outside [1, " + std::to_string(prompt_images.size()) + "]");
    PromptBank bank;
    bank.shots = k;
    bank.class_id = std::move(class_id);
    std::vector<VisionFeatures> feats;
    feats.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        feats.push_back(backbone.encode_image(prompt_images[static_cast<std::size_t>(i)]));
        bank.source_hashes.push_back(hash_image(prompt_images[static_cast<std::size_t>(i)]));
    }
    const std::size_t layers = feats.front().layers.size();
    const auto n = feats.front().layers.front().rows();
    const auto d = feats.front().layers.front().cols();
    for (std::size_t l = 0; l < layers; ++l) {
        Matrix stacked(n * k, d);
        for (int i = 0; i < k; ++i) stacked.middleRows(n * i, n) = feats[static_cast<std::size_t>(i)].layers[l];
        bank.layers.push_back(std::move(stacked));
    }
    return bank;
}

/// Squared Euclidean distance accumulated in index order.
inline double squared_distance(const double* a, const double* b, Eigen::Index d) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) {
        const double t = a[k] - b[k];
        acc += t * t;
    }
    return acc;
}

/// For each query row, index of the bank row with minimal Euclidean distance
/// (lowest index on ties). Distances are screened with a GEMM expansion and the
/// surviving candidates re-checked with squared_distance, so the result equals an
/// exhaustive search over squared_distance exactly.
inline std::vector<Eigen::Index> nearest_indices(const Matrix& query, const Matrix& bank) {
    if (bank.rows() < 1) throw ArgumentError("align: empty prompt bank");
    if (bank.cols() != query.cols()) throw ConfigError("align: query and bank widths differ");
    const Eigen::Index n = query.rows(), m = bank.rows(), d = query.cols();
    constexpr double u = std::numeric_limits<double>::epsilon();
    const double slack = 2.0 * static_cast<double>(d + 2) * u;

    const Vector qn2 = query.rowwise().squaredNorm();
    const Vector bn2 = bank.rowwise().squaredNorm();
    const Vector qn = qn2.cwiseSqrt();
    const Vector bn = bn2.cwiseSqrt();

    std::vector<Eigen::Index> best(static_cast<std::size_t>(n), -1);
    std::vector<double> best_exact(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<double> threshold(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());

    constexpr Eigen::Index kChunk = 2048;
    Matrix approx;
    for (Eigen::Index start = 0; start < m; start += kChunk) {
        const Eigen::Index len = std::min(kChunk, m - start);
        approx.noalias() = query * bank.middleRows(start, len).transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            double* row = approx.row(i).data();
            double& thr = threshold[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < len; ++j) {
                const double a = qn2(i) + bn2(start + j) - 2.0 * row[j];
                const double s = qn(i) + bn(start + j);
                const double bound = slack * s * s;
                row[j] = a - bound;
                thr = std::min(thr, a + bound);
            }
            const double* qrow = query.row(i).data();
            for (Eigen::Index j = 0; j < len; ++j) {
                if (row[j] > thr) continue;
                const double e = squared_distance(qrow, bank.row(start + j).data(), d);
                if (e < best_exact[static_cast<std::size_t>(i)]) {
                    best_exact[static_cast<std::size_t>(i)] = e;
                    best[static_cast<std::size_t>(i)] = start + j;
                }
            }
        }
    }
    return best;
}

/// Row i of the result is the bank row nearest to query row i.
inline Matrix align(const Matrix& query_tokens, const Matrix& bank_layer) {
    const auto idx = nearest_indices(query_tokens, bank_layer);
    Matrix out(query_tokens.rows(), query_tokens.cols());
    for (Eigen::Index i = 0; i < query_tokens.rows(); ++i) out.row(i) = bank_layer.row(idx[static_cast<std::size_t>(i)]);
    return out;
}

/// query + |query - aligned| per layer; with `context` false only |query - aligned|.
inline JointFeature joint_feature(const VisionFeatures& query, const PromptBank& bank, bool context = true) {
    if (bank.empty()) throw ArgumentError("joint_feature: empty prompt bank");
    if (bank.layers.size() != query.layers.size())
        throw ConfigError("joint_feature: query has " + std::to_string(query.layers.size()) + " layers, bank has " + std::to_string(bank.layers.size()));
    JointFeature jf;
    jf.grid = query.grid;
    for (std::size_t l = 0; l < query.layers.size(); ++l) {
        const Matrix& q = query.layers[l];
        Matrix residual = (q - align(q, bank.layers[l])).cwiseAbs();
        jf.layers.push_back(context ? Matrix(q + residual) : std::move(residual));
    }
    return jf;
}

// ---------------------------------------------------------------------------
// Convolutional pieces. A feature map of one sample is a [channels x (h*w)] matrix.

struct FeatureMap {
    Matrix data;  // [C x H*W]
    int height = 0;
    int width = 0;

    int channels() const { return static_cast<int>(data.rows()); }
};

namespace conv {

inline Matrix im2col3x3(const FeatureMap& x) {
    const int c = x.channels(), h = x.height, w = x.width;
    Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(c) * 9, static_cast<Eigen::Index>(h) * w);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = x.data.row(ch).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double* dst = cols.row(static_cast<Eigen::Index>(ch) * 9 + ky * 3 + kx).data();
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        dst[y * w + xx] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    return cols;
}

inline Matrix col2im3x3(const Matrix& cols, int c, int h, int w) {
    Matrix out = Matrix::Zero(c, static_cast<Eigen::Index>(h) * w);
    for (int ch = 0; ch < c; ++ch) {
        double* dst = out.row(ch).data();
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const double* src = cols.row(static_cast<Eigen::Index>(ch) * 9 + ky * 3 + kx).data();
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        dst[sy * w + sx] += src[y * w + xx];
                    }
                }
            }
        }
    }
    return out;
}

inline void init_uniform(Matrix& m, Rng& rng, double bound) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
}

}  // namespace conv

/// 1x1 convolution: weight [out x in], bias [1 x out].
struct Conv1x1 {
    Matrix weight, bias;

    Conv1x1() = default;
    Conv1x1(int in, int out, Rng& rng) : weight(out, in), bias(1, out) {
        const double b = 1.0 / std::sqrt(static_cast<double>(in));
        conv::init_uniform(weight, rng, b);
        conv::init_uniform(bias, rng, b);
    }

    int in_channels() const { return static_cast<int>(weight.cols()); }
    int out_channels() const { return static_cast<int>(weight.rows()); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "weight", weight);
        f(prefix + "bias", bias);
    }

    FeatureMap forward(const FeatureMap& x) const {
        FeatureMap y{weight * x.data, x.height, x.width};
        y.data.colwise() += bias.row(0).transpose();
        return y;
    }

    Matrix backward(const FeatureMap& x, const Matrix& dy, Conv1x1& g) const {
        g.weight.noalias() += dy * x.data.transpose();
        g.bias.row(0) += dy.rowwise().sum().transpose();
        return weight.transpose() * dy;
    }
};

/// 3x3 convolution, stride 1, zero padding 1: weight [out x in*9].
struct Conv3x3 {
    Matrix weight, bias;

    Conv3x3() = default;
    Conv3x3(int in, int out, Rng& rng) : weight(out, in * 9), bias(1, out) {
        const double b = 1.0 / std::sqrt(9.0 * in);
        conv::init_uniform(weight, rng, b);
        conv::init_uniform(bias, rng, b);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "weight", weight);
        f(prefix + "bias", bias);
    }

    FeatureMap forward(const FeatureMap& x, Matrix* cols_out = nullptr) const {
        Matrix cols = conv::im2col3x3(x);
        FeatureMap y{weight * cols, x.height, x.width};
        y.data.colwise() += bias.row(0).transpose();
        if (cols_out) *cols_out = std::move(cols);
        return y;
    }

    Matrix backward(const Matrix& cols, int in_channels, int h, int w, const Matrix& dy, Conv3x3& g) const {
        g.weight.noalias() += dy * cols.transpose();
        g.bias.row(0) += dy.rowwise().sum().transpose();
        return conv::col2im3x3(weight.transpose() * dy, in_channels, h, w);
    }
};

/// 2x2 transposed convolution with stride 2: each input pixel expands to a 2x2 block.
/// weight rows are grouped by kernel offset (ky*2+kx) * out + channel.
struct Deconv2x2 {
    Matrix weight, bias;  // [4*out x in], [1 x out]

    Deconv2x2() = default;
    Deconv2x2(int in, int out, Rng& rng) : weight(4 * out, in), bias(1, out) {
        const double b = 1.0 / std::sqrt(4.0 * out);
        conv::init_uniform(weight, rng, b);
        conv::init_uniform(bias, rng, b);
    }

    int out_channels() const { return static_cast<int>(bias.cols()); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "weight", weight);
        f(prefix + "bias", bias);
    }

    FeatureMap forward(const FeatureMap& x) const {
        const int co = out_channels(), h = x.height, w = x.width;
        const Matrix z = weight * x.data;  // [4*co x h*w]
        FeatureMap y{Matrix(co, 4 * h * w), 2 * h, 2 * w};
        const int ow = 2 * w;
        for (int off = 0; off < 4; ++off) {
            const int ky = off / 2, kx = off % 2;
            for (int c = 0; c < co; ++c) {
                const double* src = z.row(off * co + c).data();
                double* dst = y.data.row(c).data();
                const double b = bias(0, c);
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) dst[(2 * yy + ky) * ow + 2 * xx + kx] = src[yy * w + xx] + b;
            }
        }
        return y;
    }

    Matrix backward(const FeatureMap& x, const Matrix& dy, Deconv2x2& g) const {
        const int co = out_channels(), h = x.height, w = x.width, ow = 2 * w;
        Matrix dz(4 * co, h * w);
        for (int off = 0; off < 4; ++off) {
            const int ky = off / 2, kx = off % 2;
            for (int c = 0; c < co; ++c) {
                const double* src = dy.row(c).data();
                double* dst = dz.row(off * co + c).data();
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) dst[yy * w + xx] = src[(2 * yy + ky) * ow + 2 * xx + kx];
            }
        }
        g.weight.noalias() += dz * x.data.transpose();
        g.bias.row(0) += dy.rowwise().sum().transpose();
        return weight.transpose() * dz;
    }
};

/// Per-channel batch normalization over (batch, height, width).
struct BatchNorm {
    Matrix gamma, beta;                 // trainable [1 x C]
    Matrix running_mean, running_var;   // buffers [1 x C]
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm() = default;
    explicit BatchNorm(int c)
        : gamma(Matrix::Ones(1, c)), beta(Matrix::Zero(1, c)), running_mean(Matrix::Zero(1, c)), running_var(Matrix::Ones(1, c)) {}

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "gamma", gamma);
        f(prefix + "beta", beta);
    }

    template <class F>
    void visit_buffers(const std::string& prefix, F&& f) {
        f(prefix + "running_mean", running_mean);
        f(prefix + "running_var", running_var);
    }
};

struct SegBlock {
    Conv3x3 conv;
    BatchNorm norm;
    Deconv2x2 up;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        conv.visit(prefix + "conv.", f);
        norm.visit(prefix + "norm.", f);
        up.visit(prefix + "up.", f);
    }
};

/// Segmentation head: 1x1 entry projection, upsampling blocks, 1x1 to two logits.
struct SegHeadParams {
    Conv1x1 entry;
    std::vector<SegBlock> blocks;
    Conv1x1 output;

    int in_channels() const { return entry.in_channels(); }

    /// Widths: in -> 128, then each block halves (128 -> 64 -> 32), then 2.
    static SegHeadParams create(int in_channels, Rng& rng, int first_hidden = 128, int num_blocks = 2) {
        if (in_channels <= 0) throw ConfigError("seg head: input width must be positive");
        SegHeadParams p;
        p.entry = Conv1x1(in_channels, first_hidden, rng);
        int width = first_hidden;
        for (int b = 0; b < num_blocks; ++b) {
            const int next = width / 2;
            if (next < 2) throw ConfigError("seg head: too many blocks for first hidden width");
            SegBlock blk{Conv3x3(width, width, rng), BatchNorm(width), Deconv2x2(width, next, rng)};
            p.blocks.push_back(std::move(blk));
            width = next;
        }
        p.output = Conv1x1(width, 2, rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        entry.visit(prefix + "entry.", f);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + "blocks." + std::to_string(i) + ".", f);
        output.visit(prefix + "output.", f);
    }

    template <class F>
    void visit_buffers(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].norm.visit_buffers(prefix + "blocks." + std::to_string(i) + ".norm.", f);
    }

    /// Spatial scale between the patch grid and the pre-resize output.
    int upsample_factor() const { return 1 << blocks.size(); }
};

/// Concatenates per-layer joint features channel-wise on the patch grid.
inline FeatureMap to_feature_map(const JointFeature& jf) {
    FeatureMap x{Matrix(jf.channels(), jf.grid.count()), jf.grid.rows, jf.grid.cols};
    Eigen::Index off = 0;
    for (const auto& l : jf.layers) {
        if (l.rows() != jf.grid.count()) throw ConfigError("joint feature: layer rows do not match grid");
        x.data.middleRows(off, l.cols()) = l.transpose();
        off += l.cols();
    }
    return x;
}

struct SegHeadCache {
    struct BlockCache {
        FeatureMap input;
        Matrix cols;
        Matrix normalized;  // x_hat
        Vector inv_std;
        FeatureMap activated;  // after ReLU, input to deconv
        Vector batch_mean, batch_var;
    };
    std::vector<FeatureMap> inputs;                  // per sample
    std::vector<std::vector<BlockCache>> blocks;     // [sample][block]
    std::vector<FeatureMap> head_inputs;             // input to output conv
    std::vector<Map> low_res;                        // anomaly probability before resize
    int out_resolution = 0;
};

/// Runs the segmentation head on a batch. In training mode BatchNorm uses batch
/// statistics (recorded in the cache); otherwise the running statistics.
inline std::vector<Map> seg_head_forward(const SegHeadParams& params, const std::vector<const JointFeature*>& batch, int out_resolution, bool training,
                                         SegHeadCache* cache = nullptr) {
    if (batch.empty()) return {};
    if (out_resolution <= 0) throw ArgumentError("segment: output resolution must be positive");
    const std::size_t bsz = batch.size();
    std::vector<FeatureMap> x(bsz);
    for (std::size_t s = 0; s < bsz; ++s) {
        if (batch[s]->channels() != params.in_channels())
            throw ConfigError("segment: joint feature width " + std::to_string(batch[s]->channels()) + " != head input width " +
                              std::to_string(params.in_channels()));
        x[s] = to_feature_map(*batch[s]);
    }
    if (cache) {
        cache->inputs = x;
        cache->blocks.assign(bsz, std::vector<SegHeadCache::BlockCache>(params.blocks.size()));
        cache->out_resolution = out_resolution;
    }
    for (std::size_t s = 0; s < bsz; ++s) x[s] = params.entry.forward(x[s]);

    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        const SegBlock& blk = params.blocks[b];
        std::vector<FeatureMap> y(bsz);
        std::vector<Matrix> cols(bsz);
        for (std::size_t s = 0; s < bsz; ++s) y[s] = blk.conv.forward(x[s], cache ? &cols[s] : nullptr);

        const int c = y[0].channels();
        Vector mean(c), var(c);
        if (training) {
            mean.setZero();
            double count = 0.0;
            for (std::size_t s = 0; s < bsz; ++s) {
                mean += y[s].data.rowwise().sum();
                count += static_cast<double>(y[s].data.cols());
            }
            mean /= count;
            var.setZero();
            for (std::size_t s = 0; s < bsz; ++s) var += (y[s].data.colwise() - mean).rowwise().squaredNorm();
            var /= count;
        } else {
            mean = blk.norm.running_mean.row(0).transpose();
            var = blk.norm.running_var.row(0).transpose();
        }
        const Vector inv_std = (var.array() + blk.norm.eps).rsqrt().matrix();

        for (std::size_t s = 0; s < bsz; ++s) {
            Matrix xhat = (y[s].data.colwise() - mean);
            xhat.array().colwise() *= inv_std.array();
            Matrix act = xhat;
            act.array().colwise() *= blk.norm.gamma.row(0).transpose().array();
            act.colwise() += blk.norm.beta.row(0).transpose();
            act = act.cwiseMax(0.0);
            FeatureMap a{std::move(act), y[s].height, y[s].width};
            FeatureMap up = blk.up.forward(a);
            if (cache) {
                auto& bc = cache->blocks[s][b];
                bc.input = std::move(x[s]);
                bc.cols = std::move(cols[s]);
                bc.normalized = std::move(xhat);
                bc.inv_std = inv_std;
                bc.activated = std::move(a);
                bc.batch_mean = mean;
                bc.batch_var = var;
            }
            x[s] = std::move(up);
        }
    }

    std::vector<Map> maps(bsz);
    if (cache) {
        cache->head_inputs = x;
        cache->low_res.resize(bsz);
    }
    for (std::size_t s = 0; s < bsz; ++s) {
        const FeatureMap logits = params.output.forward(x[s]);
        Map prob(logits.height, logits.width);
        for (int i = 0; i < logits.height * logits.width; ++i) {
            const double t = logits.data(1, i) - logits.data(0, i);
            prob(i / logits.width, i % logits.width) = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
        }
        maps[s] = resize_bilinear(prob, out_resolution, out_resolution);
        if (cache) cache->low_res[s] = std::move(prob);
    }
    return maps;
}

/// Exponential moving update of BatchNorm running statistics from a training forward pass.
inline void seg_head_update_running_stats(SegHeadParams& params, const SegHeadCache& cache) {
    if (cache.blocks.empty()) return;
    std::size_t count = 0;
    for (const auto& fm : cache.inputs) count += static_cast<std::size_t>(fm.height) * fm.width;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        BatchNorm& bn = params.blocks[b].norm;
        const auto& bc = cache.blocks[0][b];
        const double n = static_cast<double>(count) * std::pow(4.0, static_cast<double>(b));
        const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
        bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * bc.batch_mean.transpose();
        bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * unbias * bc.batch_var.transpose();
    }
}

/// Backward pass of a training-mode forward; d_maps are gradients on the resized maps.
inline void seg_head_backward(const SegHeadParams& params, const SegHeadCache& cache, const std::vector<Map>& d_maps, SegHeadParams& grad) {
    const std::size_t bsz = d_maps.size();
    std::vector<Matrix> dx(bsz);
    for (std::size_t s = 0; s < bsz; ++s) {
        const Map& low = cache.low_res[s];
        const Map d_low = resize_bilinear_backward(d_maps[s], static_cast<int>(low.rows()), static_cast<int>(low.cols()));
        Matrix dlogits(2, low.size());
        for (Eigen::Index i = 0; i < low.size(); ++i) {
            const double p = low(i / low.cols(), i % low.cols());
            const double dt = d_low(i / low.cols(), i % low.cols()) * p * (1.0 - p);
            dlogits(1, i) = dt;
            dlogits(0, i) = -dt;
        }
        dx[s] = params.output.backward(cache.head_inputs[s], dlogits, grad.output);
    }

    for (std::size_t b = params.blocks.size(); b-- > 0;) {
        const SegBlock& blk = params.blocks[b];
        SegBlock& gblk = grad.blocks[b];
        const int c = blk.norm.gamma.cols();
        std::vector<Matrix> dxhat(bsz);
        Vector sum_dxhat = Vector::Zero(c), sum_dxhat_xhat = Vector::Zero(c);
        double count = 0.0;
        for (std::size_t s = 0; s < bsz; ++s) {
            const auto& bc = cache.blocks[s][b];
            Matrix dact = blk.up.backward(bc.activated, dx[s], gblk.up);
            dact = dact.cwiseProduct((bc.activated.data.array() > 0.0).cast<double>().matrix());
            gblk.norm.gamma.row(0) += dact.cwiseProduct(bc.normalized).rowwise().sum().transpose();
            gblk.norm.beta.row(0) += dact.rowwise().sum().transpose();
            Matrix dh = dact;
            dh.array().colwise() *= blk.norm.gamma.row(0).transpose().array();
            sum_dxhat += dh.rowwise().sum();
            sum_dxhat_xhat += dh.cwiseProduct(bc.normalized).rowwise().sum();
            count += static_cast<double>(dh.cols());
            dxhat[s] = std::move(dh);
        }
        const Vector mean_d = sum_dxhat / count;
        const Vector mean_dx = sum_dxhat_xhat / count;
        for (std::size_t s = 0; s < bsz; ++s) {
            const auto& bc = cache.blocks[s][b];
            Matrix dy = dxhat[s];
            dy.colwise() -= mean_d;
            dy -= bc.normalized.cwiseProduct(mean_dx.replicate(1, dy.cols()));
            dy.array().colwise() *= bc.inv_std.array();
            dx[s] = blk.conv.backward(bc.cols, bc.input.channels(), bc.input.height, bc.input.width, dy, gblk.conv);
        }
    }
    for (std::size_t s = 0; s < bsz; ++s) params.entry.backward(cache.inputs[s], dx[s], grad.entry);
}

/// Inference-mode segmentation of one joint feature into an out x out anomaly map.
inline Map segment(const JointFeature& jf, const SegHeadParams& params, int out_resolution) {
    return seg_head_forward(params, {&jf}, out_resolution, false).front();
}

/// MLP over pooled joint features: in -> 128 -> 64 -> ... -> 2.
struct GlobalHeadParams {
    nn::Mlp mlp;

    int in_features() const { return mlp.in_features(); }

    static std::vector<int> widths(int in, int first_hidden = 128) {
        std::vector<int> w{in};
        for (int h = first_hidden; h > 2; h /= 2) w.push_back(h);
        w.push_back(2);
        return w;
    }

    static GlobalHeadParams create(int in, Rng& rng, int first_hidden = 128) {
        GlobalHeadParams p;
        p.mlp = nn::Mlp(widths(in, first_hidden));
        for (auto& l : p.mlp.layers) l.init_uniform(rng);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        mlp.visit(prefix + "mlp.", f);
    }
};

/// (AvgPool + MaxPool) / 2 over spatial positions, per layer, concatenated.
inline Vector pool_joint_feature(const JointFeature& jf) {
    Vector out(jf.channels());
    Eigen::Index off = 0;
    for (const auto& l : jf.layers) {
        out.segment(off, l.cols()) = ((l.colwise().mean() + l.colwise().maxCoeff()) / 2.0).transpose();
        off += l.cols();
    }
    return out;
}

struct GlobalHeadCache {
    Matrix pooled;  // [1 x C]
    nn::Mlp::Cache mlp;
    double prob = 0.0;
};

inline double global_score(const JointFeature& jf, const GlobalHeadParams& params, GlobalHeadCache* cache = nullptr) {
    Matrix pooled = pool_joint_feature(jf).transpose();
    if (pooled.cols() != params.in_features())
        throw ConfigError("global_score: pooled width " + std::to_string(pooled.cols()) + " != head width " + std::to_string(params.in_features()));
    nn::Mlp::Cache local;
    nn::Mlp::Cache& mc = cache ? cache->mlp : local;
    const Matrix logits = params.mlp.forward(pooled, &mc);
    const double t = logits(0, 1) - logits(0, 0);
    const double p = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    if (cache) {
        cache->pooled = std::move(pooled);
        cache->prob = p;
    }
    return p;
}

inline void global_score_backward(const GlobalHeadParams& params, const GlobalHeadCache& cache, double d_prob, GlobalHeadParams& grad) {
    const double dt = d_prob * cache.prob * (1.0 - cache.prob);
    Matrix dlogits(1, 2);
    dlogits << -dt, dt;
    params.mlp.backward(cache.mlp, dlogits, grad.mlp);
}

}  // namespace adaptkit
