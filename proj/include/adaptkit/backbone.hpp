#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptkit/errors.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit {

struct EncoderConfig {
    int patch_size = 14;
    int embed_dim = 64;
    int text_width = 64;  // width of prompt tokens fed to the text encoder
    std::vector<int> feature_layers{6, 12, 18, 24};
    int input_resolution = 518;
    int prompt_length_capacity = 77;

    int grid_side() const { return input_resolution / patch_size; }
    int patches() const { return grid_side() * grid_side(); }
    int layer_count() const { return static_cast<int>(feature_layers.size()); }

    void validate() const {
        if (patch_size <= 0 || input_resolution <= 0) throw ConfigError("encoder: patch size and resolution must be positive");
        if (input_resolution % patch_size != 0)
            throw ConfigError("encoder: resolution " + std::to_string(input_resolution) + " is not a multiple of patch size " + std::to_string(patch_size));
        if (embed_dim <= 0 || text_width <= 0) throw ConfigError("encoder: embed_dim and text_width must be positive");
        if (feature_layers.empty()) throw ConfigError("encoder: feature_layers is empty");
        for (std::size_t i = 0; i < feature_layers.size(); ++i) {
            if (feature_layers[i] < 1) throw ConfigError("encoder: feature layer indices start at 1");
            if (i > 0 && feature_layers[i] <= feature_layers[i - 1]) throw ConfigError("encoder: feature_layers must be strictly increasing");
        }
        if (prompt_length_capacity <= 0) throw ConfigError("encoder: prompt_length_capacity must be positive");
    }

    bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = nlohmann::json{{"patch_size", c.patch_size},         {"embed_dim", c.embed_dim},
                       {"text_width", c.text_width},         {"feature_layers", c.feature_layers},
                       {"input_resolution", c.input_resolution}, {"prompt_length_capacity", c.prompt_length_capacity}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.text_width = j.value("text_width", c.embed_dim);
    c.feature_layers = j.value("feature_layers", c.feature_layers);
    c.input_resolution = j.value("input_resolution", c.input_resolution);
    c.prompt_length_capacity = j.value("prompt_length_capacity", c.prompt_length_capacity);
}

/// Patch tokens of every tapped layer plus the global image token for one image.
struct VisionFeatures {
    std::vector<Matrix> layers;  // each [grid.count() x d]
    Vector global;               // [d]
    GridShape grid;

    const Matrix& last() const { return layers.back(); }
    int dim() const { return static_cast<int>(global.size()); }

    void validate() const {
        if (layers.empty()) throw ConfigError("features: no layers");
        for (const auto& m : layers) {
            if (m.rows() != grid.count()) throw ConfigError("features: layer rows do not match the patch grid");
            if (m.cols() != global.size()) throw ConfigError("features: layer width does not match global token");
        }
    }
};

struct ClassEmbeddings {
    enum class Source { static_template, learned_prompts };

    Vector normal;
    Vector abnormal;
    Source source = Source::static_template;

    int dim() const { return static_cast<int>(normal.size()); }

    void validate(int d) const {
        if (normal.size() != d || abnormal.size() != d) throw ConfigError("class embeddings: dimension mismatch with tokens");
        if (!normal.allFinite() || !abnormal.allFinite()) throw ConfigError("class embeddings: non-finite values");
    }
};

/// Frozen image/text encoder pair. Implementations are immutable after construction.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string id() const = 0;
    virtual const EncoderConfig& config() const = 0;
    /// Options needed to rebuild an identical backend through the registry.
    virtual nlohmann::json options() const = 0;

    /// `image` must already be square at config().input_resolution.
    virtual VisionFeatures encode_image(const Image& image) const = 0;

    /// Word-level token embeddings [r x text_width] for a text template.
    virtual Matrix tokenize(std::string_view text) const = 0;

    /// Text encoder applied to raw prompt tokens; output is unit norm.
    virtual Vector encode_prompt_tokens(const Matrix& tokens) const = 0;

    /// Vector-Jacobian product of encode_prompt_tokens: dL/dtokens given dL/doutput.
    virtual Matrix prompt_tokens_vjp(const Matrix& tokens, const Vector& grad_output) const = 0;

protected:
    void check_image(const Image& image) const {
        const auto& c = config();
        if (image.height != c.input_resolution || image.width != c.input_resolution)
            throw ConfigError("encode_image: expected " + std::to_string(c.input_resolution) + "x" + std::to_string(c.input_resolution) + " input, got " +
                              std::to_string(image.height) + "x" + std::to_string(image.width));
    }

    void check_prompt(const Matrix& tokens) const {
        const auto& c = config();
        if (tokens.rows() <= 0) throw ArgumentError("prompt tokens: empty prompt");
        if (tokens.rows() > c.prompt_length_capacity)
            throw ArgumentError("prompt tokens: length " + std::to_string(tokens.rows()) + " exceeds capacity " + std::to_string(c.prompt_length_capacity));
        if (tokens.cols() != c.text_width)
            throw ConfigError("prompt tokens: width " + std::to_string(tokens.cols()) + " != text width " + std::to_string(c.text_width));
    }
};

using BackbonePtr = std::shared_ptr<const Backbone>;

inline VisionFeatures encode_image(const Image& image, const Backbone& backbone) { return backbone.encode_image(image); }

inline Vector encode_prompt_tokens(const Backbone& backbone, const Matrix& tokens) { return backbone.encode_prompt_tokens(tokens); }

inline const std::vector<std::string>& default_normal_templates() {
    static const std::vector<std::string> t{"a photo of a normal object"};
    return t;
}

inline const std::vector<std::string>& default_abnormal_templates() {
    static const std::vector<std::string> t{"a photo of a damaged object"};
    return t;
}

/// Per-class mean of template embeddings, re-normalized.
inline ClassEmbeddings encode_static_text(const Backbone& backbone, const std::vector<std::string>& normal_templates,
                                          const std::vector<std::string>& abnormal_templates) {
    if (normal_templates.empty() || abnormal_templates.empty()) throw ArgumentError("encode_static_text: template lists must be non-empty");
    auto encode_class = [&](const std::vector<std::string>& templates) {
        Vector acc = Vector::Zero(backbone.config().embed_dim);
        for (const auto& t : templates) acc += backbone.encode_prompt_tokens(backbone.tokenize(t));
        acc /= static_cast<double>(templates.size());
        const double n = acc.norm();
        if (!(n > 0.0)) throw BackendError("encode_static_text: degenerate template embedding");
        return Vector(acc / n);
    };
    ClassEmbeddings out;
    out.normal = encode_class(normal_templates);
    out.abnormal = encode_class(abnormal_templates);
    out.source = ClassEmbeddings::Source::static_template;
    return out;
}

inline ClassEmbeddings encode_static_text(const Backbone& backbone) {
    return encode_static_text(backbone, default_normal_templates(), default_abnormal_templates());
}

/// Seed-deterministic stand-in for a CLIP encoder pair.
///
/// Image side: each patch is hashed by a seeded random projection of its normalized
/// pixels plus a few local statistics (a locality-sensitive hash), then refined by a
/// stack of residual layers that mix each token with its 3x3 neighbourhood. Identical
/// neighbourhoods therefore give identical tokens wherever they occur. Tapped layers
/// additionally carry a "grounding" component along a fixed unit direction u, scaled by
/// how far the patch statistics deviate from the image median; this plays the role of
/// CLIP's prior that irregular regions look "damaged".
///
/// Text side: words are hashed to token vectors; a small lexicon of normal/abnormal
/// words is shifted along a fixed token direction e, and the encoder maps the mean
/// token's e-component onto u. Output embeddings are L2-normalized.
class SyntheticBackbone final : public Backbone {
public:
    struct Options {
        std::uint64_t seed = 0;
        double stats_gain = 1.0;
        double image_grounding = 4.0;
        double text_grounding = 2.0;
        double lexicon_strength = 3.0;
    };

    SyntheticBackbone(EncoderConfig config, Options options) : config_(std::move(config)), opt_(options) {
        config_.validate();
        init_weights();
    }

    explicit SyntheticBackbone(EncoderConfig config) : SyntheticBackbone(std::move(config), Options{}) {}

    std::string id() const override { return "synthetic"; }
    const EncoderConfig& config() const override { return config_; }

    nlohmann::json options() const override {
        return {{"encoder", config_},
                {"seed", opt_.seed},
                {"stats_gain", opt_.stats_gain},
                {"image_grounding", opt_.image_grounding},
                {"text_grounding", opt_.text_grounding},
                {"lexicon_strength", opt_.lexicon_strength}};
    }

    static Options options_from_json(const nlohmann::json& j) {
        Options o;
        o.seed = j.value("seed", o.seed);
        o.stats_gain = j.value("stats_gain", o.stats_gain);
        o.image_grounding = j.value("image_grounding", o.image_grounding);
        o.text_grounding = j.value("text_grounding", o.text_grounding);
        o.lexicon_strength = j.value("lexicon_strength", o.lexicon_strength);
        return o;
    }

    static constexpr int kStats = 9;

    /// Layer-0 token of every patch: hashed pixels + statistics, no neighbourhood mixing.
    Matrix patch_embedding(const Image& image, Matrix* stats_out = nullptr) const {
        check_image(image);
        const int p = config_.patch_size;
        const int g = config_.grid_side();
        const int n = g * g;
        const int raw_dim = p * p * 3;
        Matrix raw(n, raw_dim);
        Matrix stats(n, kStats);
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                const int idx = gy * g + gx;
                double* r = raw.row(idx).data();
                double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0}, grad[3] = {0, 0, 0};
                for (int y = 0; y < p; ++y) {
                    for (int x = 0; x < p; ++x) {
                        for (int c = 0; c < 3; ++c) {
                            const double v = normalized(image, gy * p + y, gx * p + x, c);
                            *r++ = v;
                            sum[c] += v;
                            sq[c] += v * v;
                            if (x + 1 < p) grad[c] += std::abs(normalized(image, gy * p + y, gx * p + x + 1, c) - v);
                            if (y + 1 < p) grad[c] += std::abs(normalized(image, gy * p + y + 1, gx * p + x, c) - v);
                        }
                    }
                }
                const double cnt = static_cast<double>(p) * p;
                const double gcnt = std::max(1.0, 2.0 * p * (p - 1));
                for (int c = 0; c < 3; ++c) {
                    const double mean = sum[c] / cnt;
                    stats(idx, c) = mean;
                    stats(idx, 3 + c) = std::sqrt(std::max(0.0, sq[c] / cnt - mean * mean));
                    stats(idx, 6 + c) = grad[c] / gcnt;
                }
            }
        }
        Matrix h = raw * pixel_proj_.transpose() / std::sqrt(static_cast<double>(raw_dim));
        h.noalias() += opt_.stats_gain * stats * stats_proj_.transpose();
        h = h.array().tanh().matrix();
        if (stats_out) *stats_out = std::move(stats);
        return h;
    }

    VisionFeatures encode_image(const Image& image) const override {
        Matrix stats;
        Matrix h = patch_embedding(image, &stats);
        const int g = config_.grid_side();
        const int d = config_.embed_dim;
        const int depth = config_.feature_layers.back();
        const double step = 1.0 / std::sqrt(static_cast<double>(depth));
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

        const Vector saliency = patch_saliency(stats);

        VisionFeatures out;
        out.grid = {g, g};
        std::size_t next_tap = 0;
        for (int layer = 1; layer <= depth; ++layer) {
            const Matrix ctx = neighbourhood_mean(h, g);
            Matrix pre = (h * mix_self_.transpose() + ctx * mix_ctx_.transpose()) * inv_sqrt_d;
            pre.array().rowwise() *= layer_signs_.row(layer - 1).array();
            h += step * pre.array().tanh().matrix();
            if (next_tap < config_.feature_layers.size() && config_.feature_layers[next_tap] == layer) {
                Matrix tok = h;
                const double weight = opt_.image_grounding * static_cast<double>(layer) / depth;
                tok.noalias() += weight * saliency * grounding_image_.transpose();
                tok.rowwise().normalize();
                out.layers.push_back(std::move(tok));
                ++next_tap;
            }
        }
        out.global = out.layers.back().colwise().mean().transpose();
        return out;
    }

    Matrix tokenize(std::string_view text) const override {
        std::vector<std::string> words;
        std::string cur;
        for (char ch : text) {
            if (std::isalnum(static_cast<unsigned char>(ch))) {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            } else if (!cur.empty()) {
                words.push_back(std::move(cur));
                cur.clear();
            }
        }
        if (!cur.empty()) words.push_back(std::move(cur));
        if (words.empty()) throw ArgumentError("tokenize: template has no words");
        if (static_cast<int>(words.size()) > config_.prompt_length_capacity) words.resize(config_.prompt_length_capacity);

        const int dt = config_.text_width;
        Matrix tokens(static_cast<int>(words.size()), dt);
        for (std::size_t i = 0; i < words.size(); ++i) {
            Rng rng(mix_seed(opt_.seed ^ 0x7e87ULL, fnv1a(words[i])));
            for (int k = 0; k < dt; ++k) tokens(static_cast<Eigen::Index>(i), k) = rng.normal() / std::sqrt(static_cast<double>(dt));
            const int polarity = lexicon_polarity(words[i]);
            if (polarity != 0) tokens.row(static_cast<Eigen::Index>(i)) += polarity * opt_.lexicon_strength * lexicon_dir_.transpose();
        }
        return tokens;
    }

    Vector encode_prompt_tokens(const Matrix& tokens) const override {
        check_prompt(tokens);
        TextForward f = text_forward(tokens);
        return f.z / f.z.norm();
    }

    Matrix prompt_tokens_vjp(const Matrix& tokens, const Vector& grad_output) const override {
        check_prompt(tokens);
        TextForward f = text_forward(tokens);
        const double zn = f.z.norm();
        const Vector out = f.z / zn;
        const Vector dz = (grad_output - out * out.dot(grad_output)) / zn;
        const Vector dh = text_out_.transpose() * dz;
        const double r = static_cast<double>(tokens.rows());
        const Vector dmean = opt_.text_grounding * grounding_image_.dot(dz) * lexicon_dir_;
        Matrix dpre = (1.0 - f.act.array().square()).matrix();
        dpre.array().rowwise() *= dh.transpose().array();
        dpre /= r;
        Matrix dx = dpre * text_in_;
        dx.rowwise() += (dmean / r).transpose();
        return dx;
    }

    /// Unit direction that image tokens of irregular patches lean towards.
    const Vector& grounding_direction() const { return grounding_image_; }

private:
    struct TextForward {
        Matrix act;  // tanh of per-token pre-activations [r x dt]
        Vector z;    // unnormalized output [d]
    };

    TextForward text_forward(const Matrix& tokens) const {
        const auto r = tokens.rows();
        Matrix shifted = tokens + text_pos_.topRows(r);
        TextForward f;
        f.act = (shifted * text_in_.transpose()).array().tanh().matrix();
        const Vector h = f.act.colwise().mean().transpose();
        const Vector mean_tok = tokens.colwise().mean().transpose();
        f.z = text_out_ * h + opt_.text_grounding * lexicon_dir_.dot(mean_tok) * grounding_image_;
        return f;
    }

    static int lexicon_polarity(const std::string& w) {
        static const char* abnormal[] = {"damaged", "defective", "defect", "broken", "anomalous", "abnormal", "flawed", "scratched", "cracked", "contaminated"};
        static const char* normal[] = {"normal", "flawless", "perfect", "unblemished", "good", "intact", "clean"};
        for (const char* a : abnormal)
            if (w == a) return 1;
        for (const char* nrm : normal)
            if (w == nrm) return -1;
        return 0;
    }

    double normalized(const Image& im, int y, int x, int c) const {
        static constexpr double mean[3] = {0.48145466, 0.4578275, 0.40821073};
        static constexpr double stdv[3] = {0.26862954, 0.26130258, 0.27577711};
        return (im.at(y, x, c) - mean[c]) / stdv[c];
    }

    /// Distance of each patch's statistics from the per-image median statistics.
    static Vector patch_saliency(const Matrix& stats) {
        const auto n = stats.rows();
        Vector median(stats.cols());
        std::vector<double> col(static_cast<std::size_t>(n));
        for (Eigen::Index c = 0; c < stats.cols(); ++c) {
            for (Eigen::Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = stats(i, c);
            auto mid = col.begin() + n / 2;
            std::nth_element(col.begin(), mid, col.end());
            median(c) = *mid;
        }
        Vector s(n);
        for (Eigen::Index i = 0; i < n; ++i) s(i) = (stats.row(i) - median.transpose()).norm();
        return s;
    }

    /// Mean over the in-bounds 3x3 neighbourhood (centre included).
    static Matrix neighbourhood_mean(const Matrix& h, int g) {
        Matrix out = Matrix::Zero(h.rows(), h.cols());
        for (int y = 0; y < g; ++y) {
            for (int x = 0; x < g; ++x) {
                int cnt = 0;
                auto dst = out.row(y * g + x);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= g || xx < 0 || xx >= g) continue;
                        dst += h.row(yy * g + xx);
                        ++cnt;
                    }
                }
                dst /= cnt;
            }
        }
        return out;
    }

    static Matrix gaussian(Rng& rng, int rows, int cols, double scale) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
        return m;
    }

    static Vector unit_vector(Rng& rng, int n) {
        Vector v(n);
        for (int i = 0; i < n; ++i) v(i) = rng.normal();
        return v / v.norm();
    }

    void init_weights() {
        const int d = config_.embed_dim;
        const int dt = config_.text_width;
        const int p = config_.patch_size;
        Rng rng(mix_seed(opt_.seed, 0x5eedULL));
        pixel_proj_ = gaussian(rng, d, p * p * 3, 1.0);
        stats_proj_ = gaussian(rng, d, kStats, 1.0);
        mix_self_ = gaussian(rng, d, d, 1.0);
        mix_ctx_ = gaussian(rng, d, d, 1.0);
        const int depth = config_.feature_layers.back();
        layer_signs_.resize(depth, d);
        for (Eigen::Index i = 0; i < layer_signs_.size(); ++i) layer_signs_.data()[i] = (rng.next() & 1ULL) ? 1.0 : -1.0;
        grounding_image_ = unit_vector(rng, d);

        Rng trng(mix_seed(opt_.seed, 0x7e47ULL));
        text_in_ = gaussian(trng, dt, dt, 1.0 / std::sqrt(static_cast<double>(dt)));
        text_pos_ = gaussian(trng, config_.prompt_length_capacity, dt, 0.1);
        text_out_ = gaussian(trng, d, dt, 1.0 / std::sqrt(static_cast<double>(dt)));
        lexicon_dir_ = unit_vector(trng, dt);
    }

    EncoderConfig config_;
    Options opt_;
    Matrix pixel_proj_, stats_proj_, mix_self_, mix_ctx_, layer_signs_;
    Vector grounding_image_;
    Matrix text_in_, text_pos_, text_out_;
    Vector lexicon_dir_;
};

/// String-keyed factory table for backends.
class BackboneRegistry {
public:
    using Factory = std::function<BackbonePtr(const nlohmann::json& options)>;

    static BackboneRegistry& instance() {
        static BackboneRegistry reg;
        return reg;
    }

    void add(const std::string& id, Factory f) {
        std::lock_guard lock(mu_);
        factories_[id] = std::move(f);
    }

    BackbonePtr create(const std::string& id, const nlohmann::json& options = nlohmann::json::object()) const {
        Factory f;
        {
            std::lock_guard lock(mu_);
            auto it = factories_.find(id);
            if (it == factories_.end()) throw BackendError("unknown backbone id '" + id + "'");
            f = it->second;
        }
        return f(options);
    }

    std::vector<std::string> ids() const {
        std::lock_guard lock(mu_);
        std::vector<std::string> out;
        for (const auto& [k, v] : factories_) out.push_back(k);
        return out;
    }

private:
    BackboneRegistry() {
        factories_["synthetic"] = [](const nlohmann::json& o) -> BackbonePtr {
            EncoderConfig cfg = o.contains("encoder") ? o.at("encoder").get<EncoderConfig>() : EncoderConfig{};
            return std::make_shared<SyntheticBackbone>(cfg, SyntheticBackbone::options_from_json(o));
        };
        // Pre-trained ViT-L/14@336 weights are not bundled; an application that has a
        // loader registers its own factory under this id, replacing this one.
        factories_["clip-vit-l-14-336"] = [](const nlohmann::json& o) -> BackbonePtr {
            const std::string path = o.value("weights_path", "");
            if (path.empty()) throw BackendError("backbone 'clip-vit-l-14-336' needs pre-trained weights; set ADAPTKIT_BACKBONE_PATH");
            throw BackendError("backbone 'clip-vit-l-14-336': no weight loader is registered in this build (weights at '" + path + "')");
        };
    }

    mutable std::mutex mu_;
    std::map<std::string, Factory> factories_;
};

inline BackbonePtr make_backbone(const std::string& id, const nlohmann::json& options = nlohmann::json::object()) {
    return BackboneRegistry::instance().create(id, options);
}

}  // namespace adaptkit
