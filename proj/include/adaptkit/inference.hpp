#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "adaptkit/adapters.hpp"
#include "adaptkit/backbone.hpp"
#include "adaptkit/checkpoint.hpp"
#include "adaptkit/data.hpp"
#include "adaptkit/prompt_query.hpp"
#include "adaptkit/resize.hpp"

namespace adaptkit {

/// Output of one branch before fusion.
struct BranchOutput {
    std::string name;  // "visual", "textual", "joint" or "prompt_query"
    double score = 0.0;
    Map map;
};

struct Prediction {
    std::string path;  // source image, empty for in-memory inputs
    double score = 0.0;
    Map map;  // input resolution, values in [0,1]
    std::vector<BranchOutput> branches;
    int shots = 0;

    const BranchOutput* branch(const std::string& name) const {
        for (const auto& b : branches)
            if (b.name == name) return &b;
        return nullptr;
    }
};

/// Arithmetic mean of the branch scores and maps, summed in branch order.
inline void fuse(Prediction& p) {
    if (p.branches.empty()) throw ArgumentError("fuse: prediction has no branches");
    const double n = static_cast<double>(p.branches.size());
    double s = 0.0;
    Map m = Map::Zero(p.branches.front().map.rows(), p.branches.front().map.cols());
    for (const auto& b : p.branches) {
        if (b.map.rows() != m.rows() || b.map.cols() != m.cols()) throw ConfigError("fuse: branch maps differ in shape");
        s += b.score;
        m += b.map;
    }
    p.score = s / n;
    p.map = m / n;
}

/// Error raised by predict_batch; keeps the exit code of the underlying failure.
class BatchItemError : public Error {
public:
    BatchItemError(std::size_t index, ExitCode code, const std::string& what)
        : Error("image " + std::to_string(index) + ": " + what), index_(index), code_(code) {}
    ExitCode code() const noexcept override { return code_; }
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
    ExitCode code_;
};

struct PredictOptions {
    bool prompt_query = true;  // false: few-shot call falls back to the zero-shot fusion
    bool keep_branches = true;
};

/// Read-only predictor over a frozen backbone and a trained checkpoint.
/// Safe to call concurrently from several threads.
class Predictor {
public:
    Predictor(BackbonePtr backbone, Checkpoint ckpt) : backbone_(std::move(backbone)), ckpt_(std::move(ckpt)) {
        if (!backbone_) throw BackendError("predictor: no backbone");
        if (backbone_->id() != ckpt_.backbone_id)
            throw CheckpointError("checkpoint was trained with backbone '" + ckpt_.backbone_id + "', got '" + backbone_->id() + "'");
        if (!(backbone_->config() == ckpt_.encoder)) throw CheckpointError("checkpoint encoder configuration does not match the backbone");
        if (!ckpt_.has_zero_shot()) throw CheckpointError("checkpoint lacks visual/textual adapter parameters");
        detail::check_temperature(ckpt_.train.temperature);
        static_emb_ = encode_static_text(*backbone_, ckpt_.normal_templates, ckpt_.abnormal_templates);
        learned_emb_ = textual_adapt(ckpt_.params.textual, *backbone_);
    }

    explicit Predictor(Checkpoint ckpt) : Predictor(ckpt.make_backbone(), ckpt) {}

    const Backbone& backbone() const { return *backbone_; }
    const Checkpoint& checkpoint() const { return ckpt_; }
    int resolution() const { return backbone_->config().input_resolution; }

    /// Resizes to the encoder resolution when needed.
    Image prepare(const Image& image) const {
        const int r = resolution();
        if (image.height == r && image.width == r) return image;
        return resize_bilinear(image, r, r);
    }

    VisionFeatures encode(const Image& image) const { return backbone_->encode_image(prepare(image)); }

    PromptBank make_bank(const std::vector<Image>& prompts, std::optional<std::string> class_id = std::nullopt) const {
        std::vector<Image> prepared;
        prepared.reserve(prompts.size());
        for (const auto& p : prompts) prepared.push_back(prepare(p));
        return build_prompt_bank(prepared, static_cast<int>(prepared.size()), *backbone_, std::move(class_id));
    }

    Prediction predict_zero_shot(const Image& image, const PredictOptions& opt = {}) const { return from_features(encode(image), nullptr, opt); }

    Prediction predict_few_shot(const Image& image, const PromptBank& bank, const PredictOptions& opt = {}) const {
        if (bank.empty()) throw ArgumentError("predict_few_shot: empty prompt bank");
        return from_features(encode(image), &bank, opt);
    }

    /// Branch outputs and fusion from already-encoded features; `bank` null means zero-shot.
    Prediction from_features(const VisionFeatures& f, const PromptBank* bank, const PredictOptions& opt = {}) const {
        f.validate();
        const int res = resolution();
        const double tau = ckpt_.train.temperature;
        Prediction p;
        const VisionFeatures adapted = visual_adapt(f, ckpt_.params.visual);
        auto branch = [&](const char* name, const Matrix& tokens, const Vector& global, const ClassEmbeddings& emb) {
            BranchOutput b;
            b.name = name;
            b.score = score_image(global, emb, tau);
            b.map = resize_bilinear(score_pixels(tokens, emb, tau, f.grid), res, res);
            p.branches.push_back(std::move(b));
        };
        if (ckpt_.train.mode == TrainMode::joint) {
            // Both adapters were trained together as a single scorer.
            branch("joint", adapted.last(), adapted.global, learned_emb_);
        } else {
            branch("visual", adapted.last(), adapted.global, static_emb_);
            branch("textual", f.last(), f.global, learned_emb_);
        }
        if (bank && opt.prompt_query) {
            if (bank->empty()) throw ArgumentError("predict: empty prompt bank");
            const JointFeature jf = joint_feature(f, *bank, uses_context(ckpt_.train.mode));
            BranchOutput b;
            b.name = "prompt_query";
            b.score = global_score(jf, ckpt_.params.global_head);
            b.map = segment(jf, ckpt_.params.seg_head, res);
            p.branches.push_back(std::move(b));
            p.shots = bank->shots;
        }
        fuse(p);
        if (!opt.keep_branches) p.branches.clear();
        return p;
    }

    /// Order-preserving; the result does not depend on `workers`.
    std::vector<Prediction> predict_batch(const std::vector<Image>& images, const PromptBank* bank, int workers, const PredictOptions& opt = {}) const {
        if (workers < 1) throw ArgumentError("predict_batch: workers must be >= 1");
        if (bank && bank->empty()) throw ArgumentError("predict_batch: empty prompt bank");
        std::vector<Prediction> out(images.size());
        std::vector<std::exception_ptr> errors(images.size());
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i = next++; i < images.size(); i = next++) {
                try {
                    out[i] = from_features(encode(images[i]), bank, opt);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        };
        const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), images.size());
        if (n_threads <= 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
            for (auto& t : pool) t.join();
        }
        for (std::size_t i = 0; i < errors.size(); ++i) {
            if (!errors[i]) continue;
            try {
                std::rethrow_exception(errors[i]);
            } catch (const Error& e) {
                throw BatchItemError(i, e.code(), e.what());
            } catch (const std::exception& e) {
                throw BatchItemError(i, ExitCode::internal, e.what());
            }
        }
        return out;
    }

private:
    BackbonePtr backbone_;
    Checkpoint ckpt_;
    ClassEmbeddings static_emb_;
    ClassEmbeddings learned_emb_;
};

// -- export ------------------------------------------------------------------

inline nlohmann::json prediction_record(const Prediction& p) {
    nlohmann::json branches = nlohmann::json::object();
    for (const auto& b : p.branches) branches[b.name] = b.score;
    return {{"path", p.path}, {"score", p.score}, {"shots", p.shots}, {"branch_scores", branches}};
}

/// Raw map values as 8-bit gray, resized to the original image size.
inline cv::Mat map_to_gray(const Map& map, int height, int width) {
    return data::to_cv_gray(resize_bilinear(map, height, width));
}

/// False-colour overlay; the map is min-max normalized per image for display only.
inline cv::Mat map_overlay(const Image& original, const Map& map, double alpha = 0.5) {
    Map m = resize_bilinear(map, original.height, original.width);
    const double lo = m.minCoeff(), hi = m.maxCoeff();
    m = hi > lo ? Map((m.array() - lo) / (hi - lo)) : Map(Map::Zero(m.rows(), m.cols()));
    cv::Mat heat;
    cv::applyColorMap(data::to_cv_gray(m), heat, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(data::to_cv(original), 1.0 - alpha, heat, alpha, 0.0, blended);
    return blended;
}

struct ExportedFiles {
    std::filesystem::path json, map, overlay;
};

/// Writes <stem>.json, <stem>_map.png and <stem>_overlay.png into `dir`.
inline ExportedFiles export_prediction(const Prediction& p, const Image& original, const std::filesystem::path& dir, const std::string& stem) {
    ExportedFiles f{dir / (stem + ".json"), dir / (stem + "_map.png"), dir / (stem + "_overlay.png")};
    std::filesystem::create_directories(dir);
    std::ofstream js(f.json, std::ios::trunc);
    if (!js) throw DataError("cannot write '" + f.json.string() + "'");
    js << prediction_record(p).dump(2) << '\n';
    data::write_png(f.map, map_to_gray(p.map, original.height, original.width));
    data::write_png(f.overlay, map_overlay(original, p.map));
    return f;
}

}  // namespace adaptkit
