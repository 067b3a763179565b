#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "adaptkit/adapters.hpp"
#include "adaptkit/backbone.hpp"
#include "adaptkit/checkpoint.hpp"
#include "adaptkit/data.hpp"
#include "adaptkit/losses.hpp"
#include "adaptkit/model.hpp"
#include "adaptkit/nn.hpp"
#include "adaptkit/optim.hpp"
#include "adaptkit/prompt_query.hpp"
#include "adaptkit/resize.hpp"

namespace adaptkit {

/// A training image after the frozen encoder: features plus its label and mask.
struct EncodedSample {
    VisionFeatures features;
    Map mask;  // input resolution, values in {0,1}
    int label = 0;
    std::string category;
};

/// Queries with one normal prompt each.
struct TrainBatch {
    std::vector<const EncodedSample*> queries;
    std::vector<const EncodedSample*> prompts;

    std::size_t size() const { return queries.size(); }

    void validate(bool need_prompts) const {
        if (queries.empty()) throw ArgumentError("train batch is empty");
        if (need_prompts && prompts.size() != queries.size()) throw ArgumentError("train batch: one prompt per query required");
        for (const auto* q : queries) {
            const bool any = q->mask.size() > 0 && q->mask.maxCoeff() > 0.5;
            if (any != (q->label == 1)) throw ProtocolError("train batch: mask/label disagree for a '" + q->category + "' sample");
        }
        if (need_prompts)
            for (const auto* p : prompts)
                if (p->label != 0) throw ProtocolError("train batch: prompt images must be normal");
    }
};

struct BranchLoss {
    double ce = 0.0;
    double focal = 0.0;
    double dice = 0.0;

    double total() const { return ce + focal + dice; }

    BranchLoss& operator+=(const BranchLoss& o) {
        ce += o.ce;
        focal += o.focal;
        dice += o.dice;
        return *this;
    }
    BranchLoss& operator/=(double s) {
        ce /= s;
        focal /= s;
        dice /= s;
        return *this;
    }
};

/// Batch-mean losses. In joint mode the joint branch is reported as `visual`.
struct LossReport {
    BranchLoss visual;
    BranchLoss textual;
    BranchLoss prompt_query;
    double total = 0.0;
    long step = 0;
};

namespace detail {

inline Map grid_of(const Vector& s, GridShape g) {
    Map m(g.rows, g.cols);
    for (int i = 0; i < g.count(); ++i) m(i / g.cols, i % g.cols) = s(i);
    return m;
}

inline Vector flatten(const Map& m) {
    Vector v(m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) v(i) = m(i / m.cols(), i % m.cols());
    return v;
}

inline void check_finite(double v, long step, const char* branch) {
    if (!std::isfinite(v)) throw NumericError("non-finite loss at step " + std::to_string(step) + " in branch '" + branch + "'");
}

/// Loss of one cosine-softmax branch (pixel map + image score) with gradients
/// with respect to the scored tokens, the global token and both class embeddings.
struct ScoringBranchResult {
    BranchLoss loss;
    Matrix d_tokens;
    Vector d_global;
    Vector d_normal;
    Vector d_abnormal;
};

inline ScoringBranchResult scoring_branch(const Matrix& tokens, const Vector& global, GridShape grid, const ClassEmbeddings& emb, const EncodedSample& q,
                                          const TrainConfig& cfg, double scale, bool want_grad) {
    ScoringBranchResult r;
    const int res = static_cast<int>(q.mask.rows());
    const Vector s = score_tokens(tokens, emb, cfg.temperature);
    const Map map = resize_bilinear(grid_of(s, grid), res, res);
    Map gf, gd;
    r.loss.focal = loss::focal_loss(map, q.mask, cfg.focal_gamma, cfg.focal_alpha, want_grad ? &gf : nullptr);
    r.loss.dice = loss::dice_loss(map, q.mask, cfg.dice_smooth, want_grad ? &gd : nullptr);
    const double img = score_image(global, emb, cfg.temperature);
    r.loss.ce = loss::classification_loss(img, q.label);
    r.loss.focal *= cfg.weight_focal;
    r.loss.dice *= cfg.weight_dice;
    r.loss.ce *= cfg.weight_ce;
    if (!want_grad) return r;

    const Map d_map = (cfg.weight_focal * gf + cfg.weight_dice * gd) * scale;
    const Vector d_scores = flatten(resize_bilinear_backward(d_map, grid.rows, grid.cols));
    ScoreGrad pg = score_tokens_backward(tokens, emb, cfg.temperature, d_scores);
    Matrix g = global.transpose();
    Vector d_img(1);
    d_img(0) = cfg.weight_ce * loss::classification_loss_grad(img, q.label) * scale;
    ScoreGrad gg = score_tokens_backward(g, emb, cfg.temperature, d_img);
    r.d_tokens = std::move(pg.tokens);
    r.d_global = gg.tokens.row(0).transpose();
    r.d_normal = pg.normal + gg.normal;
    r.d_abnormal = pg.abnormal + gg.abnormal;
    return r;
}

}  // namespace detail

/// Forward (and optionally backward) pass of every branch the mode trains.
/// Gradients are of the batch-mean loss.
inline LossReport compute_losses(const TrainBatch& batch, const AdapterParams& params, const Backbone& backbone, const ClassEmbeddings& static_emb,
                                 const TrainConfig& cfg, AdapterParams* grads, SegHeadCache* seg_cache = nullptr) {
    const bool zero_shot = trains_zero_shot(cfg.mode);
    const bool pq = trains_prompt_query(cfg.mode);
    batch.validate(pq);
    const double scale = 1.0 / static_cast<double>(batch.size());
    const bool want_grad = grads != nullptr;
    LossReport rep;

    if (zero_shot) {
        const ClassEmbeddings learned = textual_adapt(params.textual, backbone);
        Vector d_wn = Vector::Zero(learned.dim()), d_wa = Vector::Zero(learned.dim());
        for (const EncodedSample* q : batch.queries) {
            const VisionFeatures& f = q->features;
            VisualAdaptCache vc;
            const VisionFeatures adapted = visual_adapt(f, params.visual, want_grad ? &vc : nullptr);
            if (cfg.mode == TrainMode::joint) {
                auto r = detail::scoring_branch(adapted.last(), adapted.global, f.grid, learned, *q, cfg, scale, want_grad);
                rep.visual += r.loss;
                if (want_grad) {
                    visual_adapt_backward(params.visual, vc, r.d_tokens, r.d_global, grads->visual);
                    d_wn += r.d_normal;
                    d_wa += r.d_abnormal;
                }
            } else {
                auto rv = detail::scoring_branch(adapted.last(), adapted.global, f.grid, static_emb, *q, cfg, scale, want_grad);
                rep.visual += rv.loss;
                if (want_grad) visual_adapt_backward(params.visual, vc, rv.d_tokens, rv.d_global, grads->visual);
                auto rt = detail::scoring_branch(f.last(), f.global, f.grid, learned, *q, cfg, scale, want_grad);
                rep.textual += rt.loss;
                if (want_grad) {
                    d_wn += rt.d_normal;
                    d_wa += rt.d_abnormal;
                }
            }
        }
        if (want_grad) textual_adapt_backward(params.textual, backbone, d_wn, d_wa, grads->textual);
    }

    if (pq) {
        const bool context = uses_context(cfg.mode);
        std::vector<JointFeature> joints;
        joints.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            PromptBank bank;
            bank.layers = batch.prompts[i]->features.layers;
            bank.shots = 1;
            joints.push_back(joint_feature(batch.queries[i]->features, bank, context));
        }
        std::vector<const JointFeature*> ptrs;
        for (const auto& j : joints) ptrs.push_back(&j);
        const int res = static_cast<int>(batch.queries.front()->mask.rows());
        SegHeadCache local_cache;
        SegHeadCache& cache = seg_cache ? *seg_cache : local_cache;
        const std::vector<Map> maps = seg_head_forward(params.seg_head, ptrs, res, true, &cache);
        std::vector<Map> d_maps(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const EncodedSample& q = *batch.queries[i];
            Map gf, gd;
            BranchLoss l;
            l.focal = cfg.weight_focal * loss::focal_loss(maps[i], q.mask, cfg.focal_gamma, cfg.focal_alpha, want_grad ? &gf : nullptr);
            l.dice = cfg.weight_dice * loss::dice_loss(maps[i], q.mask, cfg.dice_smooth, want_grad ? &gd : nullptr);
            GlobalHeadCache gc;
            const double p = global_score(joints[i], params.global_head, &gc);
            l.ce = cfg.weight_ce * loss::classification_loss(p, q.label);
            rep.prompt_query += l;
            if (want_grad) {
                d_maps[i] = (cfg.weight_focal * gf + cfg.weight_dice * gd) * scale;
                global_score_backward(params.global_head, gc, cfg.weight_ce * loss::classification_loss_grad(p, q.label) * scale, grads->global_head);
            }
        }
        if (want_grad) seg_head_backward(params.seg_head, cache, d_maps, grads->seg_head);
    }

    rep.visual /= static_cast<double>(batch.size());
    rep.textual /= static_cast<double>(batch.size());
    rep.prompt_query /= static_cast<double>(batch.size());
    rep.total = rep.visual.total() + rep.textual.total() + rep.prompt_query.total();
    return rep;
}

/// Names of the parameter groups a mode updates.
inline nn::ParamList trainable_params(AdapterParams& p, TrainMode mode) {
    nn::ParamList out;
    auto add = [&](nn::ParamList l) { out.insert(out.end(), l.begin(), l.end()); };
    if (trains_zero_shot(mode)) {
        add(nn::params_of(p.visual, "visual."));
        add(nn::params_of(p.textual, "textual."));
    }
    if (trains_prompt_query(mode)) {
        add(nn::params_of(p.seg_head, "seg_head."));
        add(nn::params_of(p.global_head, "global_head."));
    }
    return out;
}

/// Owns the adapter parameters and optimizer state during training.
class Trainer {
public:
    Trainer(BackbonePtr backbone, TrainConfig cfg, AdapterParams init)
        : backbone_(std::move(backbone)),
          cfg_(cfg),
          params_(std::move(init)),
          optimizer_(optim::Adam::Options{cfg.learning_rate}),
          static_emb_(encode_static_text(*backbone_)) {
        cfg_.validate();
    }

    Trainer(BackbonePtr backbone, TrainConfig cfg, AdapterParams init, ClassEmbeddings static_emb)
        : Trainer(std::move(backbone), cfg, std::move(init)) {
        static_emb_ = std::move(static_emb);
    }

    /// One optimizer update on the sum of the mode's branch losses.
    LossReport train_step(const TrainBatch& batch) {
        AdapterParams grads = nn::zeros_like(params_);
        SegHeadCache cache;
        LossReport rep = compute_losses(batch, params_, *backbone_, static_emb_, cfg_, &grads, &cache);
        rep.step = ++step_;
        detail::check_finite(rep.visual.total(), rep.step, cfg_.mode == TrainMode::joint ? "joint" : "visual");
        detail::check_finite(rep.textual.total(), rep.step, "textual");
        detail::check_finite(rep.prompt_query.total(), rep.step, "prompt_query");
        for (const auto& g : trainable_params(grads, cfg_.mode))
            if (!g.value->allFinite()) throw NumericError("non-finite gradient at step " + std::to_string(rep.step) + " for '" + g.name + "'");
        optimizer_.step(trainable_params(params_, cfg_.mode), trainable_params(grads, cfg_.mode));
        if (trains_prompt_query(cfg_.mode)) seg_head_update_running_stats(params_.seg_head, cache);
        return rep;
    }

    /// Losses at the current parameters, no update.
    LossReport evaluate(const TrainBatch& batch) const { return compute_losses(batch, params_, *backbone_, static_emb_, cfg_, nullptr); }

    const AdapterParams& params() const { return params_; }
    AdapterParams& params() { return params_; }
    const TrainConfig& config() const { return cfg_; }
    const ClassEmbeddings& static_embeddings() const { return static_emb_; }
    long steps() const { return step_; }

private:
    BackbonePtr backbone_;
    TrainConfig cfg_;
    AdapterParams params_;
    optim::Adam optimizer_;
    ClassEmbeddings static_emb_;
    long step_ = 0;
};

struct EpochLog {
    int epoch = 0;
    BranchLoss visual, textual, prompt_query;
    double total = 0.0;
    int steps = 0;
};

inline void to_json(nlohmann::json& j, const BranchLoss& b) { j = {{"ce", b.ce}, {"focal", b.focal}, {"dice", b.dice}, {"total", b.total()}}; }

inline void to_json(nlohmann::json& j, const EpochLog& e) {
    j = {{"epoch", e.epoch}, {"visual", e.visual}, {"textual", e.textual}, {"prompt_query", e.prompt_query}, {"total", e.total}, {"steps", e.steps}};
}

struct FitResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> epochs;
};

/// Loads, resizes and encodes dataset samples with the frozen backbone.
inline std::vector<EncodedSample> encode_samples(const std::vector<data::Sample>& samples, const Backbone& backbone) {
    std::vector<EncodedSample> out;
    out.reserve(samples.size());
    const int res = backbone.config().input_resolution;
    for (const auto& s : samples) {
        data::LoadedSample ls = data::load_and_resize(s, res);
        out.push_back({backbone.encode_image(ls.image), std::move(ls.mask), s.label, s.category});
    }
    return out;
}

/// Trains all adapters the mode selects on already-encoded samples.
inline FitResult fit_encoded(const std::vector<EncodedSample>& samples, const TrainConfig& cfg, BackbonePtr backbone,
                             const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.validate();
    bool any_anomalous = false;
    for (const auto& s : samples) any_anomalous |= s.label == 1;
    if (samples.empty() || !any_anomalous) throw ProtocolError("training data must contain anomalous images with masks");

    std::map<std::string, std::vector<std::size_t>> normals_by_cat;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].label == 0) normals_by_cat[samples[i].category].push_back(i);
    const bool pq = trains_prompt_query(cfg.mode);
    if (pq)
        for (const auto& s : samples)
            if (normals_by_cat[s.category].empty()) throw ProtocolError("category '" + s.category + "' has no normal image to use as prompt");

    FitResult result;
    result.checkpoint = Checkpoint::initial(*backbone, cfg);
    Trainer trainer(backbone, cfg, result.checkpoint.params,
                    encode_static_text(*backbone, result.checkpoint.normal_templates, result.checkpoint.abnormal_templates));

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(mix_seed(cfg.seed, 0xe90c00ULL + static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        EpochLog log;
        log.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            TrainBatch batch;
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t qi = order[k];
                batch.queries.push_back(&samples[qi]);
                if (!pq) continue;
                // One normal prompt from the same category, excluding the query when possible.
                const auto& pool = normals_by_cat[samples[qi].category];
                std::size_t pick;
                if (pool.size() == 1) {
                    pick = pool[0];
                } else {
                    do {
                        pick = pool[static_cast<std::size_t>(rng.below(pool.size()))];
                    } while (pick == qi);
                }
                batch.prompts.push_back(&samples[pick]);
            }
            const LossReport r = trainer.train_step(batch);
            log.visual += r.visual;
            log.textual += r.textual;
            log.prompt_query += r.prompt_query;
            log.total += r.total;
            ++log.steps;
        }
        log.visual /= log.steps;
        log.textual /= log.steps;
        log.prompt_query /= log.steps;
        log.total /= log.steps;
        result.epochs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    result.checkpoint.params = trainer.params();
    result.checkpoint.epochs_completed = cfg.epochs;
    return result;
}

/// Encodes the dataset then trains; requires anomalous samples with masks.
inline FitResult fit(const std::vector<data::Sample>& dataset, const TrainConfig& cfg, BackbonePtr backbone,
                     const std::function<void(const EpochLog&)>& on_epoch = {}) {
    bool any_anomalous = false;
    for (const auto& s : dataset) {
        if (s.label == 1 && !s.mask_path) throw ProtocolError("anomalous training image '" + s.image_path.string() + "' has no mask");
        any_anomalous |= s.label == 1;
    }
    if (!any_anomalous) throw ProtocolError("training data must contain anomalous images with masks");
    const std::vector<EncodedSample> encoded = encode_samples(dataset, *backbone);
    return fit_encoded(encoded, cfg, std::move(backbone), on_epoch);
}

}  // namespace adaptkit
