#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "adaptkit/adapters.hpp"
#include "adaptkit/backbone.hpp"
#include "adaptkit/errors.hpp"
#include "adaptkit/losses.hpp"
#include "adaptkit/prompt_query.hpp"
#include "adaptkit/rng.hpp"

namespace adaptkit {

inline constexpr const char* kLibraryVersion = "0.1.0";

/// Which adapters are trained and how the zero-shot branches are wired.
enum class TrainMode {
    alternating,     // visual vs static text, textual vs raw tokens, plus prompt-query
    joint,           // adapted tokens vs learned prompts with shared gradients, plus prompt-query
    zero_shot_only,  // visual + textual only
    pqa_only,        // prompt-query adapter only
    context_off,     // alternating, prompt-query on residual features only
};

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::alternating: return "alternating";
        case TrainMode::joint: return "joint";
        case TrainMode::zero_shot_only: return "zero_shot_only";
        case TrainMode::pqa_only: return "pqa_only";
        case TrainMode::context_off: return "context_off";
    }
    return "alternating";
}

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "alternating") return TrainMode::alternating;
    if (s == "joint") return TrainMode::joint;
    if (s == "zero_shot_only") return TrainMode::zero_shot_only;
    if (s == "pqa_only") return TrainMode::pqa_only;
    if (s == "context_off") return TrainMode::context_off;
    throw ConfigError("unknown training mode '" + s + "'");
}

inline bool trains_zero_shot(TrainMode m) { return m != TrainMode::pqa_only; }
inline bool trains_prompt_query(TrainMode m) { return m != TrainMode::zero_shot_only; }
inline bool uses_context(TrainMode m) { return m != TrainMode::context_off; }

struct TrainConfig {
    int epochs = 15;
    double learning_rate = 1e-3;
    int batch_size = 8;
    TrainMode mode = TrainMode::alternating;
    std::uint64_t seed = 0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_smooth = 1.0;
    double temperature = kDefaultTemperature;
    int prompt_length = kDefaultPromptLength;
    double weight_ce = 1.0;
    double weight_focal = 1.0;
    double weight_dice = 1.0;

    loss::SegLossParams seg_loss() const { return {focal_gamma, focal_alpha, dice_smooth}; }

    void validate() const {
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) throw ConfigError("train: focal_alpha must be in (0,1)");
        if (focal_gamma < 0.0) throw ConfigError("train: focal_gamma must be >= 0");
        if (!(dice_smooth > 0.0)) throw ConfigError("train: dice_smooth must be positive");
        if (!(temperature > 0.0)) throw ConfigError("train: temperature must be positive");
        if (prompt_length < 1) throw ConfigError("train: prompt_length must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},           {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                       {"mode", to_string(c.mode)},    {"seed", c.seed},                   {"focal_gamma", c.focal_gamma},
                       {"focal_alpha", c.focal_alpha}, {"dice_smooth", c.dice_smooth},     {"temperature", c.temperature},
                       {"prompt_length", c.prompt_length}, {"weight_ce", c.weight_ce},     {"weight_focal", c.weight_focal},
                       {"weight_dice", c.weight_dice}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.mode = parse_train_mode(j.value("mode", to_string(c.mode)));
    c.seed = j.value("seed", c.seed);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
    c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
    c.temperature = j.value("temperature", c.temperature);
    c.prompt_length = j.value("prompt_length", c.prompt_length);
    c.weight_ce = j.value("weight_ce", c.weight_ce);
    c.weight_focal = j.value("weight_focal", c.weight_focal);
    c.weight_dice = j.value("weight_dice", c.weight_dice);
}

/// Trainable state of all three adapters.
struct AdapterParams {
    VisualAdapterParams visual;
    TextualAdapterParams textual;
    SegHeadParams seg_head;
    GlobalHeadParams global_head;

    static AdapterParams create(const EncoderConfig& enc, const TrainConfig& cfg) {
        enc.validate();
        if (cfg.prompt_length > enc.prompt_length_capacity)
            throw ArgumentError("prompt length " + std::to_string(cfg.prompt_length) + " exceeds text encoder capacity");
        AdapterParams p;
        Rng rv(mix_seed(cfg.seed, 1));
        Rng rt(mix_seed(cfg.seed, 2));
        Rng rs(mix_seed(cfg.seed, 3));
        Rng rg(mix_seed(cfg.seed, 4));
        const int pq_width = enc.embed_dim * enc.layer_count();
        p.visual = VisualAdapterParams::create(enc.embed_dim, rv);
        p.textual = TextualAdapterParams::create(cfg.prompt_length, enc.text_width, rt);
        p.seg_head = SegHeadParams::create(pq_width, rs);
        p.global_head = GlobalHeadParams::create(pq_width, rg);
        return p;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        visual.visit(prefix + "visual.", f);
        textual.visit(prefix + "textual.", f);
        seg_head.visit(prefix + "seg_head.", f);
        global_head.visit(prefix + "global_head.", f);
    }

    template <class F>
    void visit_buffers(const std::string& prefix, F&& f) {
        seg_head.visit_buffers(prefix + "seg_head.", f);
    }
};

}  // namespace adaptkit
