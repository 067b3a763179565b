#pragma once

#include <map>
#include <string>
#include <vector>

#include "adaptkit/data.hpp"
#include "adaptkit/inference.hpp"
#include "adaptkit/metrics.hpp"

namespace adaptkit {

/// Test queries plus the k-shot prompts of each category. Prompt images are
/// removed from the queries so that no image is scored against itself.
struct EvalSplit {
    std::vector<data::Sample> queries;
    std::map<std::string, std::vector<data::Sample>> prompts;
    int shots = 0;
};

inline EvalSplit make_eval_split(const std::vector<data::Sample>& samples, int shots, std::uint64_t seed) {
    if (shots < 0) throw ArgumentError("shots must be >= 0");
    EvalSplit split;
    split.shots = shots;
    std::set<std::string> taken;
    if (shots > 0) {
        for (const auto& cat : data::categories_of(samples)) {
            auto p = data::sample_prompts(samples, cat, shots, seed);
            for (const auto& s : p) taken.insert(s.image_path.string());
            split.prompts[cat] = std::move(p);
        }
    }
    for (const auto& s : samples)
        if (s.split == data::Split::test && !taken.count(s.image_path.string())) split.queries.push_back(s);
    if (split.queries.empty()) throw ProtocolError("evaluation split has no test queries");
    return split;
}

/// Pixel metrics need every anomalous query to carry a mask.
inline bool has_pixel_annotations(const std::vector<data::Sample>& samples) {
    for (const auto& s : samples)
        if (s.label == 1 && !s.mask_path) return false;
    return true;
}

struct EvalRun {
    metrics::EvalReport report;
    std::vector<Prediction> predictions;  // aligned with split.queries
};

/// Scores every query (few-shot when `use_prompts` and the split has prompts)
/// and computes the per-category report.
inline EvalRun evaluate_split(const Predictor& predictor, const EvalSplit& split, bool use_prompts, const metrics::EvalOptions& opt, int workers = 1) {
    const int res = predictor.resolution();
    std::map<std::string, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < split.queries.size(); ++i) by_cat[split.queries[i].category].push_back(i);

    EvalRun run;
    run.predictions.resize(split.queries.size());
    std::vector<Map> masks(split.queries.size());
    for (const auto& [cat, idx] : by_cat) {
        std::optional<PromptBank> bank;
        if (use_prompts && split.shots > 0) {
            auto it = split.prompts.find(cat);
            if (it == split.prompts.end()) throw ProtocolError("no prompts sampled for category '" + cat + "'");
            std::vector<Image> imgs;
            for (const auto& s : it->second) imgs.push_back(data::load_and_resize(s, res).image);
            bank = predictor.make_bank(imgs, cat);
        }
        std::vector<Image> images;
        for (std::size_t i : idx) {
            data::LoadedSample ls = data::load_and_resize(split.queries[i], res);
            images.push_back(std::move(ls.image));
            masks[i] = std::move(ls.mask);
        }
        auto preds = predictor.predict_batch(images, bank ? &*bank : nullptr, workers);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            preds[j].path = split.queries[idx[j]].image_path.string();
            run.predictions[idx[j]] = std::move(preds[j]);
        }
    }

    std::vector<metrics::ScoredImage> scored;
    std::vector<metrics::Truth> truth;
    for (std::size_t i = 0; i < split.queries.size(); ++i) {
        const auto& s = split.queries[i];
        scored.push_back({run.predictions[i].path, run.predictions[i].score, &run.predictions[i].map});
        const bool has_mask = s.label == 0 || s.mask_path.has_value();
        truth.push_back({s.image_path.string(), s.category, s.label, has_mask ? &masks[i] : nullptr});
    }
    run.report = metrics::evaluate(scored, truth, opt);
    return run;
}

}  // namespace adaptkit
