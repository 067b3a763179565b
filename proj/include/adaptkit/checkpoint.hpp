#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptkit/backbone.hpp"
#include "adaptkit/container.hpp"
#include "adaptkit/model.hpp"
#include "adaptkit/prompt_query.hpp"

namespace adaptkit {

struct Checkpoint {
    AdapterParams params;
    TrainConfig train;
    EncoderConfig encoder;
    std::string backbone_id = "synthetic";
    nlohmann::json backbone_options = nlohmann::json::object();
    std::vector<std::string> normal_templates = default_normal_templates();
    std::vector<std::string> abnormal_templates = default_abnormal_templates();
    std::string library_version = kLibraryVersion;
    int epochs_completed = 0;

    bool has_zero_shot() const { return params.visual.local.layers.size() == 2 && params.textual.length() > 0; }
    bool has_prompt_query() const { return !params.seg_head.blocks.empty() && !params.global_head.mlp.layers.empty(); }

    BackbonePtr make_backbone() const { return adaptkit::make_backbone(backbone_id, backbone_options); }

    /// Fresh checkpoint with initialized adapters for a backend.
    static Checkpoint initial(const Backbone& backbone, const TrainConfig& cfg) {
        cfg.validate();
        Checkpoint c;
        c.train = cfg;
        c.encoder = backbone.config();
        c.backbone_id = backbone.id();
        c.backbone_options = backbone.options();
        c.params = AdapterParams::create(c.encoder, cfg);
        return c;
    }
};

inline TensorArchive to_archive(const Checkpoint& c) {
    TensorArchive ar;
    ar.meta = {{"kind", "checkpoint"},
               {"library_version", c.library_version},
               {"backbone_id", c.backbone_id},
               {"backbone_options", c.backbone_options},
               {"encoder", c.encoder},
               {"train", c.train},
               {"seed", c.train.seed},
               {"epochs_completed", c.epochs_completed},
               {"normal_templates", c.normal_templates},
               {"abnormal_templates", c.abnormal_templates}};
    auto& params = const_cast<AdapterParams&>(c.params);
    params.visit("", [&](const std::string& name, Matrix& m) { ar.arrays.emplace_back(name, m); });
    params.visit_buffers("", [&](const std::string& name, Matrix& m) { ar.arrays.emplace_back(name, m); });
    return ar;
}

inline Checkpoint from_archive(const TensorArchive& ar) {
    if (ar.meta.value("kind", "") != "checkpoint") throw CheckpointError("archive is not a checkpoint");
    Checkpoint c;
    try {
        c.library_version = ar.meta.at("library_version").get<std::string>();
        c.backbone_id = ar.meta.at("backbone_id").get<std::string>();
        c.backbone_options = ar.meta.at("backbone_options");
        c.encoder = ar.meta.at("encoder").get<EncoderConfig>();
        c.train = ar.meta.at("train").get<TrainConfig>();
        c.epochs_completed = ar.meta.value("epochs_completed", 0);
        c.normal_templates = ar.meta.value("normal_templates", default_normal_templates());
        c.abnormal_templates = ar.meta.value("abnormal_templates", default_abnormal_templates());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
    }
    c.params = AdapterParams::create(c.encoder, c.train);
    auto fill = [&](const std::string& name, Matrix& m) {
        if (!ar.contains(name)) throw CheckpointError("checkpoint is missing adapter array '" + name + "'");
        const Matrix& src = ar.get(name);
        if (src.rows() != m.rows() || src.cols() != m.cols()) throw CheckpointError("checkpoint array '" + name + "' has unexpected shape");
        m = src;
    };
    c.params.visit("", fill);
    c.params.visit_buffers("", fill);
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { write_archive(path, to_archive(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return from_archive(read_archive(path)); }

inline TensorArchive to_archive(const PromptBank& bank) {
    TensorArchive ar;
    std::vector<std::string> hashes;
    for (auto h : bank.source_hashes) hashes.push_back(std::to_string(h));
    ar.meta = {{"kind", "prompt_bank"}, {"shots", bank.shots}, {"source_hashes", hashes}, {"layers", bank.layers.size()}};
    if (bank.class_id) ar.meta["class_id"] = *bank.class_id;
    for (std::size_t l = 0; l < bank.layers.size(); ++l) ar.arrays.emplace_back("layer." + std::to_string(l), bank.layers[l]);
    return ar;
}

inline PromptBank prompt_bank_from_archive(const TensorArchive& ar) {
    if (ar.meta.value("kind", "") != "prompt_bank") throw CheckpointError("archive is not a prompt bank");
    PromptBank b;
    b.shots = ar.meta.at("shots").get<int>();
    for (const auto& h : ar.meta.at("source_hashes")) b.source_hashes.push_back(std::stoull(h.get<std::string>()));
    if (ar.meta.contains("class_id")) b.class_id = ar.meta.at("class_id").get<std::string>();
    const auto layers = ar.meta.at("layers").get<std::size_t>();
    for (std::size_t l = 0; l < layers; ++l) b.layers.push_back(ar.get("layer." + std::to_string(l)));
    return b;
}

}  // namespace adaptkit
