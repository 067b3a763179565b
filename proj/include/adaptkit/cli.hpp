#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "adaptkit/checkpoint.hpp"
#include "adaptkit/config.hpp"
#include "adaptkit/data.hpp"
#include "adaptkit/evaluation.hpp"
#include "adaptkit/inference.hpp"
#include "adaptkit/metrics.hpp"
#include "adaptkit/training.hpp"

namespace adaptkit::cli {

namespace fs = std::filesystem;

inline constexpr const char* kBackbonePathEnv = "ADAPTKIT_BACKBONE_PATH";
inline constexpr const char* kCheckpointName = "checkpoint.adck";
inline constexpr const char* kTrainLogName = "train_log.jsonl";
inline constexpr const char* kResolvedConfigName = "run_config.txt";

enum class Command { train, eval, infer, gen_synthetic };

/// Everything a run needs, resolved from the config file, flags and overrides.
struct RunConfig {
    Command command = Command::train;
    data::DatasetSpec dataset;
    std::string backbone_id = "synthetic";
    nlohmann::json backbone_options = nlohmann::json::object();
    std::optional<fs::path> checkpoint_path;
    int shots = 0;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> eval_seeds;  // repeated evaluation; defaults to {seed}
    int workers = 1;
    fs::path output_dir = "adaptkit_out";
    TrainConfig train;
    std::string train_split = "test";  // which split of the base dataset trains the adapters
    std::string level = "auto";
    metrics::PixelAggregation pixel_aggregation = metrics::PixelAggregation::pooled;
    data::SyntheticConfig synthetic;
    std::vector<fs::path> images;   // infer
    std::vector<fs::path> prompts;  // infer, shots > 0
    std::string resolved;           // canonical dump of the merged key/value config
};

namespace detail {

inline nlohmann::json option_value(const std::string& s) {
    KeyValueConfig one;
    one.set("v", s);
    try {
        return one.get_number<double>("v", 0.0);
    } catch (const ConfigError&) {
        return s;
    }
}

inline EncoderConfig encoder_from(const KeyValueConfig& kv, int resolution) {
    EncoderConfig e;
    e.patch_size = kv.get_number<int>("encoder.patch_size", e.patch_size);
    e.embed_dim = kv.get_number<int>("encoder.embed_dim", e.embed_dim);
    e.text_width = kv.get_number<int>("encoder.text_width", e.embed_dim);
    e.feature_layers = kv.get_number_list<int>("encoder.feature_layers", e.feature_layers);
    e.prompt_length_capacity = kv.get_number<int>("encoder.prompt_length_capacity", e.prompt_length_capacity);
    e.input_resolution = resolution;
    e.validate();
    return e;
}

}  // namespace detail

/// Builds a RunConfig; unknown keys are rejected.
inline RunConfig resolve(Command cmd, const KeyValueConfig& kv) {
    RunConfig c;
    c.command = cmd;
    c.seed = kv.get_number<std::uint64_t>("seed", c.seed);
    c.shots = kv.get_number<int>("shots", c.shots);
    if (c.shots < 0) throw ArgumentError("shots must be >= 0");
    c.workers = kv.get_number<int>("workers", c.workers);
    if (c.workers < 1) throw ArgumentError("workers must be >= 1");
    c.output_dir = kv.get_string("output_dir", c.output_dir.string());
    if (kv.has("checkpoint")) c.checkpoint_path = fs::path(kv.get_string("checkpoint", ""));
    c.eval_seeds = kv.get_number_list<std::uint64_t>("eval.seeds", {c.seed});
    c.level = kv.get_string("eval.level", c.level);
    if (c.level != "auto") metrics::parse_level(c.level);
    c.pixel_aggregation = metrics::parse_pixel_aggregation(kv.get_string("eval.pixel_aggregation", "pooled"));

    c.dataset.root = kv.get_string("dataset.root", "");
    const std::string layout = kv.get_string("dataset.layout", "mvtec_folders");
    if (layout == "mvtec_folders") {
        c.dataset.layout = data::Layout::mvtec_folders;
    } else if (layout == "manifest") {
        c.dataset.layout = data::Layout::manifest;
    } else {
        throw ConfigError("dataset.layout must be mvtec_folders or manifest");
    }
    c.dataset.categories = kv.get_list("dataset.categories", {});
    c.dataset.resolution = kv.get_number<int>("dataset.resolution", c.dataset.resolution);

    c.train.seed = c.seed;
    c.train.epochs = kv.get_number<int>("train.epochs", c.train.epochs);
    c.train.learning_rate = kv.get_number<double>("train.learning_rate", c.train.learning_rate);
    c.train.batch_size = kv.get_number<int>("train.batch_size", c.train.batch_size);
    c.train.mode = parse_train_mode(kv.get_string("train.mode", to_string(c.train.mode)));
    c.train.focal_gamma = kv.get_number<double>("train.focal_gamma", c.train.focal_gamma);
    c.train.focal_alpha = kv.get_number<double>("train.focal_alpha", c.train.focal_alpha);
    c.train.dice_smooth = kv.get_number<double>("train.dice_smooth", c.train.dice_smooth);
    c.train.temperature = kv.get_number<double>("train.temperature", c.train.temperature);
    c.train.prompt_length = kv.get_number<int>("train.prompt_length", c.train.prompt_length);
    c.train.weight_ce = kv.get_number<double>("train.weight_ce", c.train.weight_ce);
    c.train.weight_focal = kv.get_number<double>("train.weight_focal", c.train.weight_focal);
    c.train.weight_dice = kv.get_number<double>("train.weight_dice", c.train.weight_dice);
    c.train_split = kv.get_string("train.split", c.train_split);
    if (c.train_split != "test" && c.train_split != "train" && c.train_split != "all") throw ConfigError("train.split must be test, train or all");
    c.train.validate();

    c.synthetic.n_normal = kv.get_number<int>("synthetic.n_normal", c.synthetic.n_normal);
    c.synthetic.n_anomalous = kv.get_number<int>("synthetic.n_anomalous", c.synthetic.n_anomalous);
    c.synthetic.n_train_good = kv.get_number<int>("synthetic.n_train_good", c.synthetic.n_train_good);
    c.synthetic.resolution = kv.get_number<int>("synthetic.resolution", c.synthetic.resolution);
    c.synthetic.seed = kv.get_number<std::uint64_t>("synthetic.seed", c.seed);
    c.synthetic.categories = kv.get_list("synthetic.categories", c.synthetic.categories);

    c.backbone_id = kv.get_string("backbone.id", c.backbone_id);
    const EncoderConfig enc = detail::encoder_from(kv, c.dataset.resolution);
    c.backbone_options = {{"encoder", enc}};
    for (const auto& [k, v] : kv.section("backbone"))
        if (k != "id") c.backbone_options[k] = detail::option_value(v);
    if (const char* env = std::getenv(kBackbonePathEnv); env && c.backbone_id != "synthetic") c.backbone_options["weights_path"] = env;

    kv.reject_unused();
    c.resolved = kv.dump();
    return c;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << text;
}

inline std::vector<data::Sample> scan_dataset(const RunConfig& c, std::ostream& err) {
    if (c.dataset.root.empty()) throw ConfigError("dataset.root is not set (use --dataset-root)");
    std::vector<std::string> warnings;
    auto samples = data::scan(c.dataset, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    if (samples.empty()) throw DataError("no images found under '" + c.dataset.root.string() + "'");
    return samples;
}

inline BackbonePtr backbone_for(const Checkpoint& ck) {
    nlohmann::json opts = ck.backbone_options;
    if (const char* env = std::getenv(kBackbonePathEnv); env && ck.backbone_id != "synthetic") opts["weights_path"] = env;
    return make_backbone(ck.backbone_id, opts);
}

inline Checkpoint load_run_checkpoint(const RunConfig& c, const std::string& command) {
    if (!c.checkpoint_path) throw ArgumentError(command + " requires --checkpoint");
    Checkpoint ck = load_checkpoint(*c.checkpoint_path);
    return ck;
}

}  // namespace detail

/// Trains on the base dataset and writes checkpoint, log and resolved config.
inline int run_train(const RunConfig& c, std::ostream& out, std::ostream& err) {
    if (c.checkpoint_path) throw ArgumentError("train writes " + std::string(kCheckpointName) + " into --output-dir; --checkpoint is not accepted");
    BackbonePtr backbone = make_backbone(c.backbone_id, c.backbone_options);
    auto samples = detail::scan_dataset(c, err);
    std::vector<data::Sample> chosen;
    for (const auto& s : samples)
        if (c.train_split == "all" || data::to_string(s.split) == c.train_split) chosen.push_back(s);

    fs::create_directories(c.output_dir);
    detail::write_text(c.output_dir / kResolvedConfigName, c.resolved);
    std::ofstream log(c.output_dir / kTrainLogName, std::ios::trunc);
    if (!log) throw DataError("cannot write training log");
    FitResult r = fit(chosen, c.train, backbone, [&](const EpochLog& e) {
        log << nlohmann::json(e).dump() << '\n';
        log.flush();
        out << "epoch " << e.epoch << "  loss " << e.total << '\n';
    });
    save_checkpoint(c.output_dir / kCheckpointName, r.checkpoint);
    out << "checkpoint: " << (c.output_dir / kCheckpointName).string() << '\n';
    return 0;
}

/// Evaluates a checkpoint on the test split, once per evaluation seed.
inline int run_eval(const RunConfig& c, std::ostream& out, std::ostream& err) {
    Checkpoint ck = detail::load_run_checkpoint(c, "eval");
    RunConfig cc = c;
    cc.dataset.resolution = ck.encoder.input_resolution;
    auto samples = detail::scan_dataset(cc, err);
    Predictor predictor(detail::backbone_for(ck), ck);

    std::vector<nlohmann::json> means;
    for (std::uint64_t seed : c.eval_seeds) {
        const EvalSplit split = make_eval_split(samples, c.shots, seed);
        metrics::EvalOptions opt;
        opt.pixel_aggregation = c.pixel_aggregation;
        if (c.level == "auto") {
            opt.level = has_pixel_annotations(split.queries) ? metrics::Level::both : metrics::Level::image;
        } else {
            opt.level = metrics::parse_level(c.level);
        }
        const EvalRun run = evaluate_split(predictor, split, c.shots > 0, opt, c.workers);
        const std::string suffix = c.eval_seeds.size() > 1 ? "_seed" + std::to_string(seed) : "";
        nlohmann::json j = metrics::to_json(run.report);
        j["shots"] = c.shots;
        j["seed"] = seed;
        detail::write_text(c.output_dir / ("report" + suffix + ".json"), j.dump(2) + "\n");
        const std::string table = metrics::to_table(run.report);
        detail::write_text(c.output_dir / ("report" + suffix + ".txt"), table);
        out << "shots=" << c.shots << " seed=" << seed << '\n' << table;
        means.push_back(j["mean"]);
    }
    if (means.size() > 1) {
        nlohmann::json summary = nlohmann::json::object();
        for (const auto& [metric, v0] : means.front().items()) {
            std::vector<double> vals;
            for (const auto& m : means)
                if (!m[metric].is_null()) vals.push_back(m[metric].get<double>());
            if (vals.empty()) {
                summary[metric] = nullptr;
                continue;
            }
            double mu = 0, var = 0;
            for (double v : vals) mu += v;
            mu /= static_cast<double>(vals.size());
            for (double v : vals) var += (v - mu) * (v - mu);
            const double sd = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
            summary[metric] = {{"mean", mu}, {"std", sd}, {"runs", vals.size()}};
        }
        detail::write_text(c.output_dir / "summary.json", nlohmann::json{{"shots", c.shots}, {"seeds", c.eval_seeds}, {"mean", summary}}.dump(2) + "\n");
    }
    return 0;
}

/// Scores individual images; writes <stem>.json, <stem>_map.png and <stem>_overlay.png each.
inline int run_infer(const RunConfig& c, std::ostream& out, std::ostream& err) {
    Checkpoint ck = detail::load_run_checkpoint(c, "infer");
    if (c.images.empty()) throw ArgumentError("infer: no input images");
    Predictor predictor(detail::backbone_for(ck), ck);
    std::optional<PromptBank> bank;
    if (c.shots > 0) {
        if (static_cast<int>(c.prompts.size()) < c.shots)
            throw ProtocolError("infer: " + std::to_string(c.shots) + " shots requested but " + std::to_string(c.prompts.size()) + " prompt images given");
        std::vector<Image> imgs;
        for (int i = 0; i < c.shots; ++i) imgs.push_back(data::read_image(c.prompts[static_cast<std::size_t>(i)]));
        bank = predictor.make_bank(imgs);
    }
    std::map<std::string, int> stems;
    int failures = 0;
    ExitCode first_code = ExitCode::ok;
    for (const auto& path : c.images) {
        try {
            const Image original = data::read_image(path);
            Prediction p = bank ? predictor.predict_few_shot(original, *bank) : predictor.predict_zero_shot(original);
            p.path = path.string();
            std::string stem = path.stem().string();
            if (const int n = stems[stem]++; n > 0) stem += "_" + std::to_string(n);
            export_prediction(p, original, c.output_dir, stem);
            out << path.string() << "  score " << p.score << '\n';
        } catch (const Error& e) {
            err << "error: " << path.string() << ": " << e.what() << '\n';
            if (failures++ == 0) first_code = e.code();
        }
    }
    return failures ? static_cast<int>(first_code) : 0;
}

inline int run_gen_synthetic(const RunConfig& c, std::ostream& out, std::ostream&) {
    const auto samples = data::generate_synthetic(c.synthetic, c.output_dir);
    out << "wrote " << samples.size() << " images under " << c.output_dir.string() << '\n';
    return 0;
}

inline int dispatch(const RunConfig& c, std::ostream& out, std::ostream& err) {
    switch (c.command) {
        case Command::train:
            return run_train(c, out, err);
        case Command::eval:
            return run_eval(c, out, err);
        case Command::infer:
            return run_infer(c, out, err);
        case Command::gen_synthetic:
            return run_gen_synthetic(c, out, err);
    }
    return static_cast<int>(ExitCode::internal);
}

/// Parses arguments and runs a command; returns the process exit code.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Universal visual anomaly detection with adapted vision-language features"};
    app.require_subcommand(1);

    struct Flags {
        std::string config, dataset_root, backbone, checkpoint, output_dir, mode;
        std::optional<int> shots, workers;
        std::optional<std::uint64_t> seed;
        std::vector<std::string> overrides;
        std::vector<std::string> images, prompts;
    } f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "key = value run configuration file");
        sub->add_option("--dataset-root", f.dataset_root, "dataset root directory");
        sub->add_option("--backbone", f.backbone, "backbone id");
        sub->add_option("--checkpoint", f.checkpoint, "checkpoint file");
        sub->add_option("--shots", f.shots, "normal prompt images per category (0 = zero-shot)");
        sub->add_option("--seed", f.seed, "random seed");
        sub->add_option("--workers", f.workers, "parallel workers for inference");
        sub->add_option("--output-dir", f.output_dir, "directory for all outputs");
        sub->add_option("--mode", f.mode, "training mode: alternating, joint, context_off, zero_shot_only, pqa_only");
        sub->add_option("--set", f.overrides, "config override key=value (repeatable)")->allow_extra_args(false);
    };
    CLI::App* train = app.add_subcommand("train", "train adapters on a base dataset");
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a target dataset");
    CLI::App* infer = app.add_subcommand("infer", "score images and write anomaly maps");
    CLI::App* gen = app.add_subcommand("gen-synthetic", "write a synthetic anomaly dataset");
    for (CLI::App* s : {train, eval, infer, gen}) common(s);
    infer->add_option("images", f.images, "images to score")->required();
    infer->add_option("--prompt", f.prompts, "normal prompt image (repeatable)")->allow_extra_args(false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::argument);
    }

    try {
        KeyValueConfig kv = f.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(f.config);
        if (!f.dataset_root.empty()) kv.set("dataset.root", f.dataset_root);
        if (!f.backbone.empty()) kv.set("backbone.id", f.backbone);
        if (!f.checkpoint.empty()) kv.set("checkpoint", f.checkpoint);
        if (!f.output_dir.empty()) kv.set("output_dir", f.output_dir);
        if (!f.mode.empty()) kv.set("train.mode", f.mode);
        if (f.shots) kv.set("shots", std::to_string(*f.shots));
        if (f.seed) kv.set("seed", std::to_string(*f.seed));
        if (f.workers) kv.set("workers", std::to_string(*f.workers));
        for (const auto& o : f.overrides) kv.apply_override(o);

        Command cmd = Command::train;
        if (*eval) cmd = Command::eval;
        if (*infer) cmd = Command::infer;
        if (*gen) cmd = Command::gen_synthetic;
        RunConfig rc = resolve(cmd, kv);
        for (const auto& p : f.images) rc.images.emplace_back(p);
        for (const auto& p : f.prompts) rc.prompts.emplace_back(p);
        if (cmd == Command::eval || cmd == Command::infer) {
            // The checkpoint fixes the backbone; a conflicting --backbone is an error.
            if (!f.backbone.empty() && rc.checkpoint_path) {
                const Checkpoint ck = load_checkpoint(*rc.checkpoint_path);
                if (ck.backbone_id != f.backbone)
                    throw ConfigError("--backbone '" + f.backbone + "' differs from the checkpoint's backbone '" + ck.backbone_id + "'");
            }
        }
        return dispatch(rc, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::internal);
    }
}

}  // namespace adaptkit::cli
