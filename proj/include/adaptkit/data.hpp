#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "adaptkit/errors.hpp"
#include "adaptkit/resize.hpp"
#include "adaptkit/rng.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit::data {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw DataError("unknown split '" + s + "'");
}

struct Sample {
    fs::path image_path;
    std::optional<fs::path> mask_path;
    int label = 0;
    std::string category;
    Split split = Split::test;

    bool operator==(const Sample&) const = default;
};

enum class Layout { mvtec_folders, manifest };

struct DatasetSpec {
    fs::path root;
    Layout layout = Layout::mvtec_folders;
    std::vector<std::string> categories;  // empty: discover
    int resolution = 518;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

inline std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Reads a manifest: one JSON object per line with keys image, mask (optional/null),
/// label (0|1), category, split ("train"|"test"). Relative paths resolve against the
/// manifest's directory.
inline std::vector<Sample> read_manifest(const fs::path& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw DataError("cannot open manifest '" + manifest_path.string() + "'");
    const fs::path base = manifest_path.parent_path();
    std::vector<Sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Sample s;
            s.image_path = base / j.at("image").get<std::string>();
            if (j.contains("mask") && !j.at("mask").is_null()) s.mask_path = base / j.at("mask").get<std::string>();
            s.label = j.at("label").get<int>();
            if (s.label != 0 && s.label != 1) throw DataError("label must be 0 or 1");
            s.category = j.at("category").get<std::string>();
            s.split = parse_split(j.value("split", std::string("test")));
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void write_manifest(const fs::path& manifest_path, const std::vector<Sample>& samples) {
    std::ofstream f(manifest_path, std::ios::trunc);
    if (!f) throw DataError("cannot write manifest '" + manifest_path.string() + "'");
    const fs::path base = manifest_path.parent_path();
    for (const auto& s : samples) {
        nlohmann::json j;
        j["image"] = fs::relative(s.image_path, base).generic_string();
        j["mask"] = s.mask_path ? nlohmann::json(fs::relative(*s.mask_path, base).generic_string()) : nlohmann::json(nullptr);
        j["label"] = s.label;
        j["category"] = s.category;
        j["split"] = to_string(s.split);
        f << j.dump() << '\n';
    }
}

/// Lists the samples of a dataset in lexicographic image-path order.
inline std::vector<Sample> scan(const DatasetSpec& spec, std::vector<std::string>* warnings = nullptr) {
    if (!fs::is_directory(spec.root)) throw DataError("dataset root '" + spec.root.string() + "' does not exist");
    std::vector<Sample> out;
    if (spec.layout == Layout::manifest) {
        out = read_manifest(spec.root / kManifestName);
        if (!spec.categories.empty()) {
            const std::set<std::string> keep(spec.categories.begin(), spec.categories.end());
            std::erase_if(out, [&](const Sample& s) { return !keep.count(s.category); });
        }
    } else {
        std::vector<std::string> cats = spec.categories;
        if (cats.empty())
            for (const auto& d : sorted_entries(spec.root, true)) cats.push_back(d.filename().string());
        for (const auto& cat : cats) {
            const fs::path cdir = spec.root / cat;
            if (!fs::is_directory(cdir)) throw DataError("category folder '" + cdir.string() + "' does not exist");
            const std::size_t before = out.size();
            for (const auto& img : sorted_entries(cdir / "train" / "good", false)) out.push_back({img, std::nullopt, 0, cat, Split::train});
            for (const auto& defect_dir : sorted_entries(cdir / "test", true)) {
                const std::string defect = defect_dir.filename().string();
                for (const auto& img : sorted_entries(defect_dir, false)) {
                    Sample s{img, std::nullopt, defect == "good" ? 0 : 1, cat, Split::test};
                    if (s.label == 1) {
                        const fs::path gt_dir = cdir / "ground_truth" / defect;
                        fs::path mask;
                        for (const char* ext : {".png", ".jpg", ".bmp", ".tif", ".tiff"}) {
                            const fs::path cand = gt_dir / (img.stem().string() + "_mask" + ext);
                            if (fs::exists(cand)) {
                                mask = cand;
                                break;
                            }
                        }
                        if (mask.empty())
                            throw DataError("missing ground-truth mask for anomalous image '" + img.string() + "' (expected " +
                                            (gt_dir / (img.stem().string() + "_mask.png")).string() + ")");
                        s.mask_path = mask;
                    }
                    out.push_back(std::move(s));
                }
            }
            if (out.size() == before && warnings) warnings->push_back("category '" + cat + "' has no images");
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.image_path < b.image_path; });
    return out;
}

// -- image I/O ---------------------------------------------------------------

inline Image read_image(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw DataError("cannot read image '" + path.string() + "'");
    Image im(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x)
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = row[x][2 - c] / 255.0;  // BGR -> RGB
    }
    return im;
}

/// 8-bit mask binarized at 127 (values > 127 are anomalous).
inline Map read_mask(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("cannot read mask '" + path.string() + "'");
    Map out(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<unsigned char>(y);
        for (int x = 0; x < m.cols; ++x) out(y, x) = row[x] > 127 ? 1.0 : 0.0;
    }
    return out;
}

inline cv::Mat to_cv(const Image& im) {
    cv::Mat m(im.height, im.width, CV_8UC3);
    for (int y = 0; y < im.height; ++y) {
        auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < 3; ++c) row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(im.at(y, x, c), 0.0, 1.0) * 255.0));
    }
    return m;
}

inline cv::Mat to_cv_gray(const Map& map) {
    cv::Mat m(static_cast<int>(map.rows()), static_cast<int>(map.cols()), CV_8UC1);
    for (int y = 0; y < m.rows; ++y) {
        auto* row = m.ptr<unsigned char>(y);
        for (int x = 0; x < m.cols; ++x) row[x] = static_cast<unsigned char>(std::lround(std::clamp(map(y, x), 0.0, 1.0) * 255.0));
    }
    return m;
}

inline void write_png(const fs::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image '" + path.string() + "'");
}

struct LoadedSample {
    Image image;
    Map mask;
};

/// Image resized bilinearly; mask resized by nearest neighbour (stays binary);
/// normal samples and samples without a mask get an all-zero mask.
inline LoadedSample load_and_resize(const Sample& s, int resolution) {
    if (resolution <= 0) throw ArgumentError("load_and_resize: resolution must be positive");
    LoadedSample out;
    out.image = resize_bilinear(read_image(s.image_path), resolution, resolution);
    if (s.label == 1 && s.mask_path) {
        out.mask = resize_nearest(read_mask(*s.mask_path), resolution, resolution);
    } else {
        out.mask = Map::Zero(resolution, resolution);
    }
    return out;
}

/// k normal test-split images of `category`, uniformly without replacement.
inline std::vector<Sample> sample_prompts(const std::vector<Sample>& samples, const std::string& category, int k, std::uint64_t seed) {
    if (k < 1) throw ArgumentError("sample_prompts: k must be >= 1");
    std::vector<Sample> normals;
    for (const auto& s : samples)
        if (s.category == category && s.label == 0 && s.split == Split::test) normals.push_back(s);
    if (static_cast<int>(normals.size()) < k)
        throw ProtocolError("category '" + category + "' has " + std::to_string(normals.size()) + " normal test images, " + std::to_string(k) +
                            " shots requested");
    Rng rng(seed);
    rng.shuffle(normals);
    normals.resize(static_cast<std::size_t>(k));
    return normals;
}

/// Throws if any prompt image is also a training query.
inline void check_disjoint(const std::vector<Sample>& training, const std::vector<Sample>& prompts) {
    std::set<fs::path> train_paths;
    for (const auto& s : training) train_paths.insert(fs::weakly_canonical(s.image_path));
    for (const auto& p : prompts)
        if (train_paths.count(fs::weakly_canonical(p.image_path))) throw ProtocolError("prompt image '" + p.image_path.string() + "' is a training query");
}

inline std::vector<std::string> categories_of(const std::vector<Sample>& samples) {
    std::set<std::string> s;
    for (const auto& x : samples) s.insert(x.category);
    return {s.begin(), s.end()};
}

// -- synthetic dataset ---------------------------------------------------------

struct SyntheticConfig {
    int n_normal = 50;     // normal test images, across all categories
    int n_anomalous = 50;  // anomalous test images, across all categories
    int n_train_good = 4;  // train/good images per category
    int resolution = 224;
    std::uint64_t seed = 0;
    std::vector<std::string> categories{"weave", "grain"};
};

namespace detail {

struct Texture {
    double base[3];
    double amp1, amp2, period1, period2, theta1, theta2, noise;
    double tint[3];
};

inline Texture texture_for(const std::string& category, std::uint64_t seed) {
    Rng r(mix_seed(fnv1a(category), seed));
    Texture t{};
    for (double& b : t.base) b = r.uniform(0.3, 0.7);
    t.amp1 = r.uniform(0.08, 0.16);
    t.amp2 = r.uniform(0.04, 0.1);
    t.period1 = r.uniform(24.0, 64.0);
    t.period2 = r.uniform(8.0, 20.0);
    t.theta1 = r.uniform(0.0, std::numbers::pi);
    t.theta2 = r.uniform(0.0, std::numbers::pi);
    t.noise = r.uniform(0.01, 0.03);
    for (double& c : t.tint) c = r.uniform(0.6, 1.4);
    return t;
}

/// Two oriented gratings plus pixel noise; periods are in pixels, phases random per image.
inline Image render_texture(const Texture& t, int res, Rng& r) {
    Image im(res, res);
    const double ph1 = r.uniform(0.0, 2.0 * std::numbers::pi);
    const double ph2 = r.uniform(0.0, 2.0 * std::numbers::pi);
    const double w1 = 2.0 * std::numbers::pi / t.period1, w2 = 2.0 * std::numbers::pi / t.period2;
    const double c1 = std::cos(t.theta1), s1 = std::sin(t.theta1), c2 = std::cos(t.theta2), s2 = std::sin(t.theta2);
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const double g1 = std::sin(w1 * (c1 * x + s1 * y) + ph1);
            const double g2 = std::sin(w2 * (c2 * x + s2 * y) + ph2);
            for (int c = 0; c < 3; ++c) {
                const double v = t.base[c] + t.tint[c] * (t.amp1 * g1) + t.amp2 * g2 + t.noise * r.normal();
                im.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return im;
}

inline const std::vector<std::string>& defect_types() {
    static const std::vector<std::string> d{"blob", "scratch", "stain", "noise"};
    return d;
}

/// Paints a defect into `im` and returns its exact binary mask.
inline Map paint_defect(Image& im, const std::string& type, Rng& r) {
    const int res = im.height;
    Map mask = Map::Zero(res, res);
    const double margin = 0.15 * res;
    const double cy = r.uniform(margin, res - margin), cx = r.uniform(margin, res - margin);
    if (type == "blob") {
        const double ry = r.uniform(0.07, 0.13) * res, rx = r.uniform(0.07, 0.13) * res;
        const double shift = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.25, 0.4);
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                const double u = (y - cy) / ry, v = (x - cx) / rx;
                if (u * u + v * v <= 1.0) {
                    mask(y, x) = 1.0;
                    for (int c = 0; c < 3; ++c) im.at(y, x, c) = std::clamp(im.at(y, x, c) + shift, 0.0, 1.0);
                }
            }
    } else if (type == "scratch") {
        const double ang = r.uniform(0.0, std::numbers::pi);
        const double half_len = r.uniform(0.15, 0.3) * res;
        const double half_w = r.uniform(0.02, 0.035) * res;
        const double col[3] = {r.uniform(0.0, 1.0), r.uniform(0.0, 1.0), r.uniform(0.0, 1.0)};
        const double dy = std::sin(ang), dx = std::cos(ang);
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                const double py = y - cy, px = x - cx;
                const double along = px * dx + py * dy;
                const double across = -px * dy + py * dx;
                if (std::abs(along) <= half_len && std::abs(across) <= half_w) {
                    mask(y, x) = 1.0;
                    for (int c = 0; c < 3; ++c) im.at(y, x, c) = col[c];
                }
            }
    } else if (type == "stain") {
        const int blobs = 3;
        double by[blobs], bx[blobs], br[blobs];
        for (int b = 0; b < blobs; ++b) {
            by[b] = cy + r.uniform(-0.06, 0.06) * res;
            bx[b] = cx + r.uniform(-0.06, 0.06) * res;
            br[b] = r.uniform(0.05, 0.09) * res;
        }
        const double tint[3] = {r.uniform(-0.35, 0.35), r.uniform(-0.35, 0.35), r.uniform(-0.35, 0.35)};
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                bool in = false;
                for (int b = 0; b < blobs && !in; ++b) in = (y - by[b]) * (y - by[b]) + (x - bx[b]) * (x - bx[b]) <= br[b] * br[b];
                if (in) {
                    mask(y, x) = 1.0;
                    for (int c = 0; c < 3; ++c) im.at(y, x, c) = std::clamp(im.at(y, x, c) + tint[c] + (tint[c] >= 0 ? 0.1 : -0.1), 0.0, 1.0);
                }
            }
    } else {
        const int hh = static_cast<int>(r.uniform(0.08, 0.14) * res), hw = static_cast<int>(r.uniform(0.08, 0.14) * res);
        const int y0 = static_cast<int>(cy) - hh, x0 = static_cast<int>(cx) - hw;
        for (int y = std::max(0, y0); y < std::min(res, y0 + 2 * hh); ++y)
            for (int x = std::max(0, x0); x < std::min(res, x0 + 2 * hw); ++x) {
                mask(y, x) = 1.0;
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = r.uniform();
            }
    }
    return mask;
}

}  // namespace detail

/// Writes a textured dataset in the MVTec folder layout under `root`.
inline std::vector<Sample> generate_synthetic(const SyntheticConfig& cfg, const fs::path& root) {
    if (cfg.resolution < 64) throw ArgumentError("generate_synthetic: resolution must be >= 64");
    if (cfg.categories.empty()) throw ArgumentError("generate_synthetic: no categories");
    if (cfg.n_normal < 0 || cfg.n_anomalous < 0 || cfg.n_train_good < 0) throw ArgumentError("generate_synthetic: counts must be >= 0");
    const int ncat = static_cast<int>(cfg.categories.size());
    const auto& defects = detail::defect_types();
    char name[32];
    for (int ci = 0; ci < ncat; ++ci) {
        const std::string& cat = cfg.categories[static_cast<std::size_t>(ci)];
        const detail::Texture tex = detail::texture_for(cat, cfg.seed);
        Rng rng(mix_seed(cfg.seed, fnv1a(cat) ^ 0xda7aULL));
        const int normals = cfg.n_normal / ncat + (ci < cfg.n_normal % ncat ? 1 : 0);
        const int anomalies = cfg.n_anomalous / ncat + (ci < cfg.n_anomalous % ncat ? 1 : 0);
        for (int i = 0; i < cfg.n_train_good; ++i) {
            std::snprintf(name, sizeof name, "%03d.png", i);
            write_png(root / cat / "train" / "good" / name, to_cv(detail::render_texture(tex, cfg.resolution, rng)));
        }
        for (int i = 0; i < normals; ++i) {
            std::snprintf(name, sizeof name, "%03d.png", i);
            write_png(root / cat / "test" / "good" / name, to_cv(detail::render_texture(tex, cfg.resolution, rng)));
        }
        for (int i = 0; i < anomalies; ++i) {
            const std::string& defect = defects[static_cast<std::size_t>(i) % defects.size()];
            Image im = detail::render_texture(tex, cfg.resolution, rng);
            const Map mask = detail::paint_defect(im, defect, rng);
            std::snprintf(name, sizeof name, "%03d", i);
            write_png(root / cat / "test" / defect / (std::string(name) + ".png"), to_cv(im));
            write_png(root / cat / "ground_truth" / defect / (std::string(name) + "_mask.png"), to_cv_gray(mask));
        }
    }
    DatasetSpec spec;
    spec.root = root;
    spec.categories = cfg.categories;
    spec.resolution = cfg.resolution;
    return scan(spec);
}

}  // namespace adaptkit::data
