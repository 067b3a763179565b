#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptkit/errors.hpp"
#include "adaptkit/types.hpp"

namespace adaptkit::metrics {

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* what) {
    if (scores.size() != labels.size()) throw ArgumentError(std::string(what) + ": scores and labels differ in length");
    for (double s : scores)
        if (std::isnan(s)) throw ArgumentError(std::string(what) + ": NaN score");
    for (int l : labels)
        if (l != 0 && l != 1) throw ArgumentError(std::string(what) + ": labels must be 0 or 1");
}

/// Positive/total counts per distinct score, highest score first.
struct Group {
    double score;
    std::size_t pos;
    std::size_t total;
};

inline std::vector<Group> groups_descending(std::span<const double> scores, std::span<const int> labels) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<Group> g;
    for (std::size_t i : order) {
        if (g.empty() || g.back().score != scores[i]) g.push_back({scores[i], 0, 0});
        g.back().pos += static_cast<std::size_t>(labels[i]);
        ++g.back().total;
    }
    return g;
}

}  // namespace detail

/// P(positive outranks negative), ties counted 1/2.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
    detail::check_inputs(scores, labels, "auroc");
    const auto groups = detail::groups_descending(scores, labels);
    double n_pos = 0, n_neg = 0;
    for (const auto& g : groups) {
        n_pos += static_cast<double>(g.pos);
        n_neg += static_cast<double>(g.total - g.pos);
    }
    if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auroc: both classes must be present");
    // Walk from the highest score: each positive beats all negatives below it.
    double neg_below = n_neg, wins = 0.0;
    for (const auto& g : groups) {
        const double neg = static_cast<double>(g.total - g.pos);
        neg_below -= neg;
        wins += static_cast<double>(g.pos) * (neg_below + 0.5 * neg);
    }
    return wins / (n_pos * n_neg);
}

/// Average precision: sum over distinct thresholds of (recall step) x precision.
inline double aupr(std::span<const double> scores, std::span<const int> labels) {
    detail::check_inputs(scores, labels, "aupr");
    const auto groups = detail::groups_descending(scores, labels);
    double n_pos = 0;
    for (const auto& g : groups) n_pos += static_cast<double>(g.pos);
    if (n_pos == 0) throw UndefinedMetricError("aupr: no positive labels");
    double tp = 0, seen = 0, ap = 0;
    for (const auto& g : groups) {
        tp += static_cast<double>(g.pos);
        seen += static_cast<double>(g.total);
        ap += (static_cast<double>(g.pos) / n_pos) * (tp / seen);
    }
    return ap;
}

/// Best F1 over thresholds "score >= t" at every distinct score.
inline double f1max(std::span<const double> scores, std::span<const int> labels) {
    detail::check_inputs(scores, labels, "f1max");
    const auto groups = detail::groups_descending(scores, labels);
    double n_pos = 0;
    for (const auto& g : groups) n_pos += static_cast<double>(g.pos);
    if (n_pos == 0) throw UndefinedMetricError("f1max: no positive labels");
    double tp = 0, seen = 0, best = 0;
    for (const auto& g : groups) {
        tp += static_cast<double>(g.pos);
        seen += static_cast<double>(g.total);
        best = std::max(best, 2.0 * tp / (seen + n_pos));
    }
    return best;
}

inline double auroc(const std::vector<double>& s, const std::vector<int>& l) { return auroc(std::span<const double>(s), std::span<const int>(l)); }
inline double aupr(const std::vector<double>& s, const std::vector<int>& l) { return aupr(std::span<const double>(s), std::span<const int>(l)); }
inline double f1max(const std::vector<double>& s, const std::vector<int>& l) { return f1max(std::span<const double>(s), std::span<const int>(l)); }

// -- evaluation over a dataset ------------------------------------------------

enum class Level { image, pixel, both };
enum class PixelAggregation { pooled, per_image };

inline Level parse_level(const std::string& s) {
    if (s == "image") return Level::image;
    if (s == "pixel") return Level::pixel;
    if (s == "both") return Level::both;
    throw ConfigError("unknown metric level '" + s + "' (expected image, pixel or both)");
}

inline PixelAggregation parse_pixel_aggregation(const std::string& s) {
    if (s == "pooled") return PixelAggregation::pooled;
    if (s == "per_image") return PixelAggregation::per_image;
    throw ConfigError("unknown pixel aggregation '" + s + "' (expected pooled or per_image)");
}

/// Prediction side of one evaluated image.
struct ScoredImage {
    std::string path;
    double score = 0.0;
    const Map* map = nullptr;  // required for pixel metrics
};

/// Ground-truth side of one evaluated image.
struct Truth {
    std::string path;
    std::string category;
    int label = 0;
    const Map* mask = nullptr;  // binary; may be null for normal images (all-zero)
};

struct Counts {
    std::size_t images = 0;
    std::size_t anomalous_images = 0;
    std::size_t pixels = 0;
    std::size_t anomalous_pixels = 0;
};

/// Metric values; a metric is absent when undefined for the data (e.g. one class).
struct MetricSet {
    std::optional<double> i_auroc, i_aupr, i_f1max, p_auroc, p_aupr, p_f1max;

    template <class F>
    void each(F&& f) {
        f("i_auroc", i_auroc);
        f("i_aupr", i_aupr);
        f("i_f1max", i_f1max);
        f("p_auroc", p_auroc);
        f("p_aupr", p_aupr);
        f("p_f1max", p_f1max);
    }
    template <class F>
    void each(F&& f) const {
        const_cast<MetricSet*>(this)->each([&](const char* n, std::optional<double>& v) { f(n, static_cast<const std::optional<double>&>(v)); });
    }
};

struct EvalReport {
    std::map<std::string, MetricSet> per_category;
    std::map<std::string, Counts> counts;
    MetricSet means;
    Level level = Level::both;
    PixelAggregation pixel_aggregation = PixelAggregation::pooled;
};

struct EvalOptions {
    Level level = Level::both;
    PixelAggregation pixel_aggregation = PixelAggregation::pooled;
};

namespace detail {

template <class Fn>
std::optional<double> defined_or_empty(Fn&& fn) {
    try {
        return fn();
    } catch (const UndefinedMetricError&) {
        return std::nullopt;
    }
}

inline void pixel_metrics(const std::vector<std::size_t>& idx, const std::vector<ScoredImage>& preds, const std::vector<Truth>& truth,
                          PixelAggregation agg, MetricSet& out, Counts& counts) {
    std::vector<double> pooled_s;
    std::vector<int> pooled_l;
    std::vector<double> auroc_v, aupr_v, f1_v;
    for (std::size_t i : idx) {
        const ScoredImage& p = preds[i];
        const Truth& t = truth[i];
        if (!p.map) throw DataError("pixel metrics: no anomaly map for '" + p.path + "'");
        if (t.label == 1 && !t.mask) throw DataError("pixel metrics: missing ground-truth mask for '" + t.path + "'");
        const Map& m = *p.map;
        if (t.mask && (t.mask->rows() != m.rows() || t.mask->cols() != m.cols()))
            throw DataError("pixel metrics: mask and map shapes differ for '" + t.path + "'");
        std::vector<double> s(static_cast<std::size_t>(m.size()));
        std::vector<int> l(s.size(), 0);
        for (Eigen::Index r = 0, k = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c, ++k) {
                s[static_cast<std::size_t>(k)] = m(r, c);
                if (t.mask) l[static_cast<std::size_t>(k)] = (*t.mask)(r, c) > 0.5 ? 1 : 0;
            }
        counts.pixels += s.size();
        for (int v : l) counts.anomalous_pixels += static_cast<std::size_t>(v);
        if (agg == PixelAggregation::pooled) {
            pooled_s.insert(pooled_s.end(), s.begin(), s.end());
            pooled_l.insert(pooled_l.end(), l.begin(), l.end());
        } else {
            if (auto v = defined_or_empty([&] { return auroc(s, l); })) auroc_v.push_back(*v);
            if (auto v = defined_or_empty([&] { return aupr(s, l); })) aupr_v.push_back(*v);
            if (auto v = defined_or_empty([&] { return f1max(s, l); })) f1_v.push_back(*v);
        }
    }
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    if (agg == PixelAggregation::pooled) {
        out.p_auroc = defined_or_empty([&] { return auroc(pooled_s, pooled_l); });
        out.p_aupr = defined_or_empty([&] { return aupr(pooled_s, pooled_l); });
        out.p_f1max = defined_or_empty([&] { return f1max(pooled_s, pooled_l); });
    } else {
        out.p_auroc = mean(auroc_v);
        out.p_aupr = mean(aupr_v);
        out.p_f1max = mean(f1_v);
    }
}

}  // namespace detail

/// Per-category metrics and their unweighted means. `preds[i]` must describe
/// the same image as `truth[i]` (checked by path).
inline EvalReport evaluate(const std::vector<ScoredImage>& preds, const std::vector<Truth>& truth, const EvalOptions& opt = {}) {
    if (preds.size() != truth.size())
        throw DataError("evaluate: " + std::to_string(preds.size()) + " predictions for " + std::to_string(truth.size()) + " ground-truth items");
    if (preds.empty()) throw DataError("evaluate: nothing to evaluate");
    std::map<std::string, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].path != truth[i].path)
            throw DataError("evaluate: prediction " + std::to_string(i) + " ('" + preds[i].path + "') is not aligned with ground truth ('" + truth[i].path + "')");
        if (truth[i].label != 0 && truth[i].label != 1) throw DataError("evaluate: label must be 0 or 1 for '" + truth[i].path + "'");
        by_cat[truth[i].category].push_back(i);
    }
    EvalReport rep;
    rep.level = opt.level;
    rep.pixel_aggregation = opt.pixel_aggregation;
    for (const auto& [cat, idx] : by_cat) {
        MetricSet ms;
        Counts& c = rep.counts[cat];
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t i : idx) {
            s.push_back(preds[i].score);
            l.push_back(truth[i].label);
            ++c.images;
            c.anomalous_images += static_cast<std::size_t>(truth[i].label);
        }
        if (opt.level != Level::pixel) {
            ms.i_auroc = detail::defined_or_empty([&] { return auroc(s, l); });
            ms.i_aupr = detail::defined_or_empty([&] { return aupr(s, l); });
            ms.i_f1max = detail::defined_or_empty([&] { return f1max(s, l); });
        }
        if (opt.level != Level::image) detail::pixel_metrics(idx, preds, truth, opt.pixel_aggregation, ms, c);
        rep.per_category[cat] = ms;
    }
    // Unweighted mean over the categories where each metric is defined.
    rep.means.each([&](const char* name, std::optional<double>& mean) {
        double sum = 0;
        int n = 0;
        for (const auto& [cat, ms] : rep.per_category)
            ms.each([&](const char* nm, const std::optional<double>& v) {
                if (std::string(nm) == name && v) {
                    sum += *v;
                    ++n;
                }
            });
        if (n > 0) mean = sum / n;
    });
    return rep;
}

inline nlohmann::json to_json(const MetricSet& m) {
    nlohmann::json j = nlohmann::json::object();
    m.each([&](const char* name, const std::optional<double>& v) { j[name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr); });
    return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [cat, ms] : r.per_category) {
        const Counts& c = r.counts.at(cat);
        cats[cat] = {{"metrics", to_json(ms)},
                     {"counts", {{"images", c.images}, {"anomalous_images", c.anomalous_images}, {"pixels", c.pixels}, {"anomalous_pixels", c.anomalous_pixels}}}};
    }
    return {{"per_category", cats},
            {"mean", to_json(r.means)},
            {"pixel_aggregation", r.pixel_aggregation == PixelAggregation::pooled ? "pooled" : "per_image"}};
}

/// Category rows, metric columns, values in percent; "-" marks an undefined metric.
inline std::string to_table(const EvalReport& r) {
    std::vector<std::string> header{"category"};
    r.means.each([&](const char* name, const std::optional<double>&) { header.emplace_back(name); });
    std::vector<std::vector<std::string>> rows;
    auto row_of = [](const std::string& label, const MetricSet& ms) {
        std::vector<std::string> row{label};
        ms.each([&](const char*, const std::optional<double>& v) {
            if (!v) {
                row.emplace_back("-");
                return;
            }
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.1f", *v * 100.0);
            row.emplace_back(buf);
        });
        return row;
    };
    for (const auto& [cat, ms] : r.per_category) rows.push_back(row_of(cat, ms));
    rows.push_back(row_of("mean", r.means));
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
        width[c] = header[c].size();
        for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream os;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == 0) {
                os << row[c] << std::string(width[c] - row[c].size(), ' ');
            } else {
                os << "  " << std::string(width[c] - row[c].size(), ' ') << row[c];
            }
        }
        os << '\n';
    };
    emit(header);
    for (const auto& row : rows) emit(row);
    return os.str();
}

}  // namespace adaptkit::metrics
