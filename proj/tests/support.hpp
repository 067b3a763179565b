#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "adaptkit/adaptkit.hpp"

namespace testsupport {

using namespace adaptkit;
namespace fs = std::filesystem;

inline Matrix random_matrix(Rng& r, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * r.normal();
    return m;
}

inline Vector random_vector(Rng& r, Eigen::Index n, double scale = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * r.normal();
    return v;
}

inline Image random_image(Rng& r, int h, int w) {
    Image im(h, w);
    for (auto& v : im.pixels) v = r.uniform();
    return im;
}

/// Tiny encoder: 16x16 input, 4x4 patches, two tapped layers.
inline EncoderConfig toy_encoder(int d = 8, int text_width = 8) {
    EncoderConfig e;
    e.patch_size = 4;
    e.embed_dim = d;
    e.text_width = text_width;
    e.feature_layers = {1, 2};
    e.input_resolution = 16;
    e.prompt_length_capacity = 16;
    return e;
}

inline std::shared_ptr<SyntheticBackbone> toy_backbone(int d = 8, int text_width = 8) {
    return std::make_shared<SyntheticBackbone>(toy_encoder(d, text_width));
}

/// Features with random unit-norm tokens on a g x g grid.
inline VisionFeatures random_features(Rng& r, int g, int d, int layers) {
    VisionFeatures f;
    f.grid = {g, g};
    for (int l = 0; l < layers; ++l) {
        Matrix m = random_matrix(r, g * g, d);
        m.rowwise().normalize();
        f.layers.push_back(m);
    }
    f.global = f.layers.back().colwise().mean().transpose();
    return f;
}

/// Central difference of a scalar function of one matrix entry.
inline double central_difference(Matrix& x, Eigen::Index i, double h, const std::function<double()>& f) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    return (up - down) / (2.0 * h);
}

/// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor for tiny gradients.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "adaptkit") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() / (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

inline std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace testsupport
