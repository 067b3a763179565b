#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace adaptkit {

// Row-major so that a token (one row) is contiguous in memory.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Dense RGB image, HWC layout, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // height * width * 3

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    bool empty() const { return pixels.empty(); }
    bool operator==(const Image&) const = default;
};

/// Single-channel map (anomaly map or mask), rows = height.
using Map = Matrix;

struct GridShape {
    int rows = 0;
    int cols = 0;

    int count() const { return rows * cols; }
    bool operator==(const GridShape&) const = default;
};

}  // namespace adaptkit
