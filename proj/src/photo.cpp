#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "slicepath/dataset.h"
#include "slicepath/error.h"

namespace slicepath::dataset {

namespace {

constexpr double kBlurSigma = 1.5;
constexpr double kMinComponentFraction = 1e-3;

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

// Pixel-edge boundary of a binary mask as closed loops, y pointing up. Every
// boundary edge ends up in exactly one loop, which is all even-odd filling needs.
geometry::SliceContour mask_boundary(const std::vector<std::uint8_t>& mask, int rows, int cols) {
    using Point = std::pair<int, int>;  // (x, y) lattice corner
    std::multimap<Point, Point> edges;
    auto filled = [&](int r, int c) { return r >= 0 && r < rows && c >= 0 && c < cols && mask[r * cols + c]; };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!filled(r, c)) continue;
            const int y0 = rows - r - 1;
            const int y1 = rows - r;
            // Counter-clockwise around the pixel, keeping the boundary ones.
            if (!filled(r + 1, c)) edges.emplace(Point{c, y0}, Point{c + 1, y0});
            if (!filled(r, c + 1)) edges.emplace(Point{c + 1, y0}, Point{c + 1, y1});
            if (!filled(r - 1, c)) edges.emplace(Point{c + 1, y1}, Point{c, y1});
            if (!filled(r, c - 1)) edges.emplace(Point{c, y1}, Point{c, y0});
        }
    }
    geometry::SliceContour contour;
    while (!edges.empty()) {
        auto it = edges.begin();
        const Point start = it->first;
        Point at = it->second;
        edges.erase(it);
        std::vector<Point> corners{start, at};
        while (at != start) {
            auto next = edges.find(at);
            if (next == edges.end()) break;
            at = next->second;
            edges.erase(next);
            corners.push_back(at);
        }
        // Drop collinear corners.
        geometry::Loop loop;
        for (std::size_t i = 0; i + 1 < corners.size(); ++i) {
            const Point& prev = i == 0 ? corners[corners.size() - 2] : corners[i - 1];
            const Point& cur = corners[i];
            const Point& nxt = corners[i + 1];
            const long cross = static_cast<long>(cur.first - prev.first) * (nxt.second - cur.second) -
                               static_cast<long>(cur.second - prev.second) * (nxt.first - cur.first);
            if (cross != 0) loop.emplace_back(cur.first, cur.second);
        }
        if (loop.size() >= 3) {
            loop.push_back(loop.front());
            contour.loops.push_back(std::move(loop));
        }
    }
    return contour;
}

}  // namespace

Eigen::MatrixXf gaussian_blur(const Eigen::MatrixXf& image, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> kernel(2 * radius + 1);
    float total = 0.0f;
    for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = static_cast<float>(std::exp(-0.5 * k * k / (sigma * sigma)));
        total += kernel[k + radius];
    }
    for (auto& w : kernel) w /= total;
    const int rows = static_cast<int>(image.rows());
    const int cols = static_cast<int>(image.cols());
    Eigen::MatrixXf tmp(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            float acc = 0.0f;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * image(r, clamp_index(c + k, cols));
            tmp(r, c) = acc;
        }
    }
    Eigen::MatrixXf out(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            float acc = 0.0f;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp(clamp_index(r + k, rows), c);
            out(r, c) = acc;
        }
    }
    return out;
}

Eigen::MatrixXf sobel_magnitude(const Eigen::MatrixXf& image) {
    const int rows = static_cast<int>(image.rows());
    const int cols = static_cast<int>(image.cols());
    Eigen::MatrixXf out(rows, cols);
    auto at = [&](int r, int c) { return image(clamp_index(r, rows), clamp_index(c, cols)); };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const float gx = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                             (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
            const float gy = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                             (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
            out(r, c) = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

float otsu_threshold(const Eigen::MatrixXf& values) {
    constexpr int kBins = 256;
    const float lo = values.minCoeff();
    const float hi = values.maxCoeff();
    if (!(hi > lo)) return hi;
    std::array<double, kBins> hist{};
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const int bin = std::min(kBins - 1, static_cast<int>((values(i) - lo) / (hi - lo) * kBins));
        hist[bin] += 1.0;
    }
    const double n = static_cast<double>(values.size());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += b * hist[b];
    double weight_bg = 0.0;
    double sum_bg = 0.0;
    double best = -1.0;
    int best_bin = 0;
    for (int b = 0; b < kBins; ++b) {
        weight_bg += hist[b];
        if (weight_bg == 0.0) continue;
        const double weight_fg = n - weight_bg;
        if (weight_fg == 0.0) break;
        sum_bg += b * hist[b];
        const double mean_bg = sum_bg / weight_bg;
        const double mean_fg = (sum_all - sum_bg) / weight_fg;
        const double between = weight_bg * weight_fg * (mean_bg - mean_fg) * (mean_bg - mean_fg);
        if (between > best) {
            best = between;
            best_bin = b;
        }
    }
    // Values strictly above the upper edge of the winning bin are foreground.
    return lo + (hi - lo) * static_cast<float>(best_bin + 1) / kBins;
}

double iou(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "iou of unequal rasters");
    const auto sa = (a.array() > 0.5f);
    const auto sb = (b.array() > 0.5f);
    const double inter = (sa && sb).count();
    const double uni = (sa || sb).count();
    return uni == 0.0 ? 1.0 : inter / uni;
}

SliceImage silhouette_from_photo(const Eigen::MatrixXf& gray) {
    const int rows = static_cast<int>(gray.rows());
    const int cols = static_cast<int>(gray.cols());
    if (rows < 3 || cols < 3) throw Error(ErrorKind::NoContourFound, "image too small");

    const Eigen::MatrixXf blurred = gaussian_blur(gray, kBlurSigma);
    const Eigen::MatrixXf magnitude = sobel_magnitude(blurred);
    if (!(magnitude.maxCoeff() > 1e-4f)) throw Error(ErrorKind::NoContourFound, "image has no edges");
    const float threshold = otsu_threshold(magnitude);

    const int n = rows * cols;
    std::vector<std::uint8_t> edge(n);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) edge[r * cols + c] = magnitude(r, c) > threshold;
    }

    // Largest 8-connected edge component.
    std::vector<int> label(n, -1);
    std::vector<int> stack;
    int best_label = -1;
    int best_size = 0;
    int next_label = 0;
    for (int start = 0; start < n; ++start) {
        if (!edge[start] || label[start] >= 0) continue;
        int size = 0;
        stack.push_back(start);
        label[start] = next_label;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++size;
            const int pr = p / cols;
            const int pc = p % cols;
            for (int dr = -1; dr <= 1; ++dr) {
                for (int dc = -1; dc <= 1; ++dc) {
                    const int qr = pr + dr;
                    const int qc = pc + dc;
                    if (qr < 0 || qr >= rows || qc < 0 || qc >= cols) continue;
                    const int q = qr * cols + qc;
                    if (edge[q] && label[q] < 0) {
                        label[q] = next_label;
                        stack.push_back(q);
                    }
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_label = next_label;
        }
        ++next_label;
    }
    if (best_label < 0 || best_size < std::max(8.0, kMinComponentFraction * n)) {
        throw Error(ErrorKind::NoContourFound, "no edge component above the minimum area");
    }

    // Fill: everything the border cannot reach without crossing the component.
    std::vector<std::uint8_t> outside(n, 0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (r != 0 && c != 0 && r != rows - 1 && c != cols - 1) continue;
            const int p = r * cols + c;
            if (label[p] != best_label && !outside[p]) {
                outside[p] = 1;
                stack.push_back(p);
            }
        }
    }
    while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int pr = p / cols;
        const int pc = p % cols;
        const std::array<std::pair<int, int>, 4> steps{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};
        for (auto [dr, dc] : steps) {
            const int qr = pr + dr;
            const int qc = pc + dc;
            if (qr < 0 || qr >= rows || qc < 0 || qc >= cols) continue;
            const int q = qr * cols + qc;
            if (!outside[q] && label[q] != best_label) {
                outside[q] = 1;
                stack.push_back(q);
            }
        }
    }
    std::vector<std::uint8_t> solid(n);
    for (int p = 0; p < n; ++p) solid[p] = !outside[p];

    // The edge band straddles the true outline. Band pixels go to whichever
    // side, interior or background, their intensity is closer to.
    double in_sum = 0.0, out_sum = 0.0;
    int in_count = 0, out_count = 0;
    for (int p = 0; p < n; ++p) {
        const double g = blurred(p / cols, p % cols);
        if (outside[p]) {
            out_sum += g;
            ++out_count;
        } else if (label[p] != best_label) {
            in_sum += g;
            ++in_count;
        }
    }
    if (in_count > 0 && out_count > 0) {
        const double in_mean = in_sum / in_count;
        const double out_mean = out_sum / out_count;
        for (int p = 0; p < n; ++p) {
            if (label[p] != best_label) continue;
            const double g = blurred(p / cols, p % cols);
            solid[p] = std::abs(g - in_mean) <= std::abs(g - out_mean);
        }
    }

    const auto contour = mask_boundary(solid, rows, cols);
    if (contour.loops.empty()) throw Error(ErrorKind::NoContourFound, "silhouette has no boundary");
    return geometry::rasterize(contour);
}

}  // namespace slicepath::dataset
