#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slicepath/gcode.h"

namespace slicepath::eval {

using Layer = std::vector<gcode::Keypoint>;

struct DensityCurve {
    Eigen::VectorXd grid;
    Eigen::VectorXd density;
    double bandwidth = 0.0;
};

// Silverman's rule, 1.06·σ̂·n^(−1/5).
double silverman_bandwidth(std::span<const double> samples);

// Gaussian KDE on `points` evenly spaced nodes spanning the sample range
// widened by five bandwidths on each side.
DensityCurve kde(std::span<const double> samples, std::optional<double> bandwidth = {}, int points = 1024);

// Density of `samples` evaluated at the given nodes.
Eigen::VectorXd kde_at(std::span<const double> samples, double bandwidth, const Eigen::VectorXd& grid);

double trapezoid(const Eigen::VectorXd& grid, const Eigen::VectorXd& values);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

using Statistic = std::function<double(std::span<const double>)>;

double mean(std::span<const double> samples);

// Percentile bootstrap.
Interval bootstrap_ci(std::span<const double> samples, const Statistic& statistic = mean, double level = 0.95,
                      int resamples = 1000, std::uint64_t seed = 0);

// Pointwise percentile band of the KDE under resampling, on a fixed grid.
struct DensityBand {
    Eigen::VectorXd lo;
    Eigen::VectorXd hi;
};

DensityBand kde_band(std::span<const double> samples, double bandwidth, const Eigen::VectorXd& grid, double level = 0.95,
                     int resamples = 200, std::uint64_t seed = 0);

// 100·(mean(truth) − mean(generated)) / mean(truth).
double mean_reduction(std::span<const double> truth, std::span<const double> generated);

struct OverlapResult {
    double iou = 0.0;
    double truth_coverage = 0.0;  // fraction of the joint footprint covered by the truth path
    double gen_coverage = 0.0;
};

inline constexpr double kLineWidth = 0.4;
inline constexpr double kGridPitch = 0.1;

// Deposited footprint: every extruding segment stroked with the given width,
// sampled at pixel centers.
struct Footprint {
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> cells;  // row = y index, col = x index
    Eigen::Vector2d origin = Eigen::Vector2d::Zero();            // world position of cell (0, 0)'s lower-left corner
    double pitch = kGridPitch;
};

// Grid covering the deposited segments of every layer, padded by one line width.
Footprint make_grid(std::span<const Layer> layers, double line_width, double grid_pitch);
void stroke(Footprint& grid, const Layer& layer, double line_width);

OverlapResult deposition_overlap(const Layer& truth, const Layer& generated, double line_width = kLineWidth,
                                 double grid_pitch = kGridPitch);

// Travel distance of every layer: total length between consecutive keypoints.
std::vector<double> travel_distances(std::span<const Layer> layers);

struct Summary {
    double truth_mean = 0.0;
    double generated_mean = 0.0;
    Interval truth_ci;
    Interval generated_ci;
    double reduction_percent = 0.0;
};

struct Evaluation {
    std::vector<double> truth;
    std::vector<std::vector<double>> runs;  // run × layer
    std::vector<double> generated;          // per-layer mean over runs
    std::vector<std::vector<OverlapResult>> overlaps;  // run × layer
    std::optional<Summary> summary;  // absent without runs
};

struct EvaluateOptions {
    double line_width = kLineWidth;
    double grid_pitch = kGridPitch;
    double level = 0.95;
    int resamples = 1000;
    std::uint64_t seed = 0;
};

// Every run must have as many layers as the truth.
Evaluation evaluate(std::span<const Layer> truth, std::span<const std::vector<Layer>> runs,
                    const EvaluateOptions& options = {});

struct PlotInputs {
    const Evaluation* evaluation = nullptr;
    const std::vector<Layer>* truth_layers = nullptr;
    const std::vector<std::vector<Layer>>* run_layers = nullptr;
    double line_width = kLineWidth;
    std::uint64_t seed = 0;
};

inline constexpr const char* kDistancesCsv = "distances.csv";
inline constexpr const char* kDensityCsv = "kde.csv";
inline constexpr const char* kOverlapCsv = "overlap.csv";
inline constexpr const char* kSummaryJson = "summary.json";
inline constexpr const char* kDensitySvg = "kde.svg";
inline constexpr const char* kScatterSvg = "scatter.svg";
inline constexpr const char* kOverlapSvg = "overlap.svg";

// CSV tables always; SVG figures only when there is at least one run.
void emit_plots(const PlotInputs& inputs, const std::string& out_dir);

// 17 significant digits, enough to round trip any double.
std::string format_number(double value);

}  // namespace slicepath::eval
