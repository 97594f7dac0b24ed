#include "slicepath/eval.h"

#include <Eigen/Geometry>
#include <fmt/format.h>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "slicepath/error.h"
#include "slicepath/random.h"

namespace slicepath::eval {

namespace {

double variance(std::span<const double> s) {
    const double m = mean(s);
    double acc = 0.0;
    for (double v : s) acc += (v - m) * (v - m);
    return acc / static_cast<double>(s.size() - 1);
}

void require_samples(std::span<const double> samples, const char* what) {
    if (samples.size() < 2) throw Error(ErrorKind::InvalidArgument, fmt::format("{} needs at least 2 samples", what));
}

// Type-7 quantile of sorted values.
double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

bool extrudes(const gcode::Keypoint& from, const gcode::Keypoint& to) { return to.e > from.e; }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

}  // namespace

double mean(std::span<const double> samples) {
    if (samples.empty()) throw Error(ErrorKind::InvalidArgument, "mean of an empty sample");
    double acc = 0.0;
    for (double v : samples) acc += v;
    return acc / static_cast<double>(samples.size());
}

double silverman_bandwidth(std::span<const double> samples) {
    require_samples(samples, "bandwidth");
    const double sd = std::sqrt(variance(samples));
    if (!(sd > 0.0)) throw Error(ErrorKind::DegenerateSample, "samples have zero variance");
    return 1.06 * sd * std::pow(static_cast<double>(samples.size()), -0.2);
}

Eigen::VectorXd kde_at(std::span<const double> samples, double bandwidth, const Eigen::VectorXd& grid) {
    const double norm = 1.0 / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
    Eigen::VectorXd out(grid.size());
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        double acc = 0.0;
        for (double s : samples) {
            const double z = (grid(i) - s) / bandwidth;
            acc += std::exp(-0.5 * z * z);
        }
        out(i) = acc * norm;
    }
    return out;
}

DensityCurve kde(std::span<const double> samples, std::optional<double> bandwidth, int points) {
    require_samples(samples, "kde");
    if (points < 2) throw Error(ErrorKind::InvalidArgument, "kde grid needs at least 2 points");
    const double h = bandwidth ? *bandwidth : silverman_bandwidth(samples);
    if (!(h > 0.0)) throw Error(ErrorKind::InvalidArgument, "bandwidth must be positive");
    const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
    DensityCurve curve;
    curve.bandwidth = h;
    curve.grid = Eigen::VectorXd::LinSpaced(points, *lo - 5.0 * h, *hi + 5.0 * h);
    curve.density = kde_at(samples, h, curve.grid);
    return curve;
}

double trapezoid(const Eigen::VectorXd& grid, const Eigen::VectorXd& values) {
    double acc = 0.0;
    for (Eigen::Index i = 1; i < grid.size(); ++i) acc += 0.5 * (values(i) + values(i - 1)) * (grid(i) - grid(i - 1));
    return acc;
}

Interval bootstrap_ci(std::span<const double> samples, const Statistic& statistic, double level, int resamples,
                      std::uint64_t seed) {
    require_samples(samples, "bootstrap");
    if (!(level > 0.0 && level < 1.0) || resamples < 1)
        throw Error(ErrorKind::InvalidArgument, "bootstrap needs 0 < level < 1 and resamples >= 1");
    Rng rng(seed);
    std::vector<double> draw(samples.size());
    std::vector<double> stats(static_cast<std::size_t>(resamples));
    for (auto& s : stats) {
        for (auto& d : draw) d = samples[rng.below(samples.size())];
        s = statistic(draw);
    }
    std::sort(stats.begin(), stats.end());
    const double tail = 0.5 * (1.0 - level);
    return {quantile(stats, tail), quantile(stats, 1.0 - tail)};
}

DensityBand kde_band(std::span<const double> samples, double bandwidth, const Eigen::VectorXd& grid, double level,
                     int resamples, std::uint64_t seed) {
    require_samples(samples, "kde band");
    Rng rng(seed);
    std::vector<double> draw(samples.size());
    Eigen::MatrixXd curves(grid.size(), resamples);
    for (int b = 0; b < resamples; ++b) {
        for (auto& d : draw) d = samples[rng.below(samples.size())];
        curves.col(b) = kde_at(draw, bandwidth, grid);
    }
    const double tail = 0.5 * (1.0 - level);
    DensityBand band{Eigen::VectorXd(grid.size()), Eigen::VectorXd(grid.size())};
    std::vector<double> row(static_cast<std::size_t>(resamples));
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        for (int b = 0; b < resamples; ++b) row[b] = curves(i, b);
        std::sort(row.begin(), row.end());
        band.lo(i) = quantile(row, tail);
        band.hi(i) = quantile(row, 1.0 - tail);
    }
    return band;
}

double mean_reduction(std::span<const double> truth, std::span<const double> generated) {
    const double t = mean(truth);
    const double g = mean(generated);
    if (t == 0.0) throw Error(ErrorKind::ZeroTruthMean, "truth mean is zero");
    return 100.0 * (t - g) / t;
}

Footprint make_grid(std::span<const Layer> layers, double line_width, double grid_pitch) {
    if (!(line_width > 0.0) || !(grid_pitch > 0.0))
        throw Error(ErrorKind::InvalidArgument, "line width and grid pitch must be positive");
    Eigen::AlignedBox2d box;
    for (const auto& layer : layers)
        for (std::size_t k = 1; k < layer.size(); ++k)
            if (extrudes(layer[k - 1], layer[k])) {
                box.extend(Eigen::Vector2d(layer[k - 1].x, layer[k - 1].y));
                box.extend(Eigen::Vector2d(layer[k].x, layer[k].y));
            }
    if (box.isEmpty()) throw Error(ErrorKind::EmptyPath, "no extruding segment");
    Footprint grid;
    grid.pitch = grid_pitch;
    grid.origin = box.min().array() - line_width;
    const Eigen::Vector2d extent = box.sizes().array() + 2.0 * line_width;
    const auto cols = static_cast<Eigen::Index>(std::ceil(extent.x() / grid_pitch));
    const auto rows = static_cast<Eigen::Index>(std::ceil(extent.y() / grid_pitch));
    grid.cells.setConstant(rows, cols, false);
    return grid;
}

void stroke(Footprint& grid, const Layer& layer, double line_width) {
    const double r = 0.5 * line_width;
    const double p = grid.pitch;
    bool any = false;
    for (std::size_t k = 1; k < layer.size(); ++k) {
        if (!extrudes(layer[k - 1], layer[k])) continue;
        any = true;
        const Eigen::Vector2d a(layer[k - 1].x, layer[k - 1].y);
        const Eigen::Vector2d b(layer[k].x, layer[k].y);
        const Eigen::Vector2d ab = b - a;
        const double len2 = ab.squaredNorm();
        const Eigen::Vector2d lo = a.cwiseMin(b).array() - r;
        const Eigen::Vector2d hi = a.cwiseMax(b).array() + r;
        const auto c0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor((lo.x() - grid.origin.x()) / p)));
        const auto c1 = std::min<Eigen::Index>(grid.cells.cols() - 1,
                                               static_cast<Eigen::Index>(std::floor((hi.x() - grid.origin.x()) / p)));
        const auto r0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor((lo.y() - grid.origin.y()) / p)));
        const auto r1 = std::min<Eigen::Index>(grid.cells.rows() - 1,
                                               static_cast<Eigen::Index>(std::floor((hi.y() - grid.origin.y()) / p)));
        for (Eigen::Index row = r0; row <= r1; ++row)
            for (Eigen::Index col = c0; col <= c1; ++col) {
                const Eigen::Vector2d c = grid.origin + p * Eigen::Vector2d(col + 0.5, row + 0.5);
                const double s = len2 > 0.0 ? std::clamp((c - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
                if ((c - (a + s * ab)).norm() <= r) grid.cells(row, col) = true;
            }
    }
    if (!any) throw Error(ErrorKind::EmptyPath, "no extruding segment");
}

OverlapResult deposition_overlap(const Layer& truth, const Layer& generated, double line_width, double grid_pitch) {
    const std::vector<Layer> both{truth, generated};
    auto t = make_grid(both, line_width, grid_pitch);
    auto g = t;
    stroke(t, truth, line_width);
    stroke(g, generated, line_width);
    const auto both_set = (t.cells.array() && g.cells.array()).count();
    const auto either = (t.cells.array() || g.cells.array()).count();
    const double u = static_cast<double>(either);
    return {static_cast<double>(both_set) / u, static_cast<double>(t.cells.count()) / u,
            static_cast<double>(g.cells.count()) / u};
}

std::vector<double> travel_distances(std::span<const Layer> layers) {
    std::vector<double> out;
    out.reserve(layers.size());
    for (const auto& layer : layers) out.push_back(gcode::travel_length(layer));
    return out;
}

Evaluation evaluate(std::span<const Layer> truth, std::span<const std::vector<Layer>> runs,
                    const EvaluateOptions& options) {
    if (truth.empty()) throw Error(ErrorKind::InvalidArgument, "truth has no layers");
    for (std::size_t r = 0; r < runs.size(); ++r)
        if (runs[r].size() != truth.size())
            throw Error(ErrorKind::InvalidArgument,
                        fmt::format("run {} has {} layers, truth has {}", r, runs[r].size(), truth.size()));
    Evaluation ev;
    ev.truth = travel_distances(truth);
    for (const auto& run : runs) {
        ev.runs.push_back(travel_distances(run));
        auto& per_layer = ev.overlaps.emplace_back();
        for (std::size_t l = 0; l < truth.size(); ++l)
            per_layer.push_back(deposition_overlap(truth[l], run[l], options.line_width, options.grid_pitch));
    }
    if (runs.empty()) return ev;

    ev.generated.assign(truth.size(), 0.0);
    for (const auto& run : ev.runs)
        for (std::size_t l = 0; l < run.size(); ++l) ev.generated[l] += run[l] / static_cast<double>(runs.size());

    Summary s;
    s.truth_mean = mean(ev.truth);
    s.generated_mean = mean(ev.generated);
    s.reduction_percent = mean_reduction(ev.truth, ev.generated);
    if (ev.truth.size() >= 2) {
        s.truth_ci = bootstrap_ci(ev.truth, mean, options.level, options.resamples, derive_seed(options.seed, 0));
        s.generated_ci = bootstrap_ci(ev.generated, mean, options.level, options.resamples, derive_seed(options.seed, 1));
    } else {
        s.truth_ci = {s.truth_mean, s.truth_mean};
        s.generated_ci = {s.generated_mean, s.generated_mean};
    }
    ev.summary = s;
    return ev;
}

std::string format_number(double value) { return fmt::format("{:.17g}", value); }

namespace {

struct Frame {
    double x0, x1, y0, y1;  // data range
    double left = 60, top = 20, width = 560, height = 340;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * width; }
    double py(double y) const { return top + height - (y - y0) / (y1 - y0) * height; }
};

std::string svg_open(double width, double height) {
    return fmt::format(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} "
        "{1}\">\n<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
        width, height);
}

std::string polyline(const Frame& f, const Eigen::VectorXd& x, const Eigen::VectorXd& y, const std::string& style) {
    std::string pts;
    for (Eigen::Index i = 0; i < x.size(); ++i) pts += fmt::format("{:.3f},{:.3f} ", f.px(x(i)), f.py(y(i)));
    return fmt::format("<polyline fill=\"none\" {} points=\"{}\"/>\n", style, pts);
}

std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
    std::string s = fmt::format(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", f.left, f.top,
        f.width, f.height);
    s += fmt::format("<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                     f.left + f.width / 2, f.top + f.height + 30, xlabel);
    s += fmt::format("<text x=\"15\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 15 {})\" "
                     "text-anchor=\"middle\">{}</text>\n",
                     f.top + f.height / 2, f.top + f.height / 2, ylabel);
    for (int i = 0; i <= 4; ++i) {
        const double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
        s += fmt::format("<text x=\"{:.3f}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.4g}</text>\n", f.px(x),
                         f.top + f.height + 14, x);
    }
    return s;
}

// Dark blue to yellow.
std::string ramp(double u) {
    u = std::clamp(u, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(68 + u * (253 - 68)));
    const int g = static_cast<int>(std::lround(1 + u * (231 - 1)));
    const int b = static_cast<int>(std::lround(84 + u * (37 - 84)));
    return fmt::format("#{:02x}{:02x}{:02x}", r, g, b);
}

std::string density_svg(const DensityCurve& truth, const Eigen::VectorXd& generated, const DensityBand& band) {
    Frame f{truth.grid(0), truth.grid(truth.grid.size() - 1), 0.0,
            std::max({truth.density.maxCoeff(), generated.maxCoeff(), band.hi.maxCoeff()}) * 1.05};
    if (!(f.y1 > 0.0)) f.y1 = 1.0;
    std::string s = svg_open(640, 400);
    std::string pts;
    for (Eigen::Index i = 0; i < truth.grid.size(); ++i)
        pts += fmt::format("{:.3f},{:.3f} ", f.px(truth.grid(i)), f.py(band.hi(i)));
    for (Eigen::Index i = truth.grid.size() - 1; i >= 0; --i)
        pts += fmt::format("{:.3f},{:.3f} ", f.px(truth.grid(i)), f.py(band.lo(i)));
    s += fmt::format("<polygon id=\"ci-band\" fill=\"#2ca02c\" fill-opacity=\"0.25\" stroke=\"none\" points=\"{}\"/>\n",
                     pts);
    s += polyline(f, truth.grid, truth.density, "id=\"truth\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6 4\"");
    s += polyline(f, truth.grid, generated, "id=\"generated\" stroke=\"#2ca02c\" stroke-width=\"2\"");
    s += axes(f, "travel distance", "density");
    s += "</svg>\n";
    return s;
}

Eigen::AlignedBox2d layer_box(const Layer& layer) {
    Eigen::AlignedBox2d box;
    for (const auto& k : layer) box.extend(Eigen::Vector2d(k.x, k.y));
    if (box.isEmpty()) box.extend(Eigen::Vector2d::Zero());
    if (box.sizes().maxCoeff() <= 0.0) box.extend(box.min() + Eigen::Vector2d::Ones());
    return box;
}

std::string scatter_panel(const Layer& layer, double left, const std::string& title) {
    const auto box = layer_box(layer);
    const double side = box.sizes().maxCoeff();
    Frame f{box.min().x(), box.min().x() + side, box.min().y(), box.min().y() + side, left, 30, 300, 300};
    double e_lo = 0.0, e_hi = 1.0;
    if (!layer.empty()) {
        const auto [lo, hi] = std::minmax_element(layer.begin(), layer.end(),
                                                  [](const auto& a, const auto& b) { return a.e < b.e; });
        e_lo = lo->e;
        e_hi = hi->e;
    }
    std::string s = fmt::format("<text x=\"{}\" y=\"20\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                                left + 150, title);
    for (const auto& k : layer) {
        const double u = e_hi > e_lo ? (k.e - e_lo) / (e_hi - e_lo) : 0.0;
        s += fmt::format("<circle cx=\"{:.3f}\" cy=\"{:.3f}\" r=\"2.5\" fill=\"{}\"/>\n", f.px(k.x), f.py(k.y), ramp(u));
    }
    return s;
}

std::string overlap_svg(const Layer& truth, const Layer& generated, double line_width) {
    auto box = layer_box(truth);
    box.extend(layer_box(generated));
    const double side = box.sizes().maxCoeff() + 2.0 * line_width;
    const double scale = 560.0 / side;
    const Eigen::Vector2d lo = box.min().array() - line_width;
    auto px = [&](double x) { return 20.0 + (x - lo.x()) * scale; };
    auto py = [&](double y) { return 580.0 - (y - lo.y()) * scale; };
    std::string s = svg_open(600, 600);
    auto draw = [&](const Layer& layer, const char* id, const char* color, double opacity) {
        s += fmt::format("<g id=\"{}\" stroke=\"{}\" stroke-opacity=\"{}\" stroke-width=\"{:.4f}\" "
                         "stroke-linecap=\"round\" fill=\"none\">\n",
                         id, color, opacity, line_width * scale);
        for (std::size_t k = 1; k < layer.size(); ++k)
            if (extrudes(layer[k - 1], layer[k]))
                s += fmt::format("<line x1=\"{:.3f}\" y1=\"{:.3f}\" x2=\"{:.3f}\" y2=\"{:.3f}\"/>\n", px(layer[k - 1].x),
                                 py(layer[k - 1].y), px(layer[k].x), py(layer[k].y));
        s += "</g>\n";
    };
    draw(truth, "truth", "#d62728", 0.8);
    draw(generated, "generated", "#2ca02c", 0.6);
    s += "</svg>\n";
    return s;
}

nlohmann::json interval_json(const Interval& i) { return {{"lo", i.lo}, {"hi", i.hi}}; }

}  // namespace

void emit_plots(const PlotInputs& inputs, const std::string& out_dir) {
    if (inputs.evaluation == nullptr) throw Error(ErrorKind::InvalidArgument, "emit_plots needs an evaluation");
    const Evaluation& ev = *inputs.evaluation;
    namespace fs = std::filesystem;
    const fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string());

    const bool have_runs = !ev.runs.empty();

    std::string distances = "layer,truth";
    for (std::size_t r = 0; r < ev.runs.size(); ++r) distances += fmt::format(",run_{}", r);
    distances += ",generated_mean\n";
    if (have_runs)
        for (std::size_t l = 0; l < ev.truth.size(); ++l) {
            distances += fmt::format("{},{}", l, format_number(ev.truth[l]));
            for (const auto& run : ev.runs) distances += "," + format_number(run[l]);
            distances += "," + format_number(ev.generated[l]) + "\n";
        }
    write_text(dir / kDistancesCsv, distances);

    std::string overlap = "run,layer,iou,truth_coverage,gen_coverage\n";
    for (std::size_t r = 0; r < ev.overlaps.size(); ++r)
        for (std::size_t l = 0; l < ev.overlaps[r].size(); ++l) {
            const auto& o = ev.overlaps[r][l];
            overlap += fmt::format("{},{},{},{},{}\n", r, l, format_number(o.iou), format_number(o.truth_coverage),
                                   format_number(o.gen_coverage));
        }
    write_text(dir / kOverlapCsv, overlap);

    // Densities need spread in both samples.
    std::optional<DensityCurve> truth_curve;
    Eigen::VectorXd gen_density;
    DensityBand band;
    if (have_runs && ev.truth.size() >= 2) {
        try {
            const double h = silverman_bandwidth(ev.truth);
            const double hg = silverman_bandwidth(ev.generated);
            auto pooled = ev.truth;
            pooled.insert(pooled.end(), ev.generated.begin(), ev.generated.end());
            const auto [lo, hi] = std::minmax_element(pooled.begin(), pooled.end());
            const double pad = 5.0 * std::max(h, hg);
            DensityCurve c;
            c.bandwidth = h;
            c.grid = Eigen::VectorXd::LinSpaced(512, *lo - pad, *hi + pad);
            c.density = kde_at(ev.truth, h, c.grid);
            gen_density = kde_at(ev.generated, hg, c.grid);
            band = kde_band(ev.generated, hg, c.grid, 0.95, 200, derive_seed(inputs.seed, 2));
            truth_curve = std::move(c);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::DegenerateSample) throw;
        }
    }
    std::string density = "x,truth_density,generated_density,band_lo,band_hi\n";
    if (truth_curve)
        for (Eigen::Index i = 0; i < truth_curve->grid.size(); ++i)
            density += fmt::format("{},{},{},{},{}\n", format_number(truth_curve->grid(i)),
                                   format_number(truth_curve->density(i)), format_number(gen_density(i)),
                                   format_number(band.lo(i)), format_number(band.hi(i)));
    write_text(dir / kDensityCsv, density);

    nlohmann::json summary = {{"layers", ev.truth.size()}, {"runs", ev.runs.size()}};
    if (ev.summary) {
        const auto& s = *ev.summary;
        summary["truth_mean"] = s.truth_mean;
        summary["generated_mean"] = s.generated_mean;
        summary["truth_ci"] = interval_json(s.truth_ci);
        summary["generated_ci"] = interval_json(s.generated_ci);
        summary["reduction_percent"] = s.reduction_percent;
        double iou = 0.0;
        std::size_t n = 0;
        for (const auto& run : ev.overlaps)
            for (const auto& o : run) {
                iou += o.iou;
                ++n;
            }
        summary["mean_iou"] = n ? iou / static_cast<double>(n) : 0.0;
    }
    write_text(dir / kSummaryJson, summary.dump(2) + "\n");

    if (!have_runs) return;
    if (truth_curve) write_text(dir / kDensitySvg, density_svg(*truth_curve, gen_density, band));
    if (inputs.truth_layers && inputs.run_layers && !inputs.truth_layers->empty() && !inputs.run_layers->empty() &&
        !inputs.run_layers->front().empty()) {
        const auto& t = inputs.truth_layers->front();
        const auto& g = inputs.run_layers->front().front();
        std::string scatter = svg_open(680, 360);
        scatter += scatter_panel(t, 20, "truth");
        scatter += scatter_panel(g, 360, "generated");
        scatter += "</svg>\n";
        write_text(dir / kScatterSvg, scatter);
        write_text(dir / kOverlapSvg, overlap_svg(t, g, inputs.line_width));
    }
}

}  // namespace slicepath::eval
