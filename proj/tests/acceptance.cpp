// One line per acceptance criterion: PASS/FAIL, id, measured values.

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_check.h"
#include "mesh_fixtures.h"
#include "slicepath/cli.h"
#include "slicepath/dataset.h"
#include "slicepath/diffusion.h"
#include "slicepath/error.h"
#include "slicepath/eval.h"
#include "slicepath/gcode.h"
#include "slicepath/geometry.h"
#include "slicepath/model.h"
#include "slicepath/random.h"
#include "slicepath/train.h"

#ifndef SLICEPATH_TEST_DATA
#define SLICEPATH_TEST_DATA "tests/data"
#endif

using namespace slicepath;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome parser_round_trip() {
    const auto start = Clock::now();
    Rng rng(2024);
    gcode::PrinterProfile profile;
    double worst_xy = 0.0, worst_e = 0.0;
    bool counts_match = true;
    for (int trial = 0; trial < 500; ++trial) {
        const auto n = 1 + rng.below(300);
        std::vector<gcode::Keypoint> ks;
        double e = rng.uniform(0.0, 5.0);
        for (std::size_t i = 0; i < n; ++i) {
            e += rng.uniform(0.0, 0.4);
            ks.push_back({rng.uniform(0.0, 220.0), rng.uniform(0.0, 220.0), e});
        }
        const auto layers = gcode::parse_program(gcode::emit_layer(ks, profile, 0.2));
        if (layers.size() != 1 || layers[0].keypoints.size() != ks.size()) {
            counts_match = false;
            continue;
        }
        for (std::size_t i = 0; i < ks.size(); ++i) {
            const auto& k = layers[0].keypoints[i];
            worst_xy = std::max({worst_xy, std::abs(k.x - ks[i].x), std::abs(k.y - ks[i].y)});
            worst_e = std::max(worst_e, std::abs(k.e - ks[i].e));
        }
    }
    const double elapsed = seconds_since(start);
    return {counts_match && worst_xy <= 1e-5 && worst_e <= 1e-5 && elapsed < 5.0,
            fmt::format("500 layers, max xy error {:.2e} mm, max E error {:.2e} mm, {:.2f} s", worst_xy, worst_e, elapsed)};
}

Outcome state_machine_corpus() {
    const fs::path dir = fs::path(SLICEPATH_TEST_DATA) / "corpus";
    int files = 0, mismatches = 0, points = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".gcode") continue;
        ++files;
        auto expected_path = entry.path();
        expected_path.replace_extension(".expected.csv");
        const auto layers = gcode::parse_program(slurp(entry.path()));
        std::vector<std::array<double, 5>> got;
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (const auto& k : layers[l].keypoints) got.push_back({double(l), layers[l].z, k.x, k.y, k.e});
        std::istringstream csv(slurp(expected_path));
        std::string line;
        std::getline(csv, line);
        std::size_t row = 0;
        while (std::getline(csv, line)) {
            if (line.empty()) continue;
            std::array<double, 5> want{};
            std::istringstream cells(line);
            std::string cell;
            for (auto& w : want) {
                std::getline(cells, cell, ',');
                w = std::stod(cell);
            }
            if (row >= got.size()) {
                ++mismatches;
            } else {
                for (int c = 0; c < 5; ++c)
                    if (std::abs(got[row][c] - want[c]) > 1e-12) {
                        ++mismatches;
                        break;
                    }
            }
            ++row;
            ++points;
        }
        if (row != got.size()) ++mismatches;
    }
    return {files >= 3 && mismatches == 0,
            fmt::format("{} files, {} expected keypoints, {} mismatches", files, points, mismatches)};
}

Outcome normalization() {
    Rng rng(77);
    double worst = 0.0, worst_aspect = 0.0;
    int degenerate_ok = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        gcode::LayerToolpath layer;
        const std::size_t n = 2 + rng.below(200);
        const double w = rng.uniform(1.0, 200.0), h = rng.uniform(1.0, 200.0);
        const double ox = rng.uniform(-50.0, 50.0), oy = rng.uniform(-50.0, 50.0);
        const bool flat = trial % 10 == 0;
        double e = rng.uniform(0.0, 10.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!flat) e += rng.uniform(0.0, 1.0);
            layer.keypoints.push_back({ox + w * rng.uniform(), oy + h * rng.uniform(), e});
        }
        const auto r = dataset::normalize(layer, n);
        const auto back = dataset::denormalize(r.x0, r.mask, r.norm);
        const double span = std::max(w, h);
        for (std::size_t i = 0; i < n; ++i) {
            worst = std::max({worst, std::abs(back[i].x - layer.keypoints[i].x) / span,
                              std::abs(back[i].y - layer.keypoints[i].y) / span,
                              std::abs(back[i].e - layer.keypoints[i].e) / std::max(1.0, std::abs(layer.keypoints[i].e))});
        }
        // Aspect ratio: normalized extents stand in the same ratio as the raw ones.
        double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300, rxlo = 1e300, rxhi = -1e300, rylo = 1e300, ryhi = -1e300;
        for (std::size_t i = 0; i < n; ++i) {
            xlo = std::min(xlo, r.x0(0, i));
            xhi = std::max(xhi, r.x0(0, i));
            ylo = std::min(ylo, r.x0(1, i));
            yhi = std::max(yhi, r.x0(1, i));
            rxlo = std::min(rxlo, layer.keypoints[i].x);
            rxhi = std::max(rxhi, layer.keypoints[i].x);
            rylo = std::min(rylo, layer.keypoints[i].y);
            ryhi = std::max(ryhi, layer.keypoints[i].y);
        }
        worst_aspect = std::max(worst_aspect, std::abs((xhi - xlo) / (yhi - ylo) - (rxhi - rxlo) / (ryhi - rylo)) /
                                                  ((rxhi - rxlo) / (ryhi - rylo)));
        if (flat && r.norm.degenerate_e && back.front().e == layer.keypoints.front().e) ++degenerate_ok;
    }
    return {worst <= 1e-9 && worst_aspect <= 1e-9 && degenerate_ok == 100,
            fmt::format("1000 layers, max relative round-trip error {:.2e}, aspect error {:.2e}, degenerate {}/100",
                        worst, worst_aspect, degenerate_ok)};
}

Outcome diffusion_math() {
    const auto s = diffusion::make_cosine_schedule(500);
    bool monotone = true;
    for (int t = 1; t < s.steps; ++t) monotone &= s.alpha_bar(t) < s.alpha_bar(t - 1);
    const bool ends = s.alpha_bar(0) >= 0.999 && s.alpha_bar(499) <= 1e-4;

    const int t = 250, n = 100000;
    const double ab = s.alpha_bar(t);
    Rng rng(5);
    Eigen::MatrixXd x0(1, 1);
    x0 << 0.6;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = diffusion::q_sample(s, x0, t, diffusion::gaussian(1, 1, rng))(0, 0);
        sum += v;
        sum_sq += v * v;
    }
    const double mean = sum / n, var = sum_sq / n - mean * mean;
    const double mean_err = std::abs(mean - std::sqrt(ab) * x0(0, 0));
    const bool moments = mean_err < 3 * std::sqrt(1 - ab) / std::sqrt(double(n)) && std::abs(var / (1 - ab) - 1) < 0.02;

    Rng r2(6);
    const Eigen::MatrixXd a = diffusion::gaussian(3, 12, r2), b = diffusion::gaussian(3, 12, r2);
    Eigen::VectorXd mask = Eigen::VectorXd::Zero(12);
    mask.head(7).setOnes();
    Eigen::MatrixXd a2 = a, b2 = b;
    a2.rightCols(5).setConstant(1e9);
    b2.rightCols(5) = diffusion::gaussian(3, 5, r2);
    const bool annihilation = diffusion::masked_loss(a, b, mask, {}, 1.3) == diffusion::masked_loss(a2, b2, mask, {}, 1.3);
    return {monotone && ends && moments && annihilation,
            fmt::format("alpha_bar monotone {}, alpha_bar[0] {:.6f}, alpha_bar[499] {:.2e}, MC mean err {:.2e}, var ratio "
                        "{:.4f}, mask annihilation {}",
                        monotone, s.alpha_bar(0), s.alpha_bar(499), mean_err, var / (1 - ab), annihilation)};
}

// Eight records with pairwise distinct slice images.
std::vector<dataset::TrainingRecord> overfit_records(std::size_t n_max) {
    using geometry::Infill;
    using geometry::Shape;
    const std::vector<geometry::ShapeSpec> specs = {
        {.shape = Shape::Square, .infill = Infill::Rectilinear},
        {.shape = Shape::Rectangle, .infill = Infill::Concentric, .aspect = 0.5},
        {.shape = Shape::Circle, .infill = Infill::Rectilinear},
        {.shape = Shape::Annulus, .infill = Infill::Concentric, .hole_ratio = 0.5},
        {.shape = Shape::CShape, .infill = Infill::Rectilinear},
        {.shape = Shape::Rectangle, .infill = Infill::Rectilinear, .aspect = 0.75},
        {.shape = Shape::Annulus, .infill = Infill::Rectilinear, .hole_ratio = 0.3},
        {.shape = Shape::CShape, .infill = Infill::Concentric, .gap_degrees = 45}};
    std::vector<dataset::TrainingRecord> records;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        auto spec = specs[i];
        spec.size = 20.0;
        spec.density = 0.1;
        spec.arc_segments = 16;
        const auto sample = geometry::synth_sample(spec, i);
        auto r = dataset::normalize(sample.toolpath, n_max);
        r.image = geometry::rasterize(sample.contour);
        records.push_back(std::move(r));
    }
    return records;
}

Outcome learning_capability() {
    const auto start = Clock::now();
    const auto records = overfit_records(64);

    model::ModelConfig mc;  // base 32, multipliers (2, 2, 4)
    mc.encoder.embed_dim = 32;
    mc.encoder.depth = 1;
    mc.encoder.heads = 2;
    mc.max_length = 64;
    train::TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 1500;
    tc.lr0 = 1e-3;
    tc.weight_decay = 0.0;
    tc.diffusion_steps = 100;
    tc.val_fraction = 0.0;
    tc.val_timesteps = 1;
    tc.plateau.patience = 100;
    tc.checkpoint_every = tc.epochs;
    tc.seed = 1;
    const auto out = fs::temp_directory_path() / "slicepath_acceptance_a5";
    fs::remove_all(out);
    const auto state = train::train_loop(records, mc, tc, out.string());

    const auto schedule = diffusion::make_cosine_schedule(tc.diffusion_steps);
    const double mse = train::masked_mse(mc, state.params, records, schedule, 10, 7);

    double abs_sum[3] = {0, 0, 0}, worst_record[3] = {0, 0, 0};
    std::size_t valid = 0, lengths_exact = 0, emitted_ok = 0;
    gcode::PrinterProfile profile;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        Rng rng(100 + i);
        auto g = diffusion::generate(mc, state.params, r.image.pixels, schedule, rng);
        double rec[3] = {0, 0, 0};
        for (std::size_t k = 0; k < r.true_len; ++k)
            for (int c = 0; c < 3; ++c) rec[c] += std::abs(g.x0(c, k) - r.x0(c, k));
        for (int c = 0; c < 3; ++c) {
            abs_sum[c] += rec[c];
            worst_record[c] = std::max(worst_record[c], rec[c] / double(r.true_len));
        }
        valid += r.true_len;
        lengths_exact += g.length == r.true_len;

        diffusion::project_monotone_extrusion(g.x0, g.length);
        dataset::DenormalizeOptions place;
        place.xy_mid = dataset::Vec2(110.0, 110.0);
        const auto ks = dataset::denormalize(g.x0, g.mask, r.norm, place);
        const auto report = gcode::validate_layer(ks, profile);
        const auto parsed = gcode::parse_program(gcode::emit_layer(ks, profile, 0.2));
        emitted_ok += report.valid() && parsed.size() == 1 && parsed[0].keypoints.size() == ks.size();
    }
    double mae[3];
    for (int c = 0; c < 3; ++c) mae[c] = abs_sum[c] / double(valid);
    const double elapsed = seconds_since(start);
    const bool pass = mse < 0.01 && mae[0] < 0.05 && mae[1] < 0.05 && mae[2] < 0.05 && emitted_ok == records.size() &&
                      elapsed < 1800.0;
    return {pass, fmt::format("masked MSE {:.5f} after {} epochs; sampled MAE x {:.4f} y {:.4f} e {:.4f} (worst record {:.4f} "
                              "{:.4f} {:.4f}); lengths exact {}/8; valid G-code {}/8; {:.0f} s",
                              mse, state.epoch, mae[0], mae[1], mae[2], worst_record[0], worst_record[1], worst_record[2],
                              lengths_exact, emitted_ok, elapsed)};
}

Outcome gradient_correctness() {
    model::ModelConfig config;
    config.encoder.embed_dim = 8;
    config.encoder.depth = 1;
    config.encoder.heads = 2;
    config.encoder.mlp_ratio = 2;
    config.unet.base_channels = 8;
    config.unet.head_dim = 8;
    config.max_length = 16;
    config.length_hidden = 8;
    using MatD = ad::Matrix<double>;
    Rng rng(31);
    auto params = model::init_parameters<double>(config, rng);
    auto randn = [&](Eigen::Index r, Eigen::Index c) {
        MatD m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
        return m;
    };
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += 0.1 * randn(params[i].rows(), params[i].cols());
    MatD image = MatD::Zero(224, 224);
    for (int r = 30; r < 190; ++r)
        for (int c = 50; c < 120 + r / 3; ++c) image(r, c) = 1.0;
    const MatD noisy = randn(3, 12), target = randn(3, 12);
    const MatD weights = randn(3, 12).cwiseAbs();

    auto build = [&](ad::Tape<double>& tape, model::Bound<double>& bound) {
        const auto tokens = model::encode(config, bound, image);
        const auto y = model::denoise(config, bound, tape.constant(noisy), 41, tokens);
        const auto len = model::predict_length(config, bound, tokens);
        return ad::weighted_squared_error(y, target, weights) +
               ad::weighted_squared_error(len, MatD(MatD::Constant(1, 1, 0.4)), MatD(MatD::Ones(1, 1)));
    };
    auto loss = [&](const model::Parameters<double>& p) {
        ad::Tape<double> tape;
        model::Bound<double> bound(tape, p, false);
        return build(tape, bound).value()(0, 0);
    };
    auto gradient = [&](const model::Parameters<double>& p) {
        ad::Tape<double> tape;
        model::Bound<double> bound(tape, p, true);
        tape.backward(build(tape, bound));
        return bound.gradients();
    };
    double worst = 0.0;
    std::size_t classes = 0, probes = 0;
    bool enough = true;
    for (const auto& [name, pick] : testing::parameter_classes()) {
        const auto found = testing::probe_gradients(params, loss, gradient, pick, 20, 500 + classes);
        enough &= found.size() >= 20;
        for (const auto& p : found) worst = std::max(worst, p.relative_error);
        probes += found.size();
        ++classes;
    }
    return {enough && worst < 1e-4,
            fmt::format("{} layer classes, {} probes, max relative error {:.2e} (double, h=1e-5)", classes, probes, worst)};
}

Outcome statistics_harness() {
    int covered = 0;
    for (int trial = 0; trial < 200; ++trial) {
        Rng rng(derive_seed(4242, trial));
        std::vector<double> s(500);
        for (auto& v : s) v = rng.normal();
        const auto ci = eval::bootstrap_ci(s, eval::mean, 0.95, 1000, derive_seed(17, trial));
        covered += ci.lo <= 0.0 && 0.0 <= ci.hi;
    }
    const double coverage = covered / 200.0;

    Rng rng(8);
    std::vector<double> s(10000);
    for (auto& v : s) v = rng.normal();
    const auto curve = eval::kde(s);
    double sup = 0.0;
    for (Eigen::Index i = 0; i < curve.grid.size(); ++i) {
        const double x = curve.grid(i);
        sup = std::max(sup, std::abs(curve.density(i) - std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi)));
    }
    const std::vector<double> truth{427.98}, generated{417.73};
    const double reduction = eval::mean_reduction(truth, generated);
    const bool pass = coverage >= 0.90 && coverage <= 0.99 && sup < 0.02 && std::abs(reduction - 2.3950) < 5e-5;
    return {pass, fmt::format("bootstrap coverage {:.3f}, KDE sup error {:.4f}, mean reduction {:.4f}%", coverage, sup,
                              reduction)};
}

Outcome geometry_checks() {
    geometry::TriangleMesh cube;
    const geometry::Vec3 v[8] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
    const int faces[12][3] = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                              {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
    for (const auto& f : faces) cube.triangles.push_back({v[f[0]], v[f[1]], v[f[2]]});
    const auto square = geometry::slice_mesh(cube, 0.5);
    const double cube_err = square.loops.size() == 1 ? std::abs(geometry::perimeter(square.loops[0]) - 4.0) : 1.0;

    const auto ring = geometry::slice_mesh(testing::cylinder_mesh(1.0, 2.0, 64), 1.0);
    const double inscribed = 2.0 * 64.0 * std::sin(std::numbers::pi / 64.0);
    const double cyl_err = ring.loops.size() == 1 ? std::abs(geometry::perimeter(ring.loops[0]) - inscribed) : 1.0;

    double worst_area = 0.0;
    for (auto shape : {geometry::Shape::Square, geometry::Shape::Rectangle, geometry::Shape::Circle}) {
        const auto sample = geometry::synth_sample({.shape = shape, .size = 25.0, .aspect = 0.7}, 0);
        const auto image = geometry::rasterize(sample.contour);
        const double pixel_area = image.pixels.sum() * image.pixel_pitch * image.pixel_pitch;
        const double area = geometry::total_area(sample.contour);
        worst_area = std::max(worst_area, std::abs(pixel_area - area) / area);
    }
    return {cube_err <= 1e-9 && cyl_err <= 1e-9 && worst_area <= 0.02,
            fmt::format("cube perimeter error {:.1e}, 64-gon perimeter error {:.1e}, worst raster area error {:.2f}%",
                        cube_err, cyl_err, 100 * worst_area)};
}

int cli_run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    return cli::run(args, out, err);
}

bool pipeline(const fs::path& root) {
    fs::remove_all(root);
    const auto s = [&](const char* p) { return (root / p).string(); };
    return cli_run({"build-data", "--synthetic", "square,circle,annulus×rectilinear,concentric", "--count", "8", "--n-max",
                    "64", "--seed", "21", "--out", s("data")}) == 0 &&
           cli_run({"train", "--data", s("data"), "--out", s("run"), "--epochs", "5", "--seed", "21", "--threads", "1"}) ==
               0 &&
           cli_run({"generate", "--checkpoint", s("run/best.ckpt"), "--image", s("data/images/000001.pgm"), "--runs", "2",
                    "--seed", "21", "--out", s("gen")}) == 0 &&
           cli_run({"emit", "--keypoints", s("gen/run_0.csv"), "--scale-mm", "30", "--out", s("gen/run_0.gcode"),
                    "--force"}) == 0;
}

bool is_run_manifest(const fs::path& p) {
    const auto name = p.filename().string();
    return name == cli::kRunManifest || name.ends_with(".manifest.json");
}

Outcome determinism() {
    const auto a = fs::temp_directory_path() / "slicepath_acceptance_a9_first";
    const auto b = fs::temp_directory_path() / "slicepath_acceptance_a9_second";
    if (!pipeline(a) || !pipeline(b)) return {false, "pipeline run failed"};
    std::size_t compared = 0, differing = 0, manifests = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), a);
        if (is_run_manifest(entry.path())) {
            ++manifests;
            continue;
        }
        ++compared;
        if (!fs::exists(b / rel) || slurp(entry.path()) != slurp(b / rel)) ++differing;
    }
    std::size_t in_b = 0;
    for (const auto& entry : fs::recursive_directory_iterator(b))
        if (entry.is_regular_file() && !is_run_manifest(entry.path())) ++in_b;
    return {compared > 0 && differing == 0 && in_b == compared,
            fmt::format("{} artifacts compared byte for byte, {} differ; {} run manifests (timestamps) excluded", compared,
                        differing, manifests)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"A1 parser round trip", parser_round_trip},
        {"A2 state-machine semantics", state_machine_corpus},
        {"A3 normalization", normalization},
        {"A4 diffusion math", diffusion_math},
        {"A5 learning capability", learning_capability},
        {"A6 gradient correctness", gradient_correctness},
        {"A7 statistics harness", statistics_harness},
        {"A8 geometry", geometry_checks},
        {"A9 determinism", determinism},
    };
    int failures = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        fmt::print("{} {}: {}\n", o.pass ? "PASS" : "FAIL", name, o.detail);
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
