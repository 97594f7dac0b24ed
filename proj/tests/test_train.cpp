#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "slicepath/error.h"
#include "slicepath/geometry.h"
#include "slicepath/train.h"

using namespace slicepath;
using namespace slicepath::train;
namespace fs = std::filesystem;
using MatD = ad::Matrix<double>;

namespace {

Parameters<double> scalar_params(double value) {
    Parameters<double> p;
    p.add("theta", MatD::Constant(1, 1, value));
    return p;
}

model::ModelConfig tiny_model() {
    model::ModelConfig c;
    c.encoder.embed_dim = 8;
    c.encoder.depth = 1;
    c.encoder.heads = 2;
    c.encoder.mlp_ratio = 2;
    c.unet.base_channels = 8;
    c.unet.head_dim = 8;
    c.max_length = 16;
    c.length_hidden = 8;
    return c;
}

TrainConfig tiny_train(int epochs) {
    TrainConfig c;
    c.batch_size = 2;
    c.epochs = epochs;
    c.lr0 = 1e-3;
    c.diffusion_steps = 20;
    c.val_timesteps = 2;
    c.val_fraction = 0.25;
    c.seed = 42;
    return c;
}

std::vector<dataset::TrainingRecord> tiny_records(int count) {
    std::vector<dataset::TrainingRecord> out;
    for (int i = 0; i < count; ++i) {
        geometry::ShapeSpec spec{.shape = geometry::Shape(i % 5), .size = 10.0 + i, .density = 0.1, .arc_segments = 12};
        const auto s = geometry::synth_sample(spec, static_cast<std::uint64_t>(i));
        auto r = dataset::normalize(s.toolpath, 16);
        r.image = geometry::rasterize(s.contour);
        out.push_back(std::move(r));
    }
    return out;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("slicepath_train_" + name);
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("adamw leaves parameters alone without gradient or decay") {
    auto p = scalar_params(0.75);
    auto state = AdamState<double>::zeros_like(p);
    const auto zero = p.zeros_like();
    for (int i = 0; i < 10; ++i) adamw_step(p, state, zero, 1e-2, 0.0);
    CHECK(p[0](0, 0) == 0.75);
}

TEST_CASE("adamw decays weights geometrically without gradient") {
    auto p = scalar_params(2.0);
    auto state = AdamState<double>::zeros_like(p);
    const auto zero = p.zeros_like();
    double expected = 2.0;
    for (int i = 0; i < 25; ++i) {
        adamw_step(p, state, zero, 0.1, 0.05);
        expected *= 1.0 - 0.1 * 0.05;
        CHECK(std::abs(p[0](0, 0) - expected) < 1e-12);
    }
}

TEST_CASE("adamw matches a scalar reference on a quadratic") {
    auto p = scalar_params(1.0);
    auto state = AdamState<double>::zeros_like(p);
    // Reference recursion written out independently.
    double theta = 1.0, m = 0.0, v = 0.0;
    const double lr = 5e-3, wd = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double previous = std::abs(p[0](0, 0));
    for (int step = 1; step <= 100; ++step) {
        auto g = p.zeros_like();
        g[0](0, 0) = 2.0 * p[0](0, 0);
        adamw_step(p, state, g, lr, wd);

        const double grad = 2.0 * theta;
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        const double mh = m / (1 - std::pow(b1, step));
        const double vh = v / (1 - std::pow(b2, step));
        theta -= lr * (mh / (std::sqrt(vh) + eps) + wd * theta);

        CHECK(std::abs(p[0](0, 0) - theta) < 1e-12);
        CHECK(std::abs(p[0](0, 0)) < previous);
        previous = std::abs(p[0](0, 0));
    }
    CHECK(previous < 0.6);
}

TEST_CASE("adamw rejects non-finite parameters") {
    auto p = scalar_params(1.0);
    auto state = AdamState<double>::zeros_like(p);
    auto g = p.zeros_like();
    g[0](0, 0) = NAN;
    CHECK_THROWS_AS(adamw_step(p, state, g, 1e-3, 0.0), Error);
}

TEST_CASE("gradient clipping") {
    Parameters<double> g;
    g.add("a", (MatD(1, 2) << 3.0, 0.0).finished());
    g.add("b", (MatD(2, 1) << 0.0, 4.0).finished());  // global norm 5
    auto halved = g;
    CHECK(clip_gradients(halved, 2.5) == doctest::Approx(5.0));
    CHECK(halved[0](0, 0) == doctest::Approx(1.5));
    CHECK(halved[1](1, 0) == doctest::Approx(2.0));
    auto same = g;
    clip_gradients(same, 10.0);
    CHECK(same[0] == g[0]);
    CHECK(same[1] == g[1]);
    for (double c : {0.1, 1.0, 4.999, 5.0, 7.0}) {
        auto x = g;
        clip_gradients(x, c);
        CHECK(std::abs(global_norm(x) - std::min(5.0, c)) < 1e-9);
    }
}

TEST_CASE("plateau scheduler") {
    PlateauScheduler falling(1e-3, {});
    for (int i = 0; i < 100; ++i) CHECK(falling.step(10.0 - 0.01 * i) == 1e-3);

    PlateauScheduler flat(1e-3, {});
    int reductions = 0;
    double lr = 1e-3;
    for (int epoch = 0; epoch < 21; ++epoch) {
        const double next = flat.step(1.0);
        if (next < lr) ++reductions;
        lr = next;
    }
    CHECK(reductions == 1);
    CHECK(lr == doctest::Approx(0.9e-3));

    PlateauScheduler floor(1e-8, {.factor = 0.9, .patience = 2, .min_lr = 1e-8});
    for (int i = 0; i < 10; ++i) CHECK(floor.step(1.0) == 1e-8);
}

TEST_CASE("record split") {
    const auto s = split_records(10, 0.1, 3);
    CHECK(s.validation.size() == 1);
    CHECK(s.train.size() == 9);
    const auto all = split_records(8, 0.0, 3);
    CHECK(all.train.size() == 8);
    CHECK(all.validation == all.train);
}

TEST_CASE("training is deterministic and resumable") {
    const auto records = tiny_records(4);
    const auto model = tiny_model();

    const auto dir_a = scratch("a");
    const auto a = train_loop(records, model, tiny_train(3), dir_a.string());
    const auto b = train_loop(records, model, tiny_train(3), scratch("b").string());
    REQUIRE(a.history.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.history[i].train_loss == b.history[i].train_loss);
        CHECK(a.history[i].val_loss == b.history[i].val_loss);
    }
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i] == b.params[i]);

    auto threaded = tiny_train(3);
    threaded.threads = 2;
    const auto c = train_loop(records, model, threaded, scratch("c").string());
    CHECK(c.history.back().train_loss == a.history.back().train_loss);

    const auto dir_r = scratch("resume");
    train_loop(records, model, tiny_train(2), dir_r.string());
    const auto resumed = train_loop(records, model, tiny_train(3), dir_r.string(), true);
    REQUIRE(resumed.history.size() == 3);
    CHECK(resumed.history[2].train_loss == a.history[2].train_loss);
    CHECK(resumed.history[2].val_loss == a.history[2].val_loss);
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(resumed.params[i] == a.params[i]);

    CHECK(fs::exists(dir_a / kBestCheckpoint));
    std::ifstream curve(dir_a / kCurveFile);
    std::string line;
    int lines = 0;
    while (std::getline(curve, line)) ++lines;
    CHECK(lines == 4);

    const auto ck = load_checkpoint((dir_a / kLastCheckpoint).string());
    CHECK(ck.state.epoch == 3);
    CHECK(ck.state.adam.step == a.adam.step);
    CHECK(ck.train.seed == 42);
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(ck.state.params[i] == a.params[i]);
}

TEST_CASE("validation leaves parameters untouched") {
    const auto records = tiny_records(2);
    const auto model = tiny_model();
    Rng rng(1);
    const auto params = model::init_parameters<float>(model, rng);
    const auto copy = params;
    const auto schedule = diffusion::make_cosine_schedule(20);
    const double first = evaluate_loss(model, params, records, {0, 1}, schedule, {}, 3, 9);
    const double second = evaluate_loss(model, params, records, {0, 1}, schedule, {}, 3, 9);
    CHECK(first == second);
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i] == copy[i]);
}

TEST_CASE("training preconditions and non-finite losses") {
    const auto model = tiny_model();
    CHECK_THROWS_AS(train_loop({}, model, tiny_train(1), scratch("empty").string()), Error);

    auto records = tiny_records(2);
    records[0].x0(0, 0) = NAN;
    const auto dir = scratch("nan");
    auto config = tiny_train(1);
    config.batch_size = 4;
    config.val_fraction = 0.0;
    try {
        train_loop(records, model, config, dir.string());
        FAIL("expected a non-finite loss");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteLoss);
    }
    CHECK(fs::exists(dir / kDiagnosticCheckpoint));
}
