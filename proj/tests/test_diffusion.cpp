#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "slicepath/diffusion.h"
#include "slicepath/error.h"

using namespace slicepath;
using namespace slicepath::diffusion;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("cosine schedule invariants hold for several lengths") {
    for (int steps : {10, 50, 100, 500}) {
        CAPTURE(steps);
        const auto s = make_cosine_schedule(steps);
        CHECK(s.alpha_bar(0) >= 0.999);
        CHECK(s.alpha_bar(steps - 1) <= 1e-4);
        for (int t = 1; t < steps; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.betas.minCoeff() > 0.0);
        CHECK(s.betas.maxCoeff() <= 0.999);
        CHECK(s.timestep_weight.mean() == doctest::Approx(1.0));
        CHECK(s.timestep_weight.minCoeff() > 0.0);
        for (int t = 0; t < steps; ++t) CHECK(s.snr(t) == doctest::Approx(s.alpha_bar(t) / (1 - s.alpha_bar(t))));
    }
    CHECK_THROWS_AS(make_cosine_schedule(1), Error);
}

TEST_CASE("cosine schedule follows the squared-cosine curve away from the clipped ends") {
    const auto s = make_cosine_schedule(500);
    auto f = [](double u) {
        const double c = std::cos((u + 0.008) / 1.008 * M_PI / 2);
        return c * c;
    };
    for (int t : {50, 150, 250, 350, 450}) {
        // Only the few floored early betas separate the two.
        CHECK(s.alpha_bar(t) == doctest::Approx(f(t / 499.0) / f(0.0)).epsilon(3 * kMinBeta));
    }
}

TEST_CASE("q_sample special cases") {
    Rng rng(1);
    const MatrixXd x0 = gaussian(3, 9, rng);
    const auto s = make_cosine_schedule(100);
    CHECK(q_sample(s, x0, 40, MatrixXd::Zero(3, 9)) == std::sqrt(s.alpha_bar(40)) * x0);

    Schedule clean = s;
    clean.alpha_bar(0) = 1.0;
    const MatrixXd noise = gaussian(3, 9, rng);
    CHECK(q_sample(clean, x0, 0, noise) == x0);
    CHECK_THROWS_AS(q_sample(s, x0, 100, noise), Error);
}

TEST_CASE("q_sample marginals match the forward process") {
    const auto s = make_cosine_schedule(100);
    Rng rng(2);
    const int t = 37;
    const int n = 100000;
    MatrixXd x0(1, 2);
    x0 << 0.7, -0.4;
    const double ab = s.alpha_bar(t);
    for (int c = 0; c < 2; ++c) {
        double sum = 0.0, sum_sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const double v = q_sample(s, x0, t, gaussian(1, 2, rng))(0, c);
            sum += v;
            sum_sq += v * v;
        }
        const double mean = sum / n;
        const double var = sum_sq / n - mean * mean;
        CHECK(std::abs(mean - std::sqrt(ab) * x0(0, c)) < 3 * std::sqrt(1 - ab) / std::sqrt(double(n)));
        CHECK(std::abs(var / (1 - ab) - 1) < 0.02);
    }
}

TEST_CASE("masked loss values") {
    MatrixXd x0 = MatrixXd::Zero(3, 4);
    VectorXd mask = VectorXd::Zero(4);
    mask(0) = 1;
    MatrixXd hat = x0;
    CHECK(masked_loss(x0, hat, mask, {}, 1.0) == 0.0);
    hat(0, 0) = 1.0;
    CHECK(masked_loss(x0, hat, mask, {}, 1.0) == doctest::Approx(1.3));
    hat(1, 0) = 1.0;
    hat(2, 0) = 1.0;
    CHECK(masked_loss(x0, hat, mask, {}, 1.0) == doctest::Approx(3.0));
    CHECK(masked_loss(x0, hat, mask, {}, 2.0) == doctest::Approx(6.0));
    try {
        masked_loss(x0, hat, VectorXd::Zero(4), {}, 1.0);
        FAIL("expected AllMasked");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::AllMasked);
    }
}

TEST_CASE("masked positions never change the loss or receive gradient") {
    Rng rng(3);
    const MatrixXd x0 = gaussian(3, 8, rng);
    const MatrixXd hat = gaussian(3, 8, rng);
    VectorXd mask = VectorXd::Zero(8);
    mask.head(5).setOnes();
    const double base = masked_loss(x0, hat, mask, {}, 0.7);
    MatrixXd x0b = x0, hatb = hat;
    x0b.rightCols(3) = gaussian(3, 3, rng) * 100;
    hatb.rightCols(3).setConstant(1e6);
    CHECK(masked_loss(x0b, hatb, mask, {}, 0.7) == base);

    ad::Tape<double> tape;
    const auto v = tape.variable(hatb);
    const auto loss = masked_loss<double>(v, x0b, mask, {}, 0.7);
    CHECK(loss.value()(0, 0) == doctest::Approx(base).epsilon(1e-12));
    tape.backward(loss);
    const MatrixXd g = tape.grad(v);
    CHECK(g.rightCols(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.leftCols(5).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("sampler collapses onto a constant estimate") {
    const auto s = make_cosine_schedule(50);
    MatrixXd c(3, 6);
    c << 0.5, -0.25, 0.125, 1, -1, 0, 0.3, 0.2, 0.1, 0, -0.1, -0.2, -0.75, 0.75, 0.5, -0.5, 0.25, -0.25;
    Rng rng(4);
    const auto out = sample([&](const MatrixXd&, int) { return c; }, 3, 6, s, rng);
    CHECK(out == c);
}

TEST_CASE("sampler is deterministic per seed and clamps") {
    const auto s = make_cosine_schedule(20);
    auto denoiser = [](const MatrixXd& x, int t) { return MatrixXd(x * (1.0 + 0.1 * t)); };
    Rng a(5), b(5), c(6);
    std::vector<TraceRow> trace;
    const auto xa = sample(denoiser, 3, 10, s, a, &trace);
    const auto xb = sample(denoiser, 3, 10, s, b);
    const auto xc = sample(denoiser, 3, 10, s, c);
    CHECK(xa == xb);
    CHECK(xa != xc);
    CHECK(xa.cwiseAbs().maxCoeff() <= 1.0);
    REQUIRE(trace.size() == 20);
    CHECK(trace.front().t == 19);
    CHECK(trace.back().t == 0);

    const auto path = (std::filesystem::temp_directory_path() / "slicepath_trace.csv").string();
    write_trace_csv(path, trace);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "t,x0_hat_norm,state_norm");

    auto exploding = [](const MatrixXd& x, int t) { return t == 7 ? MatrixXd(x * NAN) : x; };
    try {
        Rng r(7);
        sample(exploding, 3, 4, s, r);
        FAIL("expected NonFiniteState");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteState);
        CHECK(std::string(e.what()).find("7") != std::string::npos);
    }
}

TEST_CASE("monotone extrusion projection") {
    Eigen::MatrixXd x(3, 5);
    x << 0, 0, 0, 0, 0,  //
        0, 0, 0, 0, 0,   //
        -1, -0.5, -0.6, 0.2, 0.1;
    diffusion::project_monotone_extrusion(x, 4);
    CHECK(x(2, 2) == -0.5);
    CHECK(x(2, 3) == 0.2);
    CHECK(x(2, 4) == 0.1);  // beyond the valid length
    CHECK(x(0, 2) == 0.0);
}
