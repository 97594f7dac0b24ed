#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "gradient_check.h"
#include "slicepath/autodiff.h"
#include "slicepath/checkpoint.h"
#include "slicepath/error.h"
#include "slicepath/model.h"
#include "slicepath/random.h"

using namespace slicepath;
using namespace slicepath::model;
using ad::Matrix;
using MatD = Matrix<double>;

namespace {

MatD random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    MatD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * rng.normal();
    return m;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.encoder.embed_dim = 8;
    c.encoder.depth = 1;
    c.encoder.heads = 2;
    c.encoder.mlp_ratio = 2;
    c.unet.base_channels = 8;
    c.unet.multipliers = {2, 2, 4};
    c.unet.head_dim = 8;
    c.max_length = 16;
    c.length_hidden = 8;
    return c;
}

// Parameters with every entry nudged so affine terms and biases are generic.
Parameters<double> generic_parameters(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    auto params = init_parameters<double>(config, rng);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += random_matrix(rng, params[i].rows(), params[i].cols(), 0.1);
    return params;
}

// Single-input gradient check for a tape op: loss = Σ W ⊙ f(x).
template <typename F>
double op_gradient_error(const MatD& x0, F f, std::uint64_t seed) {
    Rng rng(seed);
    MatD weights;
    auto loss_of = [&](const MatD& x, MatD* grad) {
        ad::Tape<double> tape;
        auto xv = tape.variable(x);
        auto y = f(xv);
        if (weights.size() == 0) weights = random_matrix(rng, y.rows(), y.cols());
        auto l = ad::sum(ad::mul(y, tape.constant(weights)));
        if (grad) {
            tape.backward(l);
            *grad = tape.grad(xv);
        }
        return l.value()(0, 0);
    };
    MatD grad;
    loss_of(x0, &grad);
    double worst = 0.0;
    MatD x = x0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double saved = x(i);
        x(i) = saved + 1e-5;
        const double up = loss_of(x, nullptr);
        x(i) = saved - 1e-5;
        const double down = loss_of(x, nullptr);
        x(i) = saved;
        worst = std::max(worst, testing::relative_error(grad(i), (up - down) / 2e-5));
    }
    return worst;
}

}  // namespace

TEST_CASE("attention over a single key returns its value") {
    Rng rng(1);
    const MatD q = random_matrix(rng, 5, 4);
    const MatD k = random_matrix(rng, 1, 4);
    const MatD v = random_matrix(rng, 1, 4);
    const MatD out = ad::attention<double>(q, k, v);
    for (int r = 0; r < 5; ++r) CHECK((out.row(r) - v.row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("orthogonal queries average the values") {
    Rng rng(2);
    MatD q = MatD::Zero(3, 4);
    q.col(0).setOnes();
    MatD k = random_matrix(rng, 6, 4);
    k.col(0).setZero();
    const MatD v = random_matrix(rng, 6, 4);
    const MatD out = ad::attention<double>(q, k, v);
    const MatD mean = v.colwise().mean();
    for (int r = 0; r < 3; ++r) CHECK((out.row(r) - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a dominant logit selects its value") {
    Rng rng(3);
    MatD q = MatD::Zero(1, 1);
    q(0, 0) = 1.0;
    MatD k = MatD::Zero(4, 1);
    k(2, 0) = 20.0;
    const MatD v = random_matrix(rng, 4, 3);
    // Widen q so the head dimension matches v.
    MatD q3 = MatD::Zero(1, 3), k3 = MatD::Zero(4, 3);
    q3(0, 0) = std::sqrt(3.0);
    k3.col(0) = k.col(0);
    const MatD out = ad::attention<double>(q3, k3, v);
    CHECK((out.row(0) - v.row(2)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("attention rows are stochastic and permutation invariant") {
    Rng rng(4);
    const MatD q = random_matrix(rng, 7, 8);
    const MatD k = random_matrix(rng, 10, 8);
    const MatD v = random_matrix(rng, 10, 8);
    const MatD probs = ad::softmax_rows<double>(q * k.transpose() / std::sqrt(8.0));
    CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);

    std::vector<int> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[1], perm[4]);
    MatD kp(10, 8), vp(10, 8);
    for (int i = 0; i < 10; ++i) {
        kp.row(i) = k.row(perm[i]);
        vp.row(i) = v.row(perm[i]);
    }
    ad::Tape<double> tape;
    const auto a = ad::multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), 2);
    const auto b = ad::multi_head_attention(tape.constant(q), tape.constant(kp), tape.constant(vp), 2);
    CHECK((a.value() - b.value()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(ad::attention<double>(q, random_matrix(rng, 3, 5), v), Error);
}

TEST_CASE("group norm standardizes each group") {
    Rng rng(5);
    const MatD x = random_matrix(rng, 16, 20, 3.0).array() + 2.0;
    ad::Tape<double> tape;
    const auto y = ad::group_norm(tape.constant(x), 8, tape.constant(MatD::Ones(16, 1)), tape.constant(MatD::Zero(16, 1)));
    for (int g = 0; g < 8; ++g) {
        const auto block = y.value().middleRows(2 * g, 2);
        CHECK(std::abs(block.mean()) < 1e-5);
        CHECK(std::abs((block.array() - block.mean()).square().mean() - 1.0) < 1e-4);
    }
}

TEST_CASE("linear layer gradient matches the closed form") {
    Rng rng(6);
    const MatD x = random_matrix(rng, 5, 3);
    const MatD w = random_matrix(rng, 3, 2);
    const MatD y = random_matrix(rng, 5, 2);
    ad::Tape<double> tape;
    const auto wv = tape.variable(w);
    const auto r = ad::matmul(tape.constant(x), wv) - tape.constant(y);
    tape.backward(ad::sum(ad::mul(r, r)));
    const MatD expected = 2.0 * x.transpose() * (x * w - y);
    CHECK((tape.grad(wv) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("constant loss has zero gradient") {
    const auto config = tiny_config();
    const auto params = generic_parameters(config, 7);
    ad::Tape<double> tape;
    Bound<double> bound(tape, params, true);
    auto l = ad::scale(ad::sum(bound["len.b2"]), 0.0);
    tape.backward(l);
    const auto grads = bound.gradients();
    for (std::size_t i = 0; i < grads.size(); ++i) CHECK(grads[i].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tape ops agree with central differences") {
    Rng rng(8);
    const MatD x = random_matrix(rng, 6, 8);
    const MatD other = random_matrix(rng, 8, 5);
    const MatD col = random_matrix(rng, 6, 1);
    const MatD row = random_matrix(rng, 1, 8);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::matmul(v, v.tape->constant(other)); }, 1) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::silu(v); }, 2) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::gelu(v); }, 3) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::softmax_rows(v); }, 4) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::transpose(v); }, 5) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::mean_rows(v); }, 6) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::mul_col(v, v.tape->constant(col)); }, 7) < 1e-6);
    CHECK(op_gradient_error(col, [&](auto s) { return ad::mul_col(s.tape->constant(x), s); }, 8) < 1e-6);
    CHECK(op_gradient_error(row, [&](auto b) { return ad::add_row(b.tape->constant(x), b); }, 9) < 1e-6);
    CHECK(op_gradient_error(col, [&](auto b) { return ad::add_col(b.tape->constant(x), b); }, 10) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::concat_rows(v, ad::slice_rows(v, 1, 3)); }, 11) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::pad_cols(ad::slice_cols(v, 2, 4), 9); }, 12) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) {
              return ad::layer_norm_rows(v, v.tape->constant(row), v.tape->constant(row * 0.5));
          }, 13) < 1e-6);
    CHECK(op_gradient_error(row, [&](auto g) {
              return ad::layer_norm_rows(g.tape->constant(x), g, g.tape->constant(row));
          }, 14) < 1e-6);
    CHECK(op_gradient_error(x, [&](auto v) { return ad::group_norm(v, 3, v.tape->constant(col), v.tape->constant(col)); }, 15) <
          1e-6);
    const MatD kernel = random_matrix(rng, 4, 18);
    const MatD bias = random_matrix(rng, 4, 1);
    for (int stride : {1, 2}) {
        CHECK(op_gradient_error(x, [&](auto v) {
                  return ad::conv1d(v, v.tape->constant(kernel), v.tape->constant(bias), 3, stride, 1);
              }, 16) < 1e-6);
        CHECK(op_gradient_error(kernel, [&](auto w) {
                  return ad::conv1d(w.tape->constant(x), w, w.tape->constant(bias), 3, stride, 1);
              }, 17) < 1e-6);
    }
    const MatD keys = random_matrix(rng, 9, 8);
    CHECK(op_gradient_error(x, [&](auto q) {
              return ad::multi_head_attention(q, q.tape->constant(keys), q.tape->constant(keys * 0.7), 2);
          }, 18) < 1e-6);
    CHECK(op_gradient_error(keys, [&](auto k) {
              return ad::multi_head_attention(k.tape->constant(x), k, ad::scale(k, 0.5), 4);
          }, 19) < 1e-6);
    const MatD target = random_matrix(rng, 6, 8);
    CHECK(op_gradient_error(x, [&](auto v) {
              return ad::weighted_squared_error(v, target, MatD(row.replicate(6, 1).cwiseAbs()));
          }, 20) < 1e-6);
}

TEST_CASE("upsampling matrix interpolates linearly") {
    const MatD m = upsample_matrix<double>(4);
    MatD x(1, 4);
    x << 0, 1, 2, 3;
    const MatD y = x * m;
    MatD expected(1, 8);
    expected << 0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3;
    CHECK((y - expected).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((m.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("encoder emits one token per patch") {
    const auto config = tiny_config();
    const auto params = generic_parameters(config, 9);
    ad::Tape<double> tape;
    Bound<double> bound(tape, params, false);
    const MatD zero = MatD::Zero(224, 224);
    const auto a = encode(config, bound, zero);
    const auto b = encode(config, bound, zero);
    CHECK(a.rows() == 256);
    CHECK(a.cols() == config.encoder.embed_dim);
    CHECK(a.value() == b.value());
    MatD img = zero;
    img.block(0, 0, 14, 14).setOnes();
    const auto c = encode(config, bound, img);
    CHECK((a.value() - c.value()).cwiseAbs().maxCoeff() > 1e-6);
    CHECK_THROWS_AS(encode(config, bound, MatD(MatD::Zero(100, 100))), Error);
}

TEST_CASE("denoiser keeps the input shape and responds to the timestep") {
    const auto config = tiny_config();
    const auto params = generic_parameters(config, 10);
    Rng rng(11);
    ad::Tape<double> tape;
    Bound<double> bound(tape, params, false);
    const auto tokens = tape.constant(random_matrix(rng, 256, config.encoder.embed_dim));
    for (int len : {1, 4, 7, 16, 33}) {
        const auto x = tape.constant(random_matrix(rng, 3, len));
        const auto y = denoise(config, bound, x, 3, tokens);
        CHECK(y.rows() == 3);
        CHECK(y.cols() == len);
    }
    const auto x = tape.constant(random_matrix(rng, 3, 12));
    const auto early = denoise(config, bound, x, 0, tokens);
    const auto late = denoise(config, bound, x, 99, tokens);
    CHECK((early.value() - late.value()).cwiseAbs().maxCoeff() > 1e-6);
    const auto again = denoise(config, bound, x, 0, tokens);
    CHECK(early.value() == again.value());
    CHECK_THROWS_AS(denoise(config, bound, tape.constant(MatD::Zero(2, 8)), 0, tokens), Error);
}

TEST_CASE("full model gradients match central differences in every layer class") {
    const auto config = tiny_config();
    const auto params = generic_parameters(config, 12);
    Rng rng(13);
    MatD image = MatD::Zero(224, 224);
    for (int r = 40; r < 180; ++r) {
        for (int c = 60; c < 150 + r / 4; ++c) image(r, c) = 1.0;
    }
    const MatD noisy = random_matrix(rng, 3, 10);
    const MatD target = random_matrix(rng, 3, 10);
    const MatD weights = random_matrix(rng, 3, 10).cwiseAbs();

    auto build = [&](ad::Tape<double>& tape, Bound<double>& bound) {
        const auto tokens = encode(config, bound, image);
        const auto y = denoise(config, bound, tape.constant(noisy), 17, tokens);
        const auto len = predict_length(config, bound, tokens);
        return ad::weighted_squared_error(y, target, weights) +
               ad::weighted_squared_error(len, MatD(MatD::Constant(1, 1, 0.3)), MatD(MatD::Ones(1, 1)));
    };
    auto loss = [&](const Parameters<double>& p) {
        ad::Tape<double> tape;
        Bound<double> bound(tape, p, false);
        return build(tape, bound).value()(0, 0);
    };
    auto gradient = [&](const Parameters<double>& p) {
        ad::Tape<double> tape;
        Bound<double> bound(tape, p, true);
        tape.backward(build(tape, bound));
        return bound.gradients();
    };
    for (const auto& [name, pick] : testing::parameter_classes()) {
        CAPTURE(name);
        const auto probes = testing::probe_gradients(params, loss, gradient, pick, 20, 100 + name.size());
        REQUIRE(probes.size() == 20);
        for (const auto& p : probes) {
            CAPTURE(p.name);
            CAPTURE(p.analytic);
            CAPTURE(p.numeric);
            CHECK(p.relative_error < 1e-4);
        }
    }
}

TEST_CASE("checkpoint archive round trips parameters") {
    const auto config = tiny_config();
    Rng rng(14);
    const auto params = init_parameters<float>(config, rng);
    Archive archive;
    archive.metadata = R"({"model":)" + config_to_json(config) + "}";
    append_parameters(archive, "param/", params, DType::F32);
    const auto path = (std::filesystem::temp_directory_path() / "slicepath_test_model.ckpt").string();
    save_archive(path, archive);
    const auto back = load_archive(path);
    const auto restored = extract_parameters<float>(back, "param/");
    REQUIRE(restored.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(restored.name(i) == params.name(i));
        CHECK(restored[i] == params[i]);
    }
    CHECK(config_to_json(config_from_json(config_to_json(config))) == config_to_json(config));

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-5, std::ios::end);
        f.put('\x7f');
    }
    try {
        load_archive(path);
        FAIL("expected ChecksumMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ChecksumMismatch);
    }
}
