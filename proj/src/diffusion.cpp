#include "slicepath/diffusion.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "slicepath/error.h"

namespace slicepath::diffusion {

Schedule make_cosine_schedule(int steps, double offset) {
    if (steps < 2) throw Error(ErrorKind::InvalidArgument, "schedule needs at least two steps");
    auto f = [&](double u) {
        const double c = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
        return c * c;
    };
    Schedule s;
    s.steps = steps;
    s.betas.resize(steps);
    s.alphas.resize(steps);
    s.alpha_bar.resize(steps);
    s.snr.resize(steps);
    const double f0 = f(0.0);
    double prev = 1.0;
    double cumulative = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double target = f(static_cast<double>(t) / (steps - 1)) / f0;
        const double beta = std::clamp(1.0 - target / prev, kMinBeta, kMaxBeta);
        prev = target;
        s.betas(t) = beta;
        s.alphas(t) = 1.0 - beta;
        cumulative *= 1.0 - beta;
        s.alpha_bar(t) = cumulative;
        s.snr(t) = cumulative / (1.0 - cumulative);
    }
    s.timestep_weight = s.snr.cwiseMin(kSnrCap);
    s.timestep_weight /= s.timestep_weight.mean();
    return s;
}

Eigen::MatrixXd q_sample(const Schedule& schedule, const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise) {
    if (t < 0 || t >= schedule.steps) throw Error(ErrorKind::InvalidArgument, fmt::format("timestep {} out of range", t));
    if (noise.rows() != x0.rows() || noise.cols() != x0.cols()) throw Error(ErrorKind::ShapeMismatch, "noise shape differs from x0");
    const double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
    return m;
}

namespace {

// Per-entry weights m_i · w_c / Σm, scaled by the timestep weight.
Eigen::MatrixXd loss_weights(Eigen::Index rows, const Eigen::VectorXd& mask, const LossWeights& weights, double timestep_weight) {
    if (rows != 3) throw Error(ErrorKind::ShapeMismatch, "loss expects 3 channels");
    const double total = mask.sum();
    if (!(total > 0.0)) throw Error(ErrorKind::AllMasked, "mask selects no positions");
    Eigen::MatrixXd w(rows, mask.size());
    for (Eigen::Index c = 0; c < rows; ++c) w.row(c) = mask.transpose() * (weights.channel[c] * timestep_weight / total);
    return w;
}

}  // namespace

double masked_loss(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x0_hat, const Eigen::VectorXd& mask,
                   const LossWeights& weights, double timestep_weight) {
    if (x0.rows() != x0_hat.rows() || x0.cols() != x0_hat.cols() || x0.cols() != mask.size()) {
        throw Error(ErrorKind::ShapeMismatch, "loss operands differ in shape");
    }
    const Eigen::MatrixXd w = loss_weights(x0.rows(), mask, weights, timestep_weight);
    // Masked positions are skipped outright, whatever they hold.
    double acc = 0.0;
    for (Eigen::Index i = 0; i < x0.cols(); ++i) {
        if (mask(i) == 0.0) continue;
        for (Eigen::Index c = 0; c < x0.rows(); ++c) {
            const double d = x0(c, i) - x0_hat(c, i);
            acc += w(c, i) * d * d;
        }
    }
    return acc;
}

template <typename T>
ad::Var<T> masked_loss(ad::Var<T> x0_hat, const Eigen::MatrixXd& x0, const Eigen::VectorXd& mask, const LossWeights& weights,
                       double timestep_weight) {
    if (x0.rows() != x0_hat.rows() || x0.cols() != x0_hat.cols() || x0.cols() != mask.size()) {
        throw Error(ErrorKind::ShapeMismatch, "loss operands differ in shape");
    }
    const Eigen::MatrixXd w = loss_weights(x0.rows(), mask, weights, timestep_weight);
    // Zero the target where the weight is zero so masked entries carry nothing.
    ad::Matrix<T> target = (w.array() != 0.0).select(x0, 0.0).template cast<T>();
    return ad::weighted_squared_error(x0_hat, target, ad::Matrix<T>(w.cast<T>()));
}

template ad::Var<float> masked_loss<float>(ad::Var<float>, const Eigen::MatrixXd&, const Eigen::VectorXd&, const LossWeights&, double);
template ad::Var<double> masked_loss<double>(ad::Var<double>, const Eigen::MatrixXd&, const Eigen::VectorXd&, const LossWeights&,
                                             double);

Eigen::MatrixXd sample(const Denoiser& denoiser, Eigen::Index channels, Eigen::Index length, const Schedule& schedule, Rng& rng,
                       std::vector<TraceRow>* trace) {
    Eigen::MatrixXd x = gaussian(channels, length, rng);
    Eigen::MatrixXd x0_hat;
    for (int t = schedule.steps - 1; t >= 0; --t) {
        x0_hat = denoiser(x, t);
        if (x0_hat.rows() != channels || x0_hat.cols() != length) throw Error(ErrorKind::ShapeMismatch, "denoiser changed the shape");
        if (!x0_hat.allFinite()) throw Error(ErrorKind::NonFiniteState, fmt::format("non-finite estimate at step {}", t));
        const double ab = schedule.alpha_bar(t);
        const double ab_prev = schedule.alpha_bar_prev(t);
        const double beta = schedule.betas(t);
        const double keep = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double carry = std::sqrt(schedule.alphas(t)) * (1.0 - ab_prev) / (1.0 - ab);
        x = keep * x0_hat + carry * x;
        if (t > 0) {
            const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
            x += sigma * gaussian(channels, length, rng);
        }
        if (!x.allFinite()) throw Error(ErrorKind::NonFiniteState, fmt::format("non-finite state at step {}", t));
        if (trace) trace->push_back({t, x0_hat.norm(), x.norm()});
    }
    return x0_hat.cwiseMax(-1.0).cwiseMin(1.0);
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
    std::ofstream out(path, std::ios::trunc);
    out << "t,x0_hat_norm,state_norm\n";
    for (const auto& r : trace) out << fmt::format("{},{:.17g},{:.17g}\n", r.t, r.x0_hat_norm, r.state_norm);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path);
}

GeneratedSequence generate(const model::ModelConfig& config, const model::Parameters<float>& params, const Eigen::MatrixXf& image,
                           const Schedule& schedule, Rng& rng, std::vector<TraceRow>* trace) {
    ad::Tape<float> tape;
    model::Bound<float> bound(tape, params, false);
    const ad::Matrix<float> tokens = model::encode(config, bound, ad::Matrix<float>(image)).value();
    const double predicted = model::predict_length(config, bound, tape.constant(tokens)).value()(0, 0);

    GeneratedSequence out;
    const auto n_max = static_cast<std::size_t>(config.max_length);
    const double scaled = std::isfinite(predicted) ? std::round(predicted * config.max_length) : 1.0;
    out.length = static_cast<std::size_t>(std::clamp(scaled, 1.0, static_cast<double>(n_max)));
    out.mask = Eigen::VectorXd::Zero(config.max_length);
    out.mask.head(static_cast<Eigen::Index>(out.length)).setOnes();

    auto denoiser = [&](const Eigen::MatrixXd& x, int t) {
        ad::Tape<float> step;
        model::Bound<float> b(step, params, false);
        const auto y = model::denoise(config, b, step.constant(x.cast<float>()), t, step.constant(tokens));
        return Eigen::MatrixXd(y.value().cast<double>());
    };
    out.x0 = sample(denoiser, config.unet.in_channels, config.max_length, schedule, rng, trace);
    return out;
}

void project_monotone_extrusion(Eigen::MatrixXd& x0, std::size_t length) {
    const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(length), x0.cols());
    for (Eigen::Index i = 1; i < n; ++i) x0(2, i) = std::max(x0(2, i), x0(2, i - 1));
}

}  // namespace slicepath::diffusion
