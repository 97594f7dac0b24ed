#pragma once

#include <Eigen/Core>

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "slicepath/autodiff.h"
#include "slicepath/model.h"
#include "slicepath/random.h"

namespace slicepath::diffusion {

struct Schedule {
    int steps = 0;
    Eigen::VectorXd betas;
    Eigen::VectorXd alphas;
    Eigen::VectorXd alpha_bar;
    Eigen::VectorXd snr;
    Eigen::VectorXd timestep_weight;  // min(snr, cap) over its mean

    double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bar(t - 1); }
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMinBeta = 1e-4;
inline constexpr double kMaxBeta = 0.999;
inline constexpr double kSnrCap = 5.0;

// Cosine schedule sampled at t/(T-1); betas clipped to [kMinBeta, kMaxBeta]
// and alpha_bar rebuilt as their cumulative product.
Schedule make_cosine_schedule(int steps, double offset = kCosineOffset);

struct LossWeights {
    std::array<double, 3> channel{1.3, 1.3, 0.4};
};

Eigen::MatrixXd q_sample(const Schedule& schedule, const Eigen::MatrixXd& x0, int t, const Eigen::MatrixXd& noise);

// Standard normal draws, filled column by column.
Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// (timestep_weight / Σm) · Σ_i m_i Σ_c w_c (x0 − x0_hat)²_{c,i}
double masked_loss(const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x0_hat, const Eigen::VectorXd& mask,
                   const LossWeights& weights, double timestep_weight);

template <typename T>
ad::Var<T> masked_loss(ad::Var<T> x0_hat, const Eigen::MatrixXd& x0, const Eigen::VectorXd& mask, const LossWeights& weights,
                       double timestep_weight);

// Clean-sequence estimate for (x_t, t).
using Denoiser = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, int)>;

struct TraceRow {
    int t = 0;
    double x0_hat_norm = 0.0;
    double state_norm = 0.0;
};

// Ancestral sampling with the posterior variance; the result is the final
// clean estimate clamped to [-1, 1].
Eigen::MatrixXd sample(const Denoiser& denoiser, Eigen::Index channels, Eigen::Index length, const Schedule& schedule,
                       Rng& rng, std::vector<TraceRow>* trace = nullptr);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

struct GeneratedSequence {
    Eigen::MatrixXd x0;    // 3 × max_length
    Eigen::VectorXd mask;  // first `length` entries set
    std::size_t length = 0;
};

// Encodes the image once, predicts the valid length, then samples.
GeneratedSequence generate(const model::ModelConfig& config, const model::Parameters<float>& params,
                           const Eigen::MatrixXf& image, const Schedule& schedule, Rng& rng,
                           std::vector<TraceRow>* trace = nullptr);

// Running maximum over the extrusion channel of the first `length` steps, so
// sampling noise cannot produce small retractions.
void project_monotone_extrusion(Eigen::MatrixXd& x0, std::size_t length);

}  // namespace slicepath::diffusion
