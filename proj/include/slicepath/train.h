#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slicepath/dataset.h"
#include "slicepath/diffusion.h"
#include "slicepath/model.h"
#include "slicepath/random.h"

namespace slicepath::train {

using model::Parameters;

struct PlateauConfig {
    double factor = 0.9;
    int patience = 20;
    double min_lr = 1e-8;
};

struct TrainConfig {
    int batch_size = 64;
    int epochs = 800;
    double lr0 = 1e-4;
    double weight_decay = 1e-2;
    PlateauConfig plateau;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    double val_fraction = 0.1;  // 0 validates on the training records
    int diffusion_steps = 500;
    int val_timesteps = 8;  // evenly spaced timesteps used for validation
    double length_weight = 0.01;
    int threads = 1;
    int checkpoint_every = 1;  // epochs between checkpoint and curve writes; the last epoch always writes

    void check() const;
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    Parameters<T> m;
    Parameters<T> v;
    std::int64_t step = 0;

    static AdamState zeros_like(const Parameters<T>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

// Decoupled weight decay: θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ).
template <typename T>
void adamw_step(Parameters<T>& params, AdamState<T>& state, const Parameters<T>& grads, double lr, double weight_decay,
                const AdamConfig& adam = {});

template <typename T>
double global_norm(const Parameters<T>& grads);

// Rescales so the global L2 norm is at most clip_norm. Returns the norm before clipping.
template <typename T>
double clip_gradients(Parameters<T>& grads, double clip_norm);

class PlateauScheduler {
public:
    PlateauScheduler(double lr, PlateauConfig config);

    // Feeds one epoch's validation loss; returns the learning rate for the next epoch.
    double step(double val_loss);

    double lr() const { return lr_; }
    double best() const { return best_; }
    int bad_epochs() const { return bad_epochs_; }
    void restore(double lr, double best, int bad_epochs);

private:
    PlateauConfig config_;
    double lr_;
    double best_;
    int bad_epochs_ = 0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainState {
    Parameters<float> params;
    AdamState<float> adam;
    int epoch = 0;  // completed epochs
    PlateauScheduler scheduler{1e-4, {}};
    Rng rng{0};
    std::vector<EpochRecord> history;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

Split split_records(std::size_t count, double val_fraction, std::uint64_t seed);

// Mean masked loss over fixed timesteps and fixed noise; no gradients.
double evaluate_loss(const model::ModelConfig& config, const Parameters<float>& params,
                     const std::vector<dataset::TrainingRecord>& records, const std::vector<std::size_t>& indices,
                     const diffusion::Schedule& schedule, const diffusion::LossWeights& weights, int timesteps,
                     std::uint64_t seed);

// Plain masked mean squared error of the clean estimate, averaged over channels.
double masked_mse(const model::ModelConfig& config, const Parameters<float>& params,
                  const std::vector<dataset::TrainingRecord>& records, const diffusion::Schedule& schedule, int timesteps,
                  std::uint64_t seed);

struct Checkpoint {
    model::ModelConfig model;
    TrainConfig train;
    TrainState state;
};

void save_checkpoint(const std::string& path, const model::ModelConfig& model, const TrainConfig& train,
                     const TrainState& state);
Checkpoint load_checkpoint(const std::string& path);

inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kDiagnosticCheckpoint = "diagnostic.ckpt";
inline constexpr const char* kCurveFile = "curve.csv";

// Runs epochs until config.epochs are complete. With resume set and a last
// checkpoint present in out_dir, continues from it.
TrainState train_loop(const std::vector<dataset::TrainingRecord>& records, const model::ModelConfig& model,
                      const TrainConfig& config, const std::string& out_dir, bool resume = false,
                      const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_curve_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace slicepath::train
