#include "slicepath/train.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <thread>

#include "json.hpp"
#include "slicepath/checkpoint.h"
#include "slicepath/error.h"

namespace slicepath::train {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::check() const {
    if (batch_size <= 0 || epochs < 0 || !(lr0 > 0.0) || weight_decay < 0.0 || !(clip_norm > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "batch size, learning rate and clip norm must be positive");
    }
    if (!(plateau.factor > 0.0 && plateau.factor < 1.0) || plateau.patience <= 0 || !(plateau.min_lr > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "plateau factor must lie in (0, 1) with positive patience and min_lr");
    }
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw Error(ErrorKind::InvalidArgument, "val_fraction must lie in [0, 1)");
    if (diffusion_steps < 2 || val_timesteps <= 0 || threads <= 0 || length_weight < 0.0 || checkpoint_every <= 0) {
        throw Error(ErrorKind::InvalidArgument, "invalid diffusion steps, validation timesteps or thread count");
    }
}

template <typename T>
void adamw_step(Parameters<T>& params, AdamState<T>& state, const Parameters<T>& grads, double lr, double weight_decay,
                const AdamConfig& adam) {
    if (state.m.size() != params.size() || grads.size() != params.size()) {
        throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match parameters");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(adam.beta1);
    const T b2 = static_cast<T>(adam.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].array();
        auto m = state.m[i].array();
        auto v = state.v[i].array();
        const auto g = grads[i].array();
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g.square();
        p -= static_cast<T>(lr) * ((m / static_cast<T>(c1)) / ((v / static_cast<T>(c2)).sqrt() + static_cast<T>(adam.eps)) +
                                   static_cast<T>(weight_decay) * p);
        if (!params[i].allFinite()) throw Error(ErrorKind::NonFiniteParam, "parameter " + params.name(i) + " became non-finite");
    }
}

template <typename T>
double global_norm(const Parameters<T>& grads) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) sq += grads[i].template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

template <typename T>
double clip_gradients(Parameters<T>& grads, double clip_norm) {
    const double norm = global_norm(grads);
    if (norm > clip_norm) {
        const double factor = clip_norm / norm;
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] *= static_cast<T>(factor);
    }
    return norm;
}

template void adamw_step<float>(Parameters<float>&, AdamState<float>&, const Parameters<float>&, double, double, const AdamConfig&);
template void adamw_step<double>(Parameters<double>&, AdamState<double>&, const Parameters<double>&, double, double,
                                 const AdamConfig&);
template double global_norm<float>(const Parameters<float>&);
template double global_norm<double>(const Parameters<double>&);
template double clip_gradients<float>(Parameters<float>&, double);
template double clip_gradients<double>(Parameters<double>&, double);

PlateauScheduler::PlateauScheduler(double lr, PlateauConfig config)
    : config_(config), lr_(lr), best_(std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        bad_epochs_ = 0;
        return lr_;
    }
    if (++bad_epochs_ >= config_.patience) {
        lr_ = std::max(lr_ * config_.factor, config_.min_lr);
        bad_epochs_ = 0;
    }
    return lr_;
}

void PlateauScheduler::restore(double lr, double best, int bad_epochs) {
    lr_ = lr;
    best_ = best;
    bad_epochs_ = bad_epochs;
}

Split split_records(std::size_t count, double val_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 1));
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    Split split;
    std::size_t n_val = val_fraction > 0.0 ? static_cast<std::size_t>(std::ceil(val_fraction * count)) : 0;
    if (n_val >= count) n_val = count > 1 ? count - 1 : 0;
    split.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.train.begin(), split.train.end());
    if (split.validation.empty()) split.validation = split.train;
    return split;
}

namespace {

std::vector<int> evaluation_timesteps(int steps, int count) {
    std::vector<int> ts;
    for (int k = 0; k < count; ++k) {
        ts.push_back(count == 1 ? steps / 2 : static_cast<int>(std::lround(k * (steps - 1.0) / (count - 1.0))));
    }
    return ts;
}

struct Draw {
    std::size_t record = 0;
    int t = 0;
    Eigen::MatrixXd noise;
};

struct ItemResult {
    Parameters<float> grads;
    double loss = 0.0;
};

ItemResult item_gradient(const model::ModelConfig& config, const Parameters<float>& params,
                         const dataset::TrainingRecord& record, const Draw& draw, const diffusion::Schedule& schedule,
                         double length_weight) {
    ad::Tape<float> tape;
    model::Bound<float> bound(tape, params, true);
    const auto tokens = model::encode(config, bound, ad::Matrix<float>(record.image.pixels));
    const Eigen::MatrixXd noisy = diffusion::q_sample(schedule, record.x0, draw.t, draw.noise);
    const auto estimate = model::denoise(config, bound, tape.constant(noisy.cast<float>()), draw.t, tokens);
    auto loss = diffusion::masked_loss<float>(estimate, record.x0, record.mask, {}, schedule.timestep_weight(draw.t));
    if (length_weight > 0.0) {
        const auto predicted = model::predict_length(config, bound, tokens);
        ad::Matrix<float> target(1, 1), weight(1, 1);
        target(0, 0) = static_cast<float>(static_cast<double>(record.true_len) / config.max_length);
        weight(0, 0) = static_cast<float>(length_weight);
        loss = loss + ad::weighted_squared_error(predicted, target, weight);
    }
    tape.backward(loss);
    return {bound.gradients(), static_cast<double>(loss.value()(0, 0))};
}

void check_records(const std::vector<dataset::TrainingRecord>& records, const model::ModelConfig& config) {
    if (records.empty()) throw Error(ErrorKind::InvalidArgument, "training needs at least one record");
    for (const auto& r : records) {
        if (r.x0.rows() != 3 || r.x0.cols() != config.max_length || r.mask.size() != config.max_length) {
            throw Error(ErrorKind::ShapeMismatch, fmt::format("record length {} does not match model max_length {}",
                                                              r.x0.cols(), config.max_length));
        }
        if (r.image.pixels.rows() != config.encoder.image_side || r.image.pixels.cols() != config.encoder.image_side) {
            throw Error(ErrorKind::ShapeMismatch, "record image size does not match the encoder");
        }
    }
}

json train_config_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"lr0", c.lr0},
            {"weight_decay", c.weight_decay},
            {"plateau", {{"factor", c.plateau.factor}, {"patience", c.plateau.patience}, {"min_lr", c.plateau.min_lr}}},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed},
            {"val_fraction", c.val_fraction},
            {"diffusion_steps", c.diffusion_steps},
            {"val_timesteps", c.val_timesteps},
            {"length_weight", c.length_weight},
            {"threads", c.threads},
            {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from(const json& j) {
    TrainConfig c;
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.lr0 = j.at("lr0");
    c.weight_decay = j.at("weight_decay");
    c.plateau.factor = j.at("plateau").at("factor");
    c.plateau.patience = j.at("plateau").at("patience");
    c.plateau.min_lr = j.at("plateau").at("min_lr");
    c.clip_norm = j.at("clip_norm");
    c.seed = j.at("seed");
    c.val_fraction = j.at("val_fraction");
    c.diffusion_steps = j.at("diffusion_steps");
    c.val_timesteps = j.at("val_timesteps");
    c.length_weight = j.at("length_weight");
    c.threads = j.at("threads");
    c.checkpoint_every = j.at("checkpoint_every");
    return c;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& config) { return train_config_json(config).dump(); }

TrainConfig train_config_from_json(const std::string& text) {
    try {
        return train_config_from(json::parse(text));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("bad training config: ") + e.what());
    }
}

double evaluate_loss(const model::ModelConfig& config, const Parameters<float>& params,
                     const std::vector<dataset::TrainingRecord>& records, const std::vector<std::size_t>& indices,
                     const diffusion::Schedule& schedule, const diffusion::LossWeights& weights, int timesteps,
                     std::uint64_t seed) {
    if (indices.empty()) throw Error(ErrorKind::InvalidArgument, "evaluation needs at least one record");
    Rng rng(derive_seed(seed, 2));
    const auto ts = evaluation_timesteps(schedule.steps, timesteps);
    double total = 0.0;
    for (std::size_t index : indices) {
        const auto& record = records.at(index);
        ad::Tape<float> tape;
        model::Bound<float> bound(tape, params, false);
        const auto tokens = model::encode(config, bound, ad::Matrix<float>(record.image.pixels));
        for (int t : ts) {
            const Eigen::MatrixXd noise = diffusion::gaussian(3, record.x0.cols(), rng);
            const Eigen::MatrixXd noisy = diffusion::q_sample(schedule, record.x0, t, noise);
            const auto estimate = model::denoise(config, bound, tape.constant(noisy.cast<float>()), t, tokens);
            total += diffusion::masked_loss(record.x0, estimate.value().cast<double>(), record.mask, weights, 1.0);
        }
    }
    return total / static_cast<double>(indices.size() * ts.size());
}

double masked_mse(const model::ModelConfig& config, const Parameters<float>& params,
                  const std::vector<dataset::TrainingRecord>& records, const diffusion::Schedule& schedule, int timesteps,
                  std::uint64_t seed) {
    std::vector<std::size_t> all(records.size());
    std::iota(all.begin(), all.end(), 0);
    const diffusion::LossWeights unit{{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}};
    return evaluate_loss(config, params, records, all, schedule, unit, timesteps, seed);
}

void save_checkpoint(const std::string& path, const model::ModelConfig& model, const TrainConfig& train,
                     const TrainState& state) {
    json history = json::array();
    for (const auto& h : state.history) history.push_back({h.epoch, h.train_loss, h.val_loss, h.lr});
    const double best = state.scheduler.best();
    const json meta = {
        {"model", json::parse(model::config_to_json(model))},
        {"train", train_config_json(train)},
        {"epoch", state.epoch},
        {"adam_step", state.adam.step},
        {"lr", state.scheduler.lr()},
        {"best", std::isfinite(best) ? json(best) : json(nullptr)},
        {"bad_epochs", state.scheduler.bad_epochs()},
        {"rng", state.rng.serialize()},
        {"history", history},
    };
    model::Archive archive;
    archive.metadata = meta.dump();
    model::append_parameters(archive, "param/", state.params, model::DType::F32);
    model::append_parameters(archive, "adam.m/", state.adam.m, model::DType::F32);
    model::append_parameters(archive, "adam.v/", state.adam.v, model::DType::F32);
    model::save_archive(path, archive);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto archive = model::load_archive(path);
    Checkpoint ck;
    try {
        const json meta = json::parse(archive.metadata);
        ck.model = model::config_from_json(meta.at("model").dump());
        ck.train = train_config_from(meta.at("train"));
        ck.state.params = model::extract_parameters<float>(archive, "param/");
        ck.state.adam.m = model::extract_parameters<float>(archive, "adam.m/");
        ck.state.adam.v = model::extract_parameters<float>(archive, "adam.v/");
        ck.state.adam.step = meta.at("adam_step");
        ck.state.epoch = meta.at("epoch");
        ck.state.scheduler = PlateauScheduler(ck.train.lr0, ck.train.plateau);
        const double best = meta.at("best").is_null() ? std::numeric_limits<double>::infinity() : meta.at("best").get<double>();
        ck.state.scheduler.restore(meta.at("lr"), best, meta.at("bad_epochs"));
        ck.state.rng.deserialize(meta.at("rng").get<std::string>());
        for (const auto& h : meta.at("history")) ck.state.history.push_back({h.at(0), h.at(1), h.at(2), h.at(3)});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::SchemaVersionMismatch, std::string("bad checkpoint metadata: ") + e.what());
    }
    return ck;
}

void write_curve_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::trunc);
    out << "epoch,train_loss,val_loss,lr\n";
    for (const auto& h : history) out << fmt::format("{},{:.17g},{:.17g},{:.17g}\n", h.epoch, h.train_loss, h.val_loss, h.lr);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path);
}

TrainState train_loop(const std::vector<dataset::TrainingRecord>& records, const model::ModelConfig& model,
                      const TrainConfig& config, const std::string& out_dir, bool resume,
                      const std::function<void(const EpochRecord&)>& on_epoch) {
    config.check();
    model.check();
    check_records(records, model);
    fs::create_directories(out_dir);
    const auto last_path = (fs::path(out_dir) / kLastCheckpoint).string();
    const auto best_path = (fs::path(out_dir) / kBestCheckpoint).string();
    const auto curve_path = (fs::path(out_dir) / kCurveFile).string();

    TrainState state;
    if (resume && fs::exists(last_path)) {
        auto ck = load_checkpoint(last_path);
        if (model::config_to_json(ck.model) != model::config_to_json(model)) {
            throw Error(ErrorKind::ShapeMismatch, "checkpoint model configuration differs from the requested one");
        }
        state = std::move(ck.state);
    } else {
        Rng init_rng(derive_seed(config.seed, 0));
        state.params = model::init_parameters<float>(model, init_rng);
        state.adam = AdamState<float>::zeros_like(state.params);
        state.scheduler = PlateauScheduler(config.lr0, config.plateau);
        state.rng = Rng(derive_seed(config.seed, 3));
    }

    const auto schedule = diffusion::make_cosine_schedule(config.diffusion_steps);
    const auto split = split_records(records.size(), config.val_fraction, config.seed);
    const diffusion::LossWeights weights;

    auto abort_non_finite = [&](ErrorKind kind, const std::string& what) {
        save_checkpoint((fs::path(out_dir) / kDiagnosticCheckpoint).string(), model, config, state);
        throw Error(kind, what);
    };

    std::optional<TrainState> best;
    bool best_pending = false;
    while (state.epoch < config.epochs) {
        auto order = split.train;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[state.rng.below(i)]);

        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            // Draws happen in item order before any work is dispatched.
            std::vector<Draw> draws;
            for (std::size_t i = start; i < end; ++i) {
                Draw d;
                d.record = order[i];
                d.t = static_cast<int>(state.rng.below(static_cast<std::uint64_t>(schedule.steps)));
                d.noise = diffusion::gaussian(3, model.max_length, state.rng);
                draws.push_back(std::move(d));
            }
            std::vector<ItemResult> results(draws.size());
            const int workers = std::min<int>(config.threads, static_cast<int>(draws.size()));
            auto run = [&](int w) {
                for (std::size_t i = static_cast<std::size_t>(w); i < draws.size(); i += static_cast<std::size_t>(workers)) {
                    results[i] = item_gradient(model, state.params, records[draws[i].record], draws[i], schedule,
                                               config.length_weight);
                }
            };
            if (workers <= 1) {
                run(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
                for (auto& th : pool) th.join();
            }

            auto grads = std::move(results[0].grads);
            double batch_loss = results[0].loss;
            for (std::size_t i = 1; i < results.size(); ++i) {
                for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += results[i].grads[p];
                batch_loss += results[i].loss;
            }
            const float inv = 1.0f / static_cast<float>(results.size());
            for (std::size_t p = 0; p < grads.size(); ++p) grads[p] *= inv;
            if (!std::isfinite(batch_loss)) {
                abort_non_finite(ErrorKind::NonFiniteLoss, fmt::format("non-finite loss in epoch {}", state.epoch + 1));
            }
            const double norm = clip_gradients(grads, config.clip_norm);
            if (!std::isfinite(norm)) {
                abort_non_finite(ErrorKind::NonFiniteGradient, fmt::format("non-finite gradient in epoch {}", state.epoch + 1));
            }
            adamw_step(state.params, state.adam, grads, state.scheduler.lr(), config.weight_decay);
            epoch_loss += batch_loss;
        }

        EpochRecord rec;
        rec.epoch = state.epoch + 1;
        rec.train_loss = epoch_loss / static_cast<double>(order.size());
        rec.lr = state.scheduler.lr();
        rec.val_loss = evaluate_loss(model, state.params, records, split.validation, schedule, weights, config.val_timesteps,
                                     config.seed);
        if (!std::isfinite(rec.val_loss)) {
            abort_non_finite(ErrorKind::NonFiniteLoss, fmt::format("non-finite validation loss in epoch {}", rec.epoch));
        }
        const bool improved = rec.val_loss < state.scheduler.best();
        state.scheduler.step(rec.val_loss);
        state.epoch = rec.epoch;
        state.history.push_back(rec);
        if (improved) {
            best = state;
            best_pending = true;
        }

        if (state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs) {
            save_checkpoint(last_path, model, config, state);
            if (best_pending) save_checkpoint(best_path, model, config, *best);
            best_pending = false;
            write_curve_csv(curve_path, state.history);
        }
        if (on_epoch) on_epoch(rec);
    }
    return state;
}

}  // namespace slicepath::train
