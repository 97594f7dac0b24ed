#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "slicepath/autodiff.h"
#include "slicepath/random.h"

namespace slicepath::model {

using ad::Matrix;
using ad::Tape;
using ad::Var;

struct EncoderConfig {
    int image_side = 224;
    int patch_size = 14;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;

    int tokens() const { return (image_side / patch_size) * (image_side / patch_size); }
};

struct UNetConfig {
    int in_channels = 3;
    int base_channels = 32;
    std::vector<int> multipliers{2, 2, 4};
    int head_dim = 32;
    int attention_levels = 3;  // cross-attention at this many of the deepest levels
    int max_groups = 8;

    int levels() const { return static_cast<int>(multipliers.size()); }
    int channels(int level) const { return base_channels * multipliers[level]; }
    int length_multiple() const { return 1 << (levels() - 1); }
    bool has_attention(int level) const { return level >= levels() - attention_levels; }
    int heads(int channels) const;
    int groups(int channels) const;
};

struct ModelConfig {
    EncoderConfig encoder;
    UNetConfig unet;
    int max_length = 64;  // N_max the length head is normalized by
    int length_hidden = 64;

    void check() const;
};

ModelConfig desk_preset();
ModelConfig paper_preset();

// Named arrays in a fixed order.
template <typename T>
class Parameters {
public:
    void add(const std::string& name, Matrix<T> value);

    std::size_t size() const { return values_.size(); }
    std::size_t scalar_count() const;
    const std::string& name(std::size_t i) const { return names_[i]; }
    Matrix<T>& operator[](std::size_t i) { return values_[i]; }
    const Matrix<T>& operator[](std::size_t i) const { return values_[i]; }
    std::size_t index(const std::string& name) const;
    bool contains(const std::string& name) const { return lookup_.count(name) != 0; }
    const Matrix<T>& get(const std::string& name) const { return values_[index(name)]; }

    // Same names and shapes, all zeros.
    Parameters zeros_like() const;

    template <typename U>
    Parameters<U> cast() const {
        Parameters<U> out;
        for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Matrix<T>> values_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

// Parameters placed on a tape for one forward pass.
template <typename T>
class Bound {
public:
    // trainable = false makes every parameter a constant (no gradients kept).
    Bound(Tape<T>& tape, const Parameters<T>& params, bool trainable);

    Var<T> operator[](const std::string& name) const { return vars_[params_->index(name)]; }
    Tape<T>& tape() const { return *tape_; }
    Parameters<T> gradients() const;

private:
    Tape<T>* tape_;
    const Parameters<T>* params_;
    std::vector<Var<T>> vars_;
};

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, Rng& rng);

// Patch tokens, P×D.
template <typename T>
Var<T> encode(const ModelConfig& config, const Bound<T>& params, const Matrix<T>& image);

// Clean-sequence estimate from a noisy 3×L sequence at timestep t.
template <typename T>
Var<T> denoise(const ModelConfig& config, const Bound<T>& params, Var<T> noisy, int t, Var<T> tokens);

// Predicted true_len / max_length, 1×1.
template <typename T>
Var<T> predict_length(const ModelConfig& config, const Bound<T>& params, Var<T> tokens);

// Image split into non-overlapping patches, one flattened patch per row.
template <typename T>
Matrix<T> patchify(const Matrix<T>& image, int patch_size);

// Sinusoidal timestep features, dim×1, frequencies 10000^(-2k/dim).
template <typename T>
Matrix<T> timestep_encoding(int t, int dim);

// L×2L matrix M with x·M the linear ×2 upsampling of the rows of x.
template <typename T>
Matrix<T> upsample_matrix(Eigen::Index length);

}  // namespace slicepath::model
