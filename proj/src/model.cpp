#include "slicepath/model.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "slicepath/error.h"

namespace slicepath::model {

int UNetConfig::heads(int channels) const {
    if (head_dim > 0 && channels % head_dim == 0 && channels >= head_dim) return channels / head_dim;
    return 1;
}

int UNetConfig::groups(int channels) const {
    int g = std::min(max_groups, channels);
    while (g > 1 && channels % g != 0) --g;
    return std::max(g, 1);
}

void ModelConfig::check() const {
    const auto& e = encoder;
    if (e.patch_size <= 0 || e.image_side % e.patch_size != 0) {
        throw Error(ErrorKind::InvalidArgument, "image side must be divisible by the patch size");
    }
    if (e.embed_dim <= 0 || e.heads <= 0 || e.embed_dim % e.heads != 0 || e.depth < 0 || e.mlp_ratio <= 0) {
        throw Error(ErrorKind::InvalidArgument, "encoder embed_dim must be positive and divisible by heads");
    }
    if (unet.in_channels <= 0 || unet.base_channels <= 0 || unet.multipliers.empty() || unet.attention_levels < 0) {
        throw Error(ErrorKind::InvalidArgument, "invalid U-Net configuration");
    }
    for (int m : unet.multipliers) {
        if (m <= 0) throw Error(ErrorKind::InvalidArgument, "channel multipliers must be positive");
    }
    if (max_length <= 0 || length_hidden <= 0) throw Error(ErrorKind::InvalidArgument, "max_length must be positive");
}

ModelConfig desk_preset() { return ModelConfig{}; }

ModelConfig paper_preset() {
    ModelConfig config;
    config.encoder.embed_dim = 384;
    config.encoder.depth = 12;
    config.encoder.heads = 6;
    config.unet.base_channels = 128;
    config.unet.multipliers = {2, 2, 4, 6, 8};
    config.max_length = 512;
    config.length_hidden = 256;
    return config;
}

template <typename T>
void Parameters<T>::add(const std::string& name, Matrix<T> value) {
    if (lookup_.count(name)) throw Error(ErrorKind::InvalidArgument, "duplicate parameter name " + name);
    lookup_.emplace(name, names_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
}

template <typename T>
std::size_t Parameters<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
}

template <typename T>
std::size_t Parameters<T>::index(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end()) throw Error(ErrorKind::ShapeMismatch, "no parameter named " + name);
    return it->second;
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like() const {
    Parameters out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Matrix<T>::Zero(values_[i].rows(), values_[i].cols()));
    return out;
}

template <typename T>
Bound<T>::Bound(Tape<T>& tape, const Parameters<T>& params, bool trainable) : tape_(&tape), params_(&params) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        vars_.push_back(trainable ? tape.variable(params[i]) : tape.constant(params[i]));
    }
}

template <typename T>
Parameters<T> Bound<T>::gradients() const {
    Parameters<T> out;
    for (std::size_t i = 0; i < params_->size(); ++i) out.add(params_->name(i), tape_->grad(vars_[i]));
    return out;
}

namespace {

template <typename T>
class Initializer {
public:
    Initializer(Parameters<T>& params, Rng& rng) : params_(params), rng_(rng) {}

    void normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev) {
        Matrix<T> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = static_cast<T>(stddev * rng_.normal());
        params_.add(name, std::move(m));
    }
    void fan_in(const std::string& name, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan) {
        normal(name, rows, cols, 1.0 / std::sqrt(static_cast<double>(fan)));
    }
    void constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
        params_.add(name, Matrix<T>::Constant(rows, cols, static_cast<T>(value)));
    }

private:
    Parameters<T>& params_;
    Rng& rng_;
};

int time_dim(const UNetConfig& u) { return u.base_channels; }
int time_hidden(const UNetConfig& u) { return 4 * u.base_channels; }

template <typename T>
void init_res_block(Initializer<T>& init, const std::string& p, int cin, int cout, int hidden) {
    init.constant(p + ".gn1.g", cin, 1, 1.0);
    init.constant(p + ".gn1.b", cin, 1, 0.0);
    init.fan_in(p + ".conv1.w", cout, cin * 3, cin * 3);
    init.constant(p + ".conv1.b", cout, 1, 0.0);
    init.fan_in(p + ".film.w", 2 * cout, hidden, hidden);
    init.constant(p + ".film.b", 2 * cout, 1, 0.0);
    init.constant(p + ".gn2.g", cout, 1, 1.0);
    init.constant(p + ".gn2.b", cout, 1, 0.0);
    init.fan_in(p + ".conv2.w", cout, cout * 3, cout * 3);
    init.constant(p + ".conv2.b", cout, 1, 0.0);
    if (cin != cout) {
        init.fan_in(p + ".skip.w", cout, cin, cin);
        init.constant(p + ".skip.b", cout, 1, 0.0);
    }
}

template <typename T>
void init_cross_attention(Initializer<T>& init, const std::string& p, int channels, int token_dim) {
    init.constant(p + ".gn.g", channels, 1, 1.0);
    init.constant(p + ".gn.b", channels, 1, 0.0);
    init.fan_in(p + ".wq", channels, channels, channels);
    init.fan_in(p + ".wk", token_dim, channels, token_dim);
    init.fan_in(p + ".wv", token_dim, channels, token_dim);
    init.fan_in(p + ".wo", channels, channels, channels);
    init.constant(p + ".bo", 1, channels, 0.0);
}

template <typename T>
struct Network {
    const ModelConfig& config;
    const Bound<T>& p;

    Var<T> linear_rows(Var<T> x, const std::string& w, const std::string& b) const {
        return ad::add_row(ad::matmul(x, p[w]), p[b]);
    }

    Var<T> res_block(Var<T> h, Var<T> time, const std::string& name, int cin, int cout) const {
        const auto& u = config.unet;
        Var<T> a = ad::silu(ad::group_norm(h, u.groups(cin), p[name + ".gn1.g"], p[name + ".gn1.b"]));
        a = ad::conv1d(a, p[name + ".conv1.w"], p[name + ".conv1.b"], 3, 1, 1);
        a = ad::group_norm(a, u.groups(cout), p[name + ".gn2.g"], p[name + ".gn2.b"]);
        const Var<T> film = ad::add_col(ad::matmul(p[name + ".film.w"], time), p[name + ".film.b"]);
        const Var<T> gain = ad::slice_rows(film, 0, cout);
        const Var<T> shift = ad::slice_rows(film, cout, cout);
        a = ad::add_col(a + ad::mul_col(a, gain), shift);
        a = ad::conv1d(ad::silu(a), p[name + ".conv2.w"], p[name + ".conv2.b"], 3, 1, 1);
        const Var<T> skip = cin == cout ? h : ad::conv1d(h, p[name + ".skip.w"], p[name + ".skip.b"], 1);
        return a + skip;
    }

    Var<T> cross_attention(Var<T> h, Var<T> tokens, const std::string& name, int channels) const {
        const auto& u = config.unet;
        const Var<T> n = ad::transpose(ad::group_norm(h, u.groups(channels), p[name + ".gn.g"], p[name + ".gn.b"]));
        const Var<T> q = ad::matmul(n, p[name + ".wq"]);
        const Var<T> k = ad::matmul(tokens, p[name + ".wk"]);
        const Var<T> v = ad::matmul(tokens, p[name + ".wv"]);
        const Var<T> o = linear_rows(ad::multi_head_attention(q, k, v, u.heads(channels)), name + ".wo", name + ".bo");
        return h + ad::transpose(o);
    }
};

}  // namespace

template <typename T>
Parameters<T> init_parameters(const ModelConfig& config, Rng& rng) {
    config.check();
    Parameters<T> params;
    Initializer<T> init(params, rng);

    const auto& e = config.encoder;
    const int d = e.embed_dim;
    const int patch_dim = e.patch_size * e.patch_size;
    init.fan_in("enc.patch.w", patch_dim, d, patch_dim);
    init.constant("enc.patch.b", 1, d, 0.0);
    init.normal("enc.pos", e.tokens(), d, 0.02);
    for (int i = 0; i < e.depth; ++i) {
        const std::string b = fmt::format("enc.blk{}", i);
        init.constant(b + ".ln1.g", 1, d, 1.0);
        init.constant(b + ".ln1.b", 1, d, 0.0);
        init.fan_in(b + ".wq", d, d, d);
        init.fan_in(b + ".wk", d, d, d);
        init.fan_in(b + ".wv", d, d, d);
        init.fan_in(b + ".wo", d, d, d);
        init.constant(b + ".bo", 1, d, 0.0);
        init.constant(b + ".ln2.g", 1, d, 1.0);
        init.constant(b + ".ln2.b", 1, d, 0.0);
        init.fan_in(b + ".mlp.w1", d, e.mlp_ratio * d, d);
        init.constant(b + ".mlp.b1", 1, e.mlp_ratio * d, 0.0);
        init.fan_in(b + ".mlp.w2", e.mlp_ratio * d, d, e.mlp_ratio * d);
        init.constant(b + ".mlp.b2", 1, d, 0.0);
    }
    init.constant("enc.ln.g", 1, d, 1.0);
    init.constant("enc.ln.b", 1, d, 0.0);

    const auto& u = config.unet;
    const int td = time_dim(u);
    const int th = time_hidden(u);
    init.fan_in("time.w1", th, td, td);
    init.constant("time.b1", th, 1, 0.0);
    init.fan_in("time.w2", th, th, th);
    init.constant("time.b2", th, 1, 0.0);

    init.fan_in("in.w", u.base_channels, u.in_channels, u.in_channels);
    init.constant("in.b", u.base_channels, 1, 0.0);

    const int levels = u.levels();
    int c = u.base_channels;
    for (int i = 0; i < levels; ++i) {
        const int ci = u.channels(i);
        init_res_block(init, fmt::format("down{}.res", i), c, ci, th);
        if (u.has_attention(i)) init_cross_attention(init, fmt::format("down{}.attn", i), ci, d);
        if (i < levels - 1) {
            init.fan_in(fmt::format("down{}.pool.w", i), ci, ci * 3, ci * 3);
            init.constant(fmt::format("down{}.pool.b", i), ci, 1, 0.0);
        }
        c = ci;
    }
    init_res_block(init, "mid.res1", c, c, th);
    init_cross_attention(init, "mid.attn", c, d);
    init_res_block(init, "mid.res2", c, c, th);
    for (int i = levels - 1; i >= 0; --i) {
        const int ci = u.channels(i);
        if (i < levels - 1) {
            init.fan_in(fmt::format("up{}.up.w", i), c, c * 3, c * 3);
            init.constant(fmt::format("up{}.up.b", i), c, 1, 0.0);
        }
        init_res_block(init, fmt::format("up{}.res", i), c + ci, ci, th);
        if (u.has_attention(i)) init_cross_attention(init, fmt::format("up{}.attn", i), ci, d);
        c = ci;
    }
    init.constant("out.gn.g", c, 1, 1.0);
    init.constant("out.gn.b", c, 1, 0.0);
    init.fan_in("out.w", u.in_channels, c, c);
    init.constant("out.b", u.in_channels, 1, 0.0);

    init.fan_in("len.w1", d, config.length_hidden, d);
    init.constant("len.b1", 1, config.length_hidden, 0.0);
    init.fan_in("len.w2", config.length_hidden, 1, config.length_hidden);
    init.constant("len.b2", 1, 1, 0.0);
    return params;
}

template <typename T>
Matrix<T> patchify(const Matrix<T>& image, int patch_size) {
    if (patch_size <= 0 || image.rows() % patch_size != 0 || image.cols() % patch_size != 0) {
        throw Error(ErrorKind::ShapeMismatch,
                    fmt::format("{}x{} image does not tile into {}-pixel patches", image.rows(), image.cols(), patch_size));
    }
    const Eigen::Index grid_rows = image.rows() / patch_size;
    const Eigen::Index grid_cols = image.cols() / patch_size;
    Matrix<T> out(grid_rows * grid_cols, patch_size * patch_size);
    for (Eigen::Index pr = 0; pr < grid_rows; ++pr) {
        for (Eigen::Index pc = 0; pc < grid_cols; ++pc) {
            const Eigen::Index row = pr * grid_cols + pc;
            for (int r = 0; r < patch_size; ++r) {
                for (int c = 0; c < patch_size; ++c) out(row, r * patch_size + c) = image(pr * patch_size + r, pc * patch_size + c);
            }
        }
    }
    return out;
}

template <typename T>
Matrix<T> timestep_encoding(int t, int dim) {
    Matrix<T> out = Matrix<T>::Zero(dim, 1);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / dim);
        out(k, 0) = static_cast<T>(std::sin(t * freq));
        out(half + k, 0) = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

template <typename T>
Matrix<T> upsample_matrix(Eigen::Index length) {
    Matrix<T> m = Matrix<T>::Zero(length, 2 * length);
    for (Eigen::Index j = 0; j < 2 * length; ++j) {
        const double src = std::clamp((j + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(length - 1));
        const auto lo = static_cast<Eigen::Index>(std::floor(src));
        const Eigen::Index hi = std::min(lo + 1, length - 1);
        const double frac = src - static_cast<double>(lo);
        m(lo, j) += static_cast<T>(1.0 - frac);
        m(hi, j) += static_cast<T>(frac);
    }
    return m;
}

template <typename T>
Var<T> encode(const ModelConfig& config, const Bound<T>& p, const Matrix<T>& image) {
    const auto& e = config.encoder;
    if (image.rows() != e.image_side || image.cols() != e.image_side) {
        throw Error(ErrorKind::ShapeMismatch, fmt::format("encoder expects a {0}x{0} image, got {1}x{2}", e.image_side,
                                                          image.rows(), image.cols()));
    }
    Network<T> net{config, p};
    auto& tape = p.tape();
    Var<T> h = net.linear_rows(tape.constant(patchify<T>(image, e.patch_size)), "enc.patch.w", "enc.patch.b") + p["enc.pos"];
    for (int i = 0; i < e.depth; ++i) {
        const std::string b = fmt::format("enc.blk{}", i);
        const Var<T> a = ad::layer_norm_rows(h, p[b + ".ln1.g"], p[b + ".ln1.b"]);
        const Var<T> o = ad::multi_head_attention(ad::matmul(a, p[b + ".wq"]), ad::matmul(a, p[b + ".wk"]),
                                                  ad::matmul(a, p[b + ".wv"]), e.heads);
        h = h + net.linear_rows(o, b + ".wo", b + ".bo");
        const Var<T> m = ad::layer_norm_rows(h, p[b + ".ln2.g"], p[b + ".ln2.b"]);
        h = h + net.linear_rows(ad::gelu(net.linear_rows(m, b + ".mlp.w1", b + ".mlp.b1")), b + ".mlp.w2", b + ".mlp.b2");
    }
    return ad::layer_norm_rows(h, p["enc.ln.g"], p["enc.ln.b"]);
}

template <typename T>
Var<T> denoise(const ModelConfig& config, const Bound<T>& p, Var<T> noisy, int t, Var<T> tokens) {
    const auto& u = config.unet;
    if (noisy.rows() != u.in_channels || noisy.cols() <= 0) {
        throw Error(ErrorKind::ShapeMismatch, fmt::format("denoiser expects {} channels, got {}x{}", u.in_channels,
                                                          noisy.rows(), noisy.cols()));
    }
    if (tokens.cols() != config.encoder.embed_dim) throw Error(ErrorKind::ShapeMismatch, "token width differs from embed_dim");
    Network<T> net{config, p};
    auto& tape = p.tape();

    const Eigen::Index length = noisy.cols();
    const Eigen::Index multiple = u.length_multiple();
    const Eigen::Index padded = (length + multiple - 1) / multiple * multiple;

    Var<T> time = tape.constant(timestep_encoding<T>(t, time_dim(u)));
    time = ad::add_col(ad::matmul(p["time.w1"], time), p["time.b1"]);
    time = ad::add_col(ad::matmul(p["time.w2"], ad::silu(time)), p["time.b2"]);
    time = ad::silu(time);

    Var<T> h = ad::conv1d(ad::pad_cols(noisy, padded), p["in.w"], p["in.b"], 1);
    const int levels = u.levels();
    std::vector<Var<T>> skips;
    int c = u.base_channels;
    for (int i = 0; i < levels; ++i) {
        const int ci = u.channels(i);
        h = net.res_block(h, time, fmt::format("down{}.res", i), c, ci);
        if (u.has_attention(i)) h = net.cross_attention(h, tokens, fmt::format("down{}.attn", i), ci);
        skips.push_back(h);
        if (i < levels - 1) h = ad::conv1d(h, p[fmt::format("down{}.pool.w", i)], p[fmt::format("down{}.pool.b", i)], 3, 2, 1);
        c = ci;
    }
    h = net.res_block(h, time, "mid.res1", c, c);
    h = net.cross_attention(h, tokens, "mid.attn", c);
    h = net.res_block(h, time, "mid.res2", c, c);
    for (int i = levels - 1; i >= 0; --i) {
        const int ci = u.channels(i);
        if (i < levels - 1) {
            h = ad::matmul(h, tape.constant(upsample_matrix<T>(h.cols())));
            h = ad::conv1d(h, p[fmt::format("up{}.up.w", i)], p[fmt::format("up{}.up.b", i)], 3, 1, 1);
        }
        h = net.res_block(ad::concat_rows(h, skips[i]), time, fmt::format("up{}.res", i), c + ci, ci);
        if (u.has_attention(i)) h = net.cross_attention(h, tokens, fmt::format("up{}.attn", i), ci);
        c = ci;
    }
    h = ad::silu(ad::group_norm(h, u.groups(c), p["out.gn.g"], p["out.gn.b"]));
    h = ad::conv1d(h, p["out.w"], p["out.b"], 1);
    return ad::slice_cols(h, 0, length);
}

template <typename T>
Var<T> predict_length(const ModelConfig& config, const Bound<T>& p, Var<T> tokens) {
    Network<T> net{config, p};
    const Var<T> hidden = ad::silu(net.linear_rows(ad::mean_rows(tokens), "len.w1", "len.b1"));
    return net.linear_rows(hidden, "len.w2", "len.b2");
}

#define SLICEPATH_INSTANTIATE(T)                                                                 \
    template class Parameters<T>;                                                                \
    template class Bound<T>;                                                                     \
    template Parameters<T> init_parameters<T>(const ModelConfig&, Rng&);                        \
    template Var<T> encode<T>(const ModelConfig&, const Bound<T>&, const Matrix<T>&);          \
    template Var<T> denoise<T>(const ModelConfig&, const Bound<T>&, Var<T>, int, Var<T>);      \
    template Var<T> predict_length<T>(const ModelConfig&, const Bound<T>&, Var<T>);            \
    template Matrix<T> patchify<T>(const Matrix<T>&, int);                                      \
    template Matrix<T> timestep_encoding<T>(int, int);                                          \
    template Matrix<T> upsample_matrix<T>(Eigen::Index);

SLICEPATH_INSTANTIATE(float)
SLICEPATH_INSTANTIATE(double)

#undef SLICEPATH_INSTANTIATE

}  // namespace slicepath::model
