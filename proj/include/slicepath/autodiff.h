#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <vector>

#include "slicepath/error.h"

// Reverse-mode differentiation over dense Eigen matrices. A Tape records every
// operation; Var is a cheap handle into it. Ops are free functions.
namespace slicepath::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Matrix<T>& value() const { return tape->value(*this); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix<T>&)>;

    Var<T> constant(Matrix<T> value) { return push(std::move(value), false, {}); }
    Var<T> variable(Matrix<T> value) { return push(std::move(value), true, {}); }

    // Backward is dropped when no input needs a gradient.
    Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
        bool needs = false;
        for (const auto& v : inputs) needs = needs || nodes_[v.id].needs_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
    bool needs_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }

    Matrix<T> grad(Var<T> v) const {
        const auto& node = nodes_[v.id];
        if (node.grad.size() == 0) return Matrix<T>::Zero(node.value.rows(), node.value.cols());
        return node.grad;
    }

    template <typename Derived>
    void accumulate(Var<T> v, const Eigen::MatrixBase<Derived>& g) {
        auto& node = nodes_[v.id];
        if (!node.needs_grad) return;
        if (node.grad.size() == 0) {
            node.grad = g;
        } else {
            node.grad += g;
        }
    }

    void backward(Var<T> root) {
        if (nodes_[root.id].value.size() != 1) {
            throw Error(ErrorKind::ShapeMismatch, "backward needs a scalar root");
        }
        for (auto& node : nodes_) node.grad.resize(0, 0);
        nodes_[root.id].grad = Matrix<T>::Ones(1, 1);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (node.backward && node.grad.size() != 0) node.backward(*this, node.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        Backward backward;
        bool needs_grad = false;
    };

    Var<T> push(Matrix<T> value, bool needs, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix<T>(), std::move(backward), needs});
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": operand shapes differ");
    }
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.cols() != b.rows()) throw Error(ErrorKind::ShapeMismatch, "matmul: inner dimensions differ");
    return a.tape->record(a.value() * b.value(), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
        if (tape.needs_grad(a)) tape.accumulate(a, g * tape.value(b).transpose());
        if (tape.needs_grad(b)) tape.accumulate(b, tape.value(a).transpose() * g);
    });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(a, g);
        tape.accumulate(b, g);
    });
}

template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(a, g);
        tape.accumulate(b, -g);
    });
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
        if (tape.needs_grad(a)) tape.accumulate(a, g.cwiseProduct(tape.value(b)));
        if (tape.needs_grad(b)) tape.accumulate(b, g.cwiseProduct(tape.value(a)));
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    return a.tape->record(a.value() * s, {a}, [a, s](Tape<T>& tape, const Matrix<T>& g) { tape.accumulate(a, g * s); });
}

// x (R×C) plus a row vector b (1×C) on every row.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> b) {
    if (b.rows() != 1 || b.cols() != x.cols()) throw Error(ErrorKind::ShapeMismatch, "add_row: bias shape");
    Matrix<T> out = x.value().rowwise() + b.value().row(0);
    return x.tape->record(std::move(out), {x, b}, [x, b](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, g);
        if (tape.needs_grad(b)) tape.accumulate(b, g.colwise().sum());
    });
}

// x (R×C) plus a column vector b (R×1) on every column.
template <typename T>
Var<T> add_col(Var<T> x, Var<T> b) {
    if (b.cols() != 1 || b.rows() != x.rows()) throw Error(ErrorKind::ShapeMismatch, "add_col: bias shape");
    Matrix<T> out = x.value().colwise() + b.value().col(0);
    return x.tape->record(std::move(out), {x, b}, [x, b](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, g);
        if (tape.needs_grad(b)) tape.accumulate(b, g.rowwise().sum());
    });
}

// Each row of x (R×C) multiplied by the matching entry of s (R×1).
template <typename T>
Var<T> mul_col(Var<T> x, Var<T> s) {
    if (s.cols() != 1 || s.rows() != x.rows()) throw Error(ErrorKind::ShapeMismatch, "mul_col: scale shape");
    Matrix<T> out = x.value().array().colwise() * s.value().col(0).array();
    return x.tape->record(std::move(out), {x, s}, [x, s](Tape<T>& tape, const Matrix<T>& g) {
        if (tape.needs_grad(x)) {
            tape.accumulate(x, Matrix<T>(g.array().colwise() * tape.value(s).col(0).array()));
        }
        if (tape.needs_grad(s)) tape.accumulate(s, g.cwiseProduct(tape.value(x)).rowwise().sum());
    });
}

template <typename T>
Var<T> transpose(Var<T> x) {
    return x.tape->record(x.value().transpose(), {x},
                          [x](Tape<T>& tape, const Matrix<T>& g) { tape.accumulate(x, g.transpose()); });
}

template <typename T>
Var<T> silu(Var<T> x) {
    Matrix<T> out = x.value().unaryExpr([](T v) { return v * detail::sigmoid(v); });
    return x.tape->record(std::move(out), {x}, [x](Tape<T>& tape, const Matrix<T>& g) {
        const Matrix<T> d = tape.value(x).unaryExpr([](T v) {
            const T s = detail::sigmoid(v);
            return s * (T(1) + v * (T(1) - s));
        });
        tape.accumulate(x, g.cwiseProduct(d));
    });
}

// Tanh approximation.
template <typename T>
Var<T> gelu(Var<T> x) {
    constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    Matrix<T> out = x.value().unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v))); });
    return x.tape->record(std::move(out), {x}, [x](Tape<T>& tape, const Matrix<T>& g) {
        const Matrix<T> d = tape.value(x).unaryExpr([](T v) {
            const T th = std::tanh(kC * (v + kA * v * v * v));
            return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
        });
        tape.accumulate(x, g.cwiseProduct(d));
    });
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
    Matrix<T> out = x.colwise() - x.rowwise().maxCoeff();
    out = out.array().exp();
    out = out.array().colwise() / out.rowwise().sum().array();
    return out;
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
    Matrix<T> y = softmax_rows<T>(x.value());
    return x.tape->record(y, {x}, [x, y](Tape<T>& tape, const Matrix<T>& g) {
        const Matrix<T> gy = g.cwiseProduct(y);
        tape.accumulate(x, Matrix<T>(gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix()));
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    Matrix<T> out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape->record(std::move(out), {x}, [x](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, Matrix<T>::Constant(tape.value(x).rows(), tape.value(x).cols(), g(0, 0)));
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

// Mean over rows: R×C -> 1×C.
template <typename T>
Var<T> mean_rows(Var<T> x) {
    const T n = static_cast<T>(x.rows());
    Matrix<T> out = x.value().colwise().sum() / n;
    return x.tape->record(std::move(out), {x}, [x, n](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, Matrix<T>(g.replicate(tape.value(x).rows(), 1) / n));
    });
}

// Stack a on top of b.
template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    if (a.cols() != b.cols()) throw Error(ErrorKind::ShapeMismatch, "concat_rows: column counts differ");
    Matrix<T> out(a.rows() + b.rows(), a.cols());
    out << a.value(), b.value();
    const Eigen::Index ra = a.rows();
    const Eigen::Index rb = b.rows();
    return a.tape->record(std::move(out), {a, b}, [a, b, ra, rb](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(a, g.topRows(ra));
        tape.accumulate(b, g.bottomRows(rb));
    });
}

template <typename T>
Var<T> slice_rows(Var<T> x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.rows()) throw Error(ErrorKind::ShapeMismatch, "slice_rows: range");
    return x.tape->record(x.value().middleRows(start, count), {x},
                          [x, start, count](Tape<T>& tape, const Matrix<T>& g) {
                              Matrix<T> full = Matrix<T>::Zero(tape.value(x).rows(), tape.value(x).cols());
                              full.middleRows(start, count) = g;
                              tape.accumulate(x, full);
                          });
}

template <typename T>
Var<T> slice_cols(Var<T> x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.cols()) throw Error(ErrorKind::ShapeMismatch, "slice_cols: range");
    return x.tape->record(x.value().middleCols(start, count), {x},
                          [x, start, count](Tape<T>& tape, const Matrix<T>& g) {
                              Matrix<T> full = Matrix<T>::Zero(tape.value(x).rows(), tape.value(x).cols());
                              full.middleCols(start, count) = g;
                              tape.accumulate(x, full);
                          });
}

// Zero columns appended on the right up to `cols`.
template <typename T>
Var<T> pad_cols(Var<T> x, Eigen::Index cols) {
    if (cols < x.cols()) throw Error(ErrorKind::ShapeMismatch, "pad_cols: target narrower than input");
    Matrix<T> out = Matrix<T>::Zero(x.rows(), cols);
    out.leftCols(x.cols()) = x.value();
    const Eigen::Index keep = x.cols();
    return x.tape->record(std::move(out), {x}, [x, keep](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, g.leftCols(keep));
    });
}

// Normalizes each row of x (R×C) and applies a per-column affine (1×C).
template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const auto& xv = x.value();
    const Eigen::Index cols = xv.cols();
    if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
        throw Error(ErrorKind::ShapeMismatch, "layer_norm_rows: affine shape");
    }
    Matrix<T> xhat(xv.rows(), cols);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const T mu = xv.row(r).mean();
        const T var = (xv.row(r).array() - mu).square().mean();
        inv(r) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv(r);
    }
    Matrix<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat, inv](Tape<T>& tape, const Matrix<T>& g) {
                              if (tape.needs_grad(gamma)) tape.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                              if (tape.needs_grad(beta)) tape.accumulate(beta, g.colwise().sum());
                              if (!tape.needs_grad(x)) return;
                              const Matrix<T> dxhat = g.array().rowwise() * tape.value(gamma).row(0).array();
                              const auto n = static_cast<T>(dxhat.cols());
                              Matrix<T> dx(dxhat.rows(), dxhat.cols());
                              for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                                  const T m1 = dxhat.row(r).sum() / n;
                                  const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / n;
                                  dx.row(r) = inv(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                              }
                              tape.accumulate(x, dx);
                          });
}

// x is channels×length. Channels split into `groups` contiguous groups, each
// normalized over all of its entries; then a per-channel affine (C×1).
template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    const auto& xv = x.value();
    const Eigen::Index channels = xv.rows();
    if (groups <= 0 || channels % groups != 0) throw Error(ErrorKind::ShapeMismatch, "group_norm: groups must divide channels");
    if (gamma.rows() != channels || gamma.cols() != 1 || beta.rows() != channels || beta.cols() != 1) {
        throw Error(ErrorKind::ShapeMismatch, "group_norm: affine shape");
    }
    const Eigen::Index per = channels / groups;
    Matrix<T> xhat(channels, xv.cols());
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv(groups);
    for (int gi = 0; gi < groups; ++gi) {
        const auto block = xv.middleRows(gi * per, per);
        const T mu = block.mean();
        const T var = (block.array() - mu).square().mean();
        inv(gi) = T(1) / std::sqrt(var + eps);
        xhat.middleRows(gi * per, per) = (block.array() - mu) * inv(gi);
    }
    Matrix<T> out = (xhat.array().colwise() * gamma.value().col(0).array()).colwise() + beta.value().col(0).array();
    return x.tape->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat, inv, groups, per](Tape<T>& tape, const Matrix<T>& g) {
                              if (tape.needs_grad(gamma)) tape.accumulate(gamma, g.cwiseProduct(xhat).rowwise().sum());
                              if (tape.needs_grad(beta)) tape.accumulate(beta, g.rowwise().sum());
                              if (!tape.needs_grad(x)) return;
                              const Matrix<T> dxhat = g.array().colwise() * tape.value(gamma).col(0).array();
                              Matrix<T> dx(dxhat.rows(), dxhat.cols());
                              for (int gi = 0; gi < groups; ++gi) {
                                  const auto d = dxhat.middleRows(gi * per, per);
                                  const auto h = xhat.middleRows(gi * per, per);
                                  const auto n = static_cast<T>(d.size());
                                  const T m1 = d.sum() / n;
                                  const T m2 = d.cwiseProduct(h).sum() / n;
                                  dx.middleRows(gi * per, per) = inv(gi) * (d.array() - m1 - h.array() * m2);
                              }
                              tape.accumulate(x, dx);
                          });
}

namespace detail {

// Column j of the result holds the receptive field of output position j;
// row ci*kernel + k is input channel ci at tap k.
template <typename T>
Matrix<T> im2col(const Matrix<T>& x, int kernel, int stride, int pad, Eigen::Index out_len) {
    const Eigen::Index channels = x.rows();
    const Eigen::Index len = x.cols();
    Matrix<T> cols = Matrix<T>::Zero(channels * kernel, out_len);
    for (Eigen::Index j = 0; j < out_len; ++j) {
        for (int k = 0; k < kernel; ++k) {
            const Eigen::Index src = j * stride + k - pad;
            if (src < 0 || src >= len) continue;
            for (Eigen::Index c = 0; c < channels; ++c) cols(c * kernel + k, j) = x(c, src);
        }
    }
    return cols;
}

template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, Eigen::Index channels, Eigen::Index len, int kernel, int stride, int pad) {
    Matrix<T> x = Matrix<T>::Zero(channels, len);
    for (Eigen::Index j = 0; j < cols.cols(); ++j) {
        for (int k = 0; k < kernel; ++k) {
            const Eigen::Index src = j * stride + k - pad;
            if (src < 0 || src >= len) continue;
            for (Eigen::Index c = 0; c < channels; ++c) x(c, src) += cols(c * kernel + k, j);
        }
    }
    return x;
}

}  // namespace detail

// 1D convolution. x: Cin×L, weight: Cout×(Cin·kernel), bias: Cout×1.
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias, int kernel, int stride = 1, int pad = 0) {
    const Eigen::Index channels = x.rows();
    const Eigen::Index len = x.cols();
    if (weight.cols() != channels * kernel || bias.rows() != weight.rows() || bias.cols() != 1) {
        throw Error(ErrorKind::ShapeMismatch, "conv1d: weight shape");
    }
    const Eigen::Index out_len = (len + 2 * pad - kernel) / stride + 1;
    if (out_len <= 0) throw Error(ErrorKind::ShapeMismatch, "conv1d: input shorter than kernel");
    Matrix<T> cols = kernel == 1 && stride == 1 && pad == 0 ? x.value() : detail::im2col<T>(x.value(), kernel, stride, pad, out_len);
    Matrix<T> out = weight.value() * cols;
    out.colwise() += bias.value().col(0);
    return x.tape->record(std::move(out), {x, weight, bias},
                          [x, weight, bias, cols, channels, len, kernel, stride, pad](Tape<T>& tape, const Matrix<T>& g) {
                              if (tape.needs_grad(weight)) tape.accumulate(weight, g * cols.transpose());
                              if (tape.needs_grad(bias)) tape.accumulate(bias, g.rowwise().sum());
                              if (!tape.needs_grad(x)) return;
                              Matrix<T> dcols = tape.value(weight).transpose() * g;
                              if (kernel == 1 && stride == 1 && pad == 0) {
                                  tape.accumulate(x, dcols);
                              } else {
                                  tape.accumulate(x, detail::col2im<T>(dcols, channels, len, kernel, stride, pad));
                              }
                          });
}

// Scaled dot-product attention, one head: softmax(QKᵀ/√d)V.
template <typename T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
    if (q.cols() != k.cols() || k.rows() != v.rows()) throw Error(ErrorKind::ShapeMismatch, "attention: shapes");
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.cols()));
    return softmax_rows<T>((q * k.transpose()) * inv_sqrt_d) * v;
}

// Multi-head attention. q: N×(H·d), k and v: P×(H·d); head h uses columns
// [h·d, (h+1)·d).
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, int heads) {
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    if (qv.cols() != kv.cols() || kv.cols() != vv.cols() || kv.rows() != vv.rows() || heads <= 0 ||
        qv.cols() % heads != 0) {
        throw Error(ErrorKind::ShapeMismatch, "multi_head_attention: shapes");
    }
    const Eigen::Index d = qv.cols() / heads;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<Matrix<T>> probs(heads);
    Matrix<T> out(qv.rows(), qv.cols());
    for (int h = 0; h < heads; ++h) {
        probs[h] = softmax_rows<T>((qv.middleCols(h * d, d) * kv.middleCols(h * d, d).transpose()) * inv_sqrt_d);
        out.middleCols(h * d, d) = probs[h] * vv.middleCols(h * d, d);
    }
    return q.tape->record(std::move(out), {q, k, v},
                          [q, k, v, probs, heads, d, inv_sqrt_d](Tape<T>& tape, const Matrix<T>& g) {
                              const auto& qv = tape.value(q);
                              const auto& kv = tape.value(k);
                              const auto& vv = tape.value(v);
                              Matrix<T> dq = Matrix<T>::Zero(qv.rows(), qv.cols());
                              Matrix<T> dk = Matrix<T>::Zero(kv.rows(), kv.cols());
                              Matrix<T> dv = Matrix<T>::Zero(vv.rows(), vv.cols());
                              for (int h = 0; h < heads; ++h) {
                                  const auto& a = probs[h];
                                  const auto gh = g.middleCols(h * d, d);
                                  dv.middleCols(h * d, d) = a.transpose() * gh;
                                  const Matrix<T> da = gh * vv.middleCols(h * d, d).transpose();
                                  const Matrix<T> ds =
                                      (a.array() * (da.array().colwise() - da.cwiseProduct(a).rowwise().sum().array())).matrix() *
                                      inv_sqrt_d;
                                  dq.middleCols(h * d, d) = ds * kv.middleCols(h * d, d);
                                  dk.middleCols(h * d, d) = ds.transpose() * qv.middleCols(h * d, d);
                              }
                              tape.accumulate(q, dq);
                              tape.accumulate(k, dk);
                              tape.accumulate(v, dv);
                          });
}

// Σ weight ⊙ (x − target)², with target and weight fixed.
template <typename T>
Var<T> weighted_squared_error(Var<T> x, const Matrix<T>& target, const Matrix<T>& weight) {
    detail::require_same_shape(x.value(), target, "weighted_squared_error");
    detail::require_same_shape(x.value(), weight, "weighted_squared_error");
    Matrix<T> out(1, 1);
    out(0, 0) = (weight.array() * (x.value() - target).array().square()).sum();
    return x.tape->record(std::move(out), {x}, [x, target, weight](Tape<T>& tape, const Matrix<T>& g) {
        tape.accumulate(x, Matrix<T>((T(2) * g(0, 0)) * weight.array() * (tape.value(x) - target).array()));
    });
}

}  // namespace slicepath::ad
