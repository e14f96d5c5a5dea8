#pragma once

// Reverse-mode differentiation over the handful of operations the MIL model
// needs. A Tape records nodes in append order; forward() evaluates them in
// that order and backward() visits them once in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "s4mil/error.hpp"
#include "s4mil/parallel.hpp"
#include "s4mil/ssm.hpp"
#include "s4mil/tensor.hpp"

namespace s4mil::autograd {

enum class OpKind {
    leaf,
    matvec,  // every row of x times W^T
    add,     // same shape, or a 1 x C row broadcast over the rows of the left operand
    mul,
    sigmoid,
    exp,
    log,
    scale,
    slice_cols,
    max_pool,   // over rows (sequence positions)
    mean_pool,  // over rows
    layernorm,  // over columns (features) of each row
    ssm_conv,
    softmax_log_loss,
};

inline const char* to_string(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::matvec: return "matvec";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::scale: return "scale";
        case OpKind::slice_cols: return "slice_cols";
        case OpKind::max_pool: return "max_pool";
        case OpKind::mean_pool: return "mean_pool";
        case OpKind::layernorm: return "layernorm";
        case OpKind::ssm_conv: return "ssm_conv";
        case OpKind::softmax_log_loss: return "softmax_log_loss";
    }
    return "?";
}

/// Handle to a node on a tape.
struct Var {
    std::size_t index = 0;
};

inline constexpr double layernorm_eps = 1e-5;
inline constexpr double probability_floor = 1e-12;

template <typename Scalar>
struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;

    // Leaf binding: a parameter leaf reads `source` on every forward pass and
    // accumulates into `grad_sink` on backward. Constant leaves own `value`.
    const Tensor<Scalar>* source = nullptr;
    Tensor<Scalar>* grad_sink = nullptr;

    // Op attributes.
    double factor = 1.0;
    Eigen::Index offset = 0;
    Eigen::Index width = 0;
    std::vector<int> labels;
    Discretization rule = Discretization::bilinear;

    // Forward caches used by backward.
    std::vector<Eigen::Index> argmax;
    Tensor<Scalar> normalized;
    std::vector<double> inv_std;
    std::vector<SsmChannelParams> channels;
    std::vector<DiscretizedChannel> discretized;
    std::vector<KernelCache> kernels;
    std::vector<bool> floored;
};

template <typename Scalar>
class Tape {
public:
    Var constant(Tensor<Scalar> value) {
        Node<Scalar> n;
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var parameter(Parameter<Scalar>& p) {
        Node<Scalar> n;
        n.source = &p.value;
        n.grad_sink = &p.grad;
        return push(std::move(n));
    }

    Var matvec(Var x, Var w) { return op(OpKind::matvec, {x, w}); }
    Var add(Var a, Var b) { return op(OpKind::add, {a, b}); }
    Var mul(Var a, Var b) { return op(OpKind::mul, {a, b}); }
    Var sigmoid(Var x) { return op(OpKind::sigmoid, {x}); }
    Var exp(Var x) { return op(OpKind::exp, {x}); }
    Var log(Var x) { return op(OpKind::log, {x}); }
    Var max_pool(Var x) { return op(OpKind::max_pool, {x}); }
    Var mean_pool(Var x) { return op(OpKind::mean_pool, {x}); }
    Var layernorm(Var x, Var gamma, Var beta) { return op(OpKind::layernorm, {x, gamma, beta}); }

    Var scale(Var x, double factor) {
        Var v = op(OpKind::scale, {x});
        nodes_[v.index].factor = factor;
        return v;
    }

    Var slice_cols(Var x, Eigen::Index offset, Eigen::Index width) {
        Var v = op(OpKind::slice_cols, {x});
        nodes_[v.index].offset = offset;
        nodes_[v.index].width = width;
        return v;
    }

    /// Affine map applied to every row: x W^T + b.
    Var affine(Var x, Var w, Var b) { return add(matvec(x, w), b); }

    /// Gated linear unit over columns: left half times sigmoid(right half).
    Var glu(Var x, Eigen::Index half) {
        return mul(slice_cols(x, 0, half), sigmoid(slice_cols(x, half, half)));
    }

    /// Feature-wise diagonal SSM over the rows of u (L x H). Pole real parts
    /// are stored as log(-Re a) so every channel stays stable.
    Var ssm_conv(Var u, Var a_log_neg_re, Var a_im, Var c_re, Var c_im, Var log_dt, Var d, Discretization rule) {
        Var v = op(OpKind::ssm_conv, {u, a_log_neg_re, a_im, c_re, c_im, log_dt, d});
        nodes_[v.index].rule = rule;
        return v;
    }

    /// weight * sum_r -log softmax(logits_r)[labels_r], as a 1 x 1 node.
    /// Probabilities below the floor are clamped; clamped rows pass no gradient.
    Var softmax_log_loss(Var logits, std::vector<int> labels, double weight) {
        Var v = op(OpKind::softmax_log_loss, {logits});
        nodes_[v.index].labels = std::move(labels);
        nodes_[v.index].factor = weight;
        return v;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node<Scalar>& node(Var v) const { return nodes_.at(v.index); }
    const Tensor<Scalar>& value(Var v) const { return nodes_.at(v.index).value; }
    const Tensor<Scalar>& grad(Var v) const { return nodes_.at(v.index).grad; }

    /// Number of probability-floor clamps hit during the last forward pass.
    std::size_t floor_events() const noexcept { return floor_events_; }

    /// Evaluates every node; returns the value of the last (1 x 1) node.
    Scalar forward() {
        if (nodes_.empty()) throw ContractViolation("forward on an empty tape");
        floor_events_ = 0;
        for (auto& n : nodes_) evaluate(n);
        const auto& out = nodes_.back().value;
        if (out.rows() != 1 || out.cols() != 1)
            throw ContractViolation("tape must end in a scalar node, got " + shape_string(out));
        return out(0, 0);
    }

    /// Propagates d(last node)/d(node) to every node and accumulates leaf
    /// gradients into bound parameters.
    void backward() {
        if (nodes_.empty()) throw ContractViolation("backward on an empty tape");
        for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
        nodes_.back().grad.setConstant(Scalar(1));
        for (std::size_t i = nodes_.size(); i-- > 0;) propagate(nodes_[i]);
    }

private:
    Var push(Node<Scalar> n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    Var op(OpKind kind, std::initializer_list<Var> inputs) {
        Node<Scalar> n;
        n.kind = kind;
        for (Var v : inputs) {
            if (v.index >= nodes_.size()) throw ContractViolation("node input refers to a later node");
            n.inputs.push_back(v.index);
        }
        return push(std::move(n));
    }

    const Tensor<Scalar>& in(const Node<Scalar>& n, std::size_t i) const { return nodes_[n.inputs[i]].value; }
    Tensor<Scalar>& in_grad(const Node<Scalar>& n, std::size_t i) { return nodes_[n.inputs[i]].grad; }

    static void require_same(const Tensor<Scalar>& a, const Tensor<Scalar>& b, OpKind kind) {
        if (a.rows() != b.rows() || a.cols() != b.cols())
            throw ContractViolation(std::string(to_string(kind)) + ": shape mismatch " + shape_string(a) + " vs " +
                                    shape_string(b));
    }

    void evaluate(Node<Scalar>& n) {
        switch (n.kind) {
            case OpKind::leaf:
                if (n.source != nullptr) n.value = *n.source;
                break;
            case OpKind::matvec: {
                const auto& x = in(n, 0);
                const auto& w = in(n, 1);
                if (x.cols() != w.cols())
                    throw ContractViolation("matvec: shape mismatch " + shape_string(x) + " vs " + shape_string(w));
                n.value.noalias() = x * w.transpose();
                break;
            }
            case OpKind::add: {
                const auto& a = in(n, 0);
                const auto& b = in(n, 1);
                if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols())
                    n.value = a.rowwise() + b.row(0);
                else {
                    require_same(a, b, n.kind);
                    n.value = a + b;
                }
                break;
            }
            case OpKind::mul:
                require_same(in(n, 0), in(n, 1), n.kind);
                n.value = in(n, 0).cwiseProduct(in(n, 1));
                break;
            case OpKind::sigmoid:
                n.value = in(n, 0).unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
                break;
            case OpKind::exp: n.value = in(n, 0).array().exp().matrix(); break;
            case OpKind::log: n.value = in(n, 0).array().log().matrix(); break;
            case OpKind::scale: n.value = in(n, 0) * static_cast<Scalar>(n.factor); break;
            case OpKind::slice_cols: {
                const auto& x = in(n, 0);
                if (n.offset < 0 || n.width < 0 || n.offset + n.width > x.cols())
                    throw ContractViolation("slice_cols: columns [" + std::to_string(n.offset) + ", " +
                                            std::to_string(n.offset + n.width) + ") out of range for " +
                                            shape_string(x));
                n.value = x.middleCols(n.offset, n.width);
                break;
            }
            case OpKind::max_pool: {
                const auto& x = in(n, 0);
                if (x.rows() == 0) throw ContractViolation("max_pool over an empty sequence");
                n.value.resize(1, x.cols());
                n.argmax.assign(static_cast<std::size_t>(x.cols()), 0);
                for (Eigen::Index c = 0; c < x.cols(); ++c) {
                    Eigen::Index best = 0;
                    for (Eigen::Index r = 1; r < x.rows(); ++r)
                        if (x(r, c) > x(best, c)) best = r;  // ties keep the lowest index
                    n.argmax[static_cast<std::size_t>(c)] = best;
                    n.value(0, c) = x(best, c);
                }
                break;
            }
            case OpKind::mean_pool: {
                const auto& x = in(n, 0);
                if (x.rows() == 0) throw ContractViolation("mean_pool over an empty sequence");
                n.value = x.colwise().sum() / static_cast<Scalar>(x.rows());
                break;
            }
            case OpKind::layernorm: evaluate_layernorm(n); break;
            case OpKind::ssm_conv: evaluate_ssm(n); break;
            case OpKind::softmax_log_loss: evaluate_loss(n); break;
        }
    }

    void evaluate_layernorm(Node<Scalar>& n) {
        const auto& x = in(n, 0);
        const auto& gamma = in(n, 1);
        const auto& beta = in(n, 2);
        if (gamma.rows() != 1 || gamma.cols() != x.cols()) require_same(gamma, Tensor<Scalar>(1, x.cols()), n.kind);
        if (beta.rows() != 1 || beta.cols() != x.cols()) require_same(beta, Tensor<Scalar>(1, x.cols()), n.kind);
        const Eigen::Index cols = x.cols();
        n.normalized.resize(x.rows(), cols);
        n.inv_std.resize(static_cast<std::size_t>(x.rows()));
        n.value.resize(x.rows(), cols);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            double mean = 0.0;
            for (Eigen::Index c = 0; c < cols; ++c) mean += static_cast<double>(x(r, c));
            mean /= static_cast<double>(cols);
            double var = 0.0;
            for (Eigen::Index c = 0; c < cols; ++c) {
                const double dv = static_cast<double>(x(r, c)) - mean;
                var += dv * dv;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + layernorm_eps);
            n.inv_std[static_cast<std::size_t>(r)] = inv;
            for (Eigen::Index c = 0; c < cols; ++c) {
                const auto xh = static_cast<Scalar>((static_cast<double>(x(r, c)) - mean) * inv);
                n.normalized(r, c) = xh;
                n.value(r, c) = gamma(0, c) * xh + beta(0, c);
            }
        }
    }

    void evaluate_ssm(Node<Scalar>& n) {
        const auto& u = in(n, 0);
        const auto& a_log = in(n, 1);
        const auto& a_im = in(n, 2);
        const auto& c_re = in(n, 3);
        const auto& c_im = in(n, 4);
        const auto& log_dt = in(n, 5);
        const auto& d = in(n, 6);
        const Eigen::Index H = u.cols();
        const Eigen::Index nh = a_log.cols();
        for (const Tensor<Scalar>* t : {&a_log, &a_im, &c_re, &c_im})
            if (t->rows() != H || t->cols() != nh)
                throw ContractViolation("ssm_conv: shape mismatch " + shape_string(*t) + " vs " +
                                        shape_string(H, nh));
        for (const Tensor<Scalar>* t : {&log_dt, &d})
            if (t->rows() != 1 || t->cols() != H)
                throw ContractViolation("ssm_conv: shape mismatch " + shape_string(*t) + " vs " + shape_string(1, H));
        const auto L = static_cast<std::size_t>(u.rows());
        n.channels.assign(static_cast<std::size_t>(H), {});
        n.discretized.assign(static_cast<std::size_t>(H), {});
        n.kernels.assign(static_cast<std::size_t>(H), {});
        n.value.resize(u.rows(), H);
        parallel_for(static_cast<std::size_t>(H), [&](std::size_t h) {
            const auto hi = static_cast<Eigen::Index>(h);
            auto& ch = n.channels[h];
            ch.a.resize(static_cast<std::size_t>(nh));
            ch.c.resize(static_cast<std::size_t>(nh));
            for (Eigen::Index k = 0; k < nh; ++k) {
                const auto ki = static_cast<std::size_t>(k);
                ch.a[ki] = {-std::exp(static_cast<double>(a_log(hi, k))), static_cast<double>(a_im(hi, k))};
                ch.c[ki] = {static_cast<double>(c_re(hi, k)), static_cast<double>(c_im(hi, k))};
            }
            ch.d = static_cast<double>(d(0, hi));
            ch.log_dt = static_cast<double>(log_dt(0, hi));
            n.discretized[h] = discretize(ch, n.rule, h);
            n.kernels[h] = compute_kernel(n.discretized[h], ch.c, L);
            std::vector<double> x(L), y(L);
            for (std::size_t t = 0; t < L; ++t) x[t] = static_cast<double>(u(static_cast<Eigen::Index>(t), hi));
            fft::Convolver conv(L);
            conv.causal_convolve(n.kernels[h].values, x, y);
            for (std::size_t t = 0; t < L; ++t)
                n.value(static_cast<Eigen::Index>(t), hi) = static_cast<Scalar>(y[t] + ch.d * x[t]);
        });
    }

    void evaluate_loss(Node<Scalar>& n) {
        const auto& z = in(n, 0);
        if (static_cast<Eigen::Index>(n.labels.size()) != z.rows())
            throw ContractViolation("softmax_log_loss: " + std::to_string(n.labels.size()) + " labels for logits " +
                                    shape_string(z));
        const double log_floor = std::log(probability_floor);
        n.floored.assign(n.labels.size(), false);
        double total = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            const int label = n.labels[static_cast<std::size_t>(r)];
            if (label < 0 || label >= z.cols())
                throw ContractViolation("softmax_log_loss: label " + std::to_string(label) + " out of range for " +
                                        shape_string(z));
            const double mx = static_cast<double>(z.row(r).maxCoeff());
            double sum = 0.0;
            for (Eigen::Index c = 0; c < z.cols(); ++c) sum += std::exp(static_cast<double>(z(r, c)) - mx);
            double logp = static_cast<double>(z(r, label)) - mx - std::log(sum);
            if (logp < log_floor) {
                logp = log_floor;
                n.floored[static_cast<std::size_t>(r)] = true;
                ++floor_events_;
            }
            total -= logp;
        }
        n.value.resize(1, 1);
        n.value(0, 0) = static_cast<Scalar>(n.factor * total);
    }

    void propagate(Node<Scalar>& n) {
        const auto& g = n.grad;
        switch (n.kind) {
            case OpKind::leaf:
                if (n.grad_sink != nullptr) *n.grad_sink += g;
                break;
            case OpKind::matvec:
                in_grad(n, 0).noalias() += g * in(n, 1);
                in_grad(n, 1).noalias() += g.transpose() * in(n, 0);
                break;
            case OpKind::add:
                in_grad(n, 0) += g;
                if (in(n, 1).rows() == 1 && in(n, 0).rows() != 1)
                    in_grad(n, 1) += g.colwise().sum();
                else
                    in_grad(n, 1) += g;
                break;
            case OpKind::mul:
                in_grad(n, 0) += g.cwiseProduct(in(n, 1));
                in_grad(n, 1) += g.cwiseProduct(in(n, 0));
                break;
            case OpKind::sigmoid:
                in_grad(n, 0).array() += g.array() * n.value.array() * (Scalar(1) - n.value.array());
                break;
            case OpKind::exp: in_grad(n, 0) += g.cwiseProduct(n.value); break;
            case OpKind::log: in_grad(n, 0).array() += g.array() / in(n, 0).array(); break;
            case OpKind::scale: in_grad(n, 0) += g * static_cast<Scalar>(n.factor); break;
            case OpKind::slice_cols: in_grad(n, 0).middleCols(n.offset, n.width) += g; break;
            case OpKind::max_pool:
                for (Eigen::Index c = 0; c < g.cols(); ++c)
                    in_grad(n, 0)(n.argmax[static_cast<std::size_t>(c)], c) += g(0, c);
                break;
            case OpKind::mean_pool: {
                auto& gx = in_grad(n, 0);
                gx.rowwise() += g.row(0) / static_cast<Scalar>(gx.rows());
                break;
            }
            case OpKind::layernorm: propagate_layernorm(n); break;
            case OpKind::ssm_conv: propagate_ssm(n); break;
            case OpKind::softmax_log_loss: propagate_loss(n); break;
        }
    }

    void propagate_layernorm(Node<Scalar>& n) {
        const auto& g = n.grad;
        const auto& gamma = in(n, 1);
        auto& gx = in_grad(n, 0);
        auto& g_gamma = in_grad(n, 1);
        auto& g_beta = in_grad(n, 2);
        const Eigen::Index cols = g.cols();
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (Eigen::Index c = 0; c < cols; ++c) {
                const double gh = static_cast<double>(g(r, c)) * static_cast<double>(gamma(0, c));
                mean_g += gh;
                mean_gx += gh * static_cast<double>(n.normalized(r, c));
                g_gamma(0, c) += g(r, c) * n.normalized(r, c);
                g_beta(0, c) += g(r, c);
            }
            mean_g /= static_cast<double>(cols);
            mean_gx /= static_cast<double>(cols);
            const double inv = n.inv_std[static_cast<std::size_t>(r)];
            for (Eigen::Index c = 0; c < cols; ++c) {
                const double gh = static_cast<double>(g(r, c)) * static_cast<double>(gamma(0, c));
                gx(r, c) += static_cast<Scalar>(
                    inv * (gh - mean_g - static_cast<double>(n.normalized(r, c)) * mean_gx));
            }
        }
    }

    void propagate_ssm(Node<Scalar>& n) {
        const auto& u = in(n, 0);
        const auto& a_log = in(n, 1);
        const auto L = static_cast<std::size_t>(u.rows());
        const auto H = static_cast<std::size_t>(u.cols());
        const Eigen::Index nh = a_log.cols();
        std::vector<ChannelGradient> grads(H);
        parallel_for(H, [&](std::size_t h) {
            const auto hi = static_cast<Eigen::Index>(h);
            std::vector<double> x(L), up(L);
            for (std::size_t t = 0; t < L; ++t) {
                x[t] = static_cast<double>(u(static_cast<Eigen::Index>(t), hi));
                up[t] = static_cast<double>(n.grad(static_cast<Eigen::Index>(t), hi));
            }
            fft::Convolver conv(L);
            grads[h] = grad_ssm_conv(n.channels[h], n.rule, n.discretized[h], n.kernels[h], x, up, conv);
        });
        // Reduction in channel order.
        auto& gu = in_grad(n, 0);
        auto& g_alog = in_grad(n, 1);
        auto& g_aim = in_grad(n, 2);
        auto& g_cre = in_grad(n, 3);
        auto& g_cim = in_grad(n, 4);
        auto& g_logdt = in_grad(n, 5);
        auto& g_d = in_grad(n, 6);
        for (std::size_t h = 0; h < H; ++h) {
            const auto hi = static_cast<Eigen::Index>(h);
            const auto& gr = grads[h];
            for (std::size_t t = 0; t < L; ++t) gu(static_cast<Eigen::Index>(t), hi) += static_cast<Scalar>(gr.u[t]);
            for (Eigen::Index k = 0; k < nh; ++k) {
                const auto ki = static_cast<std::size_t>(k);
                // Re a = -exp(theta)  =>  dL/dtheta = dL/dRe(a) * Re(a)
                g_alog(hi, k) += static_cast<Scalar>(gr.a[ki].real() * n.channels[h].a[ki].real());
                g_aim(hi, k) += static_cast<Scalar>(gr.a[ki].imag());
                g_cre(hi, k) += static_cast<Scalar>(gr.c[ki].real());
                g_cim(hi, k) += static_cast<Scalar>(gr.c[ki].imag());
            }
            g_logdt(0, hi) += static_cast<Scalar>(gr.log_dt);
            g_d(0, hi) += static_cast<Scalar>(gr.d);
        }
    }

    void propagate_loss(Node<Scalar>& n) {
        const auto& z = in(n, 0);
        auto& gz = in_grad(n, 0);
        const double upstream = static_cast<double>(n.grad(0, 0)) * n.factor;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            if (n.floored[static_cast<std::size_t>(r)]) continue;
            const int label = n.labels[static_cast<std::size_t>(r)];
            const double mx = static_cast<double>(z.row(r).maxCoeff());
            double sum = 0.0;
            for (Eigen::Index c = 0; c < z.cols(); ++c) sum += std::exp(static_cast<double>(z(r, c)) - mx);
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                const double p = std::exp(static_cast<double>(z(r, c)) - mx) / sum;
                gz(r, c) += static_cast<Scalar>(upstream * (p - (c == label ? 1.0 : 0.0)));
            }
        }
    }

    std::vector<Node<Scalar>> nodes_;
    std::size_t floor_events_ = 0;
};

}  // namespace s4mil::autograd
