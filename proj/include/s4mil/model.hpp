#pragma once

// MIL aggregator: projection -> layer norm -> [S4D -> mixing -> GLU] x layers
// -> (per-token patch head) -> max pool -> classifier -> softmax.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "s4mil/autograd.hpp"
#include "s4mil/error.hpp"
#include "s4mil/rng.hpp"
#include "s4mil/ssm.hpp"
#include "s4mil/tensor.hpp"

namespace s4mil {

struct ModelConfig {
    std::size_t input_dim = 1024;
    std::size_t hidden_dim = 512;
    std::size_t state_dim = 32;
    std::size_t num_classes = 2;
    std::size_t num_ssm_layers = 1;
    bool multitask = false;
    std::size_t patch_classes = 2;
    Discretization discretization = Discretization::bilinear;

    std::size_t n_half() const noexcept { return state_dim / 2; }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(input_dim, "input_dim");
        positive(hidden_dim, "hidden_dim");
        positive(state_dim, "state_dim");
        positive(num_classes, "num_classes");
        positive(num_ssm_layers, "num_ssm_layers");
        if (multitask) positive(patch_classes, "patch_classes");
        if (state_dim % 2 != 0)
            throw ConfigError("state_dim must be even (conjugate pairs), got " + std::to_string(state_dim));
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Closed-form trainable-parameter count.
inline std::size_t count_parameters(const ModelConfig& c) {
    c.validate();
    const std::size_t H = c.hidden_dim;
    std::size_t total = c.input_dim * H + H;  // projection
    total += 2 * H;                           // layer norm
    const std::size_t per_layer = 2 * H * c.state_dim  // A and C, N/2 complex entries each
                                  + H + H              // log_dt, D
                                  + H * 2 * H + 2 * H;  // mixing
    total += c.num_ssm_layers * per_layer;
    total += H * c.num_classes + c.num_classes;
    if (c.multitask) total += H * c.patch_classes + c.patch_classes;
    return total;
}

enum class SsmMode { convolution, recurrence };

template <typename Scalar>
struct MilOutput {
    std::vector<double> probabilities;
    Tensor<Scalar> patch_probabilities;  // L x patch_classes, empty unless multitask
    std::vector<Scalar> pooled;
};

/// Handles into a training tape for one bag.
struct Graph {
    autograd::Var slide_logits;
    std::optional<autograd::Var> patch_logits;
};

/// out_i = v_i * sigmoid(v_{H+i})
template <typename Scalar>
std::vector<Scalar> gated_linear_unit(std::span<const Scalar> v) {
    if (v.size() % 2 != 0)
        throw ContractViolation("gated linear unit needs an even-length input, got " + std::to_string(v.size()));
    const std::size_t half = v.size() / 2;
    std::vector<Scalar> out(half);
    for (std::size_t i = 0; i < half; ++i) out[i] = v[i] * (Scalar(1) / (Scalar(1) + std::exp(-v[half + i])));
    return out;
}

namespace detail {

inline std::vector<double> softmax(std::span<const double> z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> p(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - mx));
    for (double& v : p) v /= sum;
    return p;
}

template <typename Scalar>
void layer_norm_row(Scalar* row, Eigen::Index cols, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta) {
    double mean = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) mean += static_cast<double>(row[c]);
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
        const double dv = static_cast<double>(row[c]) - mean;
        var += dv * dv;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + autograd::layernorm_eps);
    for (Eigen::Index c = 0; c < cols; ++c) {
        const auto xh = static_cast<Scalar>((static_cast<double>(row[c]) - mean) * inv);
        row[c] = gamma(0, c) * xh + beta(0, c);
    }
}

template <typename Scalar>
Scalar glu_element(Scalar value, Scalar gate) {
    return value * (Scalar(1) / (Scalar(1) + std::exp(-gate)));
}

template <typename Scalar>
void fill_uniform(Parameter<Scalar>& p, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
std::vector<double> row_softmax(const Tensor<Scalar>& logits, Eigen::Index r) {
    std::vector<double> z(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) z[static_cast<std::size_t>(c)] = static_cast<double>(logits(r, c));
    return softmax(z);
}

}  // namespace detail

template <typename Scalar>
class MilModel {
public:
    using scalar_type = Scalar;

    struct Block {
        Parameter<Scalar> a_log_neg_re;  // log(-Re a), H x N/2
        Parameter<Scalar> a_im;          // Im a, H x N/2
        Parameter<Scalar> c_re;
        Parameter<Scalar> c_im;
        Parameter<Scalar> log_dt;  // 1 x H
        Parameter<Scalar> d;       // 1 x H
        Parameter<Scalar> mixing_weight;  // 2H x H
        Parameter<Scalar> mixing_bias;    // 1 x 2H
    };

    /// All parameters zero, shapes from the config.
    explicit MilModel(const ModelConfig& config) : config_(config) {
        config_.validate();
        const auto D = static_cast<Eigen::Index>(config_.input_dim);
        const auto H = static_cast<Eigen::Index>(config_.hidden_dim);
        const auto nh = static_cast<Eigen::Index>(config_.n_half());
        projection_weight_ = {"projection.weight", H, D};
        projection_bias_ = {"projection.bias", 1, H};
        norm_weight_ = {"norm.weight", 1, H};
        norm_bias_ = {"norm.bias", 1, H};
        for (std::size_t l = 0; l < config_.num_ssm_layers; ++l) {
            const std::string ssm = "ssm." + std::to_string(l) + ".";
            const std::string mix = "mixing." + std::to_string(l) + ".";
            blocks_.push_back(Block{{ssm + "a_log_neg_re", H, nh},
                                    {ssm + "a_im", H, nh},
                                    {ssm + "c_re", H, nh},
                                    {ssm + "c_im", H, nh},
                                    {ssm + "log_dt", 1, H},
                                    {ssm + "d", 1, H},
                                    {mix + "weight", 2 * H, H},
                                    {mix + "bias", 1, 2 * H}});
        }
        const auto C = static_cast<Eigen::Index>(config_.num_classes);
        classifier_weight_ = {"classifier.weight", C, H};
        classifier_bias_ = {"classifier.bias", 1, C};
        if (config_.multitask) {
            const auto P = static_cast<Eigen::Index>(config_.patch_classes);
            patch_weight_ = {"patch_head.weight", P, H};
            patch_bias_ = {"patch_head.bias", 1, P};
        }
    }

    /// S4D-Lin poles, circular-normal C, log-uniform timesteps, D = 1, and
    /// fan-in-scaled uniform affine layers. Deterministic given the seed.
    static MilModel initialize(const ModelConfig& config, std::uint64_t seed) {
        MilModel m(config);
        Rng rng = substream(seed, "init");
        const double proj_bound = 1.0 / std::sqrt(static_cast<double>(config.input_dim));
        const double hidden_bound = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
        detail::fill_uniform(m.projection_weight_, proj_bound, rng);
        detail::fill_uniform(m.projection_bias_, proj_bound, rng);
        m.norm_weight_.value.setOnes();
        m.norm_bias_.value.setZero();
        std::normal_distribution<double> circular(0.0, std::sqrt(0.5));
        std::uniform_real_distribution<double> log_dt(std::log(0.001), std::log(0.1));
        for (auto& b : m.blocks_) {
            for (Eigen::Index h = 0; h < b.a_im.value.rows(); ++h)
                for (Eigen::Index k = 0; k < b.a_im.value.cols(); ++k) {
                    b.a_log_neg_re.value(h, k) = static_cast<Scalar>(std::log(0.5));
                    b.a_im.value(h, k) = static_cast<Scalar>(std::numbers::pi * static_cast<double>(k));
                    b.c_re.value(h, k) = static_cast<Scalar>(circular(rng));
                    b.c_im.value(h, k) = static_cast<Scalar>(circular(rng));
                }
            for (Eigen::Index h = 0; h < b.log_dt.value.cols(); ++h)
                b.log_dt.value(0, h) = static_cast<Scalar>(log_dt(rng));
            b.d.value.setOnes();
            detail::fill_uniform(b.mixing_weight, hidden_bound, rng);
            detail::fill_uniform(b.mixing_bias, hidden_bound, rng);
        }
        detail::fill_uniform(m.classifier_weight_, hidden_bound, rng);
        detail::fill_uniform(m.classifier_bias_, hidden_bound, rng);
        if (config.multitask) {
            detail::fill_uniform(m.patch_weight_, hidden_bound, rng);
            detail::fill_uniform(m.patch_bias_, hidden_bound, rng);
        }
        return m;
    }

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }

    /// Trainable parameters in declaration order (the checkpoint order).
    std::vector<Parameter<Scalar>*> parameters() {
        std::vector<Parameter<Scalar>*> out{&projection_weight_, &projection_bias_, &norm_weight_, &norm_bias_};
        for (auto& b : blocks_)
            for (auto* p : {&b.a_log_neg_re, &b.a_im, &b.c_re, &b.c_im, &b.log_dt, &b.d, &b.mixing_weight,
                            &b.mixing_bias})
                out.push_back(p);
        out.push_back(&classifier_weight_);
        out.push_back(&classifier_bias_);
        if (config_.multitask) {
            out.push_back(&patch_weight_);
            out.push_back(&patch_bias_);
        }
        return out;
    }

    std::vector<const Parameter<Scalar>*> parameters() const {
        auto ps = const_cast<MilModel*>(this)->parameters();
        return {ps.begin(), ps.end()};
    }

    /// Counts by walking the instantiated parameters.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
        return n;
    }

    template <typename Other>
    MilModel<Other> cast() const {
        MilModel<Other> out(config_);
        auto src = parameters();
        auto dst = out.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<Other>();
        return out;
    }

    /// Continuous-time channels of SSM layer `layer`.
    std::vector<SsmChannelParams> channels(std::size_t layer) const {
        const auto& b = blocks_.at(layer);
        const Eigen::Index H = b.a_im.value.rows();
        const Eigen::Index nh = b.a_im.value.cols();
        std::vector<SsmChannelParams> out(static_cast<std::size_t>(H));
        for (Eigen::Index h = 0; h < H; ++h) {
            auto& ch = out[static_cast<std::size_t>(h)];
            for (Eigen::Index k = 0; k < nh; ++k) {
                ch.a.emplace_back(-std::exp(static_cast<double>(b.a_log_neg_re.value(h, k))),
                                  static_cast<double>(b.a_im.value(h, k)));
                ch.c.emplace_back(static_cast<double>(b.c_re.value(h, k)), static_cast<double>(b.c_im.value(h, k)));
            }
            ch.d = static_cast<double>(b.d.value(0, h));
            ch.log_dt = static_cast<double>(b.log_dt.value(0, h));
        }
        return out;
    }

    /// Per-token features entering the pooling layer (L x H), convolution mode.
    Tensor<Scalar> encode(const Tensor<Scalar>& bag) const {
        check_bag(bag);
        Tensor<Scalar> x = bag * projection_weight_.value.transpose();
        x.rowwise() += projection_bias_.value.row(0);
        const Eigen::Index H = x.cols();
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            detail::layer_norm_row(x.row(r).data(), H, norm_weight_.value, norm_bias_.value);
        Tensor<Scalar> s;
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& b = blocks_[l];
            const auto chans = channels(l);
            ssm_layer_convolve<Scalar>(chans, config_.discretization, x, s);
            Tensor<Scalar> m = s * b.mixing_weight.value.transpose();
            m.rowwise() += b.mixing_bias.value.row(0);
            for (Eigen::Index r = 0; r < x.rows(); ++r)
                for (Eigen::Index c = 0; c < H; ++c) x(r, c) = detail::glu_element(m(r, c), m(r, H + c));
        }
        return x;
    }

    MilOutput<Scalar> forward(const Tensor<Scalar>& bag, SsmMode mode = SsmMode::convolution) const {
        return mode == SsmMode::convolution ? forward_convolution(bag) : forward_recurrence(bag);
    }

    /// Records the forward pass on a tape. Logits only; losses are added by the caller.
    Graph build(autograd::Tape<Scalar>& tape, const Tensor<Scalar>& bag) {
        check_bag(bag);
        const auto H = static_cast<Eigen::Index>(config_.hidden_dim);
        auto x = tape.constant(bag);
        auto h = tape.affine(x, tape.parameter(projection_weight_), tape.parameter(projection_bias_));
        h = tape.layernorm(h, tape.parameter(norm_weight_), tape.parameter(norm_bias_));
        for (auto& b : blocks_) {
            auto s = tape.ssm_conv(h, tape.parameter(b.a_log_neg_re), tape.parameter(b.a_im), tape.parameter(b.c_re),
                                   tape.parameter(b.c_im), tape.parameter(b.log_dt), tape.parameter(b.d),
                                   config_.discretization);
            auto m = tape.affine(s, tape.parameter(b.mixing_weight), tape.parameter(b.mixing_bias));
            h = tape.glu(m, H);
        }
        Graph g;
        if (config_.multitask) g.patch_logits = tape.affine(h, tape.parameter(patch_weight_), tape.parameter(patch_bias_));
        auto pooled = tape.max_pool(h);
        g.slide_logits = tape.affine(pooled, tape.parameter(classifier_weight_), tape.parameter(classifier_bias_));
        return g;
    }

private:
    void check_bag(const Tensor<Scalar>& bag) const {
        if (bag.rows() == 0) throw ContractViolation("empty bag: a bag needs at least one token");
        if (static_cast<std::size_t>(bag.cols()) != config_.input_dim)
            throw ContractViolation("bag feature dimension " + std::to_string(bag.cols()) +
                                    " does not match model input_dim " + std::to_string(config_.input_dim));
    }

    MilOutput<Scalar> head(const Tensor<Scalar>& tokens) const {
        MilOutput<Scalar> out;
        const Eigen::Index H = tokens.cols();
        out.pooled.resize(static_cast<std::size_t>(H));
        Eigen::Matrix<Scalar, 1, Eigen::Dynamic> best = tokens.row(0);
        for (Eigen::Index r = 1; r < tokens.rows(); ++r) best = best.cwiseMax(tokens.row(r));
        for (Eigen::Index c = 0; c < H; ++c) out.pooled[static_cast<std::size_t>(c)] = best(c);
        if (config_.multitask) {
            Tensor<Scalar> logits = tokens * patch_weight_.value.transpose();
            logits.rowwise() += patch_bias_.value.row(0);
            out.patch_probabilities.resize(logits.rows(), logits.cols());
            for (Eigen::Index r = 0; r < logits.rows(); ++r) {
                const auto p = detail::row_softmax(logits, r);
                for (Eigen::Index c = 0; c < logits.cols(); ++c)
                    out.patch_probabilities(r, c) = static_cast<Scalar>(p[static_cast<std::size_t>(c)]);
            }
        }
        out.probabilities = classify(out.pooled);
        return out;
    }

    std::vector<double> classify(const std::vector<Scalar>& pooled) const {
        const Eigen::Index C = classifier_weight_.value.rows();
        std::vector<double> z(static_cast<std::size_t>(C));
        for (Eigen::Index c = 0; c < C; ++c) {
            Scalar acc = classifier_bias_.value(0, c);
            for (Eigen::Index h = 0; h < classifier_weight_.value.cols(); ++h)
                acc += classifier_weight_.value(c, h) * pooled[static_cast<std::size_t>(h)];
            z[static_cast<std::size_t>(c)] = static_cast<double>(acc);
        }
        return detail::softmax(z);
    }

    MilOutput<Scalar> forward_convolution(const Tensor<Scalar>& bag) const { return head(encode(bag)); }

    // Token-at-a-time evaluation: every SSM layer runs its recurrence and the
    // dense layers are applied one token at a time. Memory is O(H * N) in the
    // sequence length apart from the optional patch outputs.
    MilOutput<Scalar> forward_recurrence(const Tensor<Scalar>& bag) const {
        check_bag(bag);
        using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
        const auto H = static_cast<Eigen::Index>(config_.hidden_dim);
        std::vector<std::vector<SsmChannelParams>> chans;
        std::vector<SsmLayerStream> streams;
        for (std::size_t l = 0; l < blocks_.size(); ++l) chans.push_back(channels(l));
        for (std::size_t l = 0; l < blocks_.size(); ++l) streams.emplace_back(chans[l], config_.discretization);

        MilOutput<Scalar> out;
        out.pooled.assign(static_cast<std::size_t>(H), -std::numeric_limits<Scalar>::infinity());
        if (config_.multitask) out.patch_probabilities.resize(bag.rows(), patch_weight_.value.rows());
        Vec x(H), s(H), m(2 * H), logits;
        for (Eigen::Index t = 0; t < bag.rows(); ++t) {
            x.noalias() = projection_weight_.value * bag.row(t).transpose();
            x += projection_bias_.value.row(0).transpose();
            detail::layer_norm_row(x.data(), H, norm_weight_.value, norm_bias_.value);
            for (std::size_t l = 0; l < blocks_.size(); ++l) {
                streams[l].step(x.data(), s.data());
                m.noalias() = blocks_[l].mixing_weight.value * s;
                m += blocks_[l].mixing_bias.value.row(0).transpose();
                for (Eigen::Index c = 0; c < H; ++c) x(c) = detail::glu_element(m(c), m(H + c));
            }
            for (Eigen::Index c = 0; c < H; ++c) {
                auto& p = out.pooled[static_cast<std::size_t>(c)];
                if (x(c) > p) p = x(c);
            }
            if (config_.multitask) {
                logits.noalias() = patch_weight_.value * x;
                logits += patch_bias_.value.row(0).transpose();
                std::vector<double> z(logits.data(), logits.data() + logits.size());
                const auto p = detail::softmax(z);
                for (Eigen::Index c = 0; c < logits.size(); ++c)
                    out.patch_probabilities(t, c) = static_cast<Scalar>(p[static_cast<std::size_t>(c)]);
            }
        }
        out.probabilities = classify(out.pooled);
        return out;
    }

    ModelConfig config_;
    Parameter<Scalar> projection_weight_, projection_bias_, norm_weight_, norm_bias_;
    std::vector<Block> blocks_;
    Parameter<Scalar> classifier_weight_, classifier_bias_;
    Parameter<Scalar> patch_weight_, patch_bias_;
};

namespace detail {

// Float v is m * 2^(e - 150) with an integer m of at most 24 bits, so the
// per-exponent sums of m are exact in 64-bit integers for any realistic length.
inline std::vector<double> exact_column_sums(const Tensor<float>& x) {
    const auto cols = static_cast<std::size_t>(x.cols());
    std::vector<std::int64_t> acc(cols * 256, 0);
    std::vector<double> special(cols, 0.0);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float* row = x.row(r).data();
        for (std::size_t c = 0; c < cols; ++c) {
            const auto bits = std::bit_cast<std::uint32_t>(row[c]);
            const std::uint32_t e = (bits >> 23) & 0xFFu;
            if (e == 0xFFu) {
                special[c] += static_cast<double>(row[c]);
                continue;
            }
            auto m = static_cast<std::int64_t>(bits & 0x7FFFFFu);
            if (e != 0) m |= 0x800000;
            acc[c * 256 + (e == 0 ? 1 : e)] += (bits >> 31) ? -m : m;
        }
    }
    std::vector<double> sums(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        double total = 0.0;
        for (int e = 1; e < 255; ++e)
            if (acc[c * 256 + static_cast<std::size_t>(e)] != 0)
                total += std::ldexp(static_cast<double>(acc[c * 256 + static_cast<std::size_t>(e)]), e - 150);
        sums[c] = total + special[c];
    }
    return sums;
}

template <typename Scalar>
std::vector<double> sorted_column_sums(const Tensor<Scalar>& x) {
    std::vector<double> sums(static_cast<std::size_t>(x.cols()));
    std::vector<Scalar> column(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        for (Eigen::Index r = 0; r < x.rows(); ++r) column[static_cast<std::size_t>(r)] = x(r, c);
        std::sort(column.begin(), column.end());
        double sum = 0.0;
        for (Scalar v : column) sum += static_cast<double>(v);
        sums[static_cast<std::size_t>(c)] = sum;
    }
    return sums;
}

}  // namespace detail

enum class PoolKind { mean, max };

inline const char* to_string(PoolKind kind) { return kind == PoolKind::mean ? "mean" : "max"; }

/// Feature-wise pooling over the bag followed by an affine + softmax head.
template <typename Scalar>
class PoolingBaseline {
public:
    using scalar_type = Scalar;

    PoolingBaseline(std::size_t input_dim, std::size_t num_classes, PoolKind kind)
        : kind_(kind),
          weight_("pool_head.weight", static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(input_dim)),
          bias_("pool_head.bias", 1, static_cast<Eigen::Index>(num_classes)) {
        if (input_dim == 0 || num_classes == 0) throw ConfigError("pooling baseline dimensions must be positive");
    }

    static PoolingBaseline initialize(std::size_t input_dim, std::size_t num_classes, PoolKind kind,
                                      std::uint64_t seed) {
        PoolingBaseline b(input_dim, num_classes, kind);
        Rng rng = substream(seed, "init");
        const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
        detail::fill_uniform(b.weight_, bound, rng);
        detail::fill_uniform(b.bias_, bound, rng);
        return b;
    }

    PoolKind kind() const noexcept { return kind_; }

    std::vector<Parameter<Scalar>*> parameters() { return {&weight_, &bias_}; }

    std::size_t parameter_count() const { return static_cast<std::size_t>(weight_.size() + bias_.size()); }

    /// Pooled features. Mean pooling sums each feature exactly (float) or in
    /// sorted order (double), so the result does not depend on token order.
    std::vector<Scalar> pool(const Tensor<Scalar>& bag) const {
        check_bag(bag);
        const auto cols = static_cast<std::size_t>(bag.cols());
        std::vector<Scalar> out(cols);
        if (kind_ == PoolKind::max) {
            Eigen::Matrix<Scalar, 1, Eigen::Dynamic> best = bag.row(0);
            for (Eigen::Index r = 1; r < bag.rows(); ++r) best = best.cwiseMax(bag.row(r));
            for (std::size_t c = 0; c < cols; ++c) out[c] = best(static_cast<Eigen::Index>(c));
            return out;
        }
        std::vector<double> sums;
        if constexpr (std::is_same_v<Scalar, float>)
            sums = detail::exact_column_sums(bag);
        else
            sums = detail::sorted_column_sums(bag);
        for (std::size_t c = 0; c < cols; ++c) out[c] = static_cast<Scalar>(sums[c] / static_cast<double>(bag.rows()));
        return out;
    }

    MilOutput<Scalar> forward(const Tensor<Scalar>& bag) const {
        MilOutput<Scalar> out;
        out.pooled = pool(bag);
        std::vector<double> z(static_cast<std::size_t>(weight_.value.rows()));
        for (Eigen::Index k = 0; k < weight_.value.rows(); ++k) {
            double acc = static_cast<double>(bias_.value(0, k));
            for (Eigen::Index c = 0; c < weight_.value.cols(); ++c)
                acc += static_cast<double>(weight_.value(k, c)) * static_cast<double>(out.pooled[static_cast<std::size_t>(c)]);
            z[static_cast<std::size_t>(k)] = acc;
        }
        out.probabilities = detail::softmax(z);
        return out;
    }

    Graph build(autograd::Tape<Scalar>& tape, const Tensor<Scalar>& bag) {
        check_bag(bag);
        auto x = tape.constant(bag);
        auto pooled = kind_ == PoolKind::max ? tape.max_pool(x) : tape.mean_pool(x);
        return Graph{tape.affine(pooled, tape.parameter(weight_), tape.parameter(bias_)), std::nullopt};
    }

private:
    void check_bag(const Tensor<Scalar>& bag) const {
        if (bag.rows() == 0) throw ContractViolation("empty bag: a bag needs at least one token");
        if (bag.cols() != weight_.value.cols())
            throw ContractViolation("bag feature dimension " + std::to_string(bag.cols()) +
                                    " does not match baseline input_dim " + std::to_string(weight_.value.cols()));
    }

    PoolKind kind_;
    Parameter<Scalar> weight_, bias_;
};

}  // namespace s4mil
