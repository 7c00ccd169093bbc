#ifndef TWINCAL_REGRESSOR_HPP
#define TWINCAL_REGRESSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "twincal/errors.hpp"
#include "twincal/numerics.hpp"
#include "twincal/rng.hpp"

namespace twincal {

// Stage-2 regressor: a fully connected network with a shared trunk and one
// scalar head per parameter coordinate. Written from scratch so the trunk can
// be frozen exactly during fine-tuning and gradients stay auditable.

enum class Activation { identity, relu, leaky_relu, tanh_act };

struct LayerSpec {
    int width = 0;
    Activation act = Activation::relu;
    bool layer_norm = false;
    double dropout = 0.0;
};

struct NetworkSpec {
    int input_dim = 0;
    std::vector<LayerSpec> trunk;
    int head_count = 1;
    std::vector<LayerSpec> head; // shared shape across heads; may be empty

    int trunk_output_dim() const { return trunk.empty() ? input_dim : trunk.back().width; }
    int head_output_input_dim() const {
        return head.empty() ? trunk_output_dim() : head.back().width;
    }
};

struct DenseLayer {
    Matrix w;
    Vector b;
};

struct HeadParams {
    std::vector<DenseLayer> hidden;
    Vector a; // final linear readout, no bias
};

/// Per-coordinate affine standardization, fitted once on the pretraining set
/// and frozen thereafter.
struct Standardizer {
    Vector mean;
    Vector stddev;

    bool empty() const { return mean.size() == 0; }

    static Standardizer identity(Eigen::Index n) {
        return Standardizer{Vector::Zero(n), Vector::Ones(n)};
    }

    /// Fit from column samples; zero-spread coordinates get stddev 1.
    static Standardizer fit(const Matrix& cols) {
        Standardizer s;
        s.mean = cols.rowwise().mean();
        Matrix centered = cols.colwise() - s.mean;
        s.stddev = (centered.array().square().rowwise().mean()).sqrt();
        for (Eigen::Index i = 0; i < s.stddev.size(); ++i)
            if (s.stddev[i] < 1e-12) s.stddev[i] = 1.0;
        return s;
    }

    Vector apply(const Vector& x) const {
        return empty() ? x : ((x - mean).array() / stddev.array()).matrix();
    }
    Matrix apply_cols(const Matrix& x) const {
        if (empty()) return x;
        return ((x.colwise() - mean).array().colwise() / stddev.array()).matrix();
    }
    Vector invert(const Vector& z) const {
        return empty() ? z : (z.array() * stddev.array() + mean.array()).matrix();
    }
    Matrix invert_cols(const Matrix& z) const {
        if (empty()) return z;
        return ((z.array().colwise() * stddev.array()).colwise() + mean.array()).matrix();
    }
};

struct NetworkParams {
    NetworkSpec spec;
    std::vector<DenseLayer> trunk;
    std::vector<HeadParams> heads;
    Standardizer in_std;
    Standardizer out_std;
};

struct NetworkGradients {
    std::vector<DenseLayer> trunk;
    std::vector<HeadParams> heads;
};

struct TrainConfig {
    double lr = 1e-3;
    int batch = 64;
    int epochs = 200;
    Vector target_weights;   // empty = all ones
    double lambda_orth = 0.0;
    double huber_delta = 1.0;
    std::uint64_t seed = 0;
    int patience = 0;        // <= 0 disables early stopping
    Standardizer in_std;     // empty = identity
    Standardizer out_std;
    std::optional<std::vector<LayerSpec>> replace_head; // fine-tune: fresh head shape
};

/// Feature/parameter pairs stored column-wise: x is n x m, theta is d x m.
struct LabeledSet {
    Matrix x;
    Matrix theta;

    Eigen::Index size() const { return x.cols(); }
};

struct TrainReport {
    double final_train_loss = 0.0;
    double best_val_loss = 0.0;
    int epochs_run = 0;
};

// --- initialization -----------------------------------------------------------

namespace detail {

inline void init_dense(DenseLayer& l, int out, int in, SeedStream& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    l.w = Matrix::NullaryExpr(out, in, [&]() { return rng.uniform(-s, s); });
    l.b = Vector::NullaryExpr(out, [&]() { return rng.uniform(-s, s); });
}

inline std::vector<DenseLayer> init_stack(const std::vector<LayerSpec>& specs, int input_dim,
                                          SeedStream& rng) {
    std::vector<DenseLayer> layers(specs.size());
    int in = input_dim;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        init_dense(layers[i], specs[i].width, in, rng);
        in = specs[i].width;
    }
    return layers;
}

} // namespace detail

inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
    NetworkParams p;
    p.spec = spec;
    SeedStream rng(hash_combine(seed, 0x494e4954ULL));
    p.trunk = detail::init_stack(spec.trunk, spec.input_dim, rng);
    p.heads.resize(spec.head_count);
    for (int j = 0; j < spec.head_count; ++j) {
        p.heads[j].hidden = detail::init_stack(spec.head, spec.trunk_output_dim(), rng);
        const int q = spec.head_output_input_dim();
        const double s = 1.0 / std::sqrt(static_cast<double>(q));
        p.heads[j].a = Vector::NullaryExpr(q, [&]() { return rng.uniform(-s, s); });
    }
    p.in_std = Standardizer::identity(spec.input_dim);
    p.out_std = Standardizer::identity(spec.head_count);
    return p;
}

// --- forward / backward -------------------------------------------------------

namespace detail {

constexpr double kLayerNormEps = 1e-5;
constexpr double kLeakySlope = 0.01;

inline Matrix activate(const Matrix& z, Activation act) {
    switch (act) {
        case Activation::identity: return z;
        case Activation::relu: return z.cwiseMax(0.0);
        case Activation::leaky_relu:
            return z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
        case Activation::tanh_act: return z.array().tanh().matrix();
    }
    return z;
}

/// Derivative of the activation at input z, given also the output a = act(z).
inline Matrix activate_grad(const Matrix& z, const Matrix& a, Activation act) {
    switch (act) {
        case Activation::identity: return Matrix::Ones(z.rows(), z.cols());
        case Activation::relu:
            return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
        case Activation::leaky_relu:
            return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; });
        case Activation::tanh_act: return (1.0 - a.array().square()).matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
}

struct LayerCache {
    Matrix input;     // layer input (in x B)
    Matrix act_in;    // activation input: affine output, layer-normalized if enabled
    Matrix ln_hat;    // normalized values (== act_in when LN on)
    Vector ln_inv_sigma;
    Matrix post_act;  // activation output before dropout
    Matrix mask;      // dropout mask with inverted scaling; empty when inactive
    Matrix output;
};

inline Matrix eval_stack(const std::vector<LayerSpec>& specs,
                         const std::vector<DenseLayer>& layers, const Matrix& x) {
    Matrix h = x;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        Matrix z = (layers[l].w * h).colwise() + layers[l].b;
        if (specs[l].layer_norm) {
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                const double mu = z.col(c).mean();
                const double var = (z.col(c).array() - mu).square().mean();
                z.col(c) = (z.col(c).array() - mu) / std::sqrt(var + kLayerNormEps);
            }
        }
        h = activate(z, specs[l].act);
    }
    return h;
}

/// Training-mode pass; dropout masks are keyed by (rng_key, layer) so a batch's
/// masks are reproducible. rng_key == 0 disables dropout (used by the public
/// backward and the gradient checks).
inline Matrix train_stack(const std::vector<LayerSpec>& specs,
                          const std::vector<DenseLayer>& layers, const Matrix& x,
                          std::uint64_t rng_key, std::vector<LayerCache>& caches) {
    caches.resize(specs.size());
    Matrix h = x;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        LayerCache& c = caches[l];
        c.input = h;
        Matrix z = (layers[l].w * h).colwise() + layers[l].b;
        if (specs[l].layer_norm) {
            c.ln_inv_sigma.resize(z.cols());
            for (Eigen::Index col = 0; col < z.cols(); ++col) {
                const double mu = z.col(col).mean();
                const double var = (z.col(col).array() - mu).square().mean();
                const double inv_sigma = 1.0 / std::sqrt(var + kLayerNormEps);
                c.ln_inv_sigma[col] = inv_sigma;
                z.col(col) = (z.col(col).array() - mu) * inv_sigma;
            }
            c.ln_hat = z;
        }
        c.act_in = z;
        c.post_act = activate(z, specs[l].act);
        if (specs[l].dropout > 0.0 && rng_key != 0) {
            const double keep = 1.0 - specs[l].dropout;
            SeedStream mask_rng(hash_combine(rng_key, 0xd0 + l));
            c.mask = Matrix::NullaryExpr(z.rows(), z.cols(), [&]() {
                return mask_rng.uniform() < keep ? 1.0 / keep : 0.0;
            });
            c.output = c.post_act.cwiseProduct(c.mask);
        } else {
            c.mask.resize(0, 0);
            c.output = c.post_act;
        }
        h = c.output;
    }
    return h;
}

/// Reverse pass through a stack; returns gradient w.r.t. the stack input and
/// accumulates parameter gradients into `grads`.
inline Matrix backward_stack(const std::vector<LayerSpec>& specs,
                             const std::vector<DenseLayer>& layers,
                             const std::vector<LayerCache>& caches,
                             Matrix d_out, std::vector<DenseLayer>& grads) {
    grads.resize(specs.size());
    for (std::size_t li = specs.size(); li-- > 0;) {
        const LayerCache& c = caches[li];
        Matrix d_act = c.mask.size() > 0 ? d_out.cwiseProduct(c.mask) : std::move(d_out);
        Matrix dz = d_act.cwiseProduct(activate_grad(c.act_in, c.post_act, specs[li].act));
        if (specs[li].layer_norm) {
            for (Eigen::Index col = 0; col < dz.cols(); ++col) {
                const auto g = dz.col(col).array();
                const auto xh = c.ln_hat.col(col).array();
                const double g_mean = g.mean();
                const double gx_mean = (g * xh).mean();
                dz.col(col) = (c.ln_inv_sigma[col] * (g - g_mean - xh * gx_mean)).matrix();
            }
        }
        grads[li].w = dz * c.input.transpose();
        grads[li].b = dz.rowwise().sum();
        d_out = layers[li].w.transpose() * dz;
    }
    return d_out;
}

/// Head output gradient contributions given d(pred_j)/row.
inline double huber(double e, double delta) {
    const double ae = std::abs(e);
    return ae <= delta ? 0.5 * e * e : delta * (ae - 0.5 * delta);
}

inline double huber_grad(double e, double delta) {
    if (e > delta) return delta;
    if (e < -delta) return -delta;
    return e;
}

/// Orthogonality penalty over the heads' first hidden layers and, optionally,
/// its gradient contribution (scaled by lambda) added into `grads`.
inline double orthogonality_penalty(const NetworkParams& p, double lambda,
                                    NetworkGradients* grads) {
    if (lambda < 0.0) throw std::invalid_argument("lambda_orth must be >= 0");
    const int d = static_cast<int>(p.heads.size());
    if (d < 2 || p.spec.head.empty()) return 0.0;
    double penalty = 0.0;
    for (int j = 0; j < d; ++j) {
        for (int k = j + 1; k < d; ++k) {
            const Matrix cross = p.heads[j].hidden[0].w * p.heads[k].hidden[0].w.transpose();
            penalty += cross.squaredNorm();
            if (grads && lambda > 0.0) {
                grads->heads[j].hidden[0].w += 2.0 * lambda * cross * p.heads[k].hidden[0].w;
                grads->heads[k].hidden[0].w +=
                    2.0 * lambda * cross.transpose() * p.heads[j].hidden[0].w;
            }
        }
    }
    return penalty;
}

inline NetworkGradients zero_gradients(const NetworkParams& p) {
    NetworkGradients g;
    g.trunk.resize(p.trunk.size());
    for (std::size_t i = 0; i < p.trunk.size(); ++i) {
        g.trunk[i].w = Matrix::Zero(p.trunk[i].w.rows(), p.trunk[i].w.cols());
        g.trunk[i].b = Vector::Zero(p.trunk[i].b.size());
    }
    g.heads.resize(p.heads.size());
    for (std::size_t j = 0; j < p.heads.size(); ++j) {
        g.heads[j].hidden.resize(p.heads[j].hidden.size());
        for (std::size_t i = 0; i < p.heads[j].hidden.size(); ++i) {
            g.heads[j].hidden[i].w =
                Matrix::Zero(p.heads[j].hidden[i].w.rows(), p.heads[j].hidden[i].w.cols());
            g.heads[j].hidden[i].b = Vector::Zero(p.heads[j].hidden[i].b.size());
        }
        g.heads[j].a = Vector::Zero(p.heads[j].a.size());
    }
    return g;
}

struct BatchEval {
    double loss = 0.0;
    Matrix preds_std; // d x B
};

/// Forward in standardized space; when `grads` is non-null also runs the full
/// reverse pass. rng_key != 0 enables dropout.
inline BatchEval eval_batch(const Matrix& x_std, const Matrix& t_std, const NetworkParams& p,
                            const TrainConfig& cfg, std::uint64_t rng_key,
                            NetworkGradients* grads) {
    const Eigen::Index batch = x_std.cols();
    const int d = static_cast<int>(p.heads.size());
    Vector w = cfg.target_weights.size() > 0 ? cfg.target_weights : Vector::Ones(d);
    if (w.size() != d) throw ShapeMismatchError("target_weights size must equal head count");

    BatchEval out;
    std::vector<LayerCache> trunk_caches;
    std::vector<std::vector<LayerCache>> head_caches(d);

    Matrix trunk_out;
    if (grads)
        trunk_out = train_stack(p.spec.trunk, p.trunk, x_std, rng_key, trunk_caches);
    else if (rng_key != 0)
        trunk_out = train_stack(p.spec.trunk, p.trunk, x_std, rng_key, trunk_caches);
    else
        trunk_out = eval_stack(p.spec.trunk, p.trunk, x_std);

    out.preds_std.resize(d, batch);
    std::vector<Matrix> head_final(d);
    for (int j = 0; j < d; ++j) {
        const std::uint64_t key = rng_key == 0 ? 0 : hash_combine(rng_key, 0x48454144ULL + j);
        if (grads || rng_key != 0)
            head_final[j] =
                train_stack(p.spec.head, p.heads[j].hidden, trunk_out, key, head_caches[j]);
        else
            head_final[j] = eval_stack(p.spec.head, p.heads[j].hidden, trunk_out);
        out.preds_std.row(j) = p.heads[j].a.transpose() * head_final[j];
    }

    Matrix resid = out.preds_std - t_std;
    double data_loss = 0.0;
    for (int j = 0; j < d; ++j)
        for (Eigen::Index i = 0; i < batch; ++i)
            data_loss += w[j] * huber(resid(j, i), cfg.huber_delta);
    data_loss /= static_cast<double>(batch);

    if (!grads) {
        out.loss = data_loss;
        if (cfg.lambda_orth > 0.0)
            out.loss += cfg.lambda_orth * orthogonality_penalty(p, 0.0, nullptr);
        return out;
    }

    *grads = zero_gradients(p);
    Matrix dpred(d, batch);
    for (int j = 0; j < d; ++j)
        for (Eigen::Index i = 0; i < batch; ++i)
            dpred(j, i) = w[j] * huber_grad(resid(j, i), cfg.huber_delta) /
                          static_cast<double>(batch);

    Matrix d_trunk_out = Matrix::Zero(trunk_out.rows(), batch);
    for (int j = 0; j < d; ++j) {
        grads->heads[j].a = head_final[j] * dpred.row(j).transpose();
        Matrix d_head = p.heads[j].a * dpred.row(j);
        d_trunk_out += backward_stack(p.spec.head, p.heads[j].hidden, head_caches[j],
                                      std::move(d_head), grads->heads[j].hidden);
    }
    backward_stack(p.spec.trunk, p.trunk, trunk_caches, std::move(d_trunk_out), grads->trunk);

    out.loss = data_loss;
    if (cfg.lambda_orth > 0.0)
        out.loss += cfg.lambda_orth * orthogonality_penalty(p, cfg.lambda_orth, grads);
    return out;
}

} // namespace detail

// --- public surface -------------------------------------------------------

enum class ForwardMode { train, eval };

/// Single-sample prediction in original units. Train mode draws fresh dropout
/// masks keyed by the sample content, eval mode is a pure function.
inline Vector forward(const Vector& x, const NetworkParams& p,
                      ForwardMode mode = ForwardMode::eval, std::uint64_t dropout_key = 1) {
    if (x.size() != p.spec.input_dim)
        throw ShapeMismatchError("forward: input dim " + std::to_string(x.size()) +
                                 " != network input dim " + std::to_string(p.spec.input_dim));
    const Vector xs = p.in_std.apply(x);
    Matrix xb = xs;
    const int d = static_cast<int>(p.heads.size());
    Matrix trunk_out;
    std::vector<detail::LayerCache> scratch;
    const std::uint64_t key = mode == ForwardMode::train ? hash_combine(dropout_key, 0xf0) : 0;
    if (key != 0)
        trunk_out = detail::train_stack(p.spec.trunk, p.trunk, xb, key, scratch);
    else
        trunk_out = detail::eval_stack(p.spec.trunk, p.trunk, xb);
    Vector preds(d);
    for (int j = 0; j < d; ++j) {
        Matrix h;
        if (key != 0)
            h = detail::train_stack(p.spec.head, p.heads[j].hidden, trunk_out,
                                    hash_combine(key, j + 1), scratch);
        else
            h = detail::eval_stack(p.spec.head, p.heads[j].hidden, trunk_out);
        preds[j] = p.heads[j].a.dot(h.col(0));
    }
    return p.out_std.invert(preds);
}

/// Batched eval-mode prediction in original units; columns are samples.
inline Matrix predict(const Matrix& x, const NetworkParams& p) {
    if (x.rows() != p.spec.input_dim)
        throw ShapeMismatchError("predict: input dim mismatch");
    const Matrix xs = p.in_std.apply_cols(x);
    Matrix trunk_out = detail::eval_stack(p.spec.trunk, p.trunk, xs);
    const int d = static_cast<int>(p.heads.size());
    Matrix preds(d, x.cols());
    for (int j = 0; j < d; ++j) {
        Matrix h = detail::eval_stack(p.spec.head, p.heads[j].hidden, trunk_out);
        preds.row(j) = p.heads[j].a.transpose() * h;
    }
    return p.out_std.invert_cols(preds);
}

/// Weighted Huber training objective plus the first-layer orthogonality
/// penalty, evaluated without dropout. Residuals are taken in standardized
/// target units.
inline double loss(const LabeledSet& batch, const NetworkParams& p, const TrainConfig& cfg) {
    if (batch.size() == 0) throw EmptyInputError("loss: empty batch");
    const Matrix xs = p.in_std.apply_cols(batch.x);
    const Matrix ts = p.out_std.apply_cols(batch.theta);
    return detail::eval_batch(xs, ts, p, cfg, 0, nullptr).loss;
}

/// Exact reverse-mode gradients of `loss` (dropout off).
inline NetworkGradients backward(const LabeledSet& batch, const NetworkParams& p,
                                 const TrainConfig& cfg) {
    if (batch.size() == 0) throw EmptyInputError("backward: empty batch");
    const Matrix xs = p.in_std.apply_cols(batch.x);
    const Matrix ts = p.out_std.apply_cols(batch.theta);
    NetworkGradients grads;
    detail::eval_batch(xs, ts, p, cfg, 0, &grads);
    return grads;
}

/// w_j = 1 / empirical variance (population convention, divisor m).
inline Vector inverse_variance_weights(const Matrix& targets) {
    if (targets.cols() < 2)
        throw DegenerateTargetError("inverse_variance_weights: need at least two samples");
    Vector mean = targets.rowwise().mean();
    Vector var = (targets.colwise() - mean).array().square().rowwise().mean();
    Vector w(var.size());
    for (Eigen::Index j = 0; j < var.size(); ++j) {
        if (var[j] <= 0.0)
            throw DegenerateTargetError("inverse_variance_weights: coordinate " +
                                        std::to_string(j) + " is constant");
        w[j] = 1.0 / var[j];
    }
    return w;
}

// --- optimization ---------------------------------------------------------

namespace detail {

struct ParamBlocks {
    std::vector<double*> data;
    std::vector<Eigen::Index> size;

    void add(Matrix& m) { data.push_back(m.data()); size.push_back(m.size()); }
    void add(Vector& v) { data.push_back(v.data()); size.push_back(v.size()); }
};

inline ParamBlocks collect_blocks(std::vector<DenseLayer>& trunk,
                                  std::vector<HeadParams>& heads, bool heads_only) {
    ParamBlocks blocks;
    if (!heads_only)
        for (auto& l : trunk) { blocks.add(l.w); blocks.add(l.b); }
    for (auto& h : heads) {
        for (auto& l : h.hidden) { blocks.add(l.w); blocks.add(l.b); }
        blocks.add(h.a);
    }
    return blocks;
}

class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const ParamBlocks& params, const ParamBlocks& grads) {
        if (m_.empty()) {
            m_.resize(params.data.size());
            v_.resize(params.data.size());
            for (std::size_t b = 0; b < params.data.size(); ++b) {
                m_[b] = Vector::Zero(params.size[b]);
                v_[b] = Vector::Zero(params.size[b]);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t b = 0; b < params.data.size(); ++b) {
            Eigen::Map<Vector> p(params.data[b], params.size[b]);
            Eigen::Map<const Vector> g(grads.data[b], grads.size[b]);
            m_[b] = beta1_ * m_[b] + (1.0 - beta1_) * g.matrix();
            v_[b] = beta2_ * v_[b] + (1.0 - beta2_) * g.array().square().matrix();
            p.array() -= lr_ * (m_[b].array() / bc1) /
                         ((v_[b].array() / bc2).sqrt() + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Vector> m_, v_;
};

inline void shuffle_indices(std::vector<Eigen::Index>& idx, std::uint64_t key) {
    SeedStream rng(key);
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
}

inline Matrix gather_cols(const Matrix& src, const std::vector<Eigen::Index>& idx,
                          std::size_t begin, std::size_t end) {
    Matrix out(src.rows(), static_cast<Eigen::Index>(end - begin));
    for (std::size_t i = begin; i < end; ++i) out.col(static_cast<Eigen::Index>(i - begin)) = src.col(idx[i]);
    return out;
}

/// Shared mini-batch loop for pretraining (all parameters) and fine-tuning
/// (heads only, trunk output precomputed by the caller).
inline TrainReport run_sgd(NetworkParams& p, const Matrix& x_std, const Matrix& t_std,
                           const TrainConfig& cfg, bool heads_only) {
    const Eigen::Index m = x_std.cols();
    std::vector<Eigen::Index> idx(m);
    for (Eigen::Index i = 0; i < m; ++i) idx[i] = i;
    shuffle_indices(idx, hash_combine(cfg.seed, 0x53504c4954ULL));

    const Eigen::Index val_count = m >= 10 ? m / 10 : 0;
    std::vector<Eigen::Index> val_idx(idx.end() - val_count, idx.end());
    std::vector<Eigen::Index> train_idx(idx.begin(), idx.end() - val_count);

    Matrix x_val, t_val;
    if (val_count > 0) {
        x_val = gather_cols(x_std, val_idx, 0, val_idx.size());
        t_val = gather_cols(t_std, val_idx, 0, val_idx.size());
    } else {
        x_val = x_std;
        t_val = t_std;
    }

    NetworkParams best = p;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    TrainReport report;

    Adam adam(cfg.lr);
    NetworkGradients grads;
    const int batch_size = std::max(1, cfg.batch);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(train_idx, hash3(cfg.seed, 0x45504f4348ULL, epoch));
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += batch_size, ++batches) {
            const std::size_t stop = std::min(train_idx.size(), start + batch_size);
            Matrix xb = gather_cols(x_std, train_idx, start, stop);
            Matrix tb = gather_cols(t_std, train_idx, start, stop);
            const std::uint64_t dropout_key = hash3(cfg.seed + 1, epoch, batches);
            BatchEval ev = eval_batch(xb, tb, p, cfg, dropout_key, &grads);
            if (!std::isfinite(ev.loss))
                throw NonFiniteLossError("train: loss became non-finite", batches);
            ParamBlocks pb = collect_blocks(p.trunk, p.heads, heads_only);
            ParamBlocks gb = collect_blocks(grads.trunk, grads.heads, heads_only);
            adam.step(pb, gb);
            epoch_loss += ev.loss;
        }
        report.final_train_loss = batches > 0 ? epoch_loss / static_cast<double>(batches) : 0.0;
        report.epochs_run = epoch + 1;

        const double val_loss =
            eval_batch(x_val, t_val, p, cfg, 0, nullptr).loss;
        if (val_loss < best_val) {
            best_val = val_loss;
            best = p;
            since_best = 0;
        } else if (++since_best >= cfg.patience && cfg.patience > 0) {
            break;
        }
    }
    report.best_val_loss = best_val;
    p = std::move(best);
    return report;
}

} // namespace detail

/// Train trunk and heads jointly with Adam on shuffled mini-batches; returns
/// the parameters at the best validation loss over a 10% holdout.
inline NetworkParams train(const LabeledSet& data, const NetworkSpec& spec, const TrainConfig& cfg,
                           TrainReport* report = nullptr) {
    if (data.size() < 1) throw EmptyInputError("train: empty dataset");
    if (data.x.rows() != spec.input_dim)
        throw ShapeMismatchError("train: feature dim does not match spec");
    if (data.theta.rows() != spec.head_count)
        throw ShapeMismatchError("train: target dim does not match head count");

    NetworkParams p = init_params(spec, cfg.seed);
    p.in_std = cfg.in_std.empty() ? Standardizer::identity(spec.input_dim) : cfg.in_std;
    p.out_std = cfg.out_std.empty() ? Standardizer::identity(spec.head_count) : cfg.out_std;

    const Matrix xs = p.in_std.apply_cols(data.x);
    const Matrix ts = p.out_std.apply_cols(data.theta);
    TrainReport rep = detail::run_sgd(p, xs, ts, cfg, /*heads_only=*/false);
    if (report) *report = rep;
    return p;
}

/// Retrain only the head layers on a targeted dataset; the trunk is frozen
/// bit-exactly. Head loss weights are FIM-proportional: w_j = d G_jj / tr(G).
/// When cfg.replace_head is set, heads restart from a fresh (usually smaller)
/// shape instead of the pretrained one.
inline NetworkParams finetune_heads(const LabeledSet& data, const NetworkParams& pretrained,
                                    const TrainConfig& cfg, const Vector& fim_diag,
                                    TrainReport* report = nullptr) {
    if (cfg.epochs <= 0) {
        if (report) *report = TrainReport{};
        return pretrained;
    }
    if (data.size() < 1) throw EmptyInputError("finetune_heads: empty dataset");
    const int d = static_cast<int>(pretrained.heads.size());
    if (fim_diag.size() != d)
        throw ShapeMismatchError("finetune_heads: fim_diag size must equal head count");

    NetworkParams p = pretrained;
    if (cfg.replace_head) {
        p.spec.head = *cfg.replace_head;
        SeedStream rng(hash_combine(cfg.seed, 0x4652455348ULL));
        for (int j = 0; j < d; ++j) {
            p.heads[j].hidden =
                detail::init_stack(p.spec.head, p.spec.trunk_output_dim(), rng);
            const int q = p.spec.head_output_input_dim();
            const double s = 1.0 / std::sqrt(static_cast<double>(q));
            p.heads[j].a = Vector::NullaryExpr(q, [&]() { return rng.uniform(-s, s); });
        }
    }

    TrainConfig head_cfg = cfg;
    const double tr = fim_diag.sum();
    head_cfg.target_weights =
        tr > 0.0 ? Vector(static_cast<double>(d) * fim_diag / tr) : Vector::Ones(d);

    // The trunk is frozen, so its (eval-mode) outputs are precomputed once and
    // head training runs on a trunk-less view of the network.
    const Matrix xs = p.in_std.apply_cols(data.x);
    const Matrix ts = p.out_std.apply_cols(data.theta);
    const Matrix trunk_out = detail::eval_stack(p.spec.trunk, p.trunk, xs);

    NetworkParams head_view;
    head_view.spec.input_dim = p.spec.trunk_output_dim();
    head_view.spec.trunk = {};
    head_view.spec.head_count = d;
    head_view.spec.head = p.spec.head;
    head_view.trunk = {};
    head_view.heads = std::move(p.heads);
    head_view.in_std = Standardizer::identity(head_view.spec.input_dim);
    head_view.out_std = Standardizer::identity(d);

    TrainReport rep = detail::run_sgd(head_view, trunk_out, ts, head_cfg, /*heads_only=*/true);
    if (report) *report = rep;

    p.heads = std::move(head_view.heads);
    return p;
}

// --- checkpoint serialization ----------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_vec(std::ostream& os, const Vector& v) {
    put_u64(os, static_cast<std::uint64_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}
inline void put_mat(std::ostream& os, const Matrix& m) {
    put_u64(os, static_cast<std::uint64_t>(m.rows()));
    put_u64(os, static_cast<std::uint64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
}

inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline double get_f64(std::istream& is) {
    double v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline Vector get_vec(std::istream& is) {
    Vector v(static_cast<Eigen::Index>(get_u64(is)));
    is.read(reinterpret_cast<char*>(v.data()), sizeof(double) * v.size());
    return v;
}
inline Matrix get_mat(std::istream& is) {
    const auto rows = static_cast<Eigen::Index>(get_u64(is));
    const auto cols = static_cast<Eigen::Index>(get_u64(is));
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), sizeof(double) * m.size());
    return m;
}

inline void put_layer_specs(std::ostream& os, const std::vector<LayerSpec>& specs) {
    put_u32(os, static_cast<std::uint32_t>(specs.size()));
    for (const auto& s : specs) {
        put_u32(os, static_cast<std::uint32_t>(s.width));
        put_u32(os, static_cast<std::uint32_t>(s.act));
        put_u32(os, s.layer_norm ? 1 : 0);
        put_f64(os, s.dropout);
    }
}

inline std::vector<LayerSpec> get_layer_specs(std::istream& is) {
    std::vector<LayerSpec> specs(get_u32(is));
    for (auto& s : specs) {
        s.width = static_cast<int>(get_u32(is));
        s.act = static_cast<Activation>(get_u32(is));
        s.layer_norm = get_u32(is) != 0;
        s.dropout = get_f64(is);
    }
    return specs;
}

inline std::uint64_t spec_hash(const NetworkSpec& spec) {
    std::ostringstream ss;
    put_u32(ss, static_cast<std::uint32_t>(spec.input_dim));
    put_layer_specs(ss, spec.trunk);
    put_u32(ss, static_cast<std::uint32_t>(spec.head_count));
    put_layer_specs(ss, spec.head);
    const std::string bytes = ss.str();
    return fnv1a64(bytes.data(), bytes.size());
}

} // namespace detail

constexpr std::uint32_t kCheckpointMagic = 0x5457434bU; // "TWCK"
constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& os, const NetworkParams& p) {
    detail::put_u32(os, kCheckpointMagic);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u64(os, detail::spec_hash(p.spec));
    detail::put_u32(os, static_cast<std::uint32_t>(p.spec.input_dim));
    detail::put_layer_specs(os, p.spec.trunk);
    detail::put_u32(os, static_cast<std::uint32_t>(p.spec.head_count));
    detail::put_layer_specs(os, p.spec.head);
    detail::put_vec(os, p.in_std.mean);
    detail::put_vec(os, p.in_std.stddev);
    detail::put_vec(os, p.out_std.mean);
    detail::put_vec(os, p.out_std.stddev);
    for (const auto& l : p.trunk) {
        detail::put_mat(os, l.w);
        detail::put_vec(os, l.b);
    }
    for (const auto& h : p.heads) {
        for (const auto& l : h.hidden) {
            detail::put_mat(os, l.w);
            detail::put_vec(os, l.b);
        }
        detail::put_vec(os, h.a);
    }
}

inline void save_checkpoint(const std::string& path, const NetworkParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    save_checkpoint(os, p);
}

inline NetworkParams load_checkpoint(std::istream& is) {
    if (detail::get_u32(is) != kCheckpointMagic)
        throw std::runtime_error("load_checkpoint: bad magic");
    if (detail::get_u32(is) != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version");
    const std::uint64_t stored_hash = detail::get_u64(is);
    NetworkParams p;
    p.spec.input_dim = static_cast<int>(detail::get_u32(is));
    p.spec.trunk = detail::get_layer_specs(is);
    p.spec.head_count = static_cast<int>(detail::get_u32(is));
    p.spec.head = detail::get_layer_specs(is);
    if (detail::spec_hash(p.spec) != stored_hash)
        throw std::runtime_error("load_checkpoint: spec hash mismatch");
    p.in_std.mean = detail::get_vec(is);
    p.in_std.stddev = detail::get_vec(is);
    p.out_std.mean = detail::get_vec(is);
    p.out_std.stddev = detail::get_vec(is);
    p.trunk.resize(p.spec.trunk.size());
    for (auto& l : p.trunk) {
        l.w = detail::get_mat(is);
        l.b = detail::get_vec(is);
    }
    p.heads.resize(p.spec.head_count);
    for (auto& h : p.heads) {
        h.hidden.resize(p.spec.head.size());
        for (auto& l : h.hidden) {
            l.w = detail::get_mat(is);
            l.b = detail::get_vec(is);
        }
        h.a = detail::get_vec(is);
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file");
    return p;
}

inline NetworkParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return load_checkpoint(is);
}

} // namespace twincal

#endif
