#include "fslm/mdn.hpp"

#include "fslm/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

namespace fslm::mdn {

namespace {

std::atomic<std::uint64_t> g_train_calls{0};

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);
const double kLogWeightFloor = std::log(kWeightFloor);

// Scratch buffers for one mixture-head evaluation.
struct HeadScratch {
    std::vector<double> chol, z, w, diag, log_terms;

    explicit HeadScratch(const MdnArchitecture& a)
        : chol(static_cast<std::size_t>(a.feature_dim * a.feature_dim), 0.0),
          z(static_cast<std::size_t>(a.components * a.feature_dim)),
          w(static_cast<std::size_t>(a.components * a.feature_dim)),
          diag(static_cast<std::size_t>(a.components * a.feature_dim)),
          log_terms(static_cast<std::size_t>(a.components))
    {
    }
};

// Negative log-likelihood of standardized x under one head output column.
// If `grad` is non-null, writes d(nll)/d(out) into it (output_dim entries).
double head_nll(const MdnArchitecture& a, const double* out, const double* x, double* grad, HeadScratch& s)
{
    const int K = a.components;
    const int D = a.feature_dim;
    const bool full = a.covariance == CovarianceType::Full;
    const int per_comp_off = full ? D * (D - 1) / 2 : 0;
    const double* logits = out;
    const double* means = out + K;
    const double* log_diag = out + K + K * D;
    const double* off = out + K + 2 * K * D;

    const double logit_lse = log_sum_exp(logits, K);
    double* L = s.chol.data();
    for (int k = 0; k < K; ++k) {
        double log_det = 0.0;
        for (int i = 0; i < D; ++i) {
            const double raw = log_diag[k * D + i];
            L[i * D + i] = std::exp(raw);
            log_det += raw;
            for (int j = 0; j < i; ++j)
                L[i * D + j] = full ? off[k * per_comp_off + i * (i - 1) / 2 + j] : 0.0;
        }
        double* z = s.z.data() + k * D;
        double quad = 0.0;
        for (int i = 0; i < D; ++i) {
            double acc = x[i] - means[k * D + i];
            for (int j = 0; j < i; ++j)
                acc -= L[i * D + j] * z[j];
            z[i] = acc / L[i * D + i];
            quad += z[i] * z[i];
        }
        const double log_pi = std::max(logits[k] - logit_lse, kLogWeightFloor);
        s.log_terms[static_cast<std::size_t>(k)] = log_pi - 0.5 * quad - log_det - D * kHalfLog2Pi;

        if (grad) {
            double* w = s.w.data() + k * D;
            for (int i = D - 1; i >= 0; --i) {
                double acc = z[i];
                for (int j = i + 1; j < D; ++j)
                    acc -= L[j * D + i] * w[j];
                w[i] = acc / L[i * D + i];
                s.diag[static_cast<std::size_t>(k * D + i)] = L[i * D + i];
            }
        }
    }
    const double log_q = log_sum_exp(s.log_terms.data(), K);

    if (grad) {
        double* g_logits = grad;
        double* g_means = grad + K;
        double* g_diag = grad + K + K * D;
        double* g_off = grad + K + 2 * K * D;
        for (int k = 0; k < K; ++k) {
            const double r = std::exp(s.log_terms[static_cast<std::size_t>(k)] - log_q);
            const double pi = std::exp(logits[k] - logit_lse);
            g_logits[k] = pi - r;
            const double* z = s.z.data() + k * D;
            const double* w = s.w.data() + k * D;
            for (int i = 0; i < D; ++i) {
                g_means[k * D + i] = -r * w[i];
                g_diag[k * D + i] = -r * (w[i] * z[i] * s.diag[static_cast<std::size_t>(k * D + i)] - 1.0);
                if (full)
                    for (int j = 0; j < i; ++j)
                        g_off[k * per_comp_off + i * (i - 1) / 2 + j] = -r * w[i] * z[j];
            }
        }
    }
    return -log_q;
}

Matrix standardize_cols(const Matrix& rows, const Vector& mean, const Vector& scale)
{
    return ((rows.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).transpose();
}

void check_batch(const MdnModel& model, const Matrix& theta, const Matrix& x)
{
    const auto& a = model.architecture();
    if (theta.rows() == 0 || theta.rows() != x.rows())
        throw DimensionError("batch must be nonempty with matching theta/x rows");
    if (theta.cols() != a.param_dim || x.cols() != a.feature_dim)
        throw DimensionError("batch columns do not match the model's dimensions");
}

// Forward pass keeping every activation; acts[0] is the standardized input.
Matrix forward_with_activations(const MdnModel& model, const Matrix& theta_std, std::vector<Matrix>& acts)
{
    const auto& layers = model.layers();
    acts.clear();
    acts.push_back(theta_std);
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
        Matrix pre = model.weight(l) * acts.back();
        pre.colwise() += model.bias(l);
        acts.push_back(tanh_activation(pre));
    }
    Matrix out = model.weight(layers.size() - 1) * acts.back();
    out.colwise() += model.bias(layers.size() - 1);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------

void MdnArchitecture::validate() const
{
    if (param_dim < 1 || feature_dim < 1)
        throw ConfigError("MDN dimensions must be positive");
    if (components < 1)
        throw ConfigError("MDN needs at least one component");
    for (int h : hidden)
        if (h < 1)
            throw ConfigError("hidden layer widths must be positive");
}

int MdnArchitecture::offdiag_count() const
{
    return covariance == CovarianceType::Full ? components * feature_dim * (feature_dim - 1) / 2 : 0;
}

int MdnArchitecture::output_dim() const { return components * (1 + 2 * feature_dim) + offdiag_count(); }

Eigen::Index MdnArchitecture::parameter_count() const
{
    Eigen::Index n = 0;
    int in = param_dim;
    for (int h : hidden) {
        n += static_cast<Eigen::Index>(h) * (in + 1);
        in = h;
    }
    return n + static_cast<Eigen::Index>(output_dim()) * (in + 1);
}

Standardization Standardization::identity(int param_dim, int feature_dim)
{
    return {Vector::Zero(param_dim), Vector::Ones(param_dim), Vector::Zero(feature_dim), Vector::Ones(feature_dim)};
}

Standardization Standardization::fit(const Matrix& theta, const Matrix& x)
{
    auto moments = [](const Matrix& m, Vector& mean, Vector& scale) {
        mean = m.colwise().mean().transpose();
        scale.resize(m.cols());
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double var = (m.col(j).array() - mean[j]).square().mean();
            const double sd = std::sqrt(var);
            scale[j] = sd > 1e-12 ? sd : 1.0;
        }
    };
    Standardization s;
    moments(theta, s.theta_mean, s.theta_scale);
    moments(x, s.x_mean, s.x_scale);
    return s;
}

TrainingDiverged::TrainingDiverged(int epoch, const std::string& what)
    : NumericalError("training diverged in epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch)
{
}

MdnModel::MdnModel(MdnArchitecture arch, std::uint64_t seed) : arch_(std::move(arch))
{
    arch_.validate();
    build_layout();
    standardization_ = Standardization::identity(arch_.param_dim, arch_.feature_dim);
    params_.setZero(arch_.parameter_count());

    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        const bool is_head = l + 1 == layers_.size();
        const double limit = std::sqrt(6.0 / (layer.in + layer.out)) * (is_head ? 0.1 : 1.0);
        std::uniform_real_distribution<double> uniform(-limit, limit);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(layer.in) * layer.out; ++i)
            params_[layer.weight_offset + i] = uniform(rng);
    }
    // Spread the component means so the components are not exchangeable at start.
    const auto& head = layers_.back();
    const int K = arch_.components;
    for (int i = 0; i < K * arch_.feature_dim; ++i)
        params_[head.bias_offset + K + i] = normal(rng);
}

void MdnModel::build_layout()
{
    layers_.clear();
    Eigen::Index offset = 0;
    int in = arch_.param_dim;
    auto add = [&](int out) {
        Layer l{offset, offset + static_cast<Eigen::Index>(in) * out, in, out};
        offset = l.bias_offset + out;
        layers_.push_back(l);
        in = out;
    };
    for (int h : arch_.hidden)
        add(h);
    add(arch_.output_dim());
}

void MdnModel::set_standardization(Standardization s)
{
    if (s.theta_mean.size() != arch_.param_dim || s.theta_scale.size() != arch_.param_dim ||
        s.x_mean.size() != arch_.feature_dim || s.x_scale.size() != arch_.feature_dim)
        throw DimensionError("standardization does not match model dimensions");
    if ((s.theta_scale.array() <= 0.0).any() || (s.x_scale.array() <= 0.0).any())
        throw ConfigError("standardization scales must be positive");
    standardization_ = std::move(s);
}

void MdnModel::zero_output_head()
{
    const auto& head = layers_.back();
    params_.segment(head.weight_offset, static_cast<Eigen::Index>(head.in) * head.out + head.out).setZero();
}

Eigen::Map<const Matrix> MdnModel::weight(std::size_t layer) const
{
    const auto& l = layers_[layer];
    return {params_.data() + l.weight_offset, l.out, l.in};
}

Eigen::Map<const Vector> MdnModel::bias(std::size_t layer) const
{
    const auto& l = layers_[layer];
    return {params_.data() + l.bias_offset, l.out};
}

Matrix MdnModel::head(const Matrix& theta_std_cols) const
{
    // Column blocks keep the hidden activations in cache; whole-batch
    // temporaries are several times slower for large batches.
    constexpr Eigen::Index kBlock = 256;
    const std::size_t last = layers_.size() - 1;
    Matrix out(layers_[last].out, theta_std_cols.cols());
    for (Eigen::Index c = 0; c < theta_std_cols.cols(); c += kBlock) {
        const Eigen::Index w = std::min(kBlock, theta_std_cols.cols() - c);
        Matrix act = theta_std_cols.middleCols(c, w);
        for (std::size_t l = 0; l < last; ++l) {
            Matrix pre = weight(l) * act;
            pre.colwise() += bias(l);
            act = tanh_activation(pre);
        }
        out.middleCols(c, w).noalias() = weight(last) * act;
        out.middleCols(c, w).colwise() += bias(last);
    }
    return out;
}

GaussianMixture MdnModel::mixture_from_head(const double* out) const
{
    const int K = arch_.components;
    const int D = arch_.feature_dim;
    const bool full = arch_.covariance == CovarianceType::Full;
    const int per_comp_off = full ? D * (D - 1) / 2 : 0;
    for (int i = 0; i < arch_.output_dim(); ++i)
        if (!std::isfinite(out[i]))
            throw ModelCorrupt("non-finite network output");

    const double lse = log_sum_exp(out, K);
    Vector weights(K);
    for (int k = 0; k < K; ++k)
        weights[k] = std::exp(out[k] - lse);
    weights /= weights.sum();

    const auto& sx = standardization_.x_scale;
    const auto& mx = standardization_.x_mean;
    Matrix means(K, D);
    std::vector<Matrix> chols(static_cast<std::size_t>(K), Matrix::Zero(D, D));
    for (int k = 0; k < K; ++k) {
        Matrix& L = chols[static_cast<std::size_t>(k)];
        for (int i = 0; i < D; ++i) {
            means(k, i) = mx[i] + sx[i] * out[K + k * D + i];
            const double diag = std::exp(out[K + K * D + k * D + i]);
            if (!std::isfinite(diag) || diag <= 0.0)
                throw ModelCorrupt("Cholesky diagonal overflowed");
            L(i, i) = sx[i] * diag;
            if (full)
                for (int j = 0; j < i; ++j)
                    L(i, j) = sx[i] * out[K + 2 * K * D + k * per_comp_off + i * (i - 1) / 2 + j];
        }
    }
    return GaussianMixture::from_cholesky(std::move(weights), std::move(means), std::move(chols));
}

GaussianMixture MdnModel::forward(const Eigen::Ref<const Vector>& theta) const
{
    if (theta.size() != arch_.param_dim)
        throw DimensionError("forward: theta has dimension " + std::to_string(theta.size()) + ", model expects " +
                             std::to_string(arch_.param_dim));
    if (!theta.allFinite())
        throw ModelCorrupt("forward: non-finite input");
    Matrix z = ((theta - standardization_.theta_mean).array() / standardization_.theta_scale.array()).matrix();
    const Matrix out = head(z);
    return mixture_from_head(out.data());
}

std::vector<GaussianMixture> MdnModel::forward_batch(const Matrix& thetas) const
{
    if (thetas.cols() != arch_.param_dim)
        throw DimensionError("forward_batch: wrong parameter dimension");
    const Matrix out = head(standardize_cols(thetas, standardization_.theta_mean, standardization_.theta_scale));
    std::vector<GaussianMixture> mixes;
    mixes.reserve(static_cast<std::size_t>(thetas.rows()));
    for (Eigen::Index i = 0; i < out.cols(); ++i)
        mixes.push_back(mixture_from_head(out.col(i).data()));
    return mixes;
}

Vector MdnModel::marginal_log_prob_batch(const Matrix& thetas, const IndexSet& keep, const Vector& x_keep) const
{
    const int K = arch_.components;
    const int D = arch_.feature_dim;
    if (thetas.cols() != arch_.param_dim)
        throw DimensionError("marginal_log_prob_batch: wrong parameter dimension");
    check_index_set(keep, D);
    const int S = static_cast<int>(keep.size());
    if (x_keep.size() != S)
        throw DimensionError("marginal_log_prob_batch: observation does not match the kept features");
    const int max_keep = *std::max_element(keep.begin(), keep.end());
    bool identity = S == D;
    for (int i = 0; i < S && identity; ++i)
        identity = keep[static_cast<std::size_t>(i)] == i;

    const bool full = arch_.covariance == CovarianceType::Full;
    const int per_comp_off = full ? D * (D - 1) / 2 : 0;
    const auto& sx = standardization_.x_scale;
    const auto& mx = standardization_.x_mean;
    Vector xs(S);
    double log_jac = 0.0;
    for (int i = 0; i < S; ++i) {
        const int f = keep[static_cast<std::size_t>(i)];
        xs[i] = (x_keep[i] - mx[f]) / sx[f];
        log_jac += std::log(sx[f]);
    }

    const Matrix z = standardize_cols(thetas, standardization_.theta_mean, standardization_.theta_scale);
    // Everything below is elementwise across a block of parameter vectors, so
    // each head output is a contiguous column of `o`.
    using Array = Eigen::ArrayXd;
    constexpr Eigen::Index kBlock = 256;
    const int rows = identity ? D : max_keep + 1;
    std::vector<Array> L(static_cast<std::size_t>(rows * rows)), chol(static_cast<std::size_t>(S * S));
    std::vector<Array> y(static_cast<std::size_t>(S)), terms(static_cast<std::size_t>(K));
    auto at = [](std::vector<Array>& v, int stride, int i, int j) -> Array& {
        return v[static_cast<std::size_t>(i * stride + j)];
    };
    Vector result(thetas.rows());
    for (Eigen::Index c = 0; c < z.cols(); c += kBlock) {
        const Eigen::Index w = std::min(kBlock, z.cols() - c);
        const Eigen::ArrayXXd o = head(z.middleCols(c, w)).transpose().array();
        if (!o.allFinite())
            throw ModelCorrupt("non-finite network output");
        const Array wmax = o.leftCols(K).rowwise().maxCoeff();
        const Array lse = wmax + (o.leftCols(K).colwise() - wmax).exp().rowwise().sum().log();
        for (int k = 0; k < K; ++k) {
            const Eigen::Index diag0 = K + K * D + k * D;
            const Eigen::Index off0 = K + 2 * K * D + k * per_comp_off;
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < i; ++j)
                    if (full)
                        at(L, rows, i, j) = o.col(off0 + i * (i - 1) / 2 + j);
                    else
                        at(L, rows, i, j).setZero(w);
                at(L, rows, i, i) = o.col(diag0 + i).exp();
            }
            Array log_det = Array::Zero(w);
            if (identity) {
                for (int i = 0; i < D; ++i) {
                    for (int j = 0; j <= i; ++j)
                        at(chol, S, i, j) = at(L, rows, i, j);
                    log_det += o.col(diag0 + i);
                }
            } else {
                // sub-block of L L^T, then its Cholesky factor in place
                for (int a = 0; a < S; ++a) {
                    const int fa = keep[static_cast<std::size_t>(a)];
                    for (int b = 0; b <= a; ++b) {
                        const int fb = keep[static_cast<std::size_t>(b)];
                        Array acc = Array::Zero(w);
                        for (int m = 0; m <= std::min(fa, fb); ++m)
                            acc += at(L, rows, fa, m) * at(L, rows, fb, m);
                        at(chol, S, a, b) = std::move(acc);
                    }
                }
                for (int j = 0; j < S; ++j) {
                    Array d = at(chol, S, j, j);
                    for (int m = 0; m < j; ++m)
                        d -= at(chol, S, j, m).square();
                    if (!(d > 0.0).all())
                        throw NumericalError("marginal covariance is not positive definite");
                    const Array ljj = d.sqrt();
                    for (int i = j + 1; i < S; ++i) {
                        Array v = at(chol, S, i, j);
                        for (int m = 0; m < j; ++m)
                            v -= at(chol, S, i, m) * at(chol, S, j, m);
                        at(chol, S, i, j) = v / ljj;
                    }
                    at(chol, S, j, j) = ljj;
                    log_det += ljj.log();
                }
            }
            Array quad = Array::Zero(w);
            for (int i = 0; i < S; ++i) {
                Array v = xs[i] - o.col(K + k * D + keep[static_cast<std::size_t>(i)]);
                for (int m = 0; m < i; ++m)
                    v -= at(chol, S, i, m) * y[static_cast<std::size_t>(m)];
                y[static_cast<std::size_t>(i)] = v / at(chol, S, i, i);
                quad += y[static_cast<std::size_t>(i)].square();
            }
            const Array log_w = (o.col(k) - lse).max(kLogWeightFloor);
            terms[static_cast<std::size_t>(k)] = log_w - 0.5 * quad - log_det - S * kHalfLog2Pi;
        }
        Array tmax = terms[0];
        for (int k = 1; k < K; ++k)
            tmax = tmax.max(terms[static_cast<std::size_t>(k)]);
        Array sum = Array::Zero(w);
        for (int k = 0; k < K; ++k)
            sum += (terms[static_cast<std::size_t>(k)] - tmax).exp();
        result.segment(c, w) = (tmax + sum.log() - log_jac).matrix();
    }
    return result;
}

// ---------------------------------------------------------------------------

double nll_loss(const MdnModel& model, const Matrix& theta, const Matrix& x)
{
    check_batch(model, theta, x);
    const auto& a = model.architecture();
    const auto& s = model.standardization();
    const Matrix out = model.head(standardize_cols(theta, s.theta_mean, s.theta_scale));
    const Matrix xs = standardize_cols(x, s.x_mean, s.x_scale);
    HeadScratch scratch(a);
    double total = 0.0;
    for (Eigen::Index i = 0; i < out.cols(); ++i)
        total += head_nll(a, out.col(i).data(), xs.col(i).data(), nullptr, scratch);
    return total / static_cast<double>(out.cols()) + s.x_scale.array().log().sum();
}

LossAndGrad nll_loss_and_grad(const MdnModel& model, const Matrix& theta, const Matrix& x)
{
    check_batch(model, theta, x);
    const auto& a = model.architecture();
    const auto& s = model.standardization();
    const auto& layers = model.layers();
    const auto n = theta.rows();
    const double inv_n = 1.0 / static_cast<double>(n);

    std::vector<Matrix> acts;
    const Matrix out = forward_with_activations(model, standardize_cols(theta, s.theta_mean, s.theta_scale), acts);
    const Matrix xs = standardize_cols(x, s.x_mean, s.x_scale);

    Matrix delta(out.rows(), n);
    HeadScratch scratch(a);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        total += head_nll(a, out.col(i).data(), xs.col(i).data(), delta.col(i).data(), scratch);
    delta *= inv_n;

    LossAndGrad result;
    result.loss = total * inv_n + s.x_scale.array().log().sum();
    result.grad.setZero(model.parameters().size());
    for (std::size_t l = layers.size(); l-- > 0;) {
        const auto& layer = layers[l];
        const Matrix& input = acts[l];
        Eigen::Map<Matrix>(result.grad.data() + layer.weight_offset, layer.out, layer.in).noalias() =
            delta * input.transpose();
        result.grad.segment(layer.bias_offset, layer.out) = delta.rowwise().sum();
        if (l == 0)
            break;
        Matrix back = model.weight(l).transpose() * delta;
        delta = (back.array() * (1.0 - input.array().square())).matrix();
    }
    if (!std::isfinite(result.loss))
        throw NumericalError("non-finite loss");
    return result;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const
{
    if (batch_size < 1)
        throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0))
        throw ConfigError("learning_rate must be positive");
    if (max_epochs < 1)
        throw ConfigError("max_epochs must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction <= 0.5))
        throw ConfigError("validation_fraction must lie in (0, 0.5]");
    if (patience < 1)
        throw ConfigError("patience must be >= 1");
}

std::uint64_t training_invocations() { return g_train_calls.load(); }

TrainResult train(MdnModel model, const Matrix& theta, const Matrix& x, const TrainConfig& config)
{
    ++g_train_calls;
    config.validate();
    check_batch(model, theta, x);
    if (!theta.allFinite() || !x.allFinite())
        throw ConfigError("training data must be finite (filter invalid rows first)");

    const auto n = theta.rows();
    auto n_val = static_cast<Eigen::Index>(std::llround(config.validation_fraction * static_cast<double>(n)));
    n_val = std::clamp<Eigen::Index>(n_val, 1, n - 1);
    if (n < 2)
        throw ConfigError("training needs at least two rows");
    const auto n_train = n - n_val;

    Rng rng(derive_seed(config.seed, "train"));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    auto gather = [](const Matrix& m, const Eigen::Index* idx, Eigen::Index count) {
        Matrix out(count, m.cols());
        for (Eigen::Index i = 0; i < count; ++i)
            out.row(i) = m.row(idx[i]);
        return out;
    };
    const Matrix theta_train = gather(theta, order.data(), n_train);
    const Matrix x_train = gather(x, order.data(), n_train);
    const Matrix theta_val = gather(theta, order.data() + n_train, n_val);
    const Matrix x_val = gather(x, order.data() + n_train, n_val);

    model.set_standardization(Standardization::fit(theta_train, x_train));

    TrainResult result;
    double best = nll_loss(model, theta_val, x_val);
    result.validation_loss.push_back(best);
    result.model = model;

    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Vector m = Vector::Zero(model.parameters().size());
    Vector v = Vector::Zero(model.parameters().size());
    long step = 0;
    int since_best = 0;

    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n_train));
    std::iota(perm.begin(), perm.end(), 0);
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::shuffle(perm.begin(), perm.end(), rng);
        double epoch_loss = 0.0;
        for (Eigen::Index start = 0; start < n_train; start += config.batch_size) {
            const auto count = std::min<Eigen::Index>(config.batch_size, n_train - start);
            const Matrix tb = gather(theta_train, perm.data() + start, count);
            const Matrix xb = gather(x_train, perm.data() + start, count);
            LossAndGrad lg;
            try {
                lg = nll_loss_and_grad(model, tb, xb);
            } catch (const NumericalError& e) {
                throw TrainingDiverged(epoch, e.what());
            }
            if (!lg.grad.allFinite())
                throw TrainingDiverged(epoch, "non-finite gradient");
            epoch_loss += lg.loss * static_cast<double>(count);

            ++step;
            m = beta1 * m + (1.0 - beta1) * lg.grad;
            v = beta2 * v + (1.0 - beta2) * lg.grad.cwiseAbs2();
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            model.parameters().array() -=
                config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        }
        result.train_loss.push_back(epoch_loss / static_cast<double>(n_train));

        double val;
        try {
            val = nll_loss(model, theta_val, x_val);
        } catch (const NumericalError& e) {
            throw TrainingDiverged(epoch, e.what());
        }
        if (!std::isfinite(val))
            throw TrainingDiverged(epoch, "non-finite validation loss");
        result.validation_loss.push_back(val);
        result.epochs_run = epoch;
        if (val < best) {
            best = val;
            result.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kModelMagic[8] = {'F', 'S', 'L', 'M', 'M', 'D', 'N', '1'};

template <class T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_doubles(std::string& out, const Vector& v) { out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)); }

template <class T>
T take(const std::string& in, std::size_t& offset)
{
    if (offset + sizeof(T) > in.size())
        throw FormatError("model file truncated");
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    offset += sizeof(T);
    return value;
}

Vector take_doubles(const std::string& in, std::size_t& offset, Eigen::Index count)
{
    const std::size_t bytes = static_cast<std::size_t>(count) * sizeof(double);
    if (offset + bytes > in.size())
        throw FormatError("model file truncated");
    Vector v(count);
    std::memcpy(v.data(), in.data() + offset, bytes);
    offset += bytes;
    return v;
}

std::uint32_t crc(const char* data, std::size_t n)
{
    return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

} // namespace

std::string serialize(const MdnModel& model)
{
    const auto& a = model.architecture();
    nlohmann::json header;
    header["param_dim"] = a.param_dim;
    header["feature_dim"] = a.feature_dim;
    header["components"] = a.components;
    header["hidden"] = a.hidden;
    header["covariance"] = a.covariance == CovarianceType::Full ? "full" : "diagonal";
    header["nonlinearity"] = "tanh";
    header["metadata"] = model.metadata;
    const std::string header_text = header.dump();

    std::string bytes(kModelMagic, sizeof(kModelMagic));
    put<std::uint32_t>(bytes, kModelFormatVersion);
    put<std::uint32_t>(bytes, static_cast<std::uint32_t>(header_text.size()));
    bytes += header_text;
    const auto& s = model.standardization();
    put_doubles(bytes, s.theta_mean);
    put_doubles(bytes, s.theta_scale);
    put_doubles(bytes, s.x_mean);
    put_doubles(bytes, s.x_scale);
    put<std::uint64_t>(bytes, static_cast<std::uint64_t>(model.parameters().size()));
    put_doubles(bytes, model.parameters());
    put<std::uint32_t>(bytes, crc(bytes.data(), bytes.size()));
    return bytes;
}

MdnModel deserialize(const std::string& bytes)
{
    if (bytes.size() < sizeof(kModelMagic) + 12 || std::memcmp(bytes.data(), kModelMagic, sizeof(kModelMagic)) != 0)
        throw FormatError("not an fslm model file");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != crc(bytes.data(), bytes.size() - 4))
        throw ChecksumError("model file checksum mismatch (corrupt or truncated)");

    std::size_t offset = sizeof(kModelMagic);
    const auto version = take<std::uint32_t>(bytes, offset);
    if (version != kModelFormatVersion)
        throw FormatError("unsupported model format version " + std::to_string(version));
    const auto header_len = take<std::uint32_t>(bytes, offset);
    if (offset + header_len > bytes.size())
        throw FormatError("model file truncated");
    const auto header = nlohmann::json::parse(bytes.substr(offset, header_len));
    offset += header_len;

    MdnArchitecture a;
    a.param_dim = header.at("param_dim").get<int>();
    a.feature_dim = header.at("feature_dim").get<int>();
    a.components = header.at("components").get<int>();
    a.hidden = header.at("hidden").get<std::vector<int>>();
    a.covariance = header.at("covariance").get<std::string>() == "full" ? CovarianceType::Full : CovarianceType::Diagonal;

    MdnModel model(a, 0);
    model.metadata = header.value("metadata", nlohmann::json::object());
    Standardization s;
    s.theta_mean = take_doubles(bytes, offset, a.param_dim);
    s.theta_scale = take_doubles(bytes, offset, a.param_dim);
    s.x_mean = take_doubles(bytes, offset, a.feature_dim);
    s.x_scale = take_doubles(bytes, offset, a.feature_dim);
    model.set_standardization(std::move(s));
    const auto count = take<std::uint64_t>(bytes, offset);
    if (static_cast<Eigen::Index>(count) != a.parameter_count())
        throw FormatError("weight count does not match the architecture");
    model.parameters() = take_doubles(bytes, offset, static_cast<Eigen::Index>(count));
    if (offset + 4 != bytes.size())
        throw FormatError("trailing bytes in model file");
    return model;
}

void save(const MdnModel& model, const std::filesystem::path& path) { write_file_atomic(path, serialize(model)); }

MdnModel load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

} // namespace fslm::mdn
