#include "fslm/inference.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fslm::inference {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double sigmoid(double z)
{
    if (z >= 0.0)
        return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log sigmoid(z), stable for large |z|
double log_sigmoid(double z) { return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

void check_labels(const Matrix& thetas, const std::vector<bool>& valid, const char* who)
{
    if (static_cast<Eigen::Index>(valid.size()) != thetas.rows())
        throw DimensionError(std::string(who) + ": label count does not match theta rows");
    if (thetas.rows() == 0)
        throw ConfigError(std::string(who) + ": empty training data");
}

void column_moments(const Matrix& x, Vector& mean, Vector& scale)
{
    mean = x.colwise().mean().transpose();
    scale.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double var = (x.col(j).array() - mean[j]).square().mean();
        scale[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
}

nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const nlohmann::json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// ---------------------------------------------------------------------------
// Box <-> unconstrained coordinates for MCMC.

struct LogitBox {
    Vector lower, width;

    Vector to_theta(const Vector& u) const
    {
        Vector t(u.size());
        for (Eigen::Index i = 0; i < u.size(); ++i)
            t[i] = lower[i] + width[i] * sigmoid(u[i]);
        return t;
    }

    Vector to_u(const Eigen::Ref<const Vector>& theta) const
    {
        Vector u(theta.size());
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
            double s = (theta[i] - lower[i]) / width[i];
            s = std::clamp(s, 1e-12, 1.0 - 1e-12);
            u[i] = std::log(s) - std::log1p(-s);
        }
        return u;
    }

    // log |d theta / d u|
    double log_jacobian(const Vector& u) const
    {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < u.size(); ++i)
            acc += std::log(width[i]) + log_sigmoid(u[i]) + log_sigmoid(-u[i]);
        return acc;
    }
};

struct ChainOutput {
    Matrix draws; // kept x P, theta units
    long accepted = 0;
    long proposals = 0;
    double scale = 0.0;
};

ChainOutput run_chain(const UnnormalizedPosterior& post, const LogitBox& box, Vector u, const Matrix& sigma0,
                      int keep, int thin, int burn, double target, std::uint64_t seed)
{
    const auto d = u.size();
    Rng rng(seed);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;

    auto log_target = [&](const Vector& v) {
        const double lp = post.logpdf(box.to_theta(v));
        return std::isfinite(lp) ? lp + box.log_jacobian(v) : kNegInf;
    };

    double lp = log_target(u);
    double log_lambda = std::log(2.38 * 2.38 / static_cast<double>(d));
    Matrix sigma = sigma0;
    Vector run_mean = u;
    Matrix run_cov = Matrix::Zero(d, d);
    const int min_cov_samples = std::max(200, 20 * static_cast<int>(d));

    auto proposal_chol = [&](const Matrix& s) {
        Eigen::LLT<Matrix> llt(s + 1e-10 * Matrix::Identity(d, d));
        if (llt.info() != Eigen::Success)
            return Matrix(Matrix::Identity(d, d) * 1e-2);
        return Matrix(llt.matrixL());
    };
    Matrix chol = proposal_chol(sigma);

    ChainOutput out;
    out.draws.resize(keep, d);
    const long total = static_cast<long>(burn) + static_cast<long>(keep) * thin;
    int kept = 0;
    for (long t = 0; t < total; ++t) {
        const bool burning = t < burn;
        Vector z(d);
        for (Eigen::Index i = 0; i < d; ++i)
            z[i] = normal(rng);
        const Vector cand = u + std::exp(0.5 * log_lambda) * (chol * z);
        const double lp_cand = log_target(cand);
        const double log_alpha = std::isfinite(lp_cand) ? std::min(0.0, lp_cand - lp) : kNegInf;
        const bool accept = std::log(unif(rng)) < log_alpha;
        if (accept) {
            u = cand;
            lp = lp_cand;
        }
        if (burning) {
            // Robbins-Monro scale adaptation plus a running covariance estimate.
            const double gamma = 1.0 / std::pow(1.0 + static_cast<double>(t) / 50.0, 0.6);
            log_lambda += gamma * (std::exp(log_alpha) - target);
            const double w = 1.0 / static_cast<double>(t + 2);
            const Vector delta = u - run_mean;
            run_mean += w * delta;
            run_cov = (1.0 - w) * run_cov + w * (1.0 - w) * delta * delta.transpose();
            if (t + 1 >= min_cov_samples && (t + 1) % 50 == 0) {
                sigma = run_cov;
                chol = proposal_chol(sigma);
            }
        } else {
            ++out.proposals;
            out.accepted += accept ? 1 : 0;
            if ((t - burn + 1) % thin == 0)
                out.draws.row(kept++) = box.to_theta(u).transpose();
        }
    }
    out.scale = std::exp(log_lambda);
    return out;
}

// ---------------------------------------------------------------------------
// Small tanh MLP used by the validity classifier.

struct Mlp {
    std::vector<Matrix> w;
    std::vector<Vector> b;

    Matrix forward(const Matrix& in, std::vector<Matrix>* acts) const
    {
        Matrix a = in;
        if (acts)
            acts->assign(1, a);
        for (std::size_t l = 0; l < w.size(); ++l) {
            Matrix z = w[l] * a;
            z.colwise() += b[l];
            if (l + 1 < w.size())
                z = tanh_activation(z);
            a = std::move(z);
            if (acts && l + 1 < w.size())
                acts->push_back(a);
        }
        return a;
    }
};

// Mean softmax cross-entropy and its gradient for 2-class logits.
double classifier_loss(const Mlp& net, const Matrix& x_cols, const Vector& y, Mlp* grad)
{
    std::vector<Matrix> acts;
    const Matrix logits = net.forward(x_cols, grad ? &acts : nullptr);
    const auto n = x_cols.cols();
    Matrix dz(2, n);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = std::max(logits(0, i), logits(1, i));
        const double lse = m + std::log(std::exp(logits(0, i) - m) + std::exp(logits(1, i) - m));
        const int label = y[i] > 0.5 ? 1 : 0;
        loss -= logits(label, i) - lse;
        for (int c = 0; c < 2; ++c)
            dz(c, i) = (std::exp(logits(c, i) - lse) - (c == label ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    if (grad) {
        for (std::size_t l = net.w.size(); l-- > 0;) {
            grad->w[l] = dz * acts[l].transpose();
            grad->b[l] = dz.rowwise().sum();
            if (l > 0) {
                Matrix da = net.w[l].transpose() * dz;
                dz = da.array() * (1.0 - acts[l].array().square());
            }
        }
    }
    return loss / static_cast<double>(n);
}

} // namespace

// ---------------------------------------------------------------------------

double CalibrationModel::probability(const Eigen::Ref<const Vector>& theta) const
{
    return std::exp(log_probability(theta));
}

double CalibrationModel::log_probability(const Eigen::Ref<const Vector>& theta) const
{
    if (constant)
        return std::log(constant_rate);
    const Vector z = (theta - mean).cwiseQuotient(scale);
    return log_sigmoid(bias + weights.dot(z));
}

Vector CalibrationModel::direction() const
{
    if (constant)
        return Vector::Zero(mean.size());
    return weights.cwiseQuotient(scale);
}

nlohmann::json CalibrationModel::to_json() const
{
    return {{"mean", vec_json(mean)},       {"scale", vec_json(scale)},         {"weights", vec_json(weights)},
            {"bias", bias},                 {"constant", constant},             {"constant_rate", constant_rate},
            {"warning", warning}};
}

CalibrationModel CalibrationModel::from_json(const nlohmann::json& j)
{
    CalibrationModel c;
    c.mean = json_vec(j.at("mean"));
    c.scale = json_vec(j.at("scale"));
    c.weights = json_vec(j.at("weights"));
    c.bias = j.at("bias").get<double>();
    c.constant = j.at("constant").get<bool>();
    c.constant_rate = j.at("constant_rate").get<double>();
    c.warning = j.value("warning", "");
    return c;
}

CalibrationModel fit_calibration(const Matrix& thetas, const std::vector<bool>& valid)
{
    check_labels(thetas, valid, "fit_calibration");
    const auto n = thetas.rows();
    const auto p = thetas.cols();
    CalibrationModel model;
    column_moments(thetas, model.mean, model.scale);
    model.weights = Vector::Zero(p);

    const auto positives = static_cast<Eigen::Index>(std::count(valid.begin(), valid.end(), true));
    if (positives == 0 || positives == n) {
        model.constant = true;
        model.constant_rate = static_cast<double>(positives) / static_cast<double>(n);
        if (positives == 0)
            model.constant_rate = std::numeric_limits<double>::min();
        model.warning = "single-class data: calibration is the constant observed valid rate";
        return model;
    }

    // design matrix [1, z]
    Matrix z(n, p + 1);
    z.col(0).setOnes();
    for (Eigen::Index j = 0; j < p; ++j)
        z.col(j + 1) = (thetas.col(j).array() - model.mean[j]) / model.scale[j];
    Vector y(n);
    for (Eigen::Index i = 0; i < n; ++i)
        y[i] = valid[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    const double ridge = 1e-6 * static_cast<double>(n);
    Vector beta = Vector::Zero(p + 1);
    beta[0] = std::log(static_cast<double>(positives) / static_cast<double>(n - positives));
    for (int iter = 0; iter < 100; ++iter) {
        const Vector eta = z * beta;
        Vector mu(n), w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            mu[i] = sigmoid(eta[i]);
            w[i] = std::max(mu[i] * (1.0 - mu[i]), 1e-12);
        }
        Vector grad = z.transpose() * (mu - y);
        grad.tail(p) += ridge * beta.tail(p);
        Matrix hess = z.transpose() * w.asDiagonal() * z;
        hess.diagonal().tail(p).array() += ridge;
        hess(0, 0) += 1e-12;
        const Vector step = hess.ldlt().solve(grad);
        beta -= step;
        if (step.lpNorm<Eigen::Infinity>() < 1e-10)
            break;
    }
    if (!beta.allFinite())
        throw NumericalError("fit_calibration: logistic regression diverged");
    model.bias = beta[0];
    model.weights = beta.tail(p);
    return model;
}

// ---------------------------------------------------------------------------

Vector ValidityClassifier::probability_batch(const Matrix& thetas) const
{
    Mlp net{weights, biases};
    Matrix x = thetas.transpose();
    x.colwise() -= mean;
    x = scale.cwiseInverse().asDiagonal() * x;
    const Matrix logits = net.forward(x, nullptr);
    Vector p(thetas.rows());
    for (Eigen::Index i = 0; i < p.size(); ++i)
        p[i] = std::clamp(sigmoid(logits(1, i) - logits(0, i)), 1e-12, 1.0 - 1e-12);
    return p;
}

double ValidityClassifier::probability(const Eigen::Ref<const Vector>& theta) const
{
    return probability_batch(theta.transpose())[0];
}

nlohmann::json ValidityClassifier::to_json() const
{
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const Matrix& w = weights[l];
        layers.push_back({{"rows", w.rows()},
                          {"cols", w.cols()},
                          {"weights", std::vector<double>(w.data(), w.data() + w.size())},
                          {"bias", vec_json(biases[l])}});
    }
    return {{"layers", layers}, {"mean", vec_json(mean)}, {"scale", vec_json(scale)}, {"heldout_accuracy", heldout_accuracy}};
}

ValidityClassifier ValidityClassifier::from_json(const nlohmann::json& j)
{
    ValidityClassifier c;
    for (const auto& layer : j.at("layers")) {
        const auto w = layer.at("weights").get<std::vector<double>>();
        c.weights.push_back(Eigen::Map<const Matrix>(w.data(), layer.at("rows").get<Eigen::Index>(),
                                                     layer.at("cols").get<Eigen::Index>()));
        c.biases.push_back(json_vec(layer.at("bias")));
    }
    c.mean = json_vec(j.at("mean"));
    c.scale = json_vec(j.at("scale"));
    c.heldout_accuracy = j.value("heldout_accuracy", 0.0);
    return c;
}

ValidityClassifier train_validity_classifier(const Matrix& thetas, const std::vector<bool>& valid,
                                             std::uint64_t seed, const ClassifierConfig& config)
{
    check_labels(thetas, valid, "train_validity_classifier");
    const auto positives = std::count(valid.begin(), valid.end(), true);
    if (positives == 0 || positives == static_cast<long>(valid.size()))
        throw ConfigError("train_validity_classifier: both valid and invalid examples are required");
    if (config.batch_size < 1 || config.max_epochs < 1 || config.learning_rate <= 0.0 || config.patience < 1 ||
        config.validation_fraction < 0.0 || config.validation_fraction >= 1.0)
        throw ConfigError("train_validity_classifier: invalid training configuration");

    const auto n = thetas.rows();
    const auto p = thetas.cols();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "classifier"));
    std::shuffle(order.begin(), order.end(), rng);
    auto n_val = static_cast<Eigen::Index>(std::floor(config.validation_fraction * static_cast<double>(n)));
    if (n - n_val < 1)
        n_val = 0;
    const auto n_train = n - n_val;

    Matrix x_train(p, n_train), x_val(p, n_val);
    Vector y_train(n_train), y_val(n_val);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto src = order[static_cast<std::size_t>(i)];
        const double label = valid[static_cast<std::size_t>(src)] ? 1.0 : 0.0;
        if (i < n_train) {
            x_train.col(i) = thetas.row(src).transpose();
            y_train[i] = label;
        } else {
            x_val.col(i - n_train) = thetas.row(src).transpose();
            y_val[i - n_train] = label;
        }
    }

    ValidityClassifier out;
    column_moments(x_train.transpose(), out.mean, out.scale);
    auto standardize = [&](Matrix& x) {
        x.colwise() -= out.mean;
        x = out.scale.cwiseInverse().asDiagonal() * x;
    };
    standardize(x_train);
    standardize(x_val);

    Mlp net;
    std::vector<int> sizes{static_cast<int>(p)};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(2);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const double limit = std::sqrt(6.0 / (sizes[l] + sizes[l + 1]));
        std::uniform_real_distribution<double> init(-limit, limit);
        Matrix w(sizes[l + 1], sizes[l]);
        for (Eigen::Index k = 0; k < w.size(); ++k)
            w.data()[k] = init(rng);
        net.w.push_back(w);
        net.b.push_back(Vector::Zero(sizes[l + 1]));
    }

    Mlp grad = net, m1 = net, m2 = net;
    for (std::size_t l = 0; l < net.w.size(); ++l) {
        m1.w[l].setZero();
        m1.b[l].setZero();
        m2.w[l].setZero();
        m2.b[l].setZero();
    }
    const Matrix& x_monitor = n_val > 0 ? x_val : x_train;
    const Vector& y_monitor = n_val > 0 ? y_val : y_train;
    Mlp best = net;
    double best_loss = classifier_loss(net, x_monitor, y_monitor, nullptr);
    int since_best = 0;
    long step = 0;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_train));
    std::iota(idx.begin(), idx.end(), 0);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (Eigen::Index start = 0; start < n_train; start += config.batch_size) {
            const auto len = std::min<Eigen::Index>(config.batch_size, n_train - start);
            Matrix xb(p, len);
            Vector yb(len);
            for (Eigen::Index i = 0; i < len; ++i) {
                xb.col(i) = x_train.col(idx[static_cast<std::size_t>(start + i)]);
                yb[i] = y_train[idx[static_cast<std::size_t>(start + i)]];
            }
            classifier_loss(net, xb, yb, &grad);
            ++step;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            auto adam = [&](auto& param, const auto& g, auto& mm, auto& vv) {
                mm = b1 * mm + (1.0 - b1) * g;
                vv = b2 * vv + (1.0 - b2) * g.cwiseProduct(g);
                param.array() -= config.learning_rate * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
            };
            for (std::size_t l = 0; l < net.w.size(); ++l) {
                adam(net.w[l], grad.w[l], m1.w[l], m2.w[l]);
                adam(net.b[l], grad.b[l], m1.b[l], m2.b[l]);
            }
        }
        const double loss = classifier_loss(net, x_monitor, y_monitor, nullptr);
        if (!std::isfinite(loss))
            throw NumericalError("train_validity_classifier: loss diverged");
        if (loss < best_loss) {
            best_loss = loss;
            best = net;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }

    out.weights = best.w;
    out.biases = best.b;
    const Matrix logits = best.forward(x_monitor, nullptr);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < x_monitor.cols(); ++i)
        correct += ((logits(1, i) > logits(0, i)) == (y_monitor[i] > 0.5)) ? 1 : 0;
    out.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(x_monitor.cols());
    return out;
}

SampleSet restricted_prior_sample(const sim::BoxPrior& prior, const ValidityClassifier& classifier, int n,
                                  std::uint64_t seed)
{
    return restricted_prior_sample(
        prior, [&classifier](const Matrix& t) { return classifier.probability_batch(t); }, n, seed);
}

SampleSet restricted_prior_sample(const sim::BoxPrior& prior, const AcceptanceFn& accept, int n, std::uint64_t seed)
{
    if (n < 1)
        throw ConfigError("restricted_prior_sample: n must be >= 1");
    prior.validate();
    const int batch = std::max(1024, n);
    SampleSet out;
    out.theta.resize(n, prior.dim());
    long accepted = 0, proposed = 0;
    for (std::uint64_t b = 0; accepted < n; ++b) {
        const std::uint64_t s = derive_seed(seed, b);
        const Matrix props = sim::sample_prior(prior, batch, s);
        const Vector prob = accept(props);
        Rng rng(derive_seed(s, "accept"));
        std::uniform_real_distribution<double> unif;
        for (Eigen::Index i = 0; i < props.rows() && accepted < n; ++i) {
            ++proposed;
            if (unif(rng) < prob[i])
                out.theta.row(accepted++) = props.row(i);
        }
        if (proposed >= 100000 && static_cast<double>(accepted) / static_cast<double>(proposed) < 1e-4)
            throw SamplerFailure("restricted prior acceptance rate below 1e-4 after " + std::to_string(proposed) +
                                 " proposals");
    }
    out.metadata = {{"sampler", "restricted-prior"},
                    {"seed", seed},
                    {"proposals", proposed},
                    {"acceptance_rate", static_cast<double>(accepted) / static_cast<double>(proposed)}};
    return out;
}

// ---------------------------------------------------------------------------

UnnormalizedPosterior::UnnormalizedPosterior(std::shared_ptr<const mdn::MdnModel> model, sim::BoxPrior prior,
                                             const features::FeatureVector& x_obs, IndexSet keep,
                                             std::optional<CalibrationModel> calibration)
    : model_(std::move(model)), prior_(std::move(prior)), keep_(std::move(keep)), calibration_(std::move(calibration))
{
    if (!model_)
        throw ConfigError("posterior: model is required");
    prior_.validate();
    const auto& arch = model_->architecture();
    if (arch.param_dim != prior_.dim())
        throw DimensionError("posterior: model parameter dimension does not match the prior");
    if (x_obs.size() != arch.feature_dim)
        throw DimensionError("posterior: observation has " + std::to_string(x_obs.size()) + " features, model expects " +
                             std::to_string(arch.feature_dim));
    check_index_set(keep_, arch.feature_dim);
    x_obs_.resize(static_cast<Eigen::Index>(keep_.size()));
    for (std::size_t i = 0; i < keep_.size(); ++i) {
        const int j = keep_[i];
        if (!x_obs.valid[static_cast<std::size_t>(j)] || !std::isfinite(x_obs.values[j]))
            throw ConfigError("posterior: observed feature " + std::to_string(j) + " is invalid but kept");
        x_obs_[static_cast<Eigen::Index>(i)] = x_obs.values[j];
    }
    if (calibration_ && !calibration_->constant && calibration_->weights.size() != prior_.dim())
        throw DimensionError("posterior: calibration dimension does not match the prior");
}

double UnnormalizedPosterior::logpdf(const Eigen::Ref<const Vector>& theta) const
{
    if (theta.size() != dim())
        throw DimensionError("posterior_logpdf: theta has wrong dimension");
    return logpdf_batch(theta.transpose())[0];
}

Vector UnnormalizedPosterior::logpdf_batch(const Matrix& thetas) const
{
    if (thetas.cols() != dim())
        throw DimensionError("posterior_logpdf: theta has wrong dimension");
    constexpr Eigen::Index kChunk = 512;
    const auto n = thetas.rows();
    Vector out(n);
    const auto chunks = static_cast<std::size_t>((n + kChunk - 1) / kChunk);
    parallel_for(chunks, [&](std::size_t c) {
        const auto begin = static_cast<Eigen::Index>(c) * kChunk;
        const auto len = std::min(kChunk, n - begin);
        // rows outside the box are evaluated with a placeholder and discarded
        Matrix rows = thetas.middleRows(begin, len);
        std::vector<bool> inside(static_cast<std::size_t>(len));
        for (Eigen::Index i = 0; i < len; ++i) {
            inside[static_cast<std::size_t>(i)] = rows.row(i).allFinite() && prior_.contains(rows.row(i).transpose());
            if (!inside[static_cast<std::size_t>(i)])
                rows.row(i) = 0.5 * (prior_.lower + prior_.upper).transpose();
        }
        const Vector ll = model_->marginal_log_prob_batch(rows, keep_, x_obs_);
        const double lp_prior = -prior_.log_volume();
        for (Eigen::Index i = 0; i < len; ++i) {
            double v = kNegInf;
            if (inside[static_cast<std::size_t>(i)]) {
                v = ll[i] + lp_prior;
                if (calibration_)
                    v += calibration_->log_probability(rows.row(i).transpose());
            }
            out[begin + i] = v;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json SamplerConfig::to_json() const
{
    if (kind == SamplerKind::Rejection)
        return {{"sampler", "rejection"},
                {"envelope_draws", rejection.envelope_draws},
                {"log_safety", rejection.log_safety},
                {"batch", rejection.batch},
                {"max_proposals", rejection.max_proposals}};
    if (kind == SamplerKind::Smc)
        return {{"sampler", "smc"},
                {"min_particles", smc.min_particles},
                {"ess_fraction", smc.ess_fraction},
                {"target_acceptance", smc.target_acceptance},
                {"min_moves", smc.min_moves},
                {"max_moves", smc.max_moves},
                {"final_moves", smc.final_moves},
                {"unique_fraction", smc.unique_fraction},
                {"max_final_moves", smc.max_final_moves}};
    return {{"sampler", "mcmc"},
            {"chains", mcmc.chains},
            {"thin", mcmc.thin},
            {"burn_fraction", mcmc.burn_fraction},
            {"target_acceptance", mcmc.target_acceptance},
            {"init_draws", mcmc.init_draws}};
}

SampleSet rejection_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const RejectionConfig& config)
{
    if (n < 1)
        throw ConfigError("rejection_sample: n must be >= 1");
    if (config.envelope_draws < 1 || config.batch < 1 || config.log_safety < 0.0)
        throw ConfigError("rejection_sample: invalid configuration");

    const Matrix env = sim::sample_prior(post.prior(), config.envelope_draws, derive_seed(seed, "envelope"));
    const double env_max = post.logpdf_batch(env).maxCoeff();
    if (!std::isfinite(env_max))
        throw SamplerFailure("rejection_sample: posterior density is zero on every envelope draw; use MCMC");
    const double log_m = env_max + config.log_safety;

    SampleSet out;
    out.theta.resize(n, post.dim());
    long accepted = 0, proposed = 0, violations = 0;
    double max_excess = 0.0;
    for (std::uint64_t b = 0; accepted < n; ++b) {
        const std::uint64_t s = derive_seed(seed, b);
        const Matrix props = sim::sample_prior(post.prior(), static_cast<int>(config.batch), s);
        const Vector lp = post.logpdf_batch(props);
        Rng rng(derive_seed(s, "accept"));
        std::uniform_real_distribution<double> unif;
        for (Eigen::Index i = 0; i < props.rows() && accepted < n; ++i) {
            ++proposed;
            const double u = unif(rng);
            if (lp[i] > log_m) {
                ++violations;
                max_excess = std::max(max_excess, lp[i] - log_m);
            }
            if (std::log(u) < lp[i] - log_m)
                out.theta.row(accepted++) = props.row(i);
        }
        const double rate = static_cast<double>(accepted) / static_cast<double>(proposed);
        if ((proposed >= 1'000'000 && rate < 1e-6) || (proposed >= config.max_proposals && accepted < n))
            throw SamplerFailure("rejection_sample: envelope failure, acceptance rate " + std::to_string(rate) +
                                 " after " + std::to_string(proposed) + " proposals; use MCMC");
    }
    out.metadata = {{"sampler", "rejection"},
                    {"seed", seed},
                    {"log_envelope", log_m},
                    {"proposals", proposed},
                    {"acceptance_rate", static_cast<double>(accepted) / static_cast<double>(proposed)},
                    {"envelope_violations", violations},
                    {"max_envelope_excess", max_excess}};
    return out;
}

Vector gelman_rubin(const std::vector<Matrix>& chains)
{
    if (chains.size() < 2)
        throw ConfigError("gelman_rubin: need at least two chains");
    const auto n = chains.front().rows();
    const auto d = chains.front().cols();
    if (n < 2)
        throw ConfigError("gelman_rubin: need at least two draws per chain");
    const auto m = static_cast<double>(chains.size());
    Vector rhat(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        Vector means(static_cast<Eigen::Index>(chains.size()));
        double w = 0.0;
        for (std::size_t c = 0; c < chains.size(); ++c) {
            const auto col = chains[c].col(j);
            means[static_cast<Eigen::Index>(c)] = col.mean();
            w += (col.array() - col.mean()).square().sum() / static_cast<double>(n - 1);
        }
        w /= m;
        const double b = static_cast<double>(n) * (means.array() - means.mean()).square().sum() / (m - 1.0);
        const double var = (static_cast<double>(n - 1) / static_cast<double>(n)) * w + b / static_cast<double>(n);
        rhat[j] = w > 0.0 ? std::sqrt(var / w) : (b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
    }
    return rhat;
}

SampleSet mcmc_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const McmcConfig& config)
{
    if (n < 1)
        throw ConfigError("mcmc_sample: n must be >= 1");
    if (config.chains < 2)
        throw ConfigError("mcmc_sample: at least two chains are required");
    if (config.thin < 1 || config.burn_fraction < 0.0 || config.init_draws < 1 || config.target_acceptance <= 0.0 ||
        config.target_acceptance >= 1.0)
        throw ConfigError("mcmc_sample: invalid configuration");

    const auto d = post.dim();
    LogitBox box{post.prior().lower, post.prior().upper - post.prior().lower};

    // Importance-resampled starting points and an initial proposal covariance.
    const Matrix init = sim::sample_prior(post.prior(), config.init_draws, derive_seed(seed, "init"));
    const Vector lp = post.logpdf_batch(init);
    const double lp_max = lp.maxCoeff();
    if (!std::isfinite(lp_max))
        throw SamplerFailure("mcmc_sample: posterior density is zero on every initialization draw");
    Vector w = (lp.array() - lp_max).exp();
    w /= w.sum();
    Matrix u_init(init.rows(), d);
    for (Eigen::Index i = 0; i < init.rows(); ++i)
        u_init.row(i) = box.to_u(init.row(i).transpose()).transpose();
    const Vector u_mean = u_init.transpose() * w;
    Matrix sigma0 = Matrix::Zero(d, d);
    for (Eigen::Index i = 0; i < init.rows(); ++i) {
        const Vector delta = u_init.row(i).transpose() - u_mean;
        sigma0 += w[i] * delta * delta.transpose();
    }
    sigma0 += 1e-4 * Matrix::Identity(d, d);

    const int per_chain = (n + config.chains - 1) / config.chains;
    const long chain_steps = static_cast<long>(per_chain) * config.thin;
    const int burn = static_cast<int>(std::max<long>(static_cast<long>(std::ceil(config.burn_fraction * chain_steps)),
                                                     std::max(200L, 20L * d)));

    std::vector<ChainOutput> outputs(static_cast<std::size_t>(config.chains));
    parallel_for(outputs.size(), [&](std::size_t c) {
        const std::uint64_t cs = derive_seed(derive_seed(seed, "chain"), c);
        Rng rng(derive_seed(cs, "start"));
        std::discrete_distribution<Eigen::Index> pick(w.data(), w.data() + w.size());
        const Vector start = u_init.row(pick(rng)).transpose();
        outputs[c] = run_chain(post, box, start, sigma0, per_chain, config.thin, burn, config.target_acceptance, cs);
    });

    SampleSet out;
    out.theta.resize(n, d);
    std::vector<Matrix> chains;
    nlohmann::json acceptance = nlohmann::json::array();
    nlohmann::json scales = nlohmann::json::array();
    Eigen::Index row = 0;
    for (auto& o : outputs) {
        acceptance.push_back(static_cast<double>(o.accepted) / static_cast<double>(std::max(1L, o.proposals)));
        scales.push_back(o.scale);
        for (Eigen::Index i = 0; i < o.draws.rows() && row < n; ++i)
            out.theta.row(row++) = o.draws.row(i);
        chains.push_back(std::move(o.draws));
    }
    nlohmann::json rhat_json = nlohmann::json::array();
    bool converged = true;
    if (per_chain >= 2) {
        const Vector rhat = gelman_rubin(chains);
        for (Eigen::Index j = 0; j < rhat.size(); ++j) {
            rhat_json.push_back(rhat[j]);
            converged = converged && rhat[j] <= 1.2;
        }
    }
    // lag-1 autocorrelation of the first chain per dimension
    nlohmann::json autocorr = nlohmann::json::array();
    if (per_chain >= 3) {
        const Matrix& c0 = chains.front();
        for (Eigen::Index j = 0; j < d; ++j) {
            const Vector x = c0.col(j).array() - c0.col(j).mean();
            const double denom = x.squaredNorm();
            autocorr.push_back(denom > 0.0 ? x.head(x.size() - 1).dot(x.tail(x.size() - 1)) / denom : 0.0);
        }
    }
    out.metadata = {{"sampler", "mcmc"},
                    {"seed", seed},
                    {"chains", config.chains},
                    {"thin", config.thin},
                    {"burn_in", burn},
                    {"draws_per_chain", per_chain},
                    {"acceptance_rate", acceptance},
                    {"proposal_scale", scales},
                    {"rhat", rhat_json},
                    {"lag1_autocorrelation", autocorr}};
    if (!converged)
        out.metadata["warning"] = "R-hat above 1.2 on at least one dimension";
    return out;
}

namespace {

// ESS of weights proportional to exp(delta * ll), relative to the particle count.
double relative_ess(const Vector& ll, double delta)
{
    double mx = kNegInf;
    for (Eigen::Index i = 0; i < ll.size(); ++i)
        if (std::isfinite(ll[i]))
            mx = std::max(mx, delta * ll[i]);
    if (!std::isfinite(mx))
        return 0.0;
    double s = 0.0, s2 = 0.0;
    for (Eigen::Index i = 0; i < ll.size(); ++i) {
        if (!std::isfinite(ll[i]))
            continue;
        const double w = std::exp(delta * ll[i] - mx);
        s += w;
        s2 += w * w;
    }
    return s * s / s2 / static_cast<double>(ll.size());
}

std::vector<Eigen::Index> systematic_resample(const Vector& w, Rng& rng)
{
    const auto n = w.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    const double u0 = std::uniform_real_distribution<double>(0.0, 1.0)(rng) / static_cast<double>(n);
    double cum = w[0];
    Eigen::Index j = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double target = u0 + static_cast<double>(i) / static_cast<double>(n);
        while (cum < target && j < n - 1)
            cum += w[++j];
        idx[static_cast<std::size_t>(i)] = j;
    }
    return idx;
}

double unique_fraction(const Matrix& u)
{
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(u.rows()), std::vector<double>(u.cols()));
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        for (Eigen::Index j = 0; j < u.cols(); ++j)
            rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = u(i, j);
    std::sort(rows.begin(), rows.end());
    const auto distinct = std::unique(rows.begin(), rows.end()) - rows.begin();
    return static_cast<double>(distinct) / static_cast<double>(u.rows());
}

} // namespace

SampleSet smc_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const SmcConfig& config)
{
    if (n < 1)
        throw ConfigError("smc_sample: n must be >= 1");
    if (config.ess_fraction <= 0.0 || config.ess_fraction >= 1.0 || config.target_acceptance <= 0.0 ||
        config.target_acceptance >= 1.0 || config.min_moves < 1 || config.max_moves < config.min_moves ||
        config.max_final_moves < 0 || config.final_moves < 0 || config.unique_fraction <= 0.0 || config.unique_fraction > 1.0)
        throw ConfigError("smc_sample: invalid configuration");

    const auto d = post.dim();
    const auto np = static_cast<Eigen::Index>(std::max(n, config.min_particles));
    LogitBox box{post.prior().lower, post.prior().upper - post.prior().lower};

    Matrix theta = sim::sample_prior(post.prior(), static_cast<int>(np), derive_seed(seed, "init"));
    Vector ll = post.logpdf_batch(theta);
    if (!ll.array().isFinite().any())
        throw SamplerFailure("smc_sample: posterior density is zero on every initial particle");
    Matrix u(np, d);
    Vector jac(np);
    for (Eigen::Index i = 0; i < np; ++i) {
        u.row(i) = box.to_u(theta.row(i).transpose()).transpose();
        jac[i] = box.log_jacobian(u.row(i).transpose());
    }

    double beta = 0.0;
    double log_scale = 0.0;
    std::vector<double> temperatures{0.0};
    nlohmann::json acceptance = nlohmann::json::array();
    nlohmann::json moves_json = nlohmann::json::array();
    long evaluations = np;

    // One batched Metropolis sweep at temperature beta; returns the acceptance rate.
    auto sweep = [&](Rng& rng, const Matrix& chol) {
        std::normal_distribution<double> normal;
        std::uniform_real_distribution<double> unif;
        Matrix cand(np, d);
        for (Eigen::Index i = 0; i < np; ++i) {
            Vector z(d);
            for (Eigen::Index j = 0; j < d; ++j)
                z[j] = normal(rng);
            cand.row(i) = u.row(i) + std::exp(log_scale) * (chol * z).transpose();
        }
        Matrix cand_theta(np, d);
        Vector cand_jac(np);
        for (Eigen::Index i = 0; i < np; ++i) {
            cand_theta.row(i) = box.to_theta(cand.row(i).transpose()).transpose();
            cand_jac[i] = box.log_jacobian(cand.row(i).transpose());
        }
        const Vector cand_ll = post.logpdf_batch(cand_theta);
        evaluations += np;
        long accepted = 0;
        for (Eigen::Index i = 0; i < np; ++i) {
            const double r = unif(rng);
            if (!std::isfinite(cand_ll[i]))
                continue;
            const double cur = std::isfinite(ll[i]) ? beta * ll[i] : kNegInf;
            const double log_alpha = beta * cand_ll[i] + cand_jac[i] - cur - jac[i];
            if (std::log(r) < log_alpha) {
                u.row(i) = cand.row(i);
                theta.row(i) = cand_theta.row(i);
                ll[i] = cand_ll[i];
                jac[i] = cand_jac[i];
                ++accepted;
            }
        }
        return static_cast<double>(accepted) / static_cast<double>(np);
    };

    auto proposal_chol = [&]() {
        const Vector mean = u.colwise().mean().transpose();
        const Matrix c = u.rowwise() - mean.transpose();
        Matrix cov = c.transpose() * c / static_cast<double>(np - 1);
        cov *= 2.38 * 2.38 / static_cast<double>(d);
        cov += 1e-8 * Matrix::Identity(d, d);
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success)
            return Matrix(Matrix::Identity(d, d) * 1e-2);
        return Matrix(llt.matrixL());
    };

    for (std::uint64_t stage = 0; beta < 1.0; ++stage) {
        const std::uint64_t ss = derive_seed(derive_seed(seed, "stage"), stage);
        // Next temperature by bisection on the relative ESS.
        double next = 1.0;
        if (relative_ess(ll, 1.0 - beta) < config.ess_fraction) {
            double lo = 0.0, hi = 1.0 - beta;
            for (int it = 0; it < 60; ++it) {
                const double mid = 0.5 * (lo + hi);
                (relative_ess(ll, mid) >= config.ess_fraction ? lo : hi) = mid;
            }
            next = beta + std::max(lo, 1e-12);
        }
        const double delta = next - beta;
        Vector w(np);
        double mx = kNegInf;
        for (Eigen::Index i = 0; i < np; ++i)
            mx = std::max(mx, std::isfinite(ll[i]) ? delta * ll[i] : kNegInf);
        for (Eigen::Index i = 0; i < np; ++i)
            w[i] = std::isfinite(ll[i]) ? std::exp(delta * ll[i] - mx) : 0.0;
        w /= w.sum();
        beta = next;
        temperatures.push_back(beta);

        Rng rng(ss);
        const auto idx = systematic_resample(w, rng);
        Matrix u2(np, d), t2(np, d);
        Vector l2(np), j2(np);
        for (Eigen::Index i = 0; i < np; ++i) {
            const auto k = idx[static_cast<std::size_t>(i)];
            u2.row(i) = u.row(k);
            t2.row(i) = theta.row(k);
            l2[i] = ll[k];
            j2[i] = jac[k];
        }
        u = std::move(u2);
        theta = std::move(t2);
        ll = std::move(l2);
        jac = std::move(j2);

        // Move until each particle has moved at least once with probability ~0.99.
        const Matrix chol = proposal_chol();
        int moves = 0;
        double acc_sum = 0.0;
        int needed = config.min_moves;
        while (moves < needed) {
            const double acc = sweep(rng, chol);
            acc_sum += acc;
            ++moves;
            log_scale += acc - config.target_acceptance;
            const double mean_acc = std::clamp(acc_sum / moves, 1e-3, 0.999);
            needed = std::clamp(static_cast<int>(std::ceil(std::log(0.01) / std::log1p(-mean_acc))), config.min_moves,
                                config.max_moves);
        }
        acceptance.push_back(acc_sum / moves);
        moves_json.push_back(moves);
    }

    // Rejuvenate until the particles are distinct.
    Rng rng(derive_seed(seed, "final"));
    int final_moves = 0;
    double uniq = unique_fraction(u);
    while (final_moves < config.final_moves ||
           (uniq < config.unique_fraction && final_moves < config.final_moves + config.max_final_moves)) {
        const Matrix chol = proposal_chol();
        const double acc = sweep(rng, chol);
        log_scale += acc - config.target_acceptance;
        ++final_moves;
        uniq = unique_fraction(u);
    }

    SampleSet out;
    out.theta = theta.topRows(n);
    out.metadata = {{"sampler", "smc"},
                    {"seed", seed},
                    {"particles", np},
                    {"stages", static_cast<int>(temperatures.size()) - 1},
                    {"temperatures", temperatures},
                    {"acceptance_rate", acceptance},
                    {"moves", moves_json},
                    {"final_moves", final_moves},
                    {"unique_fraction", uniq},
                    {"evaluations", evaluations}};
    if (uniq < config.unique_fraction)
        out.metadata["warning"] = "particles not fully rejuvenated";
    return out;
}

SampleSet sample_posterior(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const SamplerConfig& config)
{
    switch (config.kind) {
    case SamplerKind::Rejection:
        return rejection_sample(post, n, seed, config.rejection);
    case SamplerKind::Mcmc:
        return mcmc_sample(post, n, seed, config.mcmc);
    case SamplerKind::Smc:
        return smc_sample(post, n, seed, config.smc);
    }
    throw ConfigError("sample_posterior: unknown sampler");
}

// ---------------------------------------------------------------------------

Simulator lgm_simulator(const sim::LgmConfig& config)
{
    config.validate();
    return [config](const Eigen::Ref<const Vector>& theta, std::uint64_t seed) {
        return features::lgm_features(sim::simulate_lgm(config, theta, seed));
    };
}

Simulator hh_simulator(const sim::HhConstants& constants, const sim::StimulusProtocol& stim,
                       const features::FeatureSet& set)
{
    stim.validate();
    features::validate_feature_set(set);
    return [constants, stim, set](const Eigen::Ref<const Vector>& theta, std::uint64_t) {
        try {
            const auto trace = sim::simulate_hh(sim::HhParams::from_vector(theta), constants, stim);
            return features::extract_features(trace, stim, set);
        } catch (const sim::SimulationDiverged&) {
            features::FeatureVector fv;
            fv.values = Vector::Constant(static_cast<Eigen::Index>(set.size()), std::numeric_limits<double>::quiet_NaN());
            fv.valid.assign(set.size(), false);
            fv.names = set;
            return fv;
        }
    };
}

Dataset generate_training_set(const Simulator& simulator, const Matrix& thetas, std::uint64_t seed,
                              const std::vector<std::string>& param_names, std::size_t first_index)
{
    const auto n = thetas.rows();
    if (n < 1)
        throw ConfigError("generate_training_set: need at least one parameter row");
    if (static_cast<Eigen::Index>(param_names.size()) != thetas.cols())
        throw DimensionError("generate_training_set: parameter names do not match theta width");

    std::vector<features::FeatureVector> results(static_cast<std::size_t>(n));
    parallel_for(results.size(), [&](std::size_t i) {
        results[i] = simulator(thetas.row(static_cast<Eigen::Index>(i)).transpose(), derive_seed(seed, first_index + i));
    });

    Dataset ds;
    ds.theta = thetas;
    ds.param_names = param_names;
    ds.feature_names = results.front().names;
    const auto d = static_cast<Eigen::Index>(ds.feature_names.size());
    ds.x.resize(n, d);
    ds.valid.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& fv = results[static_cast<std::size_t>(i)];
        if (fv.size() != d)
            throw DimensionError("generate_training_set: simulator returned inconsistent feature counts");
        bool ok = true;
        for (Eigen::Index j = 0; j < d; ++j) {
            const bool v = fv.valid[static_cast<std::size_t>(j)] && std::isfinite(fv.values[j]);
            ds.x(i, j) = v ? fv.values[j] : std::numeric_limits<double>::quiet_NaN();
            ok = ok && v;
        }
        ds.valid[static_cast<std::size_t>(i)] = ok;
    }
    if (ds.valid_count() == 0)
        throw NumericalError("generate_training_set: no simulation produced valid features");
    ds.metadata["seed"] = seed;
    return ds;
}

} // namespace fslm::inference
