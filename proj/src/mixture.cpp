#include "fslm/mixture.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>

namespace fslm::mdn {

namespace {

void check_shapes(const Vector& weights, const Matrix& means, const std::vector<Matrix>& mats)
{
    const auto k = weights.size();
    const auto d = means.cols();
    if (k == 0 || means.rows() != k || static_cast<Eigen::Index>(mats.size()) != k)
        throw DimensionError("mixture: weights, means and covariances disagree on K");
    for (const auto& m : mats)
        if (m.rows() != d || m.cols() != d)
            throw DimensionError("mixture: covariance block has wrong shape");
}

} // namespace

GaussianMixture GaussianMixture::from_cholesky(Vector weights, Matrix means, std::vector<Matrix> chol_factors)
{
    check_shapes(weights, means, chol_factors);
    GaussianMixture mix;
    mix.covariances.reserve(chol_factors.size());
    for (auto& l : chol_factors) {
        l.triangularView<Eigen::StrictlyUpper>().setZero();
        mix.covariances.push_back(l * l.transpose());
    }
    mix.weights = std::move(weights);
    mix.means = std::move(means);
    mix.chol_factors = std::move(chol_factors);
    return mix;
}

GaussianMixture GaussianMixture::from_covariances(Vector weights, Matrix means, std::vector<Matrix> covariances)
{
    check_shapes(weights, means, covariances);
    GaussianMixture mix;
    mix.chol_factors.reserve(covariances.size());
    for (const auto& cov : covariances) {
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success)
            throw NumericalError("mixture: covariance is not positive definite");
        mix.chol_factors.push_back(llt.matrixL());
    }
    mix.weights = std::move(weights);
    mix.means = std::move(means);
    mix.covariances = std::move(covariances);
    return mix;
}

double gaussian_log_density(const Eigen::Ref<const Vector>& mean, const Matrix& chol,
                            const Eigen::Ref<const Vector>& x)
{
    const Vector z = chol.triangularView<Eigen::Lower>().solve(x - mean);
    const double log_det_half = chol.diagonal().array().log().sum();
    return -0.5 * z.squaredNorm() - log_det_half -
           0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

double log_prob(const GaussianMixture& mix, const Eigen::Ref<const Vector>& x)
{
    if (x.size() != mix.dim())
        throw DimensionError("log_prob: x has dimension " + std::to_string(x.size()) + ", mixture has " +
                             std::to_string(mix.dim()));
    const int k = mix.components();
    std::vector<double> terms(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c)
        terms[static_cast<std::size_t>(c)] = std::log(std::max(mix.weights[c], kWeightFloor)) +
                                             gaussian_log_density(mix.means.row(c).transpose(),
                                                                  mix.chol_factors[static_cast<std::size_t>(c)], x);
    return log_sum_exp(terms.data(), k);
}

GaussianMixture marginalize(const GaussianMixture& mix, const IndexSet& keep)
{
    check_index_set(keep, mix.dim());
    if (keep == all_indices(mix.dim()))
        return mix;

    const auto k = mix.components();
    const auto d = static_cast<Eigen::Index>(keep.size());
    Matrix means(k, d);
    std::vector<Matrix> covs;
    covs.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        const Matrix& full = mix.covariances[static_cast<std::size_t>(c)];
        Matrix block(d, d);
        for (Eigen::Index i = 0; i < d; ++i) {
            means(c, i) = mix.means(c, keep[static_cast<std::size_t>(i)]);
            for (Eigen::Index j = 0; j < d; ++j)
                block(i, j) = full(keep[static_cast<std::size_t>(i)], keep[static_cast<std::size_t>(j)]);
        }
        covs.push_back(std::move(block));
    }
    return GaussianMixture::from_covariances(mix.weights, std::move(means), std::move(covs));
}

Matrix sample(const GaussianMixture& mix, int n, std::uint64_t seed)
{
    Rng rng(seed);
    std::discrete_distribution<int> pick(mix.weights.data(), mix.weights.data() + mix.weights.size());
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(n, mix.dim());
    Vector eps(mix.dim());
    for (int i = 0; i < n; ++i) {
        const int c = pick(rng);
        for (int j = 0; j < mix.dim(); ++j)
            eps[j] = normal(rng);
        out.row(i) = (mix.means.row(c).transpose() + mix.chol_factors[static_cast<std::size_t>(c)] * eps).transpose();
    }
    return out;
}

} // namespace fslm::mdn
