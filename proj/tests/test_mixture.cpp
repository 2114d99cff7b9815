#include "helpers.hpp"
#include "oracles.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>

using namespace fslm;

namespace {

double direct_log_density(const mdn::GaussianMixture& mix, const Vector& x)
{
    double p = 0.0;
    for (int k = 0; k < mix.components(); ++k) {
        const Matrix& c = mix.covariances[static_cast<std::size_t>(k)];
        const Vector d = x - mix.means.row(k).transpose();
        p += mix.weights[k] * std::exp(-0.5 * d.dot(c.inverse() * d)) /
             std::sqrt(std::pow(2.0 * std::numbers::pi, mix.dim()) * c.determinant());
    }
    return std::log(p);
}

} // namespace

TEST_SUITE("mixture")
{
    TEST_CASE("log_prob matches the textbook density")
    {
        Rng rng(1);
        for (int trial = 0; trial < 20; ++trial) {
            const auto mix = testing::random_mixture(1 + trial % 5, 1 + trial % 4, rng);
            const Matrix xs = mdn::sample(mix, 5, static_cast<std::uint64_t>(trial));
            for (Eigen::Index i = 0; i < xs.rows(); ++i) {
                const Vector x = xs.row(i).transpose();
                CHECK(mdn::log_prob(mix, x) == doctest::Approx(direct_log_density(mix, x)).epsilon(1e-10));
            }
        }
    }

    TEST_CASE("marginal density equals quadrature of the joint")
    {
        Rng rng(2);
        for (int trial = 0; trial < 12; ++trial) {
            const int D = 2 + trial % 3;
            const auto mix = testing::random_mixture(1 + trial % 4, D, rng);
            IndexSet keep = {D - 1};
            if (trial % 2 && D > 2)
                keep = {2, 0};
            const auto marg = mdn::marginalize(mix, keep);
            const Matrix xs = mdn::sample(mix, 4, 100 + static_cast<std::uint64_t>(trial));
            for (Eigen::Index i = 0; i < xs.rows(); ++i) {
                Vector x(static_cast<Eigen::Index>(keep.size()));
                for (std::size_t j = 0; j < keep.size(); ++j)
                    x[static_cast<Eigen::Index>(j)] = xs(i, keep[j]);
                const double ref = oracle::quadrature_marginal(mix, keep, x);
                CHECK(std::exp(mdn::log_prob(marg, x)) == doctest::Approx(ref).epsilon(1e-8));
            }
        }
    }

    TEST_CASE("nested marginalization equals a single one bit for bit")
    {
        Rng rng(3);
        const auto mix = testing::random_mixture(4, 4, rng);
        const auto once = mdn::marginalize(mix, {0, 2});
        const auto twice = mdn::marginalize(mdn::marginalize(mix, {0, 2, 3}), {0, 1});
        CHECK(once.means == twice.means);
        for (int k = 0; k < 4; ++k)
            CHECK(once.chol_factors[static_cast<std::size_t>(k)] == twice.chol_factors[static_cast<std::size_t>(k)]);
        CHECK(once.weights == twice.weights);
    }

    TEST_CASE("marginalizing to all coordinates is the identity")
    {
        Rng rng(4);
        const auto mix = testing::random_mixture(3, 3, rng);
        const auto same = mdn::marginalize(mix, all_indices(3));
        Vector x(3);
        x << 0.1, -0.4, 1.2;
        CHECK(mdn::log_prob(same, x) == doctest::Approx(mdn::log_prob(mix, x)).epsilon(1e-14));
        CHECK_THROWS(mdn::marginalize(mix, {}));
        CHECK_THROWS(mdn::marginalize(mix, {3}));
    }

    TEST_CASE("sample moments match the mixture")
    {
        Rng rng(5);
        const auto mix = testing::random_mixture(3, 2, rng);
        const int n = 200000;
        const Matrix s = mdn::sample(mix, n, 9);
        const Vector mean = mix.means.transpose() * mix.weights;
        Matrix cov = Matrix::Zero(2, 2);
        for (int k = 0; k < 3; ++k) {
            const Vector d = mix.means.row(k).transpose() - mean;
            cov += mix.weights[k] * (mix.covariances[static_cast<std::size_t>(k)] + d * d.transpose());
        }
        const Vector got = s.colwise().mean().transpose();
        for (int j = 0; j < 2; ++j)
            CHECK(std::abs(got[j] - mean[j]) < 5.0 * std::sqrt(cov(j, j) / n));
        const Matrix c = s.rowwise() - got.transpose();
        const Matrix got_cov = c.transpose() * c / (n - 1.0);
        CHECK((got_cov - cov).cwiseAbs().maxCoeff() < 0.05 * cov.cwiseAbs().maxCoeff());
        CHECK(s == mdn::sample(mix, n, 9));
    }

    TEST_CASE("non-positive-definite covariance is rejected")
    {
        Matrix bad(2, 2);
        bad << 1, 2, 2, 1;
        CHECK_THROWS_AS(mdn::GaussianMixture::from_covariances(Vector::Ones(1), Matrix::Zero(1, 2), {bad}),
                        NumericalError);
    }

    TEST_CASE("tiny weights do not produce NaN")
    {
        Rng rng(6);
        auto mix = testing::random_mixture(2, 2, rng);
        mix.weights << 1.0, 0.0;
        const double lp = mdn::log_prob(mix, Vector::Constant(2, 50.0));
        CHECK(std::isfinite(lp));
    }
}
