#pragma once

// Reference computations that avoid the library code paths they check.

#include "fslm/mixture.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <cmath>
#include <functional>
#include <numbers>

namespace fslm::oracle {

/// Mixture marginal density at `x_keep` by integrating each component's joint
/// density over the dropped coordinates. The integration variables are shifted
/// and scaled by the component's conditional from its precision matrix, so each
/// axis sees a unit-width bump on [-10, 10], where two 20-point Gauss-Legendre
/// panels are accurate to ~1e-12. A wrong shift shows up as quadrature error.
inline double quadrature_marginal(const mdn::GaussianMixture& mix, const IndexSet& keep, const Vector& x_keep)
{
    const int D = mix.dim();
    IndexSet drop;
    for (int j = 0; j < D; ++j)
        if (std::find(keep.begin(), keep.end(), j) == keep.end())
            drop.push_back(j);
    const auto m = static_cast<int>(drop.size());
    constexpr double half_width = 10.0;
    using Rule = boost::math::quadrature::gauss<double, 20>;

    double total = 0.0;
    for (int k = 0; k < mix.components(); ++k) {
        const Matrix& cov = mix.covariances[static_cast<std::size_t>(k)];
        const Matrix prec = cov.inverse();
        const double log_norm = -0.5 * (D * std::log(2.0 * std::numbers::pi) + std::log(cov.determinant()));
        const Vector mu = mix.means.row(k).transpose();

        Vector full = Vector::Zero(D);
        for (std::size_t i = 0; i < keep.size(); ++i)
            full[keep[i]] = x_keep[static_cast<Eigen::Index>(i)];

        Matrix p_dd(m, m), p_dk(m, static_cast<Eigen::Index>(keep.size()));
        Vector dx(static_cast<Eigen::Index>(keep.size()));
        for (int a = 0; a < m; ++a) {
            for (int b = 0; b < m; ++b)
                p_dd(a, b) = prec(drop[a], drop[b]);
            for (std::size_t b = 0; b < keep.size(); ++b)
                p_dk(a, static_cast<Eigen::Index>(b)) = prec(drop[a], keep[b]);
        }
        for (std::size_t b = 0; b < keep.size(); ++b)
            dx[static_cast<Eigen::Index>(b)] = full[keep[b]] - mu[keep[b]];
        Vector centre(m);
        for (int a = 0; a < m; ++a)
            centre[a] = mu[drop[a]];
        centre -= p_dd.ldlt().solve(p_dk * dx);
        const Matrix scale = Eigen::LLT<Matrix>(p_dd.inverse()).matrixL();
        const double log_det_scale = scale.diagonal().array().log().sum();

        auto joint = [&](const Vector& u) {
            Vector x = full;
            const Vector z = centre + scale * u;
            for (int a = 0; a < m; ++a)
                x[drop[a]] = z[a];
            const Vector d = x - mu;
            return std::exp(log_norm - 0.5 * d.dot(prec * d) + log_det_scale);
        };

        Vector u = Vector::Zero(m);
        std::function<double(int)> integrate = [&](int level) -> double {
            if (level == m)
                return joint(u);
            auto f = [&](double t) {
                u[level] = t;
                return integrate(level + 1);
            };
            return Rule::integrate(f, -half_width, 0.0) + Rule::integrate(f, 0.0, half_width);
        };
        total += mix.weights[k] * integrate(0);
    }
    return total;
}

/// KL(N(m1, S1) || N(m2, S2)).
inline double gaussian_kl(const Vector& m1, const Matrix& s1, const Vector& m2, const Matrix& s2)
{
    const auto d = static_cast<double>(m1.size());
    const Matrix s2_inv = s2.inverse();
    const Vector dm = m2 - m1;
    return 0.5 * ((s2_inv * s1).trace() + dm.dot(s2_inv * dm) - d + std::log(s2.determinant() / s1.determinant()));
}

} // namespace fslm::oracle
