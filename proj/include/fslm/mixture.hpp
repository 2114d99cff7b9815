#pragma once

#include "fslm/common.hpp"

#include <vector>

namespace fslm::mdn {

/// K-component full-covariance Gaussian mixture over a D-dimensional space.
///
/// Covariances are stored alongside their lower Cholesky factors. Marginals
/// take covariance sub-blocks and refactor them, so nested marginalizations
/// produce bitwise-identical results to a single one.
struct GaussianMixture {
    Vector weights;                   // K, on the simplex
    Matrix means;                     // K x D
    std::vector<Matrix> covariances;  // K of D x D, SPD
    std::vector<Matrix> chol_factors; // K of D x D, lower, positive diagonal

    int components() const { return static_cast<int>(weights.size()); }
    int dim() const { return static_cast<int>(means.cols()); }

    static GaussianMixture from_cholesky(Vector weights, Matrix means, std::vector<Matrix> chol_factors);
    /// Throws NumericalError if a covariance is not positive definite.
    static GaussianMixture from_covariances(Vector weights, Matrix means, std::vector<Matrix> covariances);
};

/// Floor applied to mixture weights inside log-sum-exp.
inline constexpr double kWeightFloor = 1e-12;

/// log N(x; mean, L L^T) using a forward substitution with `chol`.
double gaussian_log_density(const Eigen::Ref<const Vector>& mean, const Matrix& chol,
                            const Eigen::Ref<const Vector>& x);

/// log sum_k pi_k N(x; mu_k, Sigma_k), computed with log-sum-exp.
double log_prob(const GaussianMixture& mix, const Eigen::Ref<const Vector>& x);

/// Marginal over the coordinates in `keep` (in that order). Weights are unchanged;
/// means and covariance sub-blocks are selected and the sub-blocks refactored.
GaussianMixture marginalize(const GaussianMixture& mix, const IndexSet& keep);

/// n x D draws.
Matrix sample(const GaussianMixture& mix, int n, std::uint64_t seed);

} // namespace fslm::mdn
