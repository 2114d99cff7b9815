#pragma once

#include "fslm/pipeline.hpp"

#include <doctest.h>

#include <filesystem>
#include <random>

namespace fslm::testing {

/// One-component linear MDN equal to the LGM likelihood N(x; mu0 + L theta, sigma^2 I).
inline std::shared_ptr<const mdn::MdnModel> exact_lgm_model(const sim::LgmConfig& cfg = sim::default_lgm_config())
{
    mdn::MdnArchitecture arch;
    arch.param_dim = cfg.param_dim();
    arch.feature_dim = cfg.feature_dim();
    arch.components = 1;
    arch.hidden = {};
    mdn::MdnModel model(arch, 0);
    model.parameters().setZero();
    const auto& head = model.layers().back();
    const int D = arch.feature_dim;
    auto w = [&](int r, int c) -> double& { return model.parameters()[head.weight_offset + c * head.out + r]; };
    auto b = [&](int r) -> double& { return model.parameters()[head.bias_offset + r]; };
    for (int i = 0; i < D; ++i) {
        for (int j = 0; j < arch.param_dim; ++j)
            w(1 + i, j) = cfg.L(i, j);
        b(1 + i) = cfg.mu0[i];
        b(1 + D + i) = std::log(cfg.sigma);
    }
    model.metadata = {{"prior", pipeline::prior_to_json(sim::lgm_prior())},
                      {"feature_names", sim::lgm_feature_names()},
                      {"param_names", sim::lgm_prior().names},
                      {"model", "lgm"}};
    return std::make_shared<const mdn::MdnModel>(std::move(model));
}

inline features::FeatureVector lgm_obs() { return pipeline::feature_vector(pipeline::observation(pipeline::ModelKind::Lgm)); }

/// Random mixture with well-conditioned covariances.
inline mdn::GaussianMixture random_mixture(int K, int D, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.2, 1.0);
    Vector w(K);
    for (int k = 0; k < K; ++k)
        w[k] = unit(rng);
    w /= w.sum();
    Matrix means(K, D);
    std::vector<Matrix> covs;
    for (int k = 0; k < K; ++k) {
        for (int d = 0; d < D; ++d)
            means(k, d) = normal(rng);
        Matrix A(D, D);
        for (int i = 0; i < D; ++i)
            for (int j = 0; j < D; ++j)
                A(i, j) = 0.5 * normal(rng);
        covs.push_back(A * A.transpose() + 0.3 * Matrix::Identity(D, D));
    }
    return mdn::GaussianMixture::from_covariances(w, means, covs);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("fslm_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace fslm::testing
