#pragma once

#include "fslm/select.hpp"

namespace fslm::pipeline {

enum class ModelKind { Lgm, Hh };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);

sim::BoxPrior prior_for(ModelKind kind);

/// Rejection for the LGM; for HH, MCMC with long burn-in and thinning so that
/// 1-NN KL estimates are not swamped by autocorrelated draws.
inference::SamplerConfig default_sampler(ModelKind kind);
/// Posterior draws per subset: 500 (LGM) or 1000 (HH).
int default_posterior_draws(ModelKind kind);

nlohmann::json prior_to_json(const sim::BoxPrior& prior);
sim::BoxPrior prior_from_json(const nlohmann::json& j);

struct DataConfig {
    ModelKind model = ModelKind::Lgm;
    int n = 10000;
    features::FeatureSet features; // HH only; empty selects the core set
    /// Train a validity classifier on this fraction of the budget and draw the
    /// rest from the restricted prior. Skipped (with a warning) when the
    /// classifier sample is single-class.
    bool restrict_prior = false;
    double classifier_fraction = 0.1;
};

struct SimulatedData {
    Dataset data; // all rows, invalid ones flagged
    std::optional<inference::ValidityClassifier> classifier;
    std::vector<std::string> warnings;
};

/// Deterministic in `seed`.
SimulatedData simulate_data(const DataConfig& config, std::uint64_t seed);

/// Default observation of a model: a fixed noisy LGM draw, or the HH reference
/// cell's features.
Dataset observation(ModelKind kind, const features::FeatureSet& set = {});
features::FeatureVector feature_vector(const Dataset& obs, Eigen::Index row = 0);

struct TrainedModel {
    std::shared_ptr<const mdn::MdnModel> model;
    std::optional<inference::CalibrationModel> calibration;
    mdn::TrainResult result;
};

struct TrainOptions {
    mdn::MdnArchitecture architecture; // dims are taken from the data
    mdn::TrainConfig train;
    /// Fit c(theta) on all rows (valid and invalid) and attach it.
    bool calibrate = false;
};

/// Trains on the valid rows of `data`; stores prior, names and calibration in
/// the model metadata.
TrainedModel train_model(const Dataset& data, const sim::BoxPrior& prior, const TrainOptions& options);

/// Rebuilds prior and calibration from the metadata written by train_model.
select::InferenceSetup setup_from_model(std::shared_ptr<const mdn::MdnModel> model,
                                        const features::FeatureVector& x_obs, const inference::SamplerConfig& sampler,
                                        int n_samples);

} // namespace fslm::pipeline
