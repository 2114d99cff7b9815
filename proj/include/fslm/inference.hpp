#pragma once

#include "fslm/common.hpp"
#include "fslm/features.hpp"
#include "fslm/io.hpp"
#include "fslm/mdn.hpp"
#include "fslm/sim.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <optional>

namespace fslm::inference {

/// Draws of theta plus sampler diagnostics.
struct SampleSet {
    Matrix theta;
    nlohmann::json metadata = nlohmann::json::object();
};

/// c(theta) = p(valid | theta) by logistic regression on standardized theta.
/// A constant model is used when only one class was observed.
struct CalibrationModel {
    Vector mean, scale;
    Vector weights;
    double bias = 0.0;
    bool constant = false;
    double constant_rate = 1.0;
    std::string warning;

    double probability(const Eigen::Ref<const Vector>& theta) const;
    double log_probability(const Eigen::Ref<const Vector>& theta) const;
    /// Direction of the decision boundary normal in original theta units.
    Vector direction() const;

    nlohmann::json to_json() const;
    static CalibrationModel from_json(const nlohmann::json& j);
};

/// Newton iterations on the logistic NLL with a small ridge term.
CalibrationModel fit_calibration(const Matrix& thetas, const std::vector<bool>& valid);

/// 2 x 32 tanh MLP with a two-class softmax output predicting p(valid | theta).
class ValidityClassifier {
public:
    double probability(const Eigen::Ref<const Vector>& theta) const;
    Vector probability_batch(const Matrix& thetas) const;

    double heldout_accuracy = 0.0;

    nlohmann::json to_json() const;
    static ValidityClassifier from_json(const nlohmann::json& j);

    // Layer weights (out x in) and biases; inputs are standardized first.
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Vector mean, scale;
};

struct ClassifierConfig {
    std::vector<int> hidden = {32, 32};
    int batch_size = 128;
    double learning_rate = 1e-3;
    int max_epochs = 300;
    int patience = 20;
    double validation_fraction = 0.1;
};

/// Throws ConfigError if only one class is present.
ValidityClassifier train_validity_classifier(const Matrix& thetas, const std::vector<bool>& valid,
                                             std::uint64_t seed, const ClassifierConfig& config = {});

/// Acceptance rate too low for a sampler to make progress.
class SamplerFailure : public NumericalError {
public:
    using NumericalError::NumericalError;
    std::string kind() const override { return "sampler-failure"; }
};

/// Acceptance probability per row of a theta matrix.
using AcceptanceFn = std::function<Vector(const Matrix&)>;

/// Draws theta ~ prior and keeps each with probability p(valid | theta).
SampleSet restricted_prior_sample(const sim::BoxPrior& prior, const AcceptanceFn& accept, int n, std::uint64_t seed);
SampleSet restricted_prior_sample(const sim::BoxPrior& prior, const ValidityClassifier& classifier, int n,
                                  std::uint64_t seed);

/// log q(x_obs[keep] | theta) + log p(theta) [+ log c(theta)].
class UnnormalizedPosterior {
public:
    /// `x_obs` holds all features the model was trained on; only `keep` must be valid.
    UnnormalizedPosterior(std::shared_ptr<const mdn::MdnModel> model, sim::BoxPrior prior,
                          const features::FeatureVector& x_obs, IndexSet keep,
                          std::optional<CalibrationModel> calibration = std::nullopt);

    double logpdf(const Eigen::Ref<const Vector>& theta) const;
    /// One value per row, evaluated in parallel.
    Vector logpdf_batch(const Matrix& thetas) const;

    const sim::BoxPrior& prior() const { return prior_; }
    const IndexSet& keep() const { return keep_; }
    const Vector& x_obs() const { return x_obs_; }
    const mdn::MdnModel& model() const { return *model_; }
    const std::optional<CalibrationModel>& calibration() const { return calibration_; }
    int dim() const { return prior_.dim(); }

private:
    std::shared_ptr<const mdn::MdnModel> model_;
    sim::BoxPrior prior_;
    IndexSet keep_;
    Vector x_obs_;
    std::optional<CalibrationModel> calibration_;
};

struct RejectionConfig {
    int envelope_draws = 10000;
    double log_safety = 2.302585092994046; // log 10
    Eigen::Index batch = 4096;
    Eigen::Index max_proposals = 100'000'000;
};

struct McmcConfig {
    int chains = 4;
    int thin = 1;
    double burn_fraction = 0.25;
    double target_acceptance = 0.234;
    int init_draws = 10000;
};

struct SmcConfig {
    int min_particles = 1000;
    double ess_fraction = 0.5;     // next temperature keeps this fraction of the particle ESS
    double target_acceptance = 0.234;
    int min_moves = 2;             // per stage
    int max_moves = 30;
    int final_moves = 200;         // Metropolis sweeps at temperature 1 that decorrelate resampled siblings
    double unique_fraction = 0.99; // further sweeps until this many particles are distinct
    int max_final_moves = 100;
};

enum class SamplerKind { Rejection, Mcmc, Smc };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::Rejection;
    RejectionConfig rejection;
    McmcConfig mcmc;
    SmcConfig smc;

    nlohmann::json to_json() const;
};

/// Envelope = max log-density over prior draws plus a safety margin. Proposals
/// exceeding it are counted in metadata["envelope_violations"].
SampleSet rejection_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed,
                           const RejectionConfig& config = {});

/// Adaptive random-walk Metropolis in logit box coordinates. Chains start from
/// importance-resampled prior draws, adapt during burn-in, and are concatenated.
SampleSet mcmc_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const McmcConfig& config = {});

/// Tempered sequential Monte Carlo from the prior to the posterior. Temperatures
/// are chosen by bisection on the effective sample size; particles are moved by
/// random-walk Metropolis in logit box coordinates after each resampling.
SampleSet smc_sample(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const SmcConfig& config = {});

SampleSet sample_posterior(const UnnormalizedPosterior& post, int n, std::uint64_t seed, const SamplerConfig& config);

/// Potential scale reduction per dimension from equal-length chains.
Vector gelman_rubin(const std::vector<Matrix>& chains);

/// Maps theta to a feature vector; `seed` drives any simulator noise.
using Simulator = std::function<features::FeatureVector(const Eigen::Ref<const Vector>& theta, std::uint64_t seed)>;

Simulator lgm_simulator(const sim::LgmConfig& config);
/// Divergent simulations yield an all-invalid feature vector.
Simulator hh_simulator(const sim::HhConstants& constants, const sim::StimulusProtocol& stim,
                       const features::FeatureSet& set);

/// Simulates every row of `thetas` (row i uses derive_seed(seed, first_index + i)).
/// Rows with any invalid feature are flagged. Throws NumericalError if none are valid.
Dataset generate_training_set(const Simulator& simulator, const Matrix& thetas, std::uint64_t seed,
                              const std::vector<std::string>& param_names, std::size_t first_index = 0);

} // namespace fslm::inference
