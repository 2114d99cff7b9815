#pragma once

#include "fslm/inference.hpp"
#include "fslm/metrics.hpp"

#include <map>

namespace fslm::select {

/// Everything needed to build and sample posteriors for feature subsets of one
/// trained model.
struct InferenceSetup {
    std::shared_ptr<const mdn::MdnModel> model;
    sim::BoxPrior prior;
    std::optional<inference::CalibrationModel> calibration;
    features::FeatureVector x_obs;
    inference::SamplerConfig sampler;
    int n_samples = 500;

    std::vector<std::string> feature_names() const { return x_obs.names; }
    int feature_dim() const { return x_obs.size(); }
};

/// Maps theta into [0, 1]^P along each prior axis.
Matrix to_unit_box(const sim::BoxPrior& prior, const Matrix& theta);
/// 1-NN KL(x || y) on unit-box coordinates. The true KL is unchanged by the
/// per-axis affine map; the estimate no longer depends on parameter units.
double prior_box_kl(const sim::BoxPrior& prior, const Matrix& x, const Matrix& y);

/// Sampling seed of subset `keep` under run seed `seed`; equal subsets get equal seeds.
std::uint64_t subset_seed(std::uint64_t seed, const IndexSet& keep);
/// Seed of the reference full-feature posterior (distinct from subset_seed(all)).
std::uint64_t reference_seed(std::uint64_t seed);
std::string subset_label(const IndexSet& keep);

/// Draws n_samples from the posterior restricted to `keep` (sorted internally).
inference::SampleSet sample_subset(const InferenceSetup& setup, const IndexSet& keep, std::uint64_t seed);

struct RankRow {
    std::string removed;
    int removed_index = -1;
    IndexSet keep;
    bool failed = false;
    std::string error;
    double kl = 0.0;       // KL(reduced || full)
    Vector iqr_ratio;      // per parameter; NaN where undefined
    Eigen::Index samples = 0;
    std::uint64_t seed = 0;
    double train_seconds = 0.0;
    double sample_seconds = 0.0;
    Matrix theta;          // posterior draws
};

struct RankTable {
    std::string mode; // "fslm" or "brute"
    std::vector<std::string> param_names;
    std::vector<std::string> feature_names;
    std::vector<RankRow> rows;
    Matrix full_samples;
    std::uint64_t full_seed = 0;
    double full_train_seconds = 0.0;
    double full_sample_seconds = 0.0;

    double total_seconds() const;
    /// One row per removed feature: removed,removed_index,status,kl,samples,seed,iqr:<param>...
    /// Timings are excluded so reruns compare byte-identical.
    std::string to_csv() const;
    /// phase,subset,seconds
    std::string timing_csv() const;
    metrics::IqrMatrix iqr_matrix() const;
};

inline constexpr const char* kRankCsvSchema = "rank/1";
inline constexpr const char* kGreedyCsvSchema = "greedy/1";

/// Posteriors for every leave-one-out subset by marginalizing the trained model.
/// Never trains.
RankTable leave_one_out_rank(const InferenceSetup& setup, std::uint64_t seed);

struct BruteForceConfig {
    mdn::MdnArchitecture architecture; // feature_dim is set per subset
    mdn::TrainConfig train;
};

/// Retrains a model per leave-one-out subset plus the full set on columns of
/// `data` (valid rows only) and runs the same metric pipeline.
/// `setup.model` is ignored.
RankTable brute_force_rank(const InferenceSetup& setup, const Dataset& data, const BruteForceConfig& config,
                           std::uint64_t seed);

struct GreedyCandidate {
    IndexSet subset; // sorted
    double kl = 0.0; // +inf when sampling failed
    std::string error;
};

struct GreedyTrace {
    std::string mode; // "greedy" or "random"
    std::uint64_t seed = 0;
    int beam = 1;
    std::vector<int> order;            // selected features
    std::vector<double> kl;            // KL(prefix || full) after each addition
    std::vector<std::vector<GreedyCandidate>> steps; // candidates scored per step (greedy only)

    /// step,feature,feature_index,kl
    std::string to_csv(const std::vector<std::string>& feature_names) const;
};

/// Forward beam search minimizing KL(candidate || full).
GreedyTrace greedy_select(const InferenceSetup& setup, int k, int beam, std::uint64_t seed);

/// Features added in a uniformly random order; KL evaluated for each prefix.
GreedyTrace random_order(const InferenceSetup& setup, int k, std::uint64_t seed);

} // namespace fslm::select
