#pragma once

#include "fslm/pipeline.hpp"

#include <filesystem>

namespace fslm::experiments {

/// A trained model plus everything needed to sample its subset posteriors.
struct ModelRun {
    pipeline::SimulatedData simulated;
    pipeline::TrainedModel trained;
    select::InferenceSetup setup;
    double simulate_seconds = 0.0;
    double train_seconds = 0.0;
};

struct RunOptions {
    pipeline::ModelKind model = pipeline::ModelKind::Lgm;
    int n_train = 10000;
    int n_draws = 0; // 0 = pipeline default
    bool restrict_prior = false;
    bool calibrate = false;
    /// When set, HH datasets and models are read from / written to this directory.
    std::filesystem::path cache_dir;
};

/// Simulate, train and wire up the default observation. Seeds derive from `seed`.
ModelRun run_model(const RunOptions& options, std::uint64_t seed);

/// Exact LGM posterior draws for features `keep` at the default observation.
Matrix lgm_truth(const IndexSet& keep, int n, std::uint64_t seed);

/// KL(NLE posterior || analytic posterior) for features `keep` of an LGM setup.
double lgm_truth_kl(const select::InferenceSetup& setup, const IndexSet& keep, std::uint64_t seed);

/// Leave-one-out FSLM and brute-force tables on the same data, with totals.
struct Comparison {
    select::RankTable fslm;
    select::RankTable brute;
    std::vector<double> agreement_kl; // KL(FSLM row || brute row) per removed feature
    double fslm_seconds = 0.0;        // training once + all sampling
    double brute_seconds = 0.0;       // one training per subset + all sampling
};

Comparison compare_fslm_brute(const ModelRun& run, std::uint64_t seed);

/// Median over runs at each step; runs must share a length.
std::vector<double> median_trajectory(const std::vector<std::vector<double>>& runs);

} // namespace fslm::experiments
