#include "fslm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

namespace fslm::experiments {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string cache_stem(const RunOptions& o, std::uint64_t seed)
{
    return pipeline::to_string(o.model) + "_" + std::to_string(seed) + "_" + std::to_string(o.n_train) +
           (o.restrict_prior ? "_r" : "") + (o.calibrate ? "_c" : "");
}

} // namespace

ModelRun run_model(const RunOptions& options, std::uint64_t seed)
{
    ModelRun run;
    const bool cached = !options.cache_dir.empty();
    const auto stem = cached ? options.cache_dir / cache_stem(options, seed) : std::filesystem::path{};
    const auto data_path = stem.string() + ".fmat";
    const auto model_path = stem.string() + ".fslm";
    const auto timing_path = stem.string() + ".timing.json";

    if (cached && std::filesystem::exists(data_path)) {
        run.simulated.data = dataset_from_matrix_file(read_matrix(data_path));
    } else {
        pipeline::DataConfig dc;
        dc.model = options.model;
        dc.n = options.n_train;
        dc.restrict_prior = options.restrict_prior;
        const auto start = Clock::now();
        run.simulated = pipeline::simulate_data(dc, derive_seed(seed, "data"));
        run.simulate_seconds = seconds_since(start);
        if (cached) {
            std::filesystem::create_directories(options.cache_dir);
            write_matrix(data_path, to_matrix_file(run.simulated.data));
        }
    }

    const sim::BoxPrior prior = pipeline::prior_for(options.model);
    if (cached && std::filesystem::exists(model_path)) {
        run.trained.model = std::make_shared<const mdn::MdnModel>(mdn::load(model_path));
        if (std::filesystem::exists(timing_path))
            run.train_seconds = nlohmann::json::parse(read_file(timing_path)).value("train_seconds", 0.0);
    } else {
        pipeline::TrainOptions to;
        to.train.seed = derive_seed(seed, "train");
        to.calibrate = options.calibrate;
        const auto start = Clock::now();
        run.trained = pipeline::train_model(run.simulated.data, prior, to);
        run.train_seconds = seconds_since(start);
        if (cached) {
            mdn::save(*run.trained.model, model_path);
            write_file_atomic(timing_path, nlohmann::json{{"train_seconds", run.train_seconds}}.dump());
        }
    }

    const auto obs = pipeline::observation(options.model);
    const int draws = options.n_draws > 0 ? options.n_draws : pipeline::default_posterior_draws(options.model);
    run.setup = pipeline::setup_from_model(run.trained.model, pipeline::feature_vector(obs),
                                           pipeline::default_sampler(options.model), draws);
    run.trained.calibration = run.setup.calibration;
    return run;
}

Matrix lgm_truth(const IndexSet& keep, int n, std::uint64_t seed)
{
    const auto config = sim::default_lgm_config();
    return sim::sample_lgm_posterior(config, sim::lgm_prior(), sim::lgm_observation(config), keep, n, seed);
}

double lgm_truth_kl(const select::InferenceSetup& setup, const IndexSet& keep, std::uint64_t seed)
{
    const auto samples = select::sample_subset(setup, keep, seed);
    const Matrix truth = lgm_truth(keep, setup.n_samples, derive_seed(seed, "truth"));
    return select::prior_box_kl(setup.prior, samples.theta, truth);
}

Comparison compare_fslm_brute(const ModelRun& run, std::uint64_t seed)
{
    Comparison c;
    c.fslm = select::leave_one_out_rank(run.setup, seed);
    c.fslm_seconds = run.train_seconds + c.fslm.total_seconds();

    select::BruteForceConfig bf;
    bf.architecture = run.setup.model->architecture();
    bf.train.seed = derive_seed(seed, "brute-train");
    // A separate sampling seed: shared proposals would make the two sample sets
    // coincide and the 1-NN KL between them meaningless.
    c.brute = select::brute_force_rank(run.setup, run.simulated.data, bf, derive_seed(seed, "brute"));
    c.brute_seconds = c.brute.total_seconds();

    for (std::size_t i = 0; i < c.fslm.rows.size(); ++i) {
        const auto& a = c.fslm.rows[i];
        const auto& b = c.brute.rows[i];
        c.agreement_kl.push_back(a.failed || b.failed ? std::numeric_limits<double>::quiet_NaN()
                                                      : select::prior_box_kl(run.setup.prior, a.theta, b.theta));
    }
    return c;
}

std::vector<double> median_trajectory(const std::vector<std::vector<double>>& runs)
{
    if (runs.empty())
        return {};
    const std::size_t steps = runs.front().size();
    std::vector<double> out(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<double> v;
        for (const auto& r : runs) {
            if (r.size() != steps)
                throw DimensionError("median_trajectory: runs differ in length");
            v.push_back(r[s]);
        }
        out[s] = metrics::quantile(v, 0.5);
    }
    return out;
}

} // namespace fslm::experiments
