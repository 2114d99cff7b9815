#include "helpers.hpp"

#include <cmath>

using namespace fslm;

namespace {

inference::UnnormalizedPosterior exact_posterior(const IndexSet& keep)
{
    return inference::UnnormalizedPosterior(testing::exact_lgm_model(), sim::lgm_prior(), testing::lgm_obs(), keep);
}

Matrix truth(const IndexSet& keep, int n, std::uint64_t seed)
{
    const auto cfg = sim::default_lgm_config();
    return sim::sample_lgm_posterior(cfg, sim::lgm_prior(), sim::lgm_observation(cfg), keep, n, seed);
}

} // namespace

TEST_SUITE("inference")
{
    TEST_CASE("posterior composition equals the analytic LGM posterior up to a constant")
    {
        const auto cfg = sim::default_lgm_config();
        const auto prior = sim::lgm_prior();
        const Vector x = sim::lgm_observation(cfg);
        const Matrix probes = sim::sample_prior(prior, 30, 1);
        for (const IndexSet& keep : {IndexSet{0, 1, 2, 3}, IndexSet{1, 2, 3}, IndexSet{0, 2}, IndexSet{3}}) {
            const auto post = exact_posterior(keep);
            const Vector got = post.logpdf_batch(probes);
            double offset = NAN;
            for (Eigen::Index i = 0; i < probes.rows(); ++i) {
                const double ref = sim::lgm_posterior_logpdf(cfg, prior, x, keep, probes.row(i).transpose());
                if (std::isnan(offset))
                    offset = got[i] - ref;
                CHECK(std::abs(got[i] - ref - offset) <= 1e-12 * std::max(1.0, std::abs(ref)));
            }
        }
    }

    TEST_CASE("density is zero outside the prior box")
    {
        const auto post = exact_posterior(all_indices(4));
        Vector t(3);
        t << 5.01, 0, 0;
        CHECK(std::isinf(post.logpdf(t)));
        CHECK(post.logpdf(t) < 0.0);
    }

    TEST_CASE("rejection draws match exact posterior draws")
    {
        for (const IndexSet& keep : {all_indices(4), IndexSet{1, 2, 3}}) {
            const auto s = inference::rejection_sample(exact_posterior(keep), 1500, 2);
            CHECK(s.metadata["envelope_violations"] == 0);
            CHECK(std::abs(metrics::kl_estimate(s.theta, truth(keep, 1500, 3))) < 0.15);
            CHECK(s.theta == inference::rejection_sample(exact_posterior(keep), 1500, 2).theta);
        }
    }

    TEST_CASE("MCMC and SMC agree with rejection sampling")
    {
        const auto post = exact_posterior(all_indices(4));
        const Matrix ref = truth(all_indices(4), 1500, 4);

        inference::McmcConfig mc;
        mc.thin = 50; // rejected proposals repeat draws, which the 1-NN estimator cannot use
        const auto m = inference::mcmc_sample(post, 1500, 5, mc);
        CHECK(std::abs(metrics::kl_estimate(m.theta, ref)) < 0.2);
        for (const auto& r : m.metadata["rhat"])
            CHECK(r.get<double>() < 1.1);

        const auto s = inference::smc_sample(post, 1500, 6);
        CHECK(std::abs(metrics::kl_estimate(s.theta, ref)) < 0.2);
        const auto temps = s.metadata["temperatures"].get<std::vector<double>>();
        CHECK(temps.front() == 0.0);
        CHECK(temps.back() == 1.0);
        CHECK(std::is_sorted(temps.begin(), temps.end()));
        CHECK(s.theta == inference::smc_sample(post, 1500, 6).theta);
    }

    TEST_CASE("sampler dispatch and configuration errors")
    {
        const auto post = exact_posterior({0});
        inference::SamplerConfig sc;
        sc.kind = inference::SamplerKind::Smc;
        CHECK(inference::sample_posterior(post, 10, 1, sc).metadata["sampler"] == "smc");
        CHECK(sc.to_json()["sampler"] == "smc");
        inference::McmcConfig mc;
        mc.chains = 1;
        CHECK_THROWS_AS(inference::mcmc_sample(post, 10, 1, mc), ConfigError);
        CHECK_THROWS_AS(inference::rejection_sample(post, 0, 1), ConfigError);
        inference::SmcConfig smc;
        smc.ess_fraction = 1.0;
        CHECK_THROWS_AS(inference::smc_sample(post, 10, 1, smc), ConfigError);
    }

    TEST_CASE("Gelman-Rubin statistic")
    {
        Rng rng(7);
        std::normal_distribution<double> normal;
        std::vector<Matrix> same(4, Matrix(2000, 1)), apart(4, Matrix(2000, 1));
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < 2000; ++i) {
                same[static_cast<std::size_t>(c)](i, 0) = normal(rng);
                apart[static_cast<std::size_t>(c)](i, 0) = normal(rng) + 3.0 * c;
            }
        CHECK(inference::gelman_rubin(same)[0] < 1.01);
        CHECK(inference::gelman_rubin(apart)[0] > 1.2);
        CHECK_THROWS_AS(inference::gelman_rubin({same[0]}), ConfigError);
    }

    TEST_CASE("calibration recovers the direction of a logistic boundary")
    {
        const auto prior = sim::lgm_prior();
        const Matrix thetas = sim::sample_prior(prior, 4000, 8);
        Rng rng(9);
        std::uniform_real_distribution<double> u;
        std::vector<bool> valid;
        for (Eigen::Index i = 0; i < thetas.rows(); ++i) {
            const double z = 2.0 * thetas(i, 0) - thetas(i, 2);
            valid.push_back(u(rng) < 1.0 / (1.0 + std::exp(-z)));
        }
        const auto c = inference::fit_calibration(thetas, valid);
        Vector truth_dir(3);
        truth_dir << 2.0, 0.0, -1.0;
        const Vector dir = c.direction();
        CHECK(dir.dot(truth_dir) / (dir.norm() * truth_dir.norm()) > 0.98);
        Vector t = Vector::Zero(3);
        t[0] = 4.0;
        CHECK(c.probability(t) > 0.9);
        CHECK(inference::CalibrationModel::from_json(c.to_json()).probability(t) == doctest::Approx(c.probability(t)));
    }

    TEST_CASE("single-class labels give a constant calibration")
    {
        const Matrix thetas = sim::sample_prior(sim::lgm_prior(), 50, 10);
        const auto c = inference::fit_calibration(thetas, std::vector<bool>(50, true));
        CHECK(c.constant);
        CHECK(c.probability(thetas.row(0).transpose()) == c.probability(thetas.row(1).transpose()));
    }

    TEST_CASE("restricted prior sampling")
    {
        const auto prior = sim::lgm_prior();
        const auto all = inference::restricted_prior_sample(prior, [](const Matrix& t) { return Vector::Ones(t.rows()).eval(); }, 200, 11);
        CHECK(all.theta.rows() == 200);
        const auto half = inference::restricted_prior_sample(
            prior, [](const Matrix& t) { return (t.col(0).array() > 0.0).cast<double>().matrix().eval(); }, 300, 12);
        CHECK(half.theta.rows() == 300);
        CHECK(half.theta.col(0).minCoeff() > 0.0);
    }

    TEST_CASE("validity classifier learns a threshold")
    {
        const Matrix thetas = sim::sample_prior(sim::lgm_prior(), 2000, 13);
        std::vector<bool> valid;
        for (Eigen::Index i = 0; i < thetas.rows(); ++i)
            valid.push_back(thetas(i, 1) > 1.0);
        const auto clf = inference::train_validity_classifier(thetas, valid, 14);
        CHECK(clf.heldout_accuracy > 0.9);
        Matrix probe(2, 3);
        probe << 0, 4, 0, 0, -4, 0;
        const Vector p = clf.probability_batch(probe);
        CHECK(p[0] > 0.8);
        CHECK(p[1] < 0.2);
        CHECK_THROWS_AS(inference::train_validity_classifier(thetas, std::vector<bool>(2000, true), 1), ConfigError);
    }

    TEST_CASE("training set generation flags invalid HH rows")
    {
        const auto prior = sim::hh_prior();
        const Matrix thetas = sim::sample_prior(prior, 40, 15);
        const auto simulator = inference::hh_simulator({}, {}, features::core_feature_set());
        const auto data = inference::generate_training_set(simulator, thetas, 16, prior.names);
        CHECK(data.size() == 40);
        CHECK(data.valid_count() > 0);
        CHECK(data.valid_count() < 40);
        for (Eigen::Index i = 0; i < data.size(); ++i)
            CHECK(data.valid[static_cast<std::size_t>(i)] == data.x.row(i).array().isFinite().all());
        const auto tail = inference::generate_training_set(simulator, thetas.bottomRows(10), 16, prior.names, 30);
        CHECK((tail.x.array() == data.x.bottomRows(10).array() ||
               (tail.x.array().isNaN() && data.x.bottomRows(10).array().isNaN())).all());
    }
}
