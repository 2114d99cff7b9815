#include "helpers.hpp"

#include <Eigen/Cholesky>

#include <cmath>

using namespace fslm;

namespace {

int spike_count(const sim::VoltageTrace& tr) { return static_cast<int>(features::detect_spikes(tr).size()); }

// Independent oracle: upward crossings of 0 mV.
int zero_crossings(const sim::VoltageTrace& tr)
{
    int n = 0;
    for (Eigen::Index i = 1; i < tr.voltages.size(); ++i)
        n += tr.voltages[i - 1] < 0.0 && tr.voltages[i] >= 0.0;
    return n;
}

} // namespace

TEST_SUITE("sim")
{
    TEST_CASE("uniform prior draws stay in the box with centred means")
    {
        const auto prior = sim::lgm_prior();
        const Matrix s = sim::sample_prior(prior, 1000, 3);
        CHECK(s.minCoeff() >= -5.0);
        CHECK(s.maxCoeff() <= 5.0);
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(s.col(j).mean()) < 0.5);
        CHECK(s == sim::sample_prior(prior, 1000, 3));
    }

    TEST_CASE("degenerate box gives draws at its lower corner")
    {
        sim::BoxPrior p;
        p.lower = Vector::Constant(2, 1.0);
        p.upper = Vector::Constant(2, 1.0 + 1e-9);
        const Matrix s = sim::sample_prior(p, 100, 1);
        CHECK(((s.array() - 1.0).abs() <= 1e-9).all());
    }

    TEST_CASE("invalid boxes are rejected")
    {
        sim::BoxPrior p;
        p.lower = Vector::Constant(1, 1.0);
        p.upper = Vector::Constant(1, 0.0);
        CHECK_THROWS_AS(p.validate(), ConfigError);
    }

    TEST_CASE("noise-free LGM applies the mixing matrix")
    {
        auto cfg = sim::default_lgm_config();
        cfg.sigma = 1e-12;
        Vector theta(3);
        theta << 1, 2, 3;
        const Vector x = sim::simulate_lgm(cfg, theta, 0);
        CHECK(x[0] == doctest::Approx(1.0));
        CHECK(x[1] == doctest::Approx(2.0));
        CHECK(x[2] == doctest::Approx(5.0));
        CHECK(std::abs(x[3]) < 1e-9);
        CHECK(sim::simulate_lgm(cfg, Vector::Zero(3), 5).norm() < 1e-9);
    }

    TEST_CASE("LGM noise has identity covariance and the mean converges")
    {
        const auto cfg = sim::default_lgm_config();
        Vector theta(3);
        theta << 0.5, -1.0, 2.0;
        const int n = 100000;
        Matrix xs(n, 4);
        for (int i = 0; i < n; ++i)
            xs.row(i) = sim::simulate_lgm(cfg, theta, derive_seed(9, static_cast<std::uint64_t>(i))).transpose();
        const Vector mean = xs.colwise().mean().transpose();
        const Vector expect = cfg.mu0 + cfg.L * theta;
        for (int j = 0; j < 4; ++j)
            CHECK(std::abs(mean[j] - expect[j]) < 3.0 / std::sqrt(n));
        const Matrix centred = xs.rowwise() - mean.transpose();
        const Matrix cov = centred.transpose() * centred / (n - 1.0);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                CHECK(std::abs(cov(i, j) - (i == j ? 1.0 : 0.0)) < 0.05);
    }

    TEST_CASE("LGM posterior matches the normal equations in a wide box")
    {
        const auto cfg = sim::default_lgm_config();
        sim::BoxPrior wide;
        wide.lower = Vector::Constant(3, -1e6);
        wide.upper = Vector::Constant(3, 1e6);
        const Vector x = sim::lgm_observation(cfg);
        const Matrix A = cfg.L.transpose() * cfg.L; // sigma = 1
        const Vector mode = A.ldlt().solve(cfg.L.transpose() * (x - cfg.mu0));
        const double at_mode = sim::lgm_posterior_logpdf(cfg, wide, x, all_indices(4), mode);
        Rng rng(4);
        std::normal_distribution<double> normal(0.0, 2.0);
        for (int r = 0; r < 100; ++r) {
            Vector t(3);
            for (int j = 0; j < 3; ++j)
                t[j] = normal(rng);
            const Vector d = t - mode;
            const double expect = at_mode - 0.5 * d.dot(A * d);
            CHECK(sim::lgm_posterior_logpdf(cfg, wide, x, all_indices(4), t) == doctest::Approx(expect).epsilon(1e-8));
        }
    }

    TEST_CASE("LGM posterior argmax is the box-projected least-squares solution")
    {
        const auto cfg = sim::default_lgm_config();
        const auto prior = sim::lgm_prior();
        const Vector x = sim::lgm_observation(cfg);
        const Vector ls = (cfg.L.transpose() * cfg.L).ldlt().solve(cfg.L.transpose() * x);
        REQUIRE(((ls.array() > -5) && (ls.array() < 5)).all());
        const double best = sim::lgm_posterior_logpdf(cfg, prior, x, all_indices(4), ls);
        const Matrix probes = sim::sample_prior(prior, 2000, 8);
        for (Eigen::Index i = 0; i < probes.rows(); ++i)
            CHECK(sim::lgm_posterior_logpdf(cfg, prior, x, all_indices(4), probes.row(i).transpose()) <= best);
    }

    TEST_CASE("LGM posterior without x0 ignores theta0; with only x3 it is flat")
    {
        const auto cfg = sim::default_lgm_config();
        const auto prior = sim::lgm_prior();
        const Vector x = sim::lgm_observation(cfg);
        Vector t(3);
        t << -4.0, 0.3, 0.2;
        const double ref = sim::lgm_posterior_logpdf(cfg, prior, x, {1, 2, 3}, t);
        for (double t0 : {-3.0, 0.0, 4.9}) {
            t[0] = t0;
            CHECK(sim::lgm_posterior_logpdf(cfg, prior, x, {1, 2, 3}, t) == doctest::Approx(ref).epsilon(1e-14));
        }
        const Matrix probes = sim::sample_prior(prior, 50, 2);
        const double flat = sim::lgm_posterior_logpdf(cfg, prior, x, {3}, probes.row(0).transpose());
        for (Eigen::Index i = 1; i < probes.rows(); ++i)
            CHECK(sim::lgm_posterior_logpdf(cfg, prior, x, {3}, probes.row(i).transpose()) == doctest::Approx(flat).epsilon(1e-14));
        t << 5.5, 0, 0;
        CHECK(std::isinf(sim::lgm_posterior_logpdf(cfg, prior, x, {3}, t)));
    }

    TEST_CASE("exact LGM posterior draws have the expected mean")
    {
        const auto cfg = sim::default_lgm_config();
        const Vector x = sim::lgm_observation(cfg);
        const Matrix s = sim::sample_lgm_posterior(cfg, sim::lgm_prior(), x, all_indices(4), 4000, 5);
        const Vector ls = (cfg.L.transpose() * cfg.L).ldlt().solve(cfg.L.transpose() * x);
        const Vector m = s.colwise().mean().transpose();
        // Box truncation is negligible here: the posterior sits well inside it.
        for (int j = 0; j < 3; ++j)
            CHECK(std::abs(m[j] - ls[j]) < 0.1);
    }

    TEST_CASE("rate function limit and gating bounds")
    {
        CHECK(sim::exprel_rate(0.0, 4.0) == doctest::Approx(4.0));
        CHECK(sim::exprel_rate(1e-9, 4.0) == doctest::Approx(4.0).epsilon(1e-8));
        CHECK(sim::exprel_rate(-1e-9, 4.0) == doctest::Approx(4.0).epsilon(1e-8));
        const auto params = sim::hh_reference_params();
        const sim::HhConstants k;
        for (int v = -120; v <= 60; ++v) {
            const auto gates = sim::gating_steady_state_and_tau(v, params, k);
            for (const auto& g : gates) {
                CHECK(g.inf >= 0.0);
                CHECK(g.inf <= 1.0);
                CHECK(g.tau > 0.0);
            }
        }
    }

    TEST_CASE("simulate_hh is deterministic and keeps gates in [0, 1]")
    {
        const auto prior = sim::hh_prior();
        const Matrix draws = sim::sample_prior(prior, 20, 12);
        for (Eigen::Index i = 0; i < draws.rows(); ++i) {
            const auto p = sim::HhParams::from_vector(draws.row(i).transpose());
            try {
                const auto tr = sim::simulate_hh(p, {}, {});
                for (double g : tr.gating_final) {
                    CHECK(g >= 0.0);
                    CHECK(g <= 1.0);
                }
                if (i < 2)
                    CHECK(sim::simulate_hh(p, {}, {}).voltages == tr.voltages);
            } catch (const sim::SimulationDiverged&) {
            }
        }
    }

    TEST_CASE("HH midpoint fixture: frozen spike count")
    {
        // Frozen from a single run; the midpoint cell stays subthreshold at 200 pA.
        const auto tr = sim::simulate_hh(sim::hh_reference_params(), {}, {});
        CHECK(spike_count(tr) == 0);
    }

    TEST_CASE("HH reference cell spikes and agrees with a zero-crossing counter")
    {
        const auto tr = sim::simulate_hh(sim::hh_observation_params(), {}, {});
        CHECK(spike_count(tr) == 13);
        CHECK(zero_crossings(tr) == spike_count(tr));
    }

    TEST_CASE("HH with minimal sodium conductance does not spike")
    {
        auto p = sim::hh_reference_params();
        p.g_Na = sim::hh_prior().lower[1];
        CHECK(spike_count(sim::simulate_hh(p, {}, {})) == 0);
    }

    TEST_CASE("HH without stimulus settles")
    {
        sim::StimulusProtocol stim;
        stim.amplitude = 0.0;
        const auto tr = sim::simulate_hh(sim::hh_reference_params(), {}, stim);
        const double dt = stim.dt;
        const auto lag = static_cast<Eigen::Index>(std::lround(100.0 / dt));
        const auto first = static_cast<Eigen::Index>(std::lround((stim.total - 200.0) / dt));
        double worst = 0.0;
        for (Eigen::Index i = first; i < tr.voltages.size(); ++i)
            worst = std::max(worst, std::abs(tr.voltages[i] - tr.voltages[i - lag]));
        CHECK(worst < 0.5);
    }

    TEST_CASE("halving the time step leaves spikes and subthreshold voltage unchanged")
    {
        const auto p = sim::hh_observation_params();
        sim::StimulusProtocol coarse, fine;
        fine.dt = coarse.dt / 2.0;
        const auto a = sim::simulate_hh(p, {}, coarse);
        const auto b = sim::simulate_hh(p, {}, fine);
        CHECK(spike_count(a) == spike_count(b));
        const auto peaks_a = features::detect_spikes(a).peak_times;
        const auto peaks_b = features::detect_spikes(b).peak_times;
        auto near_spike = [&](double t) {
            for (const auto* peaks : {&peaks_a, &peaks_b})
                for (double pk : *peaks)
                    if (t > pk - 3.0 && t < pk + 3.0)
                        return true;
            return false;
        };
        double worst = 0.0;
        for (Eigen::Index i = 0; i < a.times.size(); ++i) {
            if (near_spike(a.times[i]))
                continue;
            worst = std::max(worst, std::abs(a.voltages[i] - b.voltages[2 * i]));
        }
        CHECK(worst < 2.0);
    }
}
