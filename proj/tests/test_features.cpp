#include "helpers.hpp"

#include <cmath>

using namespace fslm;

namespace {

struct Spike {
    double start; // ms, on the sample grid
    double peak = 30.0;
};

// Rest at -70 mV; each spike rises linearly to its peak over 1 ms, falls to
// -80 mV over 1 ms and recovers to -70 mV over 10 ms.
sim::VoltageTrace synthetic_trace(const sim::StimulusProtocol& stim, const std::vector<Spike>& spikes)
{
    const auto n = static_cast<Eigen::Index>(std::lround(stim.total / stim.dt)) + 1;
    sim::VoltageTrace tr;
    tr.times = Vector::LinSpaced(n, 0.0, stim.dt * static_cast<double>(n - 1));
    tr.voltages = Vector::Constant(n, -70.0);
    for (const auto& s : spikes) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double u = tr.times[i] - s.start;
            if (u > 0.0 && u <= 1.0)
                tr.voltages[i] = -70.0 + (s.peak + 70.0) * u;
            else if (u > 1.0 && u <= 2.0)
                tr.voltages[i] = s.peak - (s.peak + 80.0) * (u - 1.0);
            else if (u > 2.0 && u < 12.0)
                tr.voltages[i] = -80.0 + (u - 2.0);
        }
    }
    return tr;
}

double value(const features::FeatureVector& f, const std::string& name)
{
    for (int i = 0; i < f.size(); ++i)
        if (f.names[static_cast<std::size_t>(i)] == name)
            return f.valid[static_cast<std::size_t>(i)] ? f.values[i] : NAN;
    throw std::runtime_error("no feature " + name);
}

bool is_valid(const features::FeatureVector& f, const std::string& name) { return !std::isnan(value(f, name)); }

} // namespace

TEST_SUITE("features")
{
    TEST_CASE("flat trace has no spikes")
    {
        const sim::StimulusProtocol stim;
        CHECK(features::detect_spikes(synthetic_trace(stim, {})).size() == 0);
    }

    TEST_CASE("one triangular excursion is one spike with the constructed peak")
    {
        const sim::StimulusProtocol stim;
        const auto ev = features::detect_spikes(synthetic_trace(stim, {{200.0}}));
        REQUIRE(ev.size() == 1);
        CHECK(ev.peak_voltages[0] == doctest::Approx(30.0));
        CHECK(ev.peak_times[0] == doctest::Approx(201.0));
    }

    TEST_CASE("first-spike features match the constructed shape")
    {
        const sim::StimulusProtocol stim;
        const auto f = features::extract_features(synthetic_trace(stim, {{200.0}}), stim, features::core_feature_set());
        // dV/dt is 0 before the rise and 50 mV/ms at its first sample, so the
        // 20 mV/ms crossing sits 0.4 of a step before it, still at rest voltage.
        CHECK(value(f, "APT") == doctest::Approx(-70.0));
        CHECK(value(f, "latency") == doctest::Approx(200.0 - 0.6 * stim.dt - stim.onset));
        CHECK(value(f, "APA") == doctest::Approx(100.0));
        // Half height -20 mV: reached 0.5 ms into the rise and 50/110 ms into the fall.
        CHECK(value(f, "APW") == doctest::Approx(0.5 + 50.0 / 110.0).epsilon(1e-9));
        CHECK(value(f, "AHP") == doctest::Approx(10.0));
        CHECK(value(f, "APC") == 1.0);
        CHECK(value(f, "mean_Vrest") == doctest::Approx(-70.0).epsilon(1e-12));
    }

    TEST_CASE("non-spiking trace: count is zero and spike features are invalid")
    {
        const sim::StimulusProtocol stim;
        const auto f = features::extract_features(synthetic_trace(stim, {}), stim, features::core_feature_set());
        CHECK(value(f, "APC") == 0.0);
        for (const char* name : {"APT", "APA", "APW", "AHP", "latency"})
            CHECK_FALSE(is_valid(f, name));
        CHECK(value(f, "mean_Vm") == doctest::Approx(-70.0));
        CHECK(value(f, "var_Vm") == doctest::Approx(0.0));
        CHECK_FALSE(f.all_valid());
    }

    TEST_CASE("two spikes: third-spike features invalid")
    {
        const sim::StimulusProtocol stim;
        const auto f = features::extract_features(synthetic_trace(stim, {{200.0}, {400.0}}), stim,
                                                  features::extended_feature_set());
        CHECK(value(f, "APC") == 2.0);
        for (const char* name : {"APT_3", "APA_3", "APW_3", "AHP_3"})
            CHECK_FALSE(is_valid(f, name));
    }

    TEST_CASE("adaptation and windowed counts")
    {
        const sim::StimulusProtocol stim;
        const std::vector<Spike> spikes = {{150.0, 30.0}, {300.0, 20.0}, {420.0, 10.0}, {600.0, 0.0}};
        const auto f = features::extract_features(synthetic_trace(stim, spikes), stim, features::extended_feature_set());
        CHECK(value(f, "APA_adapt") == doctest::Approx((70.0 - 100.0) / 100.0));
        CHECK(value(f, "APA_3") == doctest::Approx(80.0));
        CHECK(value(f, "APC_T1_2") + value(f, "APC_T2_2") == value(f, "APC"));
        CHECK(value(f, "APC_T1_8") <= value(f, "APC_T1_4"));
        CHECK(value(f, "APC_T1_4") <= value(f, "APC_T1_2"));
        // ISIs 150, 120, 180
        CHECK(value(f, "ISI_adapt") == doctest::Approx((180.0 - 150.0) / 150.0));
    }

    TEST_CASE("spikes outside the stimulus window are not counted")
    {
        const sim::StimulusProtocol stim;
        const auto f = features::extract_features(synthetic_trace(stim, {{50.0}, {300.0}, {750.0}}), stim,
                                                  features::core_feature_set());
        CHECK(value(f, "APC") == 1.0);
    }

    TEST_CASE("features are invariant to a common time shift")
    {
        const std::vector<Spike> spikes = {{180.0, 25.0}, {320.0, 20.0}, {500.0, 15.0}};
        sim::StimulusProtocol a;
        const auto fa = features::extract_features(synthetic_trace(a, spikes), a, features::extended_feature_set());
        sim::StimulusProtocol b = a;
        const double shift = 40.0;
        b.onset += shift;
        b.total += shift;
        std::vector<Spike> moved = spikes;
        for (auto& s : moved)
            s.start += shift;
        const auto fb = features::extract_features(synthetic_trace(b, moved), b, features::extended_feature_set());
        REQUIRE(fa.size() == fb.size());
        for (int i = 0; i < fa.size(); ++i) {
            const auto k = static_cast<std::size_t>(i);
            CHECK(fa.valid[k] == fb.valid[k]);
            if (fa.valid[k])
                CHECK(fa.values[i] == doctest::Approx(fb.values[i]).epsilon(1e-9));
        }
    }

    TEST_CASE("amplitude and width are positive on simulated cells")
    {
        const auto prior = sim::hh_prior();
        const Matrix draws = sim::sample_prior(prior, 15, 21);
        const sim::StimulusProtocol stim;
        for (Eigen::Index i = 0; i < draws.rows(); ++i) {
            try {
                const auto tr = sim::simulate_hh(sim::HhParams::from_vector(draws.row(i).transpose()), {}, stim);
                const auto f = features::extract_features(tr, stim, features::core_feature_set());
                if (is_valid(f, "APA"))
                    CHECK(value(f, "APA") > 0.0);
                if (is_valid(f, "APW"))
                    CHECK(value(f, "APW") > 0.0);
                const Vector again = features::extract_features(tr, stim, features::core_feature_set()).values;
                CHECK((f.values.array() == again.array() || (f.values.array().isNaN() && again.array().isNaN())).all());
            } catch (const sim::SimulationDiverged&) {
            }
        }
    }

    TEST_CASE("LGM features are the identity with a NaN mask")
    {
        Vector x(4);
        x << 1, 2, 3, 4;
        auto f = features::lgm_features(x);
        CHECK(f.values == x);
        CHECK(f.all_valid());
        CHECK(features::lgm_features(Vector::Zero(4)).values == Vector::Zero(4));
        x[2] = NAN;
        f = features::lgm_features(x);
        CHECK(f.valid == std::vector<bool>{true, true, false, true});
    }

    TEST_CASE("feature set validation")
    {
        CHECK_NOTHROW(features::validate_feature_set({"APT", "APC"}));
        CHECK_THROWS_AS(features::validate_feature_set({"APT", "APT"}), ConfigError);
        CHECK_THROWS_AS(features::validate_feature_set({"nope"}), ConfigError);
        CHECK(features::core_feature_set().size() == 10);
        CHECK(features::extended_feature_set().size() == 23);
    }
}
