#include "fslm/sim.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace fslm::sim {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kDivergenceVoltage = 500.0; // mV
} // namespace

// ---------------------------------------------------------------------------
// Prior

void BoxPrior::validate() const
{
    if (lower.size() == 0 || lower.size() != upper.size())
        throw ConfigError("prior bounds must be nonempty and of equal length");
    if (!names.empty() && names.size() != static_cast<std::size_t>(lower.size()))
        throw ConfigError("prior names do not match prior dimension");
    for (Eigen::Index i = 0; i < lower.size(); ++i) {
        if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || !(lower[i] < upper[i])) {
            std::ostringstream msg;
            msg << "prior dimension " << i << ": need lower < upper, got [" << lower[i] << ", "
                << upper[i] << "]";
            throw ConfigError(msg.str());
        }
    }
}

bool BoxPrior::contains(const Eigen::Ref<const Vector>& theta) const
{
    if (theta.size() != lower.size())
        throw DimensionError("parameter vector has wrong dimension");
    for (Eigen::Index i = 0; i < theta.size(); ++i)
        if (!(theta[i] >= lower[i] && theta[i] <= upper[i]))
            return false;
    return true;
}

double BoxPrior::log_volume() const { return (upper - lower).array().log().sum(); }

double BoxPrior::log_density(const Eigen::Ref<const Vector>& theta) const
{
    return contains(theta) ? -log_volume() : kNegInf;
}

Matrix sample_prior(const BoxPrior& prior, int n, std::uint64_t seed)
{
    prior.validate();
    if (n < 1)
        throw ConfigError("sample_prior: n must be >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Matrix out(n, prior.dim());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < prior.dim(); ++j)
            out(i, j) = prior.lower[j] + (prior.upper[j] - prior.lower[j]) * unit(rng);
    return out;
}

// ---------------------------------------------------------------------------
// Linear Gaussian model

void LgmConfig::validate() const
{
    if (L.rows() == 0 || L.cols() == 0)
        throw ConfigError("LGM: L must be nonempty");
    if (mu0.size() != L.rows())
        throw ConfigError("LGM: mu0 length must equal the number of rows of L");
    if (!(sigma > 0.0) || !std::isfinite(sigma))
        throw ConfigError("LGM: sigma must be positive");
}

LgmConfig default_lgm_config()
{
    LgmConfig c;
    c.mu0 = Vector::Zero(4);
    c.L.resize(4, 3);
    c.L << 1, 0, 0,
           0, 1, 0,
           0, 1, 1,
           0, 0, 0;
    c.sigma = 1.0;
    return c;
}

BoxPrior lgm_prior()
{
    BoxPrior p;
    p.lower = Vector::Constant(3, -5.0);
    p.upper = Vector::Constant(3, 5.0);
    p.names = {"theta0", "theta1", "theta2"};
    return p;
}

std::vector<std::string> lgm_feature_names() { return {"x0", "x1", "x2", "x3"}; }

Vector simulate_lgm(const LgmConfig& config, const Eigen::Ref<const Vector>& theta, std::uint64_t seed)
{
    if (theta.size() != config.param_dim())
        throw DimensionError("simulate_lgm: theta has wrong dimension");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector x = config.mu0 + config.L * theta;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        x[i] += config.sigma * normal(rng);
    return x;
}

Vector lgm_observation_params() { return Vector{{1.0, -1.0, 0.5}}; }

Vector lgm_observation(const LgmConfig& config)
{
    constexpr std::uint64_t kObservationSeed = 20230801;
    return simulate_lgm(config, lgm_observation_params(), kObservationSeed);
}

namespace {

double lgm_log_likelihood(const LgmConfig& config, const Eigen::Ref<const Vector>& x_obs,
                          const IndexSet& keep, const Eigen::Ref<const Vector>& theta)
{
    const double var = config.sigma * config.sigma;
    double acc = 0.0;
    for (int i : keep) {
        const double r = x_obs[i] - config.mu0[i] - config.L.row(i).dot(theta);
        acc += r * r;
    }
    const double k = static_cast<double>(keep.size());
    return -0.5 * acc / var - 0.5 * k * std::log(2.0 * std::numbers::pi * var);
}

} // namespace

double lgm_posterior_logpdf(const LgmConfig& config, const BoxPrior& prior,
                            const Eigen::Ref<const Vector>& x_obs, const IndexSet& keep,
                            const Eigen::Ref<const Vector>& theta)
{
    config.validate();
    check_index_set(keep, config.feature_dim());
    if (x_obs.size() != config.feature_dim() || theta.size() != config.param_dim())
        throw DimensionError("lgm_posterior_logpdf: dimension mismatch");
    const double log_prior = prior.log_density(theta);
    if (!std::isfinite(log_prior))
        return kNegInf;
    return lgm_log_likelihood(config, x_obs, keep, theta) + log_prior;
}

Matrix sample_lgm_posterior(const LgmConfig& config, const BoxPrior& prior,
                            const Eigen::Ref<const Vector>& x_obs, const IndexSet& keep, int n,
                            std::uint64_t seed)
{
    config.validate();
    prior.validate();
    check_index_set(keep, config.feature_dim());
    if (n < 1)
        throw ConfigError("sample_lgm_posterior: n must be >= 1");
    const double var = config.sigma * config.sigma;
    const double log_bound = -0.5 * static_cast<double>(keep.size()) * std::log(2.0 * std::numbers::pi * var);

    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Matrix out(n, prior.dim());
    Vector theta(prior.dim());
    int accepted = 0;
    while (accepted < n) {
        for (int j = 0; j < prior.dim(); ++j)
            theta[j] = prior.lower[j] + (prior.upper[j] - prior.lower[j]) * unit(rng);
        const double log_accept = lgm_log_likelihood(config, x_obs, keep, theta) - log_bound;
        if (std::log(unit(rng)) < log_accept)
            out.row(accepted++) = theta.transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hodgkin-Huxley

Vector HhParams::to_vector() const
{
    Vector v(kDim);
    v << C, g_Na, g_K, g_M, g_leak, g_L, tau_max, V_T, E_leak, r_SS;
    return v;
}

HhParams HhParams::from_vector(const Eigen::Ref<const Vector>& v)
{
    if (v.size() != kDim)
        throw DimensionError("HH parameter vector must have 10 entries");
    HhParams p;
    p.C = v[0];
    p.g_Na = v[1];
    p.g_K = v[2];
    p.g_M = v[3];
    p.g_leak = v[4];
    p.g_L = v[5];
    p.tau_max = v[6];
    p.V_T = v[7];
    p.E_leak = v[8];
    p.r_SS = v[9];
    return p;
}

std::vector<std::string> hh_param_names()
{
    return {"C", "g_Na", "g_K", "g_M", "g_leak", "g_L", "tau_max", "V_T", "E_leak", "r_SS"};
}

BoxPrior hh_prior()
{
    BoxPrior p;
    p.lower.resize(HhParams::kDim);
    p.upper.resize(HhParams::kDim);
    p.lower << 0.4, 0.5, 1e-4, -3e-5, 1e-4, -3e-5, 50.0, -90.0, -110.0, 0.1;
    p.upper << 3.0, 80.0, 30.0, 0.6, 0.8, 0.6, 3000.0, -40.0, -50.0, 3.0;
    p.names = hh_param_names();
    return p;
}

HhParams hh_reference_params()
{
    const auto prior = hh_prior();
    return HhParams::from_vector(0.5 * (prior.lower + prior.upper));
}

HhParams hh_observation_params()
{
    HhParams p;
    p.C = 1.5;
    p.g_Na = 40.0;
    p.g_K = 10.0;
    p.g_M = 0.1;
    p.g_leak = 0.1;
    p.g_L = 0.1;
    p.tau_max = 1000.0;
    p.V_T = -60.0;
    p.E_leak = -70.0;
    p.r_SS = 1.0;
    return p;
}

double HhConstants::k_tadj() const { return std::pow(Q10, (T2 - T1) / 10.0); }

namespace units {

double soma_area_cm2(double tau_ms, double capacitance_uF_cm2, double r_in_megaohm)
{
    const double tau_s = tau_ms * 1e-3;
    const double c_F_cm2 = capacitance_uF_cm2 * 1e-6;
    const double r_ohm = r_in_megaohm * 1e6;
    return tau_s / (c_F_cm2 * r_ohm);
}

double current_density_uA_cm2(double current_pA, double area_cm2) { return current_pA * 1e-6 / area_cm2; }

} // namespace units

void StimulusProtocol::validate() const
{
    if (!(dt > 0.0))
        throw ConfigError("stimulus: dt must be positive");
    if (!(onset >= 0.0) || !(duration >= 0.0) || !(onset + duration <= total))
        throw ConfigError("stimulus: need 0 <= onset and onset + duration <= total");
    if (!std::isfinite(amplitude) || !std::isfinite(V0))
        throw ConfigError("stimulus: amplitude and V0 must be finite");
}

double StimulusProtocol::current_at(double t) const
{
    return (t >= onset && t < onset + duration) ? amplitude : 0.0;
}

int StimulusProtocol::steps() const { return static_cast<int>(std::lround(total / dt)); }

SimulationDiverged::SimulationDiverged(double time_ms, double voltage)
    : NumericalError("HH simulation diverged at t = " + std::to_string(time_ms) +
                     " ms (V = " + std::to_string(voltage) + " mV)"),
      time_(time_ms)
{
}

double exprel_rate(double x, double c)
{
    const double u = x / c;
    if (std::abs(u) < 1e-6)
        return c * (1.0 - 0.5 * u);
    return x / std::expm1(u);
}

// Gating kinetics after Pospischil et al. (2008), "Minimal Hodgkin-Huxley type
// models for different classes of cortical and thalamic neurons", Biol. Cybern.
// Voltages in mV, rates in 1/ms.
namespace {

std::array<GateKinetics, kGateCount> kinetics(double V, const HhParams& params, double k)
{
    const double rate_factor = k / params.r_SS;
    const double vt = V - params.V_T;

    std::array<GateKinetics, kGateCount> out{};
    auto from_rates = [rate_factor](double alpha, double beta) {
        const double sum = alpha + beta;
        return GateKinetics{alpha / sum, 1.0 / (sum * rate_factor)};
    };

    // I_Na (Traub-Miles form used for I_Na): activation m, inactivation h.
    out[kGateM] = from_rates(0.32 * exprel_rate(-(vt - 13.0), 4.0), 0.28 * exprel_rate(vt - 40.0, 5.0));
    out[kGateH] = from_rates(0.128 * std::exp(-(vt - 17.0) / 18.0), 4.0 / (1.0 + std::exp(-(vt - 40.0) / 5.0)));
    // I_Kd delayed rectifier: activation n.
    out[kGateN] = from_rates(0.032 * exprel_rate(-(vt - 15.0), 5.0), 0.5 * std::exp(-(vt - 10.0) / 40.0));
    // I_M slow non-inactivating K+: p_inf and tau_p(V, tau_max), scaled by k_Tadj only.
    {
        const double v = V + 35.0;
        const double p_inf = 1.0 / (1.0 + std::exp(-v / 10.0));
        const double tau_p = params.tau_max / (3.3 * std::exp(v / 20.0) + std::exp(-v / 20.0));
        out[kGateP] = GateKinetics{p_inf, tau_p / k};
    }
    // I_L high-threshold Ca2+: activation q, inactivation r.
    out[kGateQ] = from_rates(0.055 * exprel_rate(-27.0 - V, 3.8), 0.94 * std::exp((-75.0 - V) / 17.0));
    out[kGateR] = from_rates(0.000457 * std::exp((-13.0 - V) / 50.0), 0.0065 / (std::exp((-15.0 - V) / 28.0) + 1.0));
    return out;
}

} // namespace

std::array<GateKinetics, kGateCount> gating_steady_state_and_tau(double V, const HhParams& params,
                                                                 const HhConstants& constants)
{
    return kinetics(V, params, constants.k_tadj());
}

VoltageTrace simulate_hh(const HhParams& params, const HhConstants& constants, const StimulusProtocol& stim)
{
    stim.validate();
    const Vector pv = params.to_vector();
    if (!pv.allFinite() || !(params.C > 0.0) || !(params.r_SS > 0.0) || !(params.tau_max > 0.0))
        throw ConfigError("simulate_hh: parameters must be finite with C, r_SS, tau_max > 0");

    const double area = units::soma_area_cm2(constants.tau, params.C, constants.R_in);
    const int n_steps = stim.steps();
    const double dt = stim.dt;

    VoltageTrace trace;
    trace.times.resize(n_steps + 1);
    trace.voltages.resize(n_steps + 1);

    const double k_tadj = constants.k_tadj();
    double V = stim.V0;
    std::array<double, kGateCount> z{};
    {
        const auto kin = kinetics(V, params, k_tadj);
        for (int g = 0; g < kGateCount; ++g)
            z[g] = kin[g].inf;
    }
    trace.times[0] = 0.0;
    trace.voltages[0] = V;

    for (int i = 0; i < n_steps; ++i) {
        const double t = i * dt;
        // Gates: exact exponential update at frozen V.
        const auto kin = kinetics(V, params, k_tadj);
        for (int g = 0; g < kGateCount; ++g)
            z[g] = kin[g].inf + (z[g] - kin[g].inf) * std::exp(-dt / kin[g].tau);

        // Voltage: linear in V with conductances frozen over the step.
        const double m = z[kGateM], h = z[kGateH], n = z[kGateN];
        const double p = z[kGateP], q = z[kGateQ], r = z[kGateR];
        const double g_na = params.g_Na * m * m * m * h;
        const double n2 = n * n;
        const double g_k = params.g_K * n2 * n2;
        const double g_m = params.g_M * p;
        const double g_l = params.g_L * q * q * r;
        const double g_total = g_na + g_k + params.g_leak + g_m + g_l;
        const double drive = units::current_density_uA_cm2(stim.current_at(t), area) + g_na * constants.E_Na +
                             (g_k + g_m) * constants.E_K + params.g_leak * params.E_leak + g_l * constants.E_Ca;
        const double rate = g_total / params.C;
        const double slope = (drive - g_total * V) / params.C; // dV/dt at the start of the step
        const double x = rate * dt;
        const double phi = std::abs(x) < 1e-8 ? 1.0 - 0.5 * x : -std::expm1(-x) / x;
        V += dt * slope * phi;

        const double t_next = (i + 1) * dt;
        if (!std::isfinite(V) || std::abs(V) > kDivergenceVoltage)
            throw SimulationDiverged(t_next, V);
        trace.times[i + 1] = t_next;
        trace.voltages[i + 1] = V;
    }
    for (int g = 0; g < kGateCount; ++g)
        trace.gating_final[static_cast<std::size_t>(g)] = z[g];
    return trace;
}

} // namespace fslm::sim
