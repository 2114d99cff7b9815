#pragma once

#include "fslm/common.hpp"

#include <array>
#include <string>
#include <vector>

namespace fslm::sim {

/// Axis-aligned uniform prior p(theta).
struct BoxPrior {
    Vector lower;
    Vector upper;
    std::vector<std::string> names;

    int dim() const { return static_cast<int>(lower.size()); }
    /// Throws ConfigError unless lower < upper elementwise and dims agree.
    void validate() const;
    bool contains(const Eigen::Ref<const Vector>& theta) const;
    /// Normalized log density; -inf outside the box.
    double log_density(const Eigen::Ref<const Vector>& theta) const;
    double log_volume() const;
};

/// n x dim matrix of i.i.d. uniform draws from the box.
Matrix sample_prior(const BoxPrior& prior, int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Linear Gaussian model: x = mu0 + L theta + sigma * eta, eta ~ N(0, I_4).

struct LgmConfig {
    Vector mu0;
    Matrix L;
    double sigma = 1.0;

    int feature_dim() const { return static_cast<int>(L.rows()); }
    int param_dim() const { return static_cast<int>(L.cols()); }
    void validate() const;
};

/// L = [[1,0,0],[0,1,0],[0,1,1],[0,0,0]], mu0 = 0, sigma = 1.
LgmConfig default_lgm_config();
/// theta_i ~ U(-5, 5), i = 0..2.
BoxPrior lgm_prior();
std::vector<std::string> lgm_feature_names();

Vector simulate_lgm(const LgmConfig& config, const Eigen::Ref<const Vector>& theta, std::uint64_t seed);

/// Ground-truth parameters (1, -1, 0.5) of the default LGM observation.
Vector lgm_observation_params();
/// One noisy draw at lgm_observation_params() under a fixed seed.
Vector lgm_observation(const LgmConfig& config);

/// Exact log posterior (up to the evidence) of the Gaussian likelihood restricted
/// to features `keep`, times the uniform prior. -inf outside the box.
double lgm_posterior_logpdf(const LgmConfig& config, const BoxPrior& prior,
                            const Eigen::Ref<const Vector>& x_obs, const IndexSet& keep,
                            const Eigen::Ref<const Vector>& theta);

/// Exact draws from the box-truncated LGM posterior, by rejection from the prior
/// under the bound log-likelihood <= -|keep|/2 log(2 pi sigma^2).
Matrix sample_lgm_posterior(const LgmConfig& config, const BoxPrior& prior,
                            const Eigen::Ref<const Vector>& x_obs, const IndexSet& keep, int n,
                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// Single-compartment Hodgkin-Huxley model with Na, Kd, M, L-type Ca and leak.

struct HhParams {
    double C = 1.7;        // uF/cm^2
    double g_Na = 40.25;   // mS/cm^2
    double g_K = 15.0;     // mS/cm^2
    double g_M = 0.3;      // mS/cm^2
    double g_leak = 0.4;   // mS/cm^2
    double g_L = 0.3;      // mS/cm^2
    double tau_max = 1525; // ms
    double V_T = -65.0;    // mV
    double E_leak = -80.0; // mV
    double r_SS = 1.55;

    static constexpr int kDim = 10;
    Vector to_vector() const;
    static HhParams from_vector(const Eigen::Ref<const Vector>& v);
};

std::vector<std::string> hh_param_names();
/// Prior box over (C, g_Na, g_K, g_M, g_leak, g_L, tau_max, V_T, E_leak, r_SS).
BoxPrior hh_prior();
/// Midpoint of hh_prior().
HhParams hh_reference_params();
/// Regular-spiking parameter set inside the prior used as the default HH
/// observation (13 adapting APs under the default stimulus).
HhParams hh_observation_params();

struct HhConstants {
    double E_Na = 71.1;   // mV
    double E_K = -101.3;  // mV
    double E_Ca = 131.1;  // mV
    double T1 = 36.0;     // degC
    double T2 = 34.0;     // degC
    double Q10 = 3.0;
    double tau = 11.97;   // ms, membrane time constant
    double R_in = 126.2;  // MOhm

    double k_tadj() const;
};

namespace units {
/// Soma area A = tau / (C R_in) in cm^2 for tau [ms], C [uF/cm^2], R_in [MOhm].
double soma_area_cm2(double tau_ms, double capacitance_uF_cm2, double r_in_megaohm);
/// Injected current [pA] spread over `area` [cm^2], in uA/cm^2.
double current_density_uA_cm2(double current_pA, double area_cm2);
} // namespace units

struct StimulusProtocol {
    double amplitude = 200.0; // pA
    double onset = 100.0;     // ms
    double duration = 600.0;  // ms
    double total = 800.0;     // ms
    double dt = 0.04;         // ms
    double V0 = -70.0;        // mV

    void validate() const;
    double current_at(double t) const;
    double offset() const { return onset + duration; }
    int steps() const;
};

struct VoltageTrace {
    Vector times;
    Vector voltages;
    std::array<double, 6> gating_final{}; // m, h, n, p, q, r
};

class SimulationDiverged : public NumericalError {
public:
    SimulationDiverged(double time_ms, double voltage);
    double time() const { return time_; }
    std::string kind() const override { return "simulation-diverged"; }

private:
    double time_;
};

struct GateKinetics {
    double inf = 0.0;
    double tau = 0.0; // ms, temperature- and rate-scale adjusted
};

enum Gate : int { kGateM = 0, kGateH, kGateN, kGateP, kGateQ, kGateR, kGateCount };

/// Rate function x / (exp(x / c) - 1), evaluated at x = 0 by its limit c.
double exprel_rate(double x, double c);

/// Steady state and effective time constant of every gate at membrane voltage V.
std::array<GateKinetics, kGateCount> gating_steady_state_and_tau(double V, const HhParams& params,
                                                                 const HhConstants& constants);

VoltageTrace simulate_hh(const HhParams& params, const HhConstants& constants,
                         const StimulusProtocol& stim);

} // namespace fslm::sim
