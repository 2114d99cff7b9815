#include "fslm/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace fslm::features {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const FeatureSet kCanonical = {
    "APT", "APA", "APW", "AHP", "APA_adapt", "latency", "APC", "mean_Vm", "var_Vm", "mean_Vrest",
    "APT_3", "APA_3", "APW_3", "AHP_3", "APC_T1_8", "APC_T1_4", "APC_T1_2", "APC_T2_2",
    "mean_APA_adapt", "CV_APA", "ISI_adapt", "CV_ISI", "std_Vrest",
};

// Per-spike measurements derived from SpikeEvents and the raw trace.
struct SpikeShape {
    double threshold_time;
    double threshold_voltage;
    double amplitude;
    double width; // NaN if the trace ends before repolarization
    double ahp;
};

double mean(const std::vector<double>& v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population standard deviation.
double stddev(const std::vector<double>& v)
{
    const double m = mean(v);
    double acc = 0.0;
    for (double x : v)
        acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

double interpolate_time(double t0, double v0, double t1, double v1, double level)
{
    if (v1 == v0)
        return t0;
    return t0 + (level - v0) / (v1 - v0) * (t1 - t0);
}

// Half-height width around the spike whose peak sits at sample `peak`.
double spike_width(const sim::VoltageTrace& tr, Eigen::Index threshold_index, Eigen::Index peak,
                   double threshold_voltage, double peak_voltage)
{
    const double half = threshold_voltage + 0.5 * (peak_voltage - threshold_voltage);
    const auto& t = tr.times;
    const auto& v = tr.voltages;
    double rise = kNaN;
    for (Eigen::Index k = std::max<Eigen::Index>(threshold_index, 1); k <= peak; ++k) {
        if (v[k] >= half) {
            rise = v[k - 1] >= half ? t[k] : interpolate_time(t[k - 1], v[k - 1], t[k], v[k], half);
            break;
        }
    }
    double fall = kNaN;
    for (Eigen::Index k = peak + 1; k < v.size(); ++k) {
        if (v[k] < half) {
            fall = interpolate_time(t[k - 1], v[k - 1], t[k], v[k], half);
            break;
        }
    }
    return fall - rise;
}

Eigen::Index first_index_at_or_after(const Vector& times, double t, double dt)
{
    const double tol = 1e-6 * dt;
    auto it = std::lower_bound(times.data(), times.data() + times.size(), t - tol);
    return static_cast<Eigen::Index>(it - times.data());
}

} // namespace

bool FeatureVector::all_valid() const
{
    return std::all_of(valid.begin(), valid.end(), [](bool b) { return b; });
}

const FeatureSet& canonical_feature_names() { return kCanonical; }

FeatureSet core_feature_set() { return FeatureSet(kCanonical.begin(), kCanonical.begin() + 10); }

FeatureSet extended_feature_set() { return kCanonical; }

void validate_feature_set(const FeatureSet& set)
{
    if (set.empty())
        throw ConfigError("feature set must be nonempty");
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (std::find(kCanonical.begin(), kCanonical.end(), set[i]) == kCanonical.end())
            throw ConfigError("unknown feature '" + set[i] + "'");
        if (std::find(set.begin(), set.begin() + static_cast<std::ptrdiff_t>(i), set[i]) !=
            set.begin() + static_cast<std::ptrdiff_t>(i))
            throw ConfigError("duplicate feature '" + set[i] + "'");
    }
}

SpikeEvents detect_spikes(const sim::VoltageTrace& trace, const SpikeDetection& opts)
{
    SpikeEvents ev;
    const auto& t = trace.times;
    const auto& v = trace.voltages;
    const Eigen::Index n = v.size();
    if (n < 3)
        return ev;
    const double dt = t[1] - t[0];

    Vector dvdt(n);
    dvdt[0] = (v[1] - v[0]) / dt;
    dvdt[n - 1] = (v[n - 1] - v[n - 2]) / dt;
    for (Eigen::Index i = 1; i + 1 < n; ++i)
        dvdt[i] = (v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1]);

    const auto window = static_cast<Eigen::Index>(std::ceil(opts.peak_window / dt));
    Eigen::Index i = 1;
    while (i < n) {
        if (!(dvdt[i - 1] < opts.dvdt_threshold && dvdt[i] >= opts.dvdt_threshold)) {
            ++i;
            continue;
        }
        Eigen::Index above = -1;
        for (Eigen::Index j = i; j < std::min(n, i + window + 1); ++j) {
            if (v[j] > opts.peak_min_voltage) {
                above = j;
                break;
            }
        }
        if (above < 0) {
            ++i;
            continue;
        }
        Eigen::Index peak = above;
        while (peak + 1 < n && v[peak + 1] >= v[peak])
            ++peak;

        const double frac = (opts.dvdt_threshold - dvdt[i - 1]) / (dvdt[i] - dvdt[i - 1]);
        ev.threshold_times.push_back(t[i - 1] + frac * (t[i] - t[i - 1]));
        ev.threshold_voltages.push_back(v[i - 1] + frac * (v[i] - v[i - 1]));
        ev.peak_times.push_back(t[peak]);
        ev.peak_voltages.push_back(v[peak]);
        ev.peak_indices.push_back(peak);
        i = peak + 1;
    }
    return ev;
}

FeatureVector extract_features(const sim::VoltageTrace& trace, const sim::StimulusProtocol& stim,
                               const FeatureSet& set, const SpikeDetection& opts)
{
    validate_feature_set(set);
    const auto& t = trace.times;
    const auto& v = trace.voltages;
    if (t.size() != v.size() || t.size() < 3)
        throw DimensionError("extract_features: malformed trace");
    const double dt = t[1] - t[0];
    const double onset = stim.onset + t[0];
    const double offset = stim.offset() + t[0];

    const SpikeEvents ev = detect_spikes(trace, opts);

    // Spikes whose threshold crossing falls inside the stimulus window.
    std::vector<SpikeShape> spikes;
    for (std::size_t s = 0; s < ev.size(); ++s) {
        const double tt = ev.threshold_times[s];
        if (tt < onset - 1e-6 * dt || tt >= offset - 1e-6 * dt)
            continue;
        const Eigen::Index peak = ev.peak_indices[s];
        const Eigen::Index thr_index = first_index_at_or_after(t, tt, dt);
        SpikeShape sh{};
        sh.threshold_time = tt;
        sh.threshold_voltage = ev.threshold_voltages[s];
        sh.amplitude = ev.peak_voltages[s] - ev.threshold_voltages[s];
        sh.width = spike_width(trace, thr_index, peak, sh.threshold_voltage, ev.peak_voltages[s]);

        double ahp_end = ev.peak_times[s] + opts.ahp_window;
        if (s + 1 < ev.size())
            ahp_end = std::min(ahp_end, ev.threshold_times[s + 1]);
        double v_min = v[peak];
        for (Eigen::Index k = peak; k < v.size() && t[k] <= ahp_end; ++k)
            v_min = std::min(v_min, v[k]);
        sh.ahp = sh.threshold_voltage - v_min;
        spikes.push_back(sh);
    }

    const Eigen::Index i_onset = first_index_at_or_after(t, onset, dt);
    const Eigen::Index i_offset = first_index_at_or_after(t, offset, dt);
    std::vector<double> rest(v.data(), v.data() + i_onset);
    std::vector<double> driven(v.data() + i_onset, v.data() + i_offset);

    std::vector<double> amps;
    for (const auto& s : spikes)
        amps.push_back(s.amplitude);
    std::vector<double> isis;
    for (std::size_t s = 1; s < spikes.size(); ++s)
        isis.push_back(spikes[s].threshold_time - spikes[s - 1].threshold_time);

    const double duration = stim.duration;
    auto count_in = [&](double from, double to) {
        double c = 0.0;
        for (const auto& s : spikes)
            if (s.threshold_time >= onset + from - 1e-6 * dt && s.threshold_time < onset + to - 1e-6 * dt)
                c += 1.0;
        return c;
    };

    std::map<std::string, double> all;
    const std::size_t n_spikes = spikes.size();
    auto nth = [&](std::size_t k, auto field) { return n_spikes > k ? field(spikes[k]) : kNaN; };

    all["APT"] = nth(0, [](const SpikeShape& s) { return s.threshold_voltage; });
    all["APA"] = nth(0, [](const SpikeShape& s) { return s.amplitude; });
    all["APW"] = nth(0, [](const SpikeShape& s) { return s.width; });
    all["AHP"] = nth(0, [](const SpikeShape& s) { return s.ahp; });
    all["latency"] = nth(0, [&](const SpikeShape& s) { return s.threshold_time - onset; });
    all["APT_3"] = nth(2, [](const SpikeShape& s) { return s.threshold_voltage; });
    all["APA_3"] = nth(2, [](const SpikeShape& s) { return s.amplitude; });
    all["APW_3"] = nth(2, [](const SpikeShape& s) { return s.width; });
    all["AHP_3"] = nth(2, [](const SpikeShape& s) { return s.ahp; });

    all["APA_adapt"] = n_spikes >= 2 ? (amps.back() - amps.front()) / amps.front() : kNaN;
    if (n_spikes >= 2) {
        std::vector<double> ratios;
        for (std::size_t s = 1; s < n_spikes; ++s)
            ratios.push_back((amps[s] - amps[s - 1]) / amps[s - 1]);
        all["mean_APA_adapt"] = mean(ratios);
        all["CV_APA"] = stddev(amps) / mean(amps);
    } else {
        all["mean_APA_adapt"] = kNaN;
        all["CV_APA"] = kNaN;
    }
    all["ISI_adapt"] = isis.size() >= 2 ? (isis.back() - isis.front()) / isis.front() : kNaN;
    all["CV_ISI"] = isis.size() >= 2 ? stddev(isis) / mean(isis) : kNaN;

    all["APC"] = static_cast<double>(n_spikes);
    all["APC_T1_8"] = count_in(0.0, duration / 8.0);
    all["APC_T1_4"] = count_in(0.0, duration / 4.0);
    all["APC_T1_2"] = count_in(0.0, duration / 2.0);
    all["APC_T2_2"] = count_in(duration / 2.0, duration);

    if (!driven.empty()) {
        const double m = mean(driven);
        all["mean_Vm"] = m;
        double acc = 0.0;
        for (double x : driven)
            acc += (x - m) * (x - m);
        all["var_Vm"] = acc / static_cast<double>(driven.size());
    } else {
        all["mean_Vm"] = all["var_Vm"] = kNaN;
    }
    all["mean_Vrest"] = rest.empty() ? kNaN : mean(rest);
    all["std_Vrest"] = rest.empty() ? kNaN : stddev(rest);

    FeatureVector out;
    out.names = set;
    out.values.resize(static_cast<Eigen::Index>(set.size()));
    out.valid.resize(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        const double value = all.at(set[i]);
        const bool ok = std::isfinite(value);
        out.values[static_cast<Eigen::Index>(i)] = ok ? value : kNaN;
        out.valid[i] = ok;
    }
    return out;
}

FeatureVector lgm_features(const Eigen::Ref<const Vector>& x)
{
    FeatureVector out;
    out.values = x;
    out.valid.resize(static_cast<std::size_t>(x.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        out.valid[static_cast<std::size_t>(i)] = std::isfinite(x[i]);
        out.names.push_back("x" + std::to_string(i));
    }
    return out;
}

} // namespace fslm::features
