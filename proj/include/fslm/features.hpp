#pragma once

#include "fslm/common.hpp"
#include "fslm/sim.hpp"

#include <string>
#include <vector>

namespace fslm::features {

/// Summary statistics of one simulation. values[i] is finite iff valid[i].
struct FeatureVector {
    Vector values;
    std::vector<bool> valid;
    std::vector<std::string> names;

    bool all_valid() const;
    int size() const { return static_cast<int>(values.size()); }
};

/// Ordered feature names. Any subset of canonical_feature_names() is a valid set.
using FeatureSet = std::vector<std::string>;

/// The 10 statistics used for HH inference followed by the 13 extended ones.
const FeatureSet& canonical_feature_names();
/// APT, APA, APW, AHP, APA_adapt, latency, APC, mean_Vm, var_Vm, mean_Vrest.
FeatureSet core_feature_set();
FeatureSet extended_feature_set();

/// Throws ConfigError on unknown or repeated names.
void validate_feature_set(const FeatureSet& set);

struct SpikeEvents {
    std::vector<double> threshold_times;
    std::vector<double> threshold_voltages;
    std::vector<double> peak_times;
    std::vector<double> peak_voltages;
    /// Sample indices of the peaks; used for width/AHP measurements.
    std::vector<Eigen::Index> peak_indices;

    std::size_t size() const { return threshold_times.size(); }
};

struct SpikeDetection {
    double dvdt_threshold = 20.0; // mV/ms
    double peak_min_voltage = -20.0; // mV, must be exceeded ...
    double peak_window = 2.0;        // ... within this many ms of the threshold crossing
    double ahp_window = 50.0;        // ms after the peak
};

SpikeEvents detect_spikes(const sim::VoltageTrace& trace, const SpikeDetection& opts = {});

FeatureVector extract_features(const sim::VoltageTrace& trace, const sim::StimulusProtocol& stim,
                               const FeatureSet& set, const SpikeDetection& opts = {});

/// LGM observations are their own features; NaN entries are marked invalid.
FeatureVector lgm_features(const Eigen::Ref<const Vector>& x);

} // namespace fslm::features
