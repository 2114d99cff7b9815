#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fslm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

/// Ordered, duplicate-free list of feature column indices.
using IndexSet = std::vector<int>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual std::string kind() const { return "error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    std::string kind() const override { return "config"; }
};

class DimensionError : public Error {
public:
    using Error::Error;
    std::string kind() const override { return "dimension"; }
};

class FormatError : public Error {
public:
    using Error::Error;
    std::string kind() const override { return "format"; }
};

class NumericalError : public Error {
public:
    using Error::Error;
    std::string kind() const override { return "numerical"; }
};

/// splitmix64 finalizer; used to derive independent per-item seeds.
std::uint64_t mix_seed(std::uint64_t x);

/// Seed for item `index` of a batch run under `master`. Identical for serial
/// and parallel execution.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Seed keyed by a string tag, e.g. "reference" vs "candidate".
std::uint64_t derive_seed(std::uint64_t master, const std::string& tag);

/// Number of worker threads used by parallel_for. 0 selects hardware concurrency.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs body(i) for i in [0, n) over a static partition of the worker pool.
/// body must only write to state owned by index i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

/// Validates that `keep` holds distinct indices in [0, dim). Throws ConfigError.
void check_index_set(const IndexSet& keep, int dim);

IndexSet all_indices(int dim);
IndexSet complement(const IndexSet& drop, int dim);

double log_sum_exp(const double* values, int n);

/// Elementwise tanh via the vectorized exponential, 1 - 2 / (exp(2x) + 1).
/// Absolute error below 1e-15.
Matrix tanh_activation(const Matrix& x);

} // namespace fslm
