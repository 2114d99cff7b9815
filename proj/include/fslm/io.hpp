#pragma once

#include "fslm/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace fslm {

// Binary matrix layout (little-endian):
//   bytes 0..7   magic "FSLMMAT1"
//   bytes 8..15  row count (u64)
//   bytes 16..23 column count (u64)
//   then rows*cols f64 values, row-major.
// Column names and free-form metadata live in a JSON sidecar at "<path>.json".
inline constexpr char kMatrixMagic[8] = {'F', 'S', 'L', 'M', 'M', 'A', 'T', '1'};

struct MatrixFile {
    RowMatrix data;
    std::vector<std::string> columns;
    nlohmann::json metadata = nlohmann::json::object();
};

std::filesystem::path sidecar_path(const std::filesystem::path& path);

void write_matrix(const std::filesystem::path& path, const MatrixFile& file);
MatrixFile read_matrix(const std::filesystem::path& path);

/// Writes bytes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Simulated (theta, x, valid) rows. Columns of `x` follow `feature_names`.
struct Dataset {
    Matrix theta; // n x P
    Matrix x;     // n x D; NaN where invalid
    std::vector<bool> valid;
    std::vector<std::string> param_names;
    std::vector<std::string> feature_names;
    nlohmann::json metadata = nlohmann::json::object();

    Eigen::Index size() const { return theta.rows(); }
    std::size_t valid_count() const;
    /// Rows whose features are all valid, restricted to columns `keep`.
    Dataset valid_subset(const IndexSet& keep) const;
};

MatrixFile to_matrix_file(const Dataset& ds);
Dataset dataset_from_matrix_file(const MatrixFile& file);

} // namespace fslm
