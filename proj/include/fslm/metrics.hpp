#pragma once

#include "fslm/common.hpp"

#include <string>
#include <utility>
#include <vector>

namespace fslm::metrics {

struct Neighbor {
    Eigen::Index index = -1;
    double distance = 0.0;
};

/// Static k-d tree for exact Euclidean nearest-neighbor queries. Results equal a
/// linear scan exactly; equal distances resolve to the lowest point index.
class KdTree {
public:
    /// Copies `points` (n x d, n >= 1).
    explicit KdTree(const Eigen::Ref<const Matrix>& points, int leaf_size = 8);

    Neighbor nearest(const Eigen::Ref<const Vector>& query) const;
    /// Nearest point to point `index` among all other points.
    Neighbor nearest_excluding_self(Eigen::Index index) const;

    Eigen::Index size() const { return points_.rows(); }
    int dim() const { return static_cast<int>(points_.cols()); }

private:
    struct Node {
        int split_dim = -1; // -1 marks a leaf
        double split_value = 0.0;
        Eigen::Index begin = 0, end = 0; // range into order_ for leaves
        int left = -1, right = -1;
    };

    int build(Eigen::Index begin, Eigen::Index end);
    void search(int node, const double* q, Eigen::Index exclude, double& best_sq, Eigen::Index& best) const;

    RowMatrix points_;
    std::vector<Eigen::Index> order_;
    std::vector<Node> nodes_;
    int leaf_size_;
};

/// Squared distance with the summation order shared by the tree and scans.
double squared_distance(const double* a, const double* b, int d);

struct KlEstimate {
    double value = 0.0;
    Eigen::Index n = 0, m = 0;
    int dim = 0;
    /// Zero nearest-neighbor distances replaced by epsilon.
    int zero_distances = 0;
    double epsilon = 0.0;
};

/// 1-NN estimate of KL(p_X || p_Y) from samples X (N x d) and Y (M x d):
///   d/N sum_i log(min_j |X_i - Y_j| / min_{j != i} |X_i - X_j|) + log(M / (N - 1)).
/// Zero distances (exact duplicates) are replaced by 1e-12 times the data scale.
KlEstimate kl_estimate_detailed(const Matrix& x, const Matrix& y);
double kl_estimate(const Matrix& x, const Matrix& y);

/// Linear-interpolation quantile (sample quantile type 7). Needs >= 1 value.
double quantile(std::vector<double> values, double p);
/// Q3 - Q1; needs at least 4 values.
double iqr(const Eigen::Ref<const Vector>& samples);

struct IqrMatrix {
    std::vector<std::string> row_names; // removed features (or subsets)
    std::vector<std::string> col_names; // parameters
    Matrix values;                      // NaN where undefined
    std::vector<std::vector<bool>> defined;

    std::string to_csv() const;
};

/// Entry (i, j) = IQR(reduced_i[:, j]) / IQR(full[:, j]).
IqrMatrix iqr_ratio_matrix(const std::vector<std::pair<std::string, Matrix>>& reduced, const Matrix& full,
                           const std::vector<std::string>& param_names);

} // namespace fslm::metrics
