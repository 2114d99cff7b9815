#include "fslm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fslm::metrics {

double squared_distance(const double* a, const double* b, int d)
{
    double acc = 0.0;
    for (int k = 0; k < d; ++k) {
        const double diff = a[k] - b[k];
        acc += diff * diff;
    }
    return acc;
}

KdTree::KdTree(const Eigen::Ref<const Matrix>& points, int leaf_size) : points_(points), leaf_size_(std::max(1, leaf_size))
{
    if (points_.rows() < 1 || points_.cols() < 1)
        throw ConfigError("KdTree: need at least one point of positive dimension");
    if (!points_.allFinite())
        throw ConfigError("KdTree: points must be finite");
    order_.resize(static_cast<std::size_t>(points_.rows()));
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(static_cast<std::size_t>(2 * points_.rows() / leaf_size_ + 1));
    build(0, points_.rows());
}

int KdTree::build(Eigen::Index begin, Eigen::Index end)
{
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    nodes_[static_cast<std::size_t>(id)].begin = begin;
    nodes_[static_cast<std::size_t>(id)].end = end;
    if (end - begin <= leaf_size_)
        return id;

    // split the dimension with the widest spread at the median
    int best_dim = 0;
    double best_spread = -1.0;
    for (int k = 0; k < dim(); ++k) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (Eigen::Index i = begin; i < end; ++i) {
            const double v = points_(order_[static_cast<std::size_t>(i)], k);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi - lo > best_spread) {
            best_spread = hi - lo;
            best_dim = k;
        }
    }
    if (best_spread <= 0.0)
        return id; // all points identical

    const Eigen::Index mid = begin + (end - begin) / 2;
    auto first = order_.begin() + begin;
    std::nth_element(first, order_.begin() + mid, order_.begin() + end, [&](Eigen::Index a, Eigen::Index b) {
        return points_(a, best_dim) < points_(b, best_dim);
    });
    const double split = points_(order_[static_cast<std::size_t>(mid)], best_dim);

    const int left = build(begin, mid);
    const int right = build(mid, end);
    Node& node = nodes_[static_cast<std::size_t>(id)];
    node.split_dim = best_dim;
    node.split_value = split;
    node.left = left;
    node.right = right;
    return id;
}

void KdTree::search(int node_id, const double* q, Eigen::Index exclude, double& best_sq, Eigen::Index& best) const
{
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.split_dim < 0) {
        for (Eigen::Index i = node.begin; i < node.end; ++i) {
            const Eigen::Index idx = order_[static_cast<std::size_t>(i)];
            if (idx == exclude)
                continue;
            const double d2 = squared_distance(q, points_.row(idx).data(), dim());
            if (d2 < best_sq || (d2 == best_sq && idx < best)) {
                best_sq = d2;
                best = idx;
            }
        }
        return;
    }
    // Left holds values <= split, right holds values >= split.
    const double diff = q[node.split_dim] - node.split_value;
    const int near = diff <= 0.0 ? node.left : node.right;
    const int far = diff <= 0.0 ? node.right : node.left;
    search(near, q, exclude, best_sq, best);
    if (diff * diff <= best_sq)
        search(far, q, exclude, best_sq, best);
}

Neighbor KdTree::nearest(const Eigen::Ref<const Vector>& query) const
{
    if (query.size() != dim())
        throw DimensionError("KdTree::nearest: query has wrong dimension");
    double best_sq = std::numeric_limits<double>::infinity();
    Eigen::Index best = std::numeric_limits<Eigen::Index>::max();
    const Vector q = query;
    search(0, q.data(), -1, best_sq, best);
    return {best, std::sqrt(best_sq)};
}

Neighbor KdTree::nearest_excluding_self(Eigen::Index index) const
{
    if (index < 0 || index >= size())
        throw ConfigError("KdTree::nearest_excluding_self: index out of range");
    if (size() < 2)
        throw ConfigError("KdTree::nearest_excluding_self: need at least two points");
    double best_sq = std::numeric_limits<double>::infinity();
    Eigen::Index best = std::numeric_limits<Eigen::Index>::max();
    const Eigen::RowVectorXd q = points_.row(index);
    search(0, q.data(), index, best_sq, best);
    return {best, std::sqrt(best_sq)};
}

KlEstimate kl_estimate_detailed(const Matrix& x, const Matrix& y)
{
    if (x.cols() != y.cols())
        throw DimensionError("kl_estimate: sample sets differ in dimension");
    if (x.rows() < 2 || y.rows() < 1)
        throw ConfigError("kl_estimate: need N >= 2 and M >= 1 samples");

    KlEstimate est;
    est.n = x.rows();
    est.m = y.rows();
    est.dim = static_cast<int>(x.cols());

    double scale = 0.0;
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const double lo = std::min(x.col(k).minCoeff(), y.col(k).minCoeff());
        const double hi = std::max(x.col(k).maxCoeff(), y.col(k).maxCoeff());
        scale = std::max(scale, hi - lo);
    }
    est.epsilon = 1e-12 * (scale > 0.0 ? scale : 1.0);

    const KdTree tree_x(x);
    const KdTree tree_y(y);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < est.n; ++i) {
        double nu = tree_y.nearest(x.row(i).transpose()).distance;
        double rho = tree_x.nearest_excluding_self(i).distance;
        if (nu == 0.0) {
            nu = est.epsilon;
            ++est.zero_distances;
        }
        if (rho == 0.0) {
            rho = est.epsilon;
            ++est.zero_distances;
        }
        acc += std::log(nu / rho);
    }
    est.value = static_cast<double>(est.dim) / static_cast<double>(est.n) * acc +
                std::log(static_cast<double>(est.m) / static_cast<double>(est.n - 1));
    return est;
}

double kl_estimate(const Matrix& x, const Matrix& y) { return kl_estimate_detailed(x, y).value; }

double quantile(std::vector<double> values, double p)
{
    if (values.empty())
        throw ConfigError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double iqr(const Eigen::Ref<const Vector>& samples)
{
    if (samples.size() < 4)
        throw ConfigError("iqr: need at least 4 samples");
    std::vector<double> v(samples.data(), samples.data() + samples.size());
    return quantile(v, 0.75) - quantile(v, 0.25);
}

IqrMatrix iqr_ratio_matrix(const std::vector<std::pair<std::string, Matrix>>& reduced, const Matrix& full,
                           const std::vector<std::string>& param_names)
{
    const auto p = full.cols();
    if (static_cast<Eigen::Index>(param_names.size()) != p)
        throw DimensionError("iqr_ratio_matrix: parameter names do not match sample width");
    IqrMatrix out;
    out.col_names = param_names;
    out.values.resize(static_cast<Eigen::Index>(reduced.size()), p);
    std::vector<double> full_iqr(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j)
        full_iqr[static_cast<std::size_t>(j)] = iqr(full.col(j));
    for (std::size_t r = 0; r < reduced.size(); ++r) {
        const auto& [name, samples] = reduced[r];
        if (samples.cols() != p)
            throw DimensionError("iqr_ratio_matrix: reduced sample set '" + name + "' has wrong width");
        out.row_names.push_back(name);
        out.defined.emplace_back(static_cast<std::size_t>(p), true);
        for (Eigen::Index j = 0; j < p; ++j) {
            const double denom = full_iqr[static_cast<std::size_t>(j)];
            if (denom > 0.0) {
                out.values(static_cast<Eigen::Index>(r), j) = iqr(samples.col(j)) / denom;
            } else {
                out.values(static_cast<Eigen::Index>(r), j) = std::numeric_limits<double>::quiet_NaN();
                out.defined[r][static_cast<std::size_t>(j)] = false;
            }
        }
    }
    return out;
}

std::string IqrMatrix::to_csv() const
{
    std::ostringstream out;
    out.precision(17);
    out << "removed";
    for (const auto& c : col_names)
        out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < row_names.size(); ++r) {
        out << row_names[r];
        for (std::size_t j = 0; j < col_names.size(); ++j) {
            out << ',';
            if (defined[r][j])
                out << values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
            else
                out << "NA";
        }
        out << '\n';
    }
    return out.str();
}

} // namespace fslm::metrics
