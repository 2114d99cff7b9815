#include "fslm/select.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fslm::select {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

constexpr double kInf = std::numeric_limits<double>::infinity();

IndexSet sorted(IndexSet s)
{
    std::sort(s.begin(), s.end());
    return s;
}

Vector iqr_ratios(const Matrix& reduced, const Matrix& full)
{
    Vector out(full.cols());
    for (Eigen::Index j = 0; j < full.cols(); ++j) {
        const double denom = metrics::iqr(full.col(j));
        out[j] = denom > 0.0 ? metrics::iqr(reduced.col(j)) / denom : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

std::vector<std::string> param_names_of(const InferenceSetup& setup)
{
    if (!setup.prior.names.empty())
        return setup.prior.names;
    std::vector<std::string> names;
    for (int i = 0; i < setup.prior.dim(); ++i)
        names.push_back("theta" + std::to_string(i));
    return names;
}

void fill_row(RankRow& row, const sim::BoxPrior& prior, const Matrix& full,
              const std::function<inference::SampleSet()>& draw)
{
    const auto start = Clock::now();
    try {
        const auto samples = draw();
        row.sample_seconds = seconds_since(start);
        row.theta = samples.theta;
        row.samples = samples.theta.rows();
        row.kl = prior_box_kl(prior, samples.theta, full);
        row.iqr_ratio = iqr_ratios(samples.theta, full);
    } catch (const Error& e) {
        row.sample_seconds = seconds_since(start);
        row.failed = true;
        row.error = e.what();
        row.kl = std::numeric_limits<double>::quiet_NaN();
        row.iqr_ratio = Vector::Constant(full.cols(), std::numeric_limits<double>::quiet_NaN());
    }
}

// Scores subsets against a fixed reference sample, caching by sorted subset.
class SubsetScorer {
public:
    SubsetScorer(const InferenceSetup& setup, std::uint64_t seed) : setup_(setup), seed_(seed)
    {
        reference_ = inference::sample_posterior(make_post(all_indices(setup.feature_dim())), setup.n_samples,
                                                 reference_seed(seed), setup.sampler)
                         .theta;
    }

    GreedyCandidate score(const IndexSet& subset)
    {
        const IndexSet key = sorted(subset);
        auto it = cache_.find(key);
        if (it != cache_.end())
            return it->second;
        GreedyCandidate c{key, kInf, {}};
        try {
            const auto samples = sample_subset(setup_, key, seed_);
            c.kl = prior_box_kl(setup_.prior, samples.theta, reference_);
        } catch (const Error& e) {
            c.error = e.what();
        }
        cache_.emplace(key, c);
        return c;
    }

private:
    inference::UnnormalizedPosterior make_post(const IndexSet& keep) const
    {
        return {setup_.model, setup_.prior, setup_.x_obs, keep, setup_.calibration};
    }

    const InferenceSetup& setup_;
    std::uint64_t seed_;
    Matrix reference_;
    std::map<IndexSet, GreedyCandidate> cache_;
};

void check_setup(const InferenceSetup& setup)
{
    if (setup.n_samples < 4)
        throw ConfigError("n_samples must be at least 4 for IQR and KL estimates");
    if (setup.feature_dim() < 1)
        throw ConfigError("observation has no features");
}

} // namespace

Matrix to_unit_box(const sim::BoxPrior& prior, const Matrix& theta)
{
    const Vector width = prior.upper - prior.lower;
    return (theta.rowwise() - prior.lower.transpose()).array().rowwise() / width.transpose().array();
}

double prior_box_kl(const sim::BoxPrior& prior, const Matrix& x, const Matrix& y)
{
    return metrics::kl_estimate(to_unit_box(prior, x), to_unit_box(prior, y));
}

std::string subset_label(const IndexSet& keep)
{
    std::string out;
    for (std::size_t i = 0; i < keep.size(); ++i)
        out += (i ? "," : "") + std::to_string(keep[i]);
    return out;
}

std::uint64_t subset_seed(std::uint64_t seed, const IndexSet& keep)
{
    return derive_seed(seed, "subset:" + subset_label(sorted(keep)));
}

std::uint64_t reference_seed(std::uint64_t seed) { return derive_seed(seed, "reference"); }

inference::SampleSet sample_subset(const InferenceSetup& setup, const IndexSet& keep, std::uint64_t seed)
{
    const IndexSet key = sorted(keep);
    inference::UnnormalizedPosterior post(setup.model, setup.prior, setup.x_obs, key, setup.calibration);
    return inference::sample_posterior(post, setup.n_samples, subset_seed(seed, key), setup.sampler);
}

double RankTable::total_seconds() const
{
    double t = full_train_seconds + full_sample_seconds;
    for (const auto& r : rows)
        t += r.train_seconds + r.sample_seconds;
    return t;
}

std::string RankTable::to_csv() const
{
    std::ostringstream out;
    out.precision(17);
    out << "removed,removed_index,status,kl,samples,seed";
    for (const auto& p : param_names)
        out << ",iqr:" << p;
    out << '\n';
    for (const auto& r : rows) {
        out << r.removed << ',' << r.removed_index << ',' << (r.failed ? "failed" : "ok") << ',';
        if (r.failed)
            out << "NA";
        else
            out << r.kl;
        out << ',' << r.samples << ',' << r.seed;
        for (Eigen::Index j = 0; j < r.iqr_ratio.size(); ++j) {
            out << ',';
            if (std::isfinite(r.iqr_ratio[j]))
                out << r.iqr_ratio[j];
            else
                out << "NA";
        }
        out << '\n';
    }
    return out.str();
}

std::string RankTable::timing_csv() const
{
    std::ostringstream out;
    out.precision(6);
    out << "phase,subset,seconds\n";
    out << "train,full," << full_train_seconds << '\n';
    out << "sample,full," << full_sample_seconds << '\n';
    for (const auto& r : rows) {
        out << "train,-" << r.removed << ',' << r.train_seconds << '\n';
        out << "sample,-" << r.removed << ',' << r.sample_seconds << '\n';
    }
    out << "total,all," << total_seconds() << '\n';
    return out.str();
}

metrics::IqrMatrix RankTable::iqr_matrix() const
{
    metrics::IqrMatrix m;
    m.col_names = param_names;
    m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(param_names.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        m.row_names.push_back(rows[i].removed);
        m.defined.emplace_back(param_names.size(), true);
        for (std::size_t j = 0; j < param_names.size(); ++j) {
            const double v = rows[i].iqr_ratio[static_cast<Eigen::Index>(j)];
            m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            m.defined[i][j] = std::isfinite(v);
        }
    }
    return m;
}

RankTable leave_one_out_rank(const InferenceSetup& setup, std::uint64_t seed)
{
    check_setup(setup);
    const int d = setup.feature_dim();
    if (d < 2)
        throw ConfigError("leave_one_out_rank: need at least two features");
    RankTable table;
    table.mode = "fslm";
    table.param_names = param_names_of(setup);
    table.feature_names = setup.feature_names();
    table.full_seed = reference_seed(seed);

    const auto start = Clock::now();
    inference::UnnormalizedPosterior full(setup.model, setup.prior, setup.x_obs, all_indices(d), setup.calibration);
    table.full_samples = inference::sample_posterior(full, setup.n_samples, table.full_seed, setup.sampler).theta;
    table.full_sample_seconds = seconds_since(start);

    for (int i = 0; i < d; ++i) {
        RankRow row;
        row.removed = table.feature_names[static_cast<std::size_t>(i)];
        row.removed_index = i;
        row.keep = complement({i}, d);
        row.seed = subset_seed(seed, row.keep);
        fill_row(row, setup.prior, table.full_samples, [&] { return sample_subset(setup, row.keep, seed); });
        table.rows.push_back(std::move(row));
    }
    return table;
}

RankTable brute_force_rank(const InferenceSetup& setup, const Dataset& data, const BruteForceConfig& config,
                           std::uint64_t seed)
{
    check_setup(setup);
    const int d = setup.feature_dim();
    if (d < 1)
        throw ConfigError("brute_force_rank: need at least one feature");
    if (data.x.cols() != d)
        throw DimensionError("brute_force_rank: dataset feature count does not match the observation");

    RankTable table;
    table.mode = "brute";
    table.param_names = param_names_of(setup);
    table.feature_names = setup.feature_names();
    table.full_seed = reference_seed(seed);

    auto train_subset = [&](const IndexSet& keep) {
        const Dataset sub = data.valid_subset(keep);
        if (sub.size() < 2)
            throw NumericalError("brute_force_rank: too few valid rows for subset " + subset_label(keep));
        mdn::MdnArchitecture arch = config.architecture;
        arch.param_dim = setup.prior.dim();
        arch.feature_dim = static_cast<int>(keep.size());
        mdn::TrainConfig tc = config.train;
        tc.seed = derive_seed(config.train.seed, "subset:" + subset_label(keep));
        auto result = mdn::train(mdn::MdnModel(arch, tc.seed), sub.theta, sub.x, tc);
        return std::make_shared<const mdn::MdnModel>(std::move(result.model));
    };
    auto restricted_obs = [&](const IndexSet& keep) {
        features::FeatureVector fv;
        fv.values.resize(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t c = 0; c < keep.size(); ++c) {
            fv.values[static_cast<Eigen::Index>(c)] = setup.x_obs.values[keep[c]];
            fv.valid.push_back(setup.x_obs.valid[static_cast<std::size_t>(keep[c])]);
            fv.names.push_back(setup.x_obs.names[static_cast<std::size_t>(keep[c])]);
        }
        return fv;
    };

    const IndexSet all = all_indices(d);
    auto start = Clock::now();
    auto full_model = train_subset(all);
    table.full_train_seconds = seconds_since(start);
    start = Clock::now();
    inference::UnnormalizedPosterior full(full_model, setup.prior, setup.x_obs, all, setup.calibration);
    table.full_samples = inference::sample_posterior(full, setup.n_samples, table.full_seed, setup.sampler).theta;
    table.full_sample_seconds = seconds_since(start);

    for (int i = 0; i < d; ++i) {
        RankRow row;
        row.removed = table.feature_names[static_cast<std::size_t>(i)];
        row.removed_index = i;
        row.keep = complement({i}, d);
        row.seed = subset_seed(seed, row.keep);
        if (row.keep.empty()) {
            row.failed = true;
            row.error = "no features left";
            row.kl = std::numeric_limits<double>::quiet_NaN();
            row.iqr_ratio = Vector::Constant(setup.prior.dim(), std::numeric_limits<double>::quiet_NaN());
            table.rows.push_back(std::move(row));
            continue;
        }
        start = Clock::now();
        std::shared_ptr<const mdn::MdnModel> model;
        try {
            model = train_subset(row.keep);
        } catch (const Error& e) {
            row.train_seconds = seconds_since(start);
            row.failed = true;
            row.error = e.what();
            row.kl = std::numeric_limits<double>::quiet_NaN();
            row.iqr_ratio = Vector::Constant(setup.prior.dim(), std::numeric_limits<double>::quiet_NaN());
            table.rows.push_back(std::move(row));
            continue;
        }
        row.train_seconds = seconds_since(start);
        const auto obs = restricted_obs(row.keep);
        fill_row(row, setup.prior, table.full_samples, [&] {
            inference::UnnormalizedPosterior post(model, setup.prior, obs, all_indices(static_cast<int>(row.keep.size())),
                                                  setup.calibration);
            return inference::sample_posterior(post, setup.n_samples, row.seed, setup.sampler);
        });
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string GreedyTrace::to_csv(const std::vector<std::string>& feature_names) const
{
    std::ostringstream out;
    out.precision(17);
    out << "mode,seed,step,feature,feature_index,kl\n";
    for (std::size_t s = 0; s < order.size(); ++s) {
        const int f = order[s];
        out << mode << ',' << seed << ',' << s + 1 << ','
            << (f >= 0 && static_cast<std::size_t>(f) < feature_names.size() ? feature_names[static_cast<std::size_t>(f)]
                                                                              : std::to_string(f))
            << ',' << f << ',';
        if (std::isfinite(kl[s]))
            out << kl[s];
        else
            out << "inf";
        out << '\n';
    }
    return out.str();
}

GreedyTrace greedy_select(const InferenceSetup& setup, int k, int beam, std::uint64_t seed)
{
    check_setup(setup);
    const int d = setup.feature_dim();
    if (k < 1 || k > d)
        throw ConfigError("greedy_select: k must be in [1, feature count]");
    if (beam < 1)
        throw ConfigError("greedy_select: beam must be >= 1");

    SubsetScorer scorer(setup, seed);
    struct Path {
        std::vector<int> order;
        std::vector<double> kl;
    };
    std::vector<Path> beams{Path{}};
    GreedyTrace trace;
    trace.mode = "greedy";
    trace.seed = seed;
    trace.beam = beam;

    for (int step = 0; step < k; ++step) {
        struct Scored {
            GreedyCandidate cand;
            Path path;
        };
        std::vector<Scored> scored;
        std::vector<IndexSet> seen;
        for (const auto& b : beams) {
            for (int f = 0; f < d; ++f) {
                if (std::find(b.order.begin(), b.order.end(), f) != b.order.end())
                    continue;
                IndexSet subset = b.order;
                subset.push_back(f);
                const IndexSet key = sorted(subset);
                if (std::find(seen.begin(), seen.end(), key) != seen.end())
                    continue;
                seen.push_back(key);
                Scored s{scorer.score(key), b};
                s.path.order.push_back(f);
                s.path.kl.push_back(s.cand.kl);
                scored.push_back(std::move(s));
            }
        }
        // order by (score, subset) so ties resolve identically on every run
        std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
            if (a.cand.kl != b.cand.kl)
                return a.cand.kl < b.cand.kl;
            return a.cand.subset < b.cand.subset;
        });
        std::vector<GreedyCandidate> step_cands;
        for (const auto& s : scored)
            step_cands.push_back(s.cand);
        trace.steps.push_back(std::move(step_cands));
        beams.clear();
        for (std::size_t i = 0; i < scored.size() && static_cast<int>(i) < beam; ++i)
            beams.push_back(scored[i].path);
    }
    trace.order = beams.front().order;
    trace.kl = beams.front().kl;
    return trace;
}

GreedyTrace random_order(const InferenceSetup& setup, int k, std::uint64_t seed)
{
    check_setup(setup);
    const int d = setup.feature_dim();
    if (k < 1 || k > d)
        throw ConfigError("random_order: k must be in [1, feature count]");
    SubsetScorer scorer(setup, seed);
    std::vector<int> perm(static_cast<std::size_t>(d));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(seed, "random-order"));
    std::shuffle(perm.begin(), perm.end(), rng);

    GreedyTrace trace;
    trace.mode = "random";
    trace.seed = seed;
    IndexSet prefix;
    for (int s = 0; s < k; ++s) {
        prefix.push_back(perm[static_cast<std::size_t>(s)]);
        trace.order.push_back(perm[static_cast<std::size_t>(s)]);
        trace.kl.push_back(scorer.score(prefix).kl);
    }
    return trace;
}

} // namespace fslm::select
