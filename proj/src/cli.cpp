#include "fslm/cli.hpp"

#include "fslm/experiments.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace fslm::cli {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Config schema

enum class Type { Int, Seed, Real, Str, Bool };

struct Field {
    std::string key;
    Type type;
    json fallback; // null = no default
    std::string help;
    std::vector<std::string> choices;
    std::optional<double> min;
    bool required = false;
    bool input = false; // a file path whose checksum goes into the manifest
    bool positional = false;
};

class UsageError : public Error {
public:
    explicit UsageError(std::vector<std::string> messages)
        : Error(messages.empty() ? "usage error" : messages.front()), messages_(std::move(messages))
    {
    }
    std::string kind() const override { return "usage"; }
    const std::vector<std::string>& messages() const { return messages_; }

private:
    std::vector<std::string> messages_;
};

std::string flag_name(const std::string& key)
{
    std::string f = key;
    std::replace(f.begin(), f.end(), '_', '-');
    return "--" + f;
}

std::string type_name(Type t)
{
    switch (t) {
    case Type::Int: return "an integer";
    case Type::Seed: return "a non-negative integer";
    case Type::Real: return "a number";
    case Type::Str: return "a string";
    case Type::Bool: return "a boolean";
    }
    return "value";
}

std::optional<json> parse_text(Type t, const std::string& s)
{
    const char* b = s.data();
    const char* e = s.data() + s.size();
    switch (t) {
    case Type::Int: {
        long long v = 0;
        auto r = std::from_chars(b, e, v);
        if (r.ec != std::errc() || r.ptr != e)
            return std::nullopt;
        return json(v);
    }
    case Type::Seed: {
        std::uint64_t v = 0;
        auto r = std::from_chars(b, e, v);
        if (r.ec != std::errc() || r.ptr != e)
            return std::nullopt;
        return json(v);
    }
    case Type::Real: {
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v))
            return std::nullopt;
        return json(v);
    }
    case Type::Str: return json(s);
    case Type::Bool:
        if (s == "true" || s == "1")
            return json(true);
        if (s == "false" || s == "0")
            return json(false);
        return std::nullopt;
    }
    return std::nullopt;
}

bool json_has_type(Type t, const json& v)
{
    switch (t) {
    case Type::Int: return v.is_number_integer();
    case Type::Seed: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    case Type::Real: return v.is_number();
    case Type::Str: return v.is_string();
    case Type::Bool: return v.is_boolean();
    }
    return false;
}

// ---------------------------------------------------------------------------
// Run context: resolved config plus everything the manifest records.

struct Context {
    json config;
    std::ostream& out;
    json inputs = json::array();
    json outputs = json::array();
    json phases = json::array();
    json seeds = json::object();
    json summary = json::object();
    std::string out_base;
    std::vector<std::string> failed_checks;

    Context(json c, std::ostream& o) : config(std::move(c)), out(o) {}

    template <class T>
    T get(const std::string& key) const
    {
        return config.at(key).get<T>();
    }

    void record_input(const std::string& key, const std::string& path)
    {
        if (!std::filesystem::exists(path))
            throw UsageError({"input file for " + flag_name(key) + " does not exist: " + path});
        inputs.push_back({{"key", key},
                          {"path", path},
                          {"absolute", std::filesystem::absolute(path).lexically_normal().string()},
                          {"sha256", sha256_file(path)}});
    }

    void record_output(const std::string& suffix, bool deterministic = true)
    {
        const std::string path = out_base + suffix;
        outputs.push_back({{"suffix", suffix}, {"sha256", sha256_file(path)}, {"deterministic", deterministic}});
    }

    template <class F>
    auto phase(const std::string& name, F&& body)
    {
        const auto start = Clock::now();
        if constexpr (std::is_void_v<decltype(body())>) {
            body();
            phases.push_back({{"name", name}, {"seconds", std::chrono::duration<double>(Clock::now() - start).count()}});
        } else {
            auto result = body();
            phases.push_back({{"name", name}, {"seconds", std::chrono::duration<double>(Clock::now() - start).count()}});
            return result;
        }
    }

    void add_phase(const std::string& name, double seconds) { phases.push_back({{"name", name}, {"seconds", seconds}}); }

    std::string path(const std::string& suffix) const { return out_base + suffix; }
};

struct Command {
    std::string name;
    std::string help;
    std::vector<Field> fields;
    // Suffixes appended to --out that the command will create.
    std::function<std::vector<std::string>(const json&)> outputs;
    std::function<void(Context&)> run;
};

// ---------------------------------------------------------------------------
// Shared helpers

void write_text(const std::string& path, const std::string& text) { write_file_atomic(path, text); }

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep))
        if (!cur.empty())
            out.push_back(cur);
    return out;
}

features::FeatureSet parse_feature_set(const std::string& spec)
{
    if (spec.empty() || spec == "core")
        return features::core_feature_set();
    if (spec == "extended")
        return features::extended_feature_set();
    auto set = split(spec, ',');
    features::validate_feature_set(set);
    return set;
}

std::vector<int> parse_int_list(const std::string& spec, const std::string& what)
{
    std::vector<int> out;
    for (const auto& tok : split(spec, ',')) {
        auto v = parse_text(Type::Int, tok);
        if (!v || v->get<long long>() < 1)
            throw ConfigError(what + ": '" + tok + "' is not a positive integer");
        out.push_back(static_cast<int>(v->get<long long>()));
    }
    if (out.empty())
        throw ConfigError(what + " is empty");
    return out;
}

IndexSet parse_keep(const std::string& spec, const std::vector<std::string>& names)
{
    const int d = static_cast<int>(names.size());
    if (spec == "all")
        return all_indices(d);
    IndexSet keep;
    for (const auto& tok : split(spec, ',')) {
        auto it = std::find(names.begin(), names.end(), tok);
        int idx = -1;
        if (it != names.end()) {
            idx = static_cast<int>(it - names.begin());
        } else if (auto v = parse_text(Type::Int, tok)) {
            idx = static_cast<int>(v->get<long long>());
        }
        if (idx < 0 || idx >= d)
            throw ConfigError("unknown feature '" + tok + "'");
        keep.push_back(idx);
    }
    std::sort(keep.begin(), keep.end());
    if (keep.empty())
        throw ConfigError("--features selects no features");
    if (std::adjacent_find(keep.begin(), keep.end()) != keep.end())
        throw ConfigError("--features lists a feature twice");
    return keep;
}

pipeline::ModelKind model_kind_of(const mdn::MdnModel& model)
{
    if (model.metadata.contains("model"))
        return pipeline::parse_model_kind(model.metadata.at("model").get<std::string>());
    return pipeline::ModelKind::Lgm;
}

inference::SamplerConfig sampler_from(const Context& ctx, pipeline::ModelKind kind)
{
    inference::SamplerConfig sc = pipeline::default_sampler(kind);
    const auto name = ctx.get<std::string>("sampler");
    if (name == "rejection")
        sc.kind = inference::SamplerKind::Rejection;
    else if (name == "mcmc")
        sc.kind = inference::SamplerKind::Mcmc;
    else if (name == "smc")
        sc.kind = inference::SamplerKind::Smc;
    sc.mcmc.chains = ctx.get<int>("chains");
    if (ctx.get<int>("thin") > 0)
        sc.mcmc.thin = ctx.get<int>("thin");
    if (ctx.get<double>("burn_fraction") > 0.0)
        sc.mcmc.burn_fraction = ctx.get<double>("burn_fraction");
    return sc;
}

select::InferenceSetup load_setup(Context& ctx)
{
    ctx.record_input("model", ctx.get<std::string>("model"));
    ctx.record_input("obs", ctx.get<std::string>("obs"));
    auto model = std::make_shared<const mdn::MdnModel>(mdn::load(ctx.get<std::string>("model")));
    const Dataset obs = dataset_from_matrix_file(read_matrix(ctx.get<std::string>("obs")));
    const auto kind = model_kind_of(*model);
    const int n = ctx.get<int>("n") > 0 ? ctx.get<int>("n") : pipeline::default_posterior_draws(kind);
    return pipeline::setup_from_model(model, pipeline::feature_vector(obs, ctx.get<int>("obs_row")),
                                      sampler_from(ctx, kind), n);
}

std::vector<Field> sampler_fields()
{
    return {
        {"sampler", Type::Str, "auto", "Posterior sampler (auto picks rejection for lgm, smc for hh)",
         {"auto", "rejection", "mcmc", "smc"}},
        {"n", Type::Int, 0, "Posterior draws per subset (0 = model default)", {}, 0.0},
        {"chains", Type::Int, 4, "MCMC chains", {}, 1.0},
        {"thin", Type::Int, 0, "MCMC thinning (0 = model default)", {}, 0.0},
        {"burn_fraction", Type::Real, 0.0, "MCMC burn-in as a fraction of kept steps (0 = model default)", {}, 0.0},
    };
}

std::vector<Field> model_obs_fields()
{
    return {
        {"model", Type::Str, nullptr, "Trained model file", {}, std::nullopt, true, true},
        {"obs", Type::Str, nullptr, "Observation dataset file", {}, std::nullopt, true, true},
        {"obs_row", Type::Int, 0, "Row of the observation file", {}, 0.0},
    };
}

template <class... Vs>
std::vector<Field> concat_fields(Vs... parts)
{
    std::vector<Field> out;
    (out.insert(out.end(), parts.begin(), parts.end()), ...);
    return out;
}

Field seed_field() { return {"seed", Type::Seed, 0, "Master seed", {}}; }
Field out_field(const std::string& help) { return {"out", Type::Str, nullptr, help, {}, std::nullopt, true}; }

std::string csv_number(double v)
{
    if (!std::isfinite(v))
        return std::isnan(v) ? "NA" : (v > 0 ? "inf" : "-inf");
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

std::string rank_tidy_csv(const select::RankTable& t)
{
    std::ostringstream out;
    out << "removed,parameter,iqr_ratio,kl\n";
    for (const auto& r : t.rows)
        for (std::size_t j = 0; j < t.param_names.size(); ++j)
            out << r.removed << ',' << t.param_names[j] << ','
                << csv_number(r.failed ? NAN : r.iqr_ratio[static_cast<Eigen::Index>(j)]) << ','
                << csv_number(r.failed ? NAN : r.kl) << '\n';
    return out.str();
}

void record_rank_timings(Context& ctx, const select::RankTable& t)
{
    ctx.add_phase("train:full", t.full_train_seconds);
    ctx.add_phase("sample:full", t.full_sample_seconds);
    for (const auto& r : t.rows) {
        ctx.add_phase("train:-" + r.removed, r.train_seconds);
        ctx.add_phase("sample:-" + r.removed, r.sample_seconds);
    }
}

std::string greedy_csv(const std::vector<select::GreedyTrace>& traces, const std::vector<int>& runs,
                       const std::vector<std::string>& names)
{
    std::ostringstream out;
    out << "mode,run,seed,step,feature,feature_index,kl\n";
    for (std::size_t t = 0; t < traces.size(); ++t) {
        const auto& tr = traces[t];
        for (std::size_t s = 0; s < tr.order.size(); ++s)
            out << tr.mode << ',' << runs[t] << ',' << tr.seed << ',' << s + 1 << ','
                << names[static_cast<std::size_t>(tr.order[s])] << ',' << tr.order[s] << ',' << csv_number(tr.kl[s])
                << '\n';
    }
    return out.str();
}

std::string median_csv(const std::map<std::string, std::vector<std::vector<double>>>& by_mode)
{
    std::ostringstream out;
    out << "mode,step,median_kl,runs\n";
    for (const auto& [mode, runs] : by_mode) {
        const auto med = experiments::median_trajectory(runs);
        for (std::size_t s = 0; s < med.size(); ++s)
            out << mode << ',' << s + 1 << ',' << csv_number(med[s]) << ',' << runs.size() << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(Context& ctx)
{
    pipeline::DataConfig dc;
    dc.model = pipeline::parse_model_kind(ctx.get<std::string>("model"));
    dc.n = ctx.get<int>("n");
    if (dc.model == pipeline::ModelKind::Hh)
        dc.features = parse_feature_set(ctx.get<std::string>("features"));
    dc.restrict_prior = ctx.get<bool>("restrict_prior");
    dc.classifier_fraction = ctx.get<double>("classifier_fraction");
    const auto seed = ctx.get<std::uint64_t>("seed");
    ctx.seeds["seed"] = seed;
    ctx.seeds["prior"] = derive_seed(seed, "prior");
    ctx.seeds["simulate"] = derive_seed(seed, "simulate");
    if (dc.restrict_prior) {
        ctx.seeds["classifier"] = derive_seed(seed, "classifier");
        ctx.seeds["restricted"] = derive_seed(seed, "restricted");
    }
    const auto sim = ctx.phase("simulate", [&] { return pipeline::simulate_data(dc, seed); });
    ctx.phase("write", [&] { write_matrix(ctx.out_base, to_matrix_file(sim.data)); });
    ctx.record_output("");
    ctx.record_output(".json");
    ctx.summary = {{"rows", sim.data.size()}, {"valid", sim.data.valid_count()}, {"warnings", sim.warnings}};
}

void cmd_observe(Context& ctx)
{
    const auto kind = pipeline::parse_model_kind(ctx.get<std::string>("model"));
    const auto set = kind == pipeline::ModelKind::Hh ? parse_feature_set(ctx.get<std::string>("features"))
                                                     : features::FeatureSet{};
    const Dataset obs = ctx.phase("observe", [&] { return pipeline::observation(kind, set); });
    write_matrix(ctx.out_base, to_matrix_file(obs));
    ctx.record_output("");
    ctx.record_output(".json");
    ctx.summary = {{"features", obs.feature_names}, {"valid", obs.valid.front()}};
}

void cmd_train(Context& ctx)
{
    ctx.record_input("dataset", ctx.get<std::string>("dataset"));
    const Dataset data = dataset_from_matrix_file(read_matrix(ctx.get<std::string>("dataset")));
    sim::BoxPrior prior;
    if (data.metadata.contains("prior"))
        prior = pipeline::prior_from_json(data.metadata.at("prior"));
    else if (data.metadata.contains("model"))
        prior = pipeline::prior_for(pipeline::parse_model_kind(data.metadata.at("model").get<std::string>()));
    else
        throw FormatError("dataset metadata has neither a prior nor a model name");

    pipeline::TrainOptions opts;
    opts.architecture.components = ctx.get<int>("components");
    opts.architecture.hidden = parse_int_list(ctx.get<std::string>("hidden"), "--hidden");
    opts.train.batch_size = ctx.get<int>("batch_size");
    opts.train.learning_rate = ctx.get<double>("learning_rate");
    opts.train.max_epochs = ctx.get<int>("max_epochs");
    opts.train.patience = ctx.get<int>("patience");
    opts.train.validation_fraction = ctx.get<double>("validation_fraction");
    opts.train.seed = ctx.get<std::uint64_t>("seed");
    const auto cal = ctx.get<std::string>("calibrate");
    opts.calibrate = cal == "on" || (cal == "auto" && data.valid_count() < static_cast<std::size_t>(data.size()));
    ctx.seeds["seed"] = opts.train.seed;

    const auto trained = ctx.phase("train", [&] { return pipeline::train_model(data, prior, opts); });
    ctx.phase("write", [&] { mdn::save(*trained.model, ctx.out_base); });
    ctx.record_output("");
    ctx.summary = {{"best_epoch", trained.result.best_epoch},
                   {"epochs_run", trained.result.epochs_run},
                   {"validation_loss", trained.result.validation_loss.at(static_cast<std::size_t>(trained.result.best_epoch))},
                   {"calibrated", opts.calibrate}};
}

void cmd_posterior(Context& ctx)
{
    const auto setup = load_setup(ctx);
    const IndexSet keep = parse_keep(ctx.get<std::string>("features"), setup.feature_names());
    const auto seed = ctx.get<std::uint64_t>("seed");
    ctx.seeds["seed"] = seed;
    ctx.seeds["subset"] = select::subset_seed(seed, keep);
    const auto samples = ctx.phase("sample", [&] { return select::sample_subset(setup, keep, seed); });
    MatrixFile file;
    file.data = samples.theta;
    file.columns = setup.prior.names;
    file.metadata = samples.metadata;
    file.metadata["keep"] = keep;
    std::vector<std::string> kept_names;
    for (int i : keep)
        kept_names.push_back(setup.feature_names()[static_cast<std::size_t>(i)]);
    file.metadata["features"] = kept_names;
    file.metadata["seed"] = seed;
    file.metadata["sampler_config"] = setup.sampler.to_json();
    write_matrix(ctx.out_base, file);
    ctx.record_output("");
    ctx.record_output(".json");
    ctx.summary = {{"draws", samples.theta.rows()}, {"features", kept_names}};
}

void cmd_rank(Context& ctx)
{
    const auto setup = load_setup(ctx);
    const auto seed = ctx.get<std::uint64_t>("seed");
    ctx.seeds["seed"] = seed;
    ctx.seeds["reference"] = select::reference_seed(seed);
    select::RankTable table;
    if (ctx.get<std::string>("mode") == "fslm") {
        table = select::leave_one_out_rank(setup, seed);
    } else {
        const auto data_path = ctx.get<std::string>("data");
        if (data_path.empty())
            throw UsageError({"--data is required with --mode brute"});
        ctx.record_input("data", data_path);
        const Dataset data = dataset_from_matrix_file(read_matrix(data_path));
        select::BruteForceConfig bf;
        bf.architecture = setup.model->architecture();
        bf.train.seed = derive_seed(seed, "brute-train");
        ctx.seeds["brute_train"] = bf.train.seed;
        table = select::brute_force_rank(setup, data, bf, seed);
    }
    record_rank_timings(ctx, table);
    write_text(ctx.out_base, table.to_csv());
    ctx.record_output("");
    if (ctx.get<bool>("plotdata")) {
        write_text(ctx.path(".iqr.csv"), table.iqr_matrix().to_csv());
        write_text(ctx.path(".tidy.csv"), rank_tidy_csv(table));
        ctx.record_output(".iqr.csv");
        ctx.record_output(".tidy.csv");
    }
    json rows = json::array();
    for (const auto& r : table.rows)
        rows.push_back({{"removed", r.removed}, {"kl", r.failed ? json(nullptr) : json(r.kl)}, {"status", r.failed ? "failed" : "ok"}});
    ctx.summary = {{"schema", select::kRankCsvSchema}, {"rows", rows}, {"total_seconds", table.total_seconds()}};
}

void cmd_greedy(Context& ctx)
{
    const auto setup = load_setup(ctx);
    const auto seed = ctx.get<std::uint64_t>("seed");
    const int d = setup.feature_dim();
    const int k = ctx.get<int>("k") > 0 ? ctx.get<int>("k") : d;
    if (k > d)
        throw UsageError({"--k " + std::to_string(k) + " exceeds the feature count " + std::to_string(d)});
    const int beam = ctx.get<int>("beam");
    const int runs = ctx.get<int>("runs");
    const bool random = ctx.get<std::string>("baseline") == "random";
    ctx.seeds["seed"] = seed;

    std::vector<select::GreedyTrace> traces;
    std::vector<int> run_ids;
    std::map<std::string, std::vector<std::vector<double>>> by_mode;
    for (int r = 0; r < runs; ++r) {
        const std::uint64_t s = runs == 1 ? seed : derive_seed(seed, "run:" + std::to_string(r));
        ctx.seeds["run:" + std::to_string(r)] = s;
        auto g = ctx.phase("greedy:" + std::to_string(r), [&] { return select::greedy_select(setup, k, beam, s); });
        by_mode["greedy"].push_back(g.kl);
        traces.push_back(std::move(g));
        run_ids.push_back(r);
        if (random) {
            auto b = ctx.phase("random:" + std::to_string(r), [&] { return select::random_order(setup, k, s); });
            by_mode["random"].push_back(b.kl);
            traces.push_back(std::move(b));
            run_ids.push_back(r);
        }
    }
    write_text(ctx.out_base, greedy_csv(traces, run_ids, setup.feature_names()));
    ctx.record_output("");
    if (ctx.get<bool>("plotdata")) {
        write_text(ctx.path(".median.csv"), median_csv(by_mode));
        ctx.record_output(".median.csv");
    }
    json first = json::array();
    for (const auto& t : traces)
        if (t.mode == "greedy")
            first.push_back(setup.feature_names()[static_cast<std::size_t>(t.order.front())]);
    ctx.summary = {{"schema", select::kGreedyCsvSchema}, {"runs", runs}, {"first_selected", first}};
}

void cmd_kl(Context& ctx)
{
    ctx.record_input("x", ctx.get<std::string>("x"));
    ctx.record_input("y", ctx.get<std::string>("y"));
    const auto x = read_matrix(ctx.get<std::string>("x"));
    const auto y = read_matrix(ctx.get<std::string>("y"));
    const auto est = ctx.phase("kl", [&] { return metrics::kl_estimate_detailed(Matrix(x.data), Matrix(y.data)); });
    ctx.summary = {{"kl", est.value},
                   {"n", est.n},
                   {"m", est.m},
                   {"dim", est.dim},
                   {"zero_distances", est.zero_distances},
                   {"epsilon", est.epsilon}};
    if (!ctx.out_base.empty()) {
        write_text(ctx.out_base, ctx.summary.dump(2) + "\n");
        ctx.record_output("");
    }
}

// reproduce ---------------------------------------------------------------

struct Check {
    std::string name;
    bool pass;
    std::string detail;
};

void add_check(Context& ctx, json& checks, const Check& c)
{
    checks.push_back({{"check", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    if (!c.pass)
        ctx.failed_checks.push_back(c.name);
}

std::string fmt(double v)
{
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

std::string posterior_csv(const std::vector<std::pair<std::string, Matrix>>& sets,
                          const std::vector<std::string>& params)
{
    std::ostringstream out;
    out.precision(17);
    out << "source";
    for (const auto& p : params)
        out << ',' << p;
    out << '\n';
    for (const auto& [name, m] : sets)
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            out << name;
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                out << ',' << m(i, j);
            out << '\n';
        }
    return out.str();
}

experiments::RunOptions run_options(const Context& ctx, pipeline::ModelKind kind, bool paper)
{
    experiments::RunOptions o;
    o.model = kind;
    if (kind == pipeline::ModelKind::Hh) {
        o.n_train = paper ? 50000 : 10000;
        o.restrict_prior = true;
        o.calibrate = true;
    }
    const auto cache = ctx.get<std::string>("cache");
    if (!cache.empty())
        o.cache_dir = cache;
    return o;
}

void reproduce_lgm_fig2(Context& ctx, json& checks)
{
    const auto seed = ctx.get<std::uint64_t>("seed");
    const auto run = ctx.phase("simulate+train", [&] {
        return experiments::run_model(run_options(ctx, pipeline::ModelKind::Lgm, false), seed);
    });
    const auto table = ctx.phase("rank", [&] { return select::leave_one_out_rank(run.setup, seed); });
    write_text(ctx.path("/rank.csv"), table.to_csv());
    write_text(ctx.path("/iqr.csv"), table.iqr_matrix().to_csv());
    ctx.record_output("/rank.csv");
    ctx.record_output("/iqr.csv");

    const Matrix truth = experiments::lgm_truth(all_indices(4), run.setup.n_samples, derive_seed(seed, "truth"));
    const double kl_truth = select::prior_box_kl(run.setup.prior, table.full_samples, truth);
    std::vector<std::pair<std::string, Matrix>> sets = {{"nle:all", table.full_samples}, {"truth:all", truth}};
    std::ostringstream kl_csv;
    kl_csv << "subset,kl_to_truth\nall," << csv_number(kl_truth) << '\n';
    for (const auto& r : table.rows) {
        const Matrix t = experiments::lgm_truth(r.keep, run.setup.n_samples, derive_seed(seed, "truth:" + r.removed));
        sets.emplace_back("nle:-" + r.removed, r.theta);
        sets.emplace_back("truth:-" + r.removed, t);
        kl_csv << '-' << r.removed << ',' << csv_number(select::prior_box_kl(run.setup.prior, r.theta, t)) << '\n';
    }
    write_text(ctx.path("/posteriors.csv"), posterior_csv(sets, run.setup.prior.names));
    write_text(ctx.path("/truth_kl.csv"), kl_csv.str());
    ctx.record_output("/posteriors.csv");
    ctx.record_output("/truth_kl.csv");

    add_check(ctx, checks, {"full posterior KL to analytic <= 0.3", kl_truth <= 0.3, "kl=" + fmt(kl_truth)});
    const auto& x3 = table.rows.back();
    bool near_one = !x3.failed;
    for (Eigen::Index j = 0; near_one && j < x3.iqr_ratio.size(); ++j)
        near_one = x3.iqr_ratio[j] >= 0.8 && x3.iqr_ratio[j] <= 1.25;
    std::ostringstream d;
    d << "ratios=" << x3.iqr_ratio.transpose();
    add_check(ctx, checks, {"x3 IQR row within [0.8, 1.25]", near_one, d.str()});
}

void reproduce_lgm_table1(Context& ctx, json& checks, bool paper)
{
    const auto seed = ctx.get<std::uint64_t>("seed");
    const int runs = paper ? 10 : 1;
    std::ostringstream timing, agree;
    timing << "run,method,total_seconds\n";
    agree << "run,removed,kl_fslm_vs_brute,kl_fslm_vs_truth,kl_brute_vs_truth\n";
    bool faster = true;
    bool agreement = true;
    double worst = 0.0;
    for (int r = 0; r < runs; ++r) {
        const std::uint64_t s = runs == 1 ? seed : derive_seed(seed, "run:" + std::to_string(r));
        const auto run = ctx.phase("simulate+train:" + std::to_string(r), [&] {
            return experiments::run_model(run_options(ctx, pipeline::ModelKind::Lgm, paper), s);
        });
        const auto cmp = ctx.phase("compare:" + std::to_string(r), [&] { return experiments::compare_fslm_brute(run, s); });
        timing << r << ",fslm," << cmp.fslm_seconds << '\n' << r << ",brute," << cmp.brute_seconds << '\n';
        faster = faster && cmp.fslm_seconds < cmp.brute_seconds;
        for (std::size_t i = 0; i < cmp.fslm.rows.size(); ++i) {
            const auto& row = cmp.fslm.rows[i];
            const Matrix truth = experiments::lgm_truth(row.keep, run.setup.n_samples, derive_seed(s, "truth:" + row.removed));
            agree << r << ',' << row.removed << ',' << csv_number(cmp.agreement_kl[i]) << ','
                  << csv_number(select::prior_box_kl(run.setup.prior, row.theta, truth)) << ','
                  << csv_number(select::prior_box_kl(run.setup.prior, cmp.brute.rows[i].theta, truth)) << '\n';
            agreement = agreement && cmp.agreement_kl[i] <= 0.2;
            worst = std::max(worst, cmp.agreement_kl[i]);
        }
    }
    write_text(ctx.path("/timing.csv"), timing.str());
    write_text(ctx.path("/agreement.csv"), agree.str());
    ctx.record_output("/timing.csv", false);
    ctx.record_output("/agreement.csv");
    add_check(ctx, checks, {"FSLM total time < brute-force total", faster, "see timing.csv"});
    add_check(ctx, checks, {"KL(FSLM || brute) <= 0.2 per subset", agreement, "max=" + fmt(worst)});
}

void reproduce_hh_fig3(Context& ctx, json& checks, bool paper)
{
    const auto seed = ctx.get<std::uint64_t>("seed");
    const auto run = ctx.phase("simulate+train", [&] {
        return experiments::run_model(run_options(ctx, pipeline::ModelKind::Hh, paper), seed);
    });
    const auto table = ctx.phase("rank", [&] { return select::leave_one_out_rank(run.setup, seed); });
    write_text(ctx.path("/rank.csv"), table.to_csv());
    write_text(ctx.path("/iqr.csv"), table.iqr_matrix().to_csv());
    write_text(ctx.path("/tidy.csv"), rank_tidy_csv(table));
    ctx.record_output("/rank.csv");
    ctx.record_output("/iqr.csv");
    ctx.record_output("/tidy.csv");
    double min_kl = std::numeric_limits<double>::infinity();
    for (const auto& r : table.rows)
        if (!r.failed)
            min_kl = std::min(min_kl, r.kl);
    ctx.summary["note"] = "Desk-scale run (" + std::to_string(run.simulated.data.size()) +
                          " simulations). The ranking is stochastic at this scale and is not asserted "
                          "against the published matrix.";
    add_check(ctx, checks, {"rank KL values >= -0.15", min_kl >= -0.15, "min=" + fmt(min_kl)});
}

void reproduce_hh_fig4(Context& ctx, json& checks, bool paper)
{
    const auto seed = ctx.get<std::uint64_t>("seed");
    const auto run = ctx.phase("simulate+train", [&] {
        return experiments::run_model(run_options(ctx, pipeline::ModelKind::Hh, paper), seed);
    });
    const int k = paper ? 5 : 3;
    const auto names = run.setup.feature_names();
    const auto greedy = ctx.phase("greedy", [&] { return select::greedy_select(run.setup, k, 1, seed); });
    const auto random = ctx.phase("random", [&] { return select::random_order(run.setup, k, seed); });
    const auto table = ctx.phase("rank", [&] { return select::leave_one_out_rank(run.setup, seed); });
    write_text(ctx.path("/greedy.csv"), greedy_csv({greedy, random}, {0, 0}, names));
    write_text(ctx.path("/rank.csv"), table.to_csv());
    ctx.record_output("/greedy.csv");
    ctx.record_output("/rank.csv");

    // Removal-based and addition-based importance are reported side by side.
    std::vector<std::pair<double, std::string>> removal;
    for (const auto& r : table.rows)
        removal.emplace_back(r.failed ? -std::numeric_limits<double>::infinity() : r.kl, r.removed);
    std::sort(removal.begin(), removal.end(), std::greater<>());
    json top_removal = json::array();
    json top_greedy = json::array();
    for (int i = 0; i < k && i < static_cast<int>(removal.size()); ++i)
        top_removal.push_back(removal[static_cast<std::size_t>(i)].second);
    for (int f : greedy.order)
        top_greedy.push_back(names[static_cast<std::size_t>(f)]);
    ctx.summary["greedy_order"] = top_greedy;
    ctx.summary["removal_order"] = top_removal;
    ctx.summary["note"] = "Desk-scale run; greedy (addition) and leave-one-out (removal) importance may disagree.";
    bool monotone = true;
    for (std::size_t s = 1; s < greedy.kl.size(); ++s)
        monotone = monotone && std::isfinite(greedy.kl[s]);
    add_check(ctx, checks, {"greedy trace complete", monotone && static_cast<int>(greedy.order.size()) == k,
                            "steps=" + std::to_string(greedy.order.size())});
}

void cmd_reproduce(Context& ctx)
{
    const auto exp = ctx.get<std::string>("experiment");
    const bool paper = ctx.get<std::string>("budget") == "paper";
    ctx.seeds["seed"] = ctx.get<std::uint64_t>("seed");
    std::filesystem::create_directories(ctx.out_base);
    json checks = json::array();
    if (exp == "lgm-fig2")
        reproduce_lgm_fig2(ctx, checks);
    else if (exp == "lgm-table1")
        reproduce_lgm_table1(ctx, checks, paper);
    else if (exp == "hh-fig3")
        reproduce_hh_fig3(ctx, checks, paper);
    else
        reproduce_hh_fig4(ctx, checks, paper);
    if (paper && exp.rfind("hh", 0) == 0)
        ctx.summary["budget_note"] = "paper budget uses 50,000 simulations; the publication used 1,000,000.";
    ctx.summary["experiment"] = exp;
    ctx.summary["checks"] = checks;
    write_text(ctx.path("/summary.json"), ctx.summary.dump(2) + "\n");
    ctx.record_output("/summary.json");
}

// ---------------------------------------------------------------------------
// Command table

std::vector<Command> commands()
{
    const auto matrix_out = [](const json&) { return std::vector<std::string>{"", ".json"}; };
    std::vector<Command> cmds;
    cmds.push_back({"simulate",
                    "Simulate a training dataset",
                    {{"model", Type::Str, "lgm", "Simulator", {"lgm", "hh"}},
                     {"n", Type::Int, 10000, "Simulation budget", {}, 1.0},
                     seed_field(),
                     {"features", Type::Str, "core", "HH feature set: core, extended or a comma list"},
                     {"restrict_prior", Type::Bool, false, "Train a validity classifier and sample the restricted prior"},
                     {"classifier_fraction", Type::Real, 0.1, "Budget share for the classifier", {}, 0.0},
                     out_field("Dataset file")},
                    matrix_out,
                    cmd_simulate});
    cmds.push_back({"observe",
                    "Write the default observation of a model",
                    {{"model", Type::Str, "lgm", "Simulator", {"lgm", "hh"}},
                     {"features", Type::Str, "core", "HH feature set: core, extended or a comma list"},
                     out_field("Observation file")},
                    matrix_out,
                    cmd_observe});
    cmds.push_back({"train",
                    "Train a mixture density network surrogate likelihood",
                    {{"dataset", Type::Str, nullptr, "Dataset file", {}, std::nullopt, true, true},
                     {"components", Type::Int, 10, "Mixture components", {}, 1.0},
                     {"hidden", Type::Str, "50,50,50", "Hidden layer widths"},
                     {"batch_size", Type::Int, 256, "Minibatch size", {}, 1.0},
                     {"learning_rate", Type::Real, 1e-3, "Adam learning rate", {}, 0.0},
                     {"max_epochs", Type::Int, 500, "Epoch limit", {}, 1.0},
                     {"patience", Type::Int, 20, "Early-stopping patience", {}, 1.0},
                     {"validation_fraction", Type::Real, 0.1, "Held-out share", {}, 0.0},
                     {"calibrate", Type::Str, "auto", "Fit the validity calibration term", {"auto", "on", "off"}},
                     seed_field(),
                     out_field("Model file")},
                    [](const json&) { return std::vector<std::string>{""}; },
                    cmd_train});
    cmds.push_back({"posterior",
                    "Sample the posterior for a feature subset",
                    concat_fields(model_obs_fields(), sampler_fields(),
                                  std::vector<Field>{{"features", Type::Str, "all", "Kept features: all or a comma list"},
                                                     seed_field(), out_field("Samples file")}),
                    matrix_out,
                    cmd_posterior});
    cmds.push_back({"rank",
                    "Leave-one-out feature importance",
                    concat_fields(model_obs_fields(), sampler_fields(),
                                  std::vector<Field>{{"mode", Type::Str, "fslm", "fslm marginalizes; brute retrains", {"fslm", "brute"}},
                                                     {"data", Type::Str, "", "Training dataset (brute mode)"},
                                                     {"plotdata", Type::Bool, false, "Also write IQR matrix and tidy CSV"},
                                                     seed_field(), out_field("Rank CSV")}),
                    [](const json& c) {
                        std::vector<std::string> s{""};
                        if (c.at("plotdata").get<bool>()) {
                            s.push_back(".iqr.csv");
                            s.push_back(".tidy.csv");
                        }
                        return s;
                    },
                    cmd_rank});
    cmds.push_back({"greedy",
                    "Greedy forward feature selection",
                    concat_fields(model_obs_fields(), sampler_fields(),
                                  std::vector<Field>{{"k", Type::Int, 0, "Features to select (0 = all)", {}, 0.0},
                                                     {"beam", Type::Int, 1, "Beam width", {}, 1.0},
                                                     {"baseline", Type::Str, "none", "Also run a random-order baseline", {"none", "random"}},
                                                     {"runs", Type::Int, 1, "Independent runs (paired seeds)", {}, 1.0},
                                                     {"plotdata", Type::Bool, false, "Also write median trajectories"},
                                                     seed_field(), out_field("Trace CSV")}),
                    [](const json& c) {
                        std::vector<std::string> s{""};
                        if (c.at("plotdata").get<bool>())
                            s.push_back(".median.csv");
                        return s;
                    },
                    cmd_greedy});
    cmds.push_back({"kl",
                    "1-NN KL divergence estimate between two sample files",
                    {{"x", Type::Str, nullptr, "Samples from p", {}, std::nullopt, true, true},
                     {"y", Type::Str, nullptr, "Samples from q", {}, std::nullopt, true, true},
                     {"out", Type::Str, "", "Optional JSON output file"}},
                    [](const json& c) {
                        return c.at("out").get<std::string>().empty() ? std::vector<std::string>{}
                                                                      : std::vector<std::string>{""};
                    },
                    cmd_kl});
    cmds.push_back({"reproduce",
                    "Run a desk-scale experiment and check it",
                    {{"experiment", Type::Str, nullptr, "Experiment",
                      {"lgm-fig2", "lgm-table1", "hh-fig3", "hh-fig4"}, std::nullopt, true, false, true},
                     {"budget", Type::Str, "small", "Sample-count scale", {"small", "paper"}},
                     {"cache", Type::Str, "", "Directory reused for simulated data and models"},
                     seed_field(),
                     out_field("Output directory")},
                    [](const json&) { return std::vector<std::string>{""}; },
                    cmd_reproduce});
    return cmds;
}

// ---------------------------------------------------------------------------
// Resolution: defaults < config file < FSLM_SEED < flags.

json resolve(const Command& cmd, const std::map<std::string, std::string>& flags, const std::set<std::string>& bool_flags,
             const std::string& config_path, bool use_env, json& sources)
{
    std::vector<std::string> errors;
    json file = json::object();
    if (!config_path.empty()) {
        try {
            file = json::parse(read_file(config_path));
            if (!file.is_object())
                errors.push_back("config file must hold a JSON object");
        } catch (const std::exception& e) {
            errors.push_back(std::string("cannot read config file: ") + e.what());
            file = json::object();
        }
    }
    std::set<std::string> known;
    for (const auto& f : cmd.fields)
        known.insert(f.key);
    if (file.is_object()) {
        for (const auto& [key, value] : file.items()) {
            if (key == "command") {
                if (value != cmd.name)
                    errors.push_back("config file is for command '" + value.dump() + "', not '" + cmd.name + "'");
            } else if (key == "version") {
                if (value != kConfigSchemaVersion)
                    errors.push_back("config schema version " + value.dump() + " is not supported");
            } else if (!known.count(key)) {
                errors.push_back("unknown config key '" + key + "'");
            }
        }
    }

    json config = json::object();
    for (const auto& f : cmd.fields) {
        json value = f.fallback;
        std::string source = "default";
        if (file.is_object() && file.contains(f.key)) {
            if (json_has_type(f.type, file[f.key])) {
                value = file[f.key];
                if (f.type == Type::Real)
                    value = value.get<double>();
                source = "config";
            } else {
                errors.push_back("config key '" + f.key + "' must be " + type_name(f.type));
            }
        }
        if (f.key == "seed" && use_env) {
            if (const char* env = std::getenv("FSLM_SEED")) {
                if (auto v = parse_text(Type::Seed, env)) {
                    value = *v;
                    source = "env";
                } else {
                    errors.push_back("FSLM_SEED must be a non-negative integer");
                }
            }
        }
        if (f.type == Type::Bool && bool_flags.count(f.key)) {
            value = true;
            source = "flag";
        } else if (auto it = flags.find(f.key); it != flags.end()) {
            if (auto v = parse_text(f.type, it->second)) {
                value = *v;
                source = "flag";
            } else {
                errors.push_back(flag_name(f.key) + " must be " + type_name(f.type) + " (got '" + it->second + "')");
            }
        }
        if (value.is_null()) {
            if (f.required)
                errors.push_back("missing required " + (f.positional ? "argument <" + f.key + ">" : "option " + flag_name(f.key)));
            continue;
        }
        if (!f.choices.empty() && value.is_string() &&
            std::find(f.choices.begin(), f.choices.end(), value.get<std::string>()) == f.choices.end()) {
            std::string opts;
            for (const auto& c : f.choices)
                opts += (opts.empty() ? "" : ", ") + c;
            errors.push_back(flag_name(f.key) + " must be one of {" + opts + "} (got '" + value.get<std::string>() + "')");
        }
        if (f.min && value.is_number() && value.get<double>() < *f.min)
            errors.push_back(flag_name(f.key) + " must be >= " + fmt(*f.min));
        if (f.required && value.is_string() && value.get<std::string>().empty())
            errors.push_back(flag_name(f.key) + " must not be empty");
        config[f.key] = value;
        sources[f.key] = source;
    }
    if (config.contains("classifier_fraction")) {
        const double cf = config["classifier_fraction"].get<double>();
        if (cf <= 0.0 || cf >= 1.0)
            errors.push_back("--classifier-fraction must be in (0, 1)");
    }
    if (config.contains("validation_fraction")) {
        const double vf = config["validation_fraction"].get<double>();
        if (vf <= 0.0 || vf >= 1.0)
            errors.push_back("--validation-fraction must be in (0, 1)");
    }
    if (!errors.empty())
        throw UsageError(errors);
    return config;
}

void check_fresh_outputs(const Command& cmd, const json& config, const std::string& out_base)
{
    if (out_base.empty())
        return;
    std::vector<std::string> errors;
    auto suffixes = cmd.outputs(config);
    suffixes.push_back(".config.json");
    suffixes.push_back(".manifest.json");
    for (const auto& s : suffixes)
        if (std::filesystem::exists(out_base + s))
            errors.push_back("refusing to overwrite existing output " + out_base + s);
    if (!errors.empty())
        throw UsageError(errors);
}

json execute(const Command& cmd, json config, std::ostream& out, const std::string& replay_of = {})
{
    const std::string out_base = config.contains("out") ? config["out"].get<std::string>() : std::string{};
    check_fresh_outputs(cmd, config, out_base);
    for (const auto& f : cmd.fields)
        if (f.input && config.contains(f.key) && !std::filesystem::exists(config[f.key].get<std::string>()))
            throw UsageError({"input file for " + flag_name(f.key) + " does not exist: " + config[f.key].get<std::string>()});

    json resolved = config;
    resolved["command"] = cmd.name;
    resolved["version"] = kConfigSchemaVersion;
    Context ctx(resolved, out);
    ctx.out_base = out_base;
    const auto start = Clock::now();
    cmd.run(ctx);
    ctx.add_phase("total", std::chrono::duration<double>(Clock::now() - start).count());

    // Inputs enter the hash by checksum, not by path.
    json hashed = resolved;
    hashed.erase("out");
    for (const auto& in : ctx.inputs)
        hashed[in.at("key").get<std::string>()] = in.at("sha256");
    json manifest = {{"tool", "fslm"},
                     {"version", kToolVersion},
                     {"config_schema", kConfigSchemaVersion},
                     {"command", cmd.name},
                     {"config", resolved},
                     {"config_hash", sha256_hex(hashed.dump())},
                     {"inputs", ctx.inputs},
                     {"outputs", ctx.outputs},
                     {"phases", ctx.phases},
                     {"seeds", ctx.seeds},
                     {"threads", thread_count()}};
    if (!replay_of.empty())
        manifest["replay_of"] = replay_of;
    if (!out_base.empty()) {
        write_text(out_base + ".config.json", resolved.dump(2) + "\n");
        write_text(out_base + ".manifest.json", manifest.dump(2) + "\n");
    }
    json result = ctx.summary;
    if (!result.is_object())
        result = json::object();
    result["command"] = cmd.name;
    if (!ctx.failed_checks.empty())
        result["failed_checks"] = ctx.failed_checks;
    result["manifest"] = manifest;
    return result;
}

void print_error(std::ostream& err, const std::string& kind, const std::vector<std::string>& messages)
{
    json e = {{"error", kind}, {"messages", messages}};
    err << e.dump() << '\n';
}

int replay(const std::vector<Command>& cmds, const std::string& manifest_path, const std::string& out,
           std::ostream& o)
{
    const json manifest = json::parse(read_file(manifest_path));
    const auto name = manifest.at("command").get<std::string>();
    auto it = std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == name; });
    if (it == cmds.end())
        throw FormatError("manifest names unknown command '" + name + "'");
    json config = manifest.at("config");
    config.erase("command");
    config.erase("version");

    std::vector<std::string> errors;
    for (const auto& in : manifest.at("inputs")) {
        const auto key = in.at("key").get<std::string>();
        const auto path = in.at("absolute").get<std::string>();
        if (!std::filesystem::exists(path))
            errors.push_back("input " + key + " is missing: " + path);
        else if (sha256_file(path) != in.at("sha256").get<std::string>())
            errors.push_back("input " + key + " changed since the recorded run: " + path);
        else
            config[key] = path;
    }
    if (!errors.empty())
        throw UsageError(errors);
    if (!manifest.at("outputs").empty() || config.contains("out")) {
        if (out.empty())
            throw UsageError({"missing required option --out"});
        config["out"] = out;
    }

    const json result = execute(*it, config, o, std::filesystem::absolute(manifest_path).string());
    json compare = json::array();
    bool identical = true;
    const auto& fresh = result.at("manifest").at("outputs");
    for (const auto& rec : manifest.at("outputs")) {
        if (!rec.value("deterministic", true))
            continue;
        const auto suffix = rec.at("suffix").get<std::string>();
        std::string actual;
        for (const auto& f : fresh)
            if (f.at("suffix") == suffix)
                actual = f.at("sha256").get<std::string>();
        const bool same = actual == rec.at("sha256").get<std::string>();
        identical = identical && same;
        compare.push_back({{"suffix", suffix}, {"expected", rec.at("sha256")}, {"actual", actual}, {"identical", same}});
    }
    o << json{{"command", "replay"}, {"replayed", name}, {"identical", identical}, {"outputs", compare}}.dump(2) << '\n';
    return identical ? kExitOk : kExitFailure;
}

} // namespace

std::string sha256_hex(const std::string& bytes)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    const auto cmds = commands();
    CLI::App app{"Feature selection through likelihood marginalization"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber);

    std::map<std::string, std::map<std::string, std::string>> values;
    std::map<std::string, std::map<std::string, bool>> bools;
    std::map<std::string, std::string> config_paths;
    std::map<std::string, CLI::App*> subs;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        subs[c.name] = sub;
        sub->add_option("--config", config_paths[c.name], "JSON config file (flags take precedence)");
        for (const auto& f : c.fields) {
            if (f.type == Type::Bool) {
                sub->add_flag(flag_name(f.key), bools[c.name][f.key], f.help);
            } else if (f.positional) {
                sub->add_option(f.key, values[c.name][f.key], f.help);
            } else {
                sub->add_option(flag_name(f.key), values[c.name][f.key], f.help);
            }
        }
    }
    std::string manifest_path, replay_out;
    auto* rep = app.add_subcommand("replay", "Re-execute a run from its manifest and compare outputs");
    rep->add_option("--manifest", manifest_path, "Manifest written by an earlier run");
    rep->add_option("--out", replay_out, "Fresh output path for the rerun");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", {e.what()});
        return kExitUsage;
    }
    if (threads > 0)
        set_thread_count(static_cast<unsigned>(threads));

    try {
        if (rep->parsed()) {
            if (manifest_path.empty())
                throw UsageError({"missing required option --manifest"});
            return replay(cmds, manifest_path, replay_out, out);
        }
        for (const auto& c : cmds) {
            auto* sub = subs[c.name];
            if (!sub->parsed())
                continue;
            std::map<std::string, std::string> given;
            std::set<std::string> flags_on;
            for (const auto& f : c.fields) {
                const auto* opt = f.positional ? sub->get_option(f.key) : sub->get_option(flag_name(f.key));
                if (opt->count() == 0)
                    continue;
                if (f.type == Type::Bool)
                    flags_on.insert(f.key);
                else
                    given[f.key] = values[c.name][f.key];
            }
            json sources = json::object();
            const json config = resolve(c, given, flags_on, config_paths[c.name], true, sources);
            json result = execute(c, config, out);
            result["sources"] = sources;
            json printed = result;
            printed.erase("manifest");
            out << printed.dump(2) << '\n';
            if (result.contains("failed_checks")) {
                print_error(err, "acceptance", result["failed_checks"].get<std::vector<std::string>>());
                return kExitFailure;
            }
            return kExitOk;
        }
    } catch (const UsageError& e) {
        print_error(err, "usage", e.messages());
        return kExitUsage;
    } catch (const ConfigError& e) {
        print_error(err, "usage", {e.what()});
        return kExitUsage;
    } catch (const Error& e) {
        print_error(err, e.kind(), {e.what()});
        return kExitFailure;
    } catch (const std::exception& e) {
        print_error(err, "error", {e.what()});
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace fslm::cli
