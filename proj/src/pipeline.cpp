#include "fslm/pipeline.hpp"

#include <cmath>
#include <limits>

namespace fslm::pipeline {

namespace {

Dataset concat(const Dataset& a, const Dataset& b)
{
    Dataset out = a;
    out.theta.resize(a.size() + b.size(), a.theta.cols());
    out.theta << a.theta, b.theta;
    out.x.resize(a.size() + b.size(), a.x.cols());
    out.x << a.x, b.x;
    out.valid.insert(out.valid.end(), b.valid.begin(), b.valid.end());
    return out;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

features::FeatureSet hh_set(const features::FeatureSet& set)
{
    features::FeatureSet s = set.empty() ? features::core_feature_set() : set;
    features::validate_feature_set(s);
    return s;
}

} // namespace

ModelKind parse_model_kind(const std::string& name)
{
    if (name == "lgm")
        return ModelKind::Lgm;
    if (name == "hh")
        return ModelKind::Hh;
    throw ConfigError("unknown model '" + name + "' (expected lgm or hh)");
}

std::string to_string(ModelKind kind) { return kind == ModelKind::Lgm ? "lgm" : "hh"; }

sim::BoxPrior prior_for(ModelKind kind) { return kind == ModelKind::Lgm ? sim::lgm_prior() : sim::hh_prior(); }

inference::SamplerConfig default_sampler(ModelKind kind)
{
    inference::SamplerConfig config;
    if (kind == ModelKind::Hh) {
        config.kind = inference::SamplerKind::Smc;
        config.smc.final_moves = 500;
        // used when MCMC is requested explicitly
        config.mcmc.thin = 200;
        config.mcmc.burn_fraction = 1.0;
    }
    return config;
}

int default_posterior_draws(ModelKind kind) { return kind == ModelKind::Lgm ? 500 : 1000; }

nlohmann::json prior_to_json(const sim::BoxPrior& prior)
{
    return {{"lower", to_std(prior.lower)}, {"upper", to_std(prior.upper)}, {"names", prior.names}};
}

sim::BoxPrior prior_from_json(const nlohmann::json& j)
{
    sim::BoxPrior p;
    const auto lo = j.at("lower").get<std::vector<double>>();
    const auto hi = j.at("upper").get<std::vector<double>>();
    p.lower = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    p.upper = Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    p.names = j.value("names", std::vector<std::string>{});
    p.validate();
    return p;
}

SimulatedData simulate_data(const DataConfig& config, std::uint64_t seed)
{
    if (config.n < 1)
        throw ConfigError("simulation budget must be >= 1");
    if (config.restrict_prior && (config.classifier_fraction <= 0.0 || config.classifier_fraction >= 1.0))
        throw ConfigError("classifier_fraction must be in (0, 1)");

    const sim::BoxPrior prior = prior_for(config.model);
    inference::Simulator simulator;
    features::FeatureSet set;
    if (config.model == ModelKind::Lgm) {
        simulator = inference::lgm_simulator(sim::default_lgm_config());
    } else {
        set = hh_set(config.features);
        simulator = inference::hh_simulator(sim::HhConstants{}, sim::StimulusProtocol{}, set);
    }

    // The classifier rows are the head of the plain prior stream, so a skipped
    // classifier reproduces the unrestricted dataset exactly.
    SimulatedData out;
    const Matrix thetas = sim::sample_prior(prior, config.n, derive_seed(seed, "prior"));
    const std::uint64_t sim_seed = derive_seed(seed, "simulate");
    if (!config.restrict_prior) {
        out.data = inference::generate_training_set(simulator, thetas, sim_seed, prior.names);
    } else {
        const int n_clf = std::max(1, static_cast<int>(std::lround(config.classifier_fraction * config.n)));
        out.data = inference::generate_training_set(simulator, thetas.topRows(n_clf), sim_seed, prior.names);
        const int n_rest = config.n - n_clf;
        if (n_rest > 0) {
            const auto valid = out.data.valid_count();
            Matrix rest;
            if (valid > 0 && valid < static_cast<std::size_t>(n_clf)) {
                out.classifier = inference::train_validity_classifier(out.data.theta, out.data.valid,
                                                                      derive_seed(seed, "classifier"));
                rest = inference::restricted_prior_sample(prior, *out.classifier, n_rest,
                                                          derive_seed(seed, "restricted"))
                           .theta;
            } else {
                out.warnings.push_back("classifier sample is single-class; restricted prior equals the prior");
                rest = thetas.bottomRows(n_rest);
            }
            out.data = concat(out.data, inference::generate_training_set(simulator, rest, sim_seed, prior.names,
                                                                         static_cast<std::size_t>(n_clf)));
        }
    }
    out.data.metadata = {{"model", to_string(config.model)},
                         {"seed", seed},
                         {"n", config.n},
                         {"restrict_prior", config.restrict_prior},
                         {"prior", prior_to_json(prior)}};
    if (config.restrict_prior)
        out.data.metadata["classifier_fraction"] = config.classifier_fraction;
    if (out.classifier)
        out.data.metadata["classifier"] = out.classifier->to_json();
    return out;
}

Dataset observation(ModelKind kind, const features::FeatureSet& set)
{
    Dataset obs;
    const sim::BoxPrior prior = prior_for(kind);
    obs.param_names = prior.names;
    features::FeatureVector fv;
    if (kind == ModelKind::Lgm) {
        const auto config = sim::default_lgm_config();
        obs.theta = sim::lgm_observation_params().transpose();
        fv = features::lgm_features(sim::lgm_observation(config));
    } else {
        const auto params = sim::hh_observation_params();
        obs.theta = params.to_vector().transpose();
        fv = inference::hh_simulator(sim::HhConstants{}, sim::StimulusProtocol{}, hh_set(set))(params.to_vector(), 0);
    }
    obs.x = fv.values.transpose();
    obs.valid = {fv.all_valid()};
    obs.feature_names = fv.names;
    obs.metadata = {{"model", to_string(kind)}, {"kind", "observation"}};
    return obs;
}

features::FeatureVector feature_vector(const Dataset& obs, Eigen::Index row)
{
    if (row < 0 || row >= obs.size())
        throw ConfigError("observation row out of range");
    features::FeatureVector fv;
    fv.values = obs.x.row(row).transpose();
    fv.names = obs.feature_names;
    for (Eigen::Index j = 0; j < fv.values.size(); ++j)
        fv.valid.push_back(std::isfinite(fv.values[j]));
    return fv;
}

TrainedModel train_model(const Dataset& data, const sim::BoxPrior& prior, const TrainOptions& options)
{
    const Dataset train_rows = data.valid_subset(all_indices(static_cast<int>(data.x.cols())));
    if (train_rows.size() < 2)
        throw NumericalError("train_model: fewer than two valid rows");
    mdn::MdnArchitecture arch = options.architecture;
    arch.param_dim = static_cast<int>(data.theta.cols());
    arch.feature_dim = static_cast<int>(data.x.cols());

    TrainedModel out;
    out.result = mdn::train(mdn::MdnModel(arch, options.train.seed), train_rows.theta, train_rows.x, options.train);
    mdn::MdnModel& model = out.result.model;
    model.metadata = {{"param_names", data.param_names},
                      {"feature_names", data.feature_names},
                      {"prior", prior_to_json(prior)},
                      {"training_rows", train_rows.size()},
                      {"train_seed", options.train.seed},
                      {"best_epoch", out.result.best_epoch},
                      {"epochs_run", out.result.epochs_run}};
    if (data.metadata.contains("model"))
        model.metadata["model"] = data.metadata["model"];
    if (options.calibrate) {
        out.calibration = inference::fit_calibration(data.theta, data.valid);
        model.metadata["calibration"] = out.calibration->to_json();
    }
    out.model = std::make_shared<const mdn::MdnModel>(model);
    return out;
}

select::InferenceSetup setup_from_model(std::shared_ptr<const mdn::MdnModel> model,
                                        const features::FeatureVector& x_obs, const inference::SamplerConfig& sampler,
                                        int n_samples)
{
    select::InferenceSetup setup;
    const auto& meta = model->metadata;
    if (!meta.contains("prior"))
        throw FormatError("model file has no prior in its metadata");
    setup.prior = prior_from_json(meta.at("prior"));
    if (meta.contains("calibration") && !meta.at("calibration").is_null())
        setup.calibration = inference::CalibrationModel::from_json(meta.at("calibration"));
    if (meta.contains("feature_names")) {
        const auto names = meta.at("feature_names").get<std::vector<std::string>>();
        if (names != x_obs.names)
            throw ConfigError("observation features do not match the model's features");
    }
    setup.model = std::move(model);
    setup.x_obs = x_obs;
    setup.sampler = sampler;
    setup.n_samples = n_samples;
    return setup;
}

} // namespace fslm::pipeline
