#include "helpers.hpp"

#include <cmath>
#include <numbers>

using namespace fslm;

namespace {

mdn::MdnModel small_model(std::uint64_t seed, mdn::CovarianceType cov = mdn::CovarianceType::Full)
{
    mdn::MdnArchitecture arch;
    arch.param_dim = 2;
    arch.feature_dim = 3;
    arch.components = 2;
    arch.hidden = {5, 4};
    arch.covariance = cov;
    mdn::MdnModel m(arch, seed);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& v : m.parameters())
        v = normal(rng);
    return m;
}

void random_rows(Rng& rng, Matrix& theta, Matrix& x)
{
    std::normal_distribution<double> normal;
    for (auto& v : theta.reshaped())
        v = normal(rng);
    for (auto& v : x.reshaped())
        v = normal(rng);
}

} // namespace

TEST_SUITE("mdn")
{
    TEST_CASE("analytic gradient matches central differences")
    {
        for (auto cov : {mdn::CovarianceType::Full, mdn::CovarianceType::Diagonal}) {
            const auto model = small_model(11, cov);
            Rng rng(12);
            Matrix theta(8, 2), x(8, 3);
            random_rows(rng, theta, x);
            const auto g = mdn::nll_loss_and_grad(model, theta, x);
            CHECK(g.loss == doctest::Approx(mdn::nll_loss(model, theta, x)).epsilon(1e-12));
            for (Eigen::Index i = 0; i < g.grad.size(); ++i) {
                auto plus = model, minus = model;
                plus.parameters()[i] += 1e-6;
                minus.parameters()[i] -= 1e-6;
                const double fd = (mdn::nll_loss(plus, theta, x) - mdn::nll_loss(minus, theta, x)) / 2e-6;
                CHECK(std::abs(fd - g.grad[i]) <= 1e-4 * std::max({std::abs(fd), std::abs(g.grad[i]), 1e-3}));
            }
        }
    }

    TEST_CASE("parameter count and head layout")
    {
        mdn::MdnArchitecture arch;
        arch.param_dim = 3;
        arch.feature_dim = 4;
        arch.components = 10;
        CHECK(arch.offdiag_count() == 10 * 6);
        CHECK(arch.output_dim() == 10 + 10 * 4 + 10 * 4 + 10 * 6);
        CHECK(arch.parameter_count() == (3 * 50 + 50) + 2 * (50 * 50 + 50) + (50 * 150 + 150));
        arch.components = 0;
        CHECK_THROWS_AS(arch.validate(), ConfigError);
    }

    TEST_CASE("exact LGM model reproduces the Gaussian likelihood")
    {
        const auto cfg = sim::default_lgm_config();
        const auto model = testing::exact_lgm_model(cfg);
        Vector theta(3), x(4);
        theta << 0.3, -1.2, 2.0;
        x << 0.1, -0.5, 1.0, 0.4;
        const Vector d = x - cfg.mu0 - cfg.L * theta;
        const double expect = -0.5 * d.squaredNorm() - 2.0 * std::log(2.0 * std::numbers::pi);
        CHECK(mdn::log_prob(model->forward(theta), x) == doctest::Approx(expect).epsilon(1e-12));
    }

    TEST_CASE("batched marginal equals marginalize then log_prob")
    {
        const auto model = small_model(13);
        Rng rng(14);
        Matrix theta(6, 2), xs(1, 3);
        random_rows(rng, theta, xs);
        for (const IndexSet& keep : {IndexSet{0}, IndexSet{1, 2}, IndexSet{0, 1, 2}, IndexSet{2}}) {
            Vector xk(static_cast<Eigen::Index>(keep.size()));
            for (std::size_t j = 0; j < keep.size(); ++j)
                xk[static_cast<Eigen::Index>(j)] = xs(0, keep[j]);
            const Vector batch = model.marginal_log_prob_batch(theta, keep, xk);
            for (Eigen::Index i = 0; i < theta.rows(); ++i) {
                const auto mix = mdn::marginalize(model.forward(theta.row(i).transpose()), keep);
                CHECK(batch[i] == doctest::Approx(mdn::log_prob(mix, xk)).epsilon(1e-10));
            }
        }
    }

    TEST_CASE("forward_batch matches forward")
    {
        const auto model = small_model(15);
        Matrix theta(3, 2);
        theta << 0, 1, -1, 2, 0.5, 0.5;
        const auto batch = model.forward_batch(theta);
        for (Eigen::Index i = 0; i < 3; ++i) {
            const auto one = model.forward(theta.row(i).transpose());
            CHECK((batch[static_cast<std::size_t>(i)].means - one.means).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((batch[static_cast<std::size_t>(i)].weights - one.weights).cwiseAbs().maxCoeff() < 1e-12);
        }
    }

    TEST_CASE("save and load round trip; corruption is detected")
    {
        auto model = small_model(16);
        model.metadata = {{"note", "x"}};
        const auto dir = testing::temp_dir("mdn_io");
        mdn::save(model, dir / "m.fslm");
        const auto back = mdn::load(dir / "m.fslm");
        CHECK(back.parameters() == model.parameters());
        CHECK(back.metadata == model.metadata);
        CHECK(mdn::serialize(back) == mdn::serialize(model));

        std::string bytes = mdn::serialize(model);
        bytes[bytes.size() / 2] ^= 0x20;
        CHECK_THROWS_AS(mdn::deserialize(bytes), mdn::ChecksumError);
        CHECK_THROWS_AS(mdn::deserialize("not a model"), FormatError);
    }

    TEST_CASE("training lowers the validation loss, is deterministic and counted")
    {
        const auto cfg = sim::default_lgm_config();
        const Matrix theta = sim::sample_prior(sim::lgm_prior(), 1500, 17);
        Matrix x(theta.rows(), 4);
        for (Eigen::Index i = 0; i < theta.rows(); ++i)
            x.row(i) = sim::simulate_lgm(cfg, theta.row(i).transpose(), derive_seed(17, static_cast<std::uint64_t>(i))).transpose();
        mdn::MdnArchitecture arch;
        arch.param_dim = 3;
        arch.feature_dim = 4;
        arch.components = 2;
        arch.hidden = {16};
        mdn::TrainConfig tc;
        tc.max_epochs = 15;
        tc.seed = 18;
        const auto before = mdn::training_invocations();
        const auto a = mdn::train(mdn::MdnModel(arch, 1), theta, x, tc);
        const auto b = mdn::train(mdn::MdnModel(arch, 1), theta, x, tc);
        CHECK(mdn::training_invocations() == before + 2);
        CHECK(a.validation_loss.back() < a.validation_loss.front());
        CHECK(*std::min_element(a.validation_loss.begin(), a.validation_loss.end()) ==
              a.validation_loss[static_cast<std::size_t>(a.best_epoch)]);
        CHECK(a.model.parameters() == b.model.parameters());
        // Never below the noise entropy 0.5 * 4 * log(2 pi e) ~ 5.68 by much.
        CHECK(a.validation_loss.back() > 5.3);
        CHECK(a.validation_loss.front() - a.validation_loss.back() > 1.0);
    }

    TEST_CASE("invalid training configuration")
    {
        mdn::TrainConfig tc;
        tc.batch_size = 0;
        CHECK_THROWS_AS(tc.validate(), ConfigError);
        tc = {};
        tc.validation_fraction = 1.0;
        CHECK_THROWS_AS(tc.validate(), ConfigError);
    }

    TEST_CASE("standardization fit")
    {
        Matrix theta(3, 1), x(3, 2);
        theta << 1, 2, 3;
        x << 5, 1, 5, 2, 5, 3;
        const auto s = mdn::Standardization::fit(theta, x);
        CHECK(s.theta_mean[0] == doctest::Approx(2.0));
        CHECK(s.x_scale[0] == 1.0); // constant column
        CHECK(s.x_scale[1] > 0.0);
    }
}
