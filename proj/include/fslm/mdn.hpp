#pragma once

#include "fslm/common.hpp"
#include "fslm/mixture.hpp"

#include <json.hpp>

#include <filesystem>
#include <vector>

namespace fslm::mdn {

enum class CovarianceType { Full, Diagonal };

struct MdnArchitecture {
    int param_dim = 0;
    int feature_dim = 0;
    int components = 10;
    std::vector<int> hidden = {50, 50, 50}; // may be empty (linear head)
    CovarianceType covariance = CovarianceType::Full;

    void validate() const;
    int offdiag_count() const;
    /// Length of the output head: logits, means, log-diagonals, off-diagonals.
    int output_dim() const;
    /// Total number of trainable weights.
    Eigen::Index parameter_count() const;
};

/// Per-dimension affine maps into the network's standardized coordinates.
struct Standardization {
    Vector theta_mean, theta_scale;
    Vector x_mean, x_scale;

    static Standardization identity(int param_dim, int feature_dim);
    /// Column means and standard deviations; scales below 1e-12 are set to 1.
    static Standardization fit(const Matrix& theta, const Matrix& x);
};

class ModelCorrupt : public NumericalError {
public:
    using NumericalError::NumericalError;
    std::string kind() const override { return "model-corrupt"; }
};

class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(int epoch, const std::string& what);
    int epoch() const { return epoch_; }
    std::string kind() const override { return "training-diverged"; }

private:
    int epoch_;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
    std::string kind() const override { return "checksum"; }
};

/// Conditional density q(x | theta): a tanh MLP whose output head parameterizes
/// a K-component Gaussian mixture through softmax logits, means and a Cholesky
/// factor with exponentiated diagonal.
///
/// Weights live in one flat vector. Layer l stores W_l (out x in, column-major)
/// followed by b_l. The head is the last layer.
class MdnModel {
public:
    MdnModel() = default;
    MdnModel(MdnArchitecture arch, std::uint64_t seed);

    const MdnArchitecture& architecture() const { return arch_; }
    const Standardization& standardization() const { return standardization_; }
    void set_standardization(Standardization s);

    const Vector& parameters() const { return params_; }
    Vector& parameters() { return params_; }

    /// Sets the head's weights and biases to zero: uniform weights, equal means.
    void zero_output_head();

    /// Free-form descriptive metadata (parameter/feature names, prior box).
    nlohmann::json metadata = nlohmann::json::object();

    /// Mixture over x in original units for a single theta.
    GaussianMixture forward(const Eigen::Ref<const Vector>& theta) const;
    /// One mixture per row of `thetas`.
    std::vector<GaussianMixture> forward_batch(const Matrix& thetas) const;

    /// log q(x_keep | theta_i) of the mixture marginal over `keep`, for each row of
    /// `thetas`. Equivalent to marginalize() followed by log_prob() without
    /// materializing mixtures; `x_keep` lists the kept coordinates in order.
    Vector marginal_log_prob_batch(const Matrix& thetas, const IndexSet& keep, const Vector& x_keep) const;

    /// Raw head outputs (output_dim x n) for standardized inputs (param_dim x n).
    Matrix head(const Matrix& theta_std_cols) const;

    struct Layer {
        Eigen::Index weight_offset;
        Eigen::Index bias_offset;
        int in;
        int out;
    };
    const std::vector<Layer>& layers() const { return layers_; }

    Eigen::Map<const Matrix> weight(std::size_t layer) const;
    Eigen::Map<const Vector> bias(std::size_t layer) const;

private:
    void build_layout();
    GaussianMixture mixture_from_head(const double* out) const;

    MdnArchitecture arch_;
    Standardization standardization_;
    Vector params_;
    std::vector<Layer> layers_;
};

struct LossAndGrad {
    double loss = 0.0;
    Vector grad;
};

/// Mean negative log-likelihood of rows (theta_i, x_i) in original units and its
/// gradient with respect to MdnModel::parameters().
LossAndGrad nll_loss_and_grad(const MdnModel& model, const Matrix& theta, const Matrix& x);
double nll_loss(const MdnModel& model, const Matrix& theta, const Matrix& x);

struct TrainConfig {
    int batch_size = 256;
    double learning_rate = 1e-3;
    int max_epochs = 500;
    double validation_fraction = 0.1;
    int patience = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainResult {
    MdnModel model; // best-validation checkpoint
    std::vector<double> train_loss;
    std::vector<double> validation_loss; // entry 0 is before the first update
    int best_epoch = 0;
    int epochs_run = 0;
};

/// Adam on the mean NLL with early stopping on a held-out split. Standardization
/// is fitted on the training split. Deterministic given config.seed.
TrainResult train(MdnModel model, const Matrix& theta, const Matrix& x, const TrainConfig& config);

/// Number of calls to train() in this process.
std::uint64_t training_invocations();

// Model file: magic "FSLMMDN1", u32 version, u32 header length, JSON header
// (architecture + metadata), standardization doubles, weight doubles, u32 CRC-32
// of everything before it.
inline constexpr std::uint32_t kModelFormatVersion = 1;

void save(const MdnModel& model, const std::filesystem::path& path);
MdnModel load(const std::filesystem::path& path);
std::string serialize(const MdnModel& model);
MdnModel deserialize(const std::string& bytes);

} // namespace fslm::mdn
