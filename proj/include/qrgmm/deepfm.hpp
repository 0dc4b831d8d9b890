#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/quantile_model.hpp"
#include "qrgmm/quantreg.hpp"
#include "qrgmm/schema.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace qrgmm {

struct DeepFmConfig {
    int embed_dim = 8;
    std::vector<int> hidden_sizes{64, 32};
    std::string activation = "relu";  // relu | tanh
    int epochs = 50;
    int batch_size = 256;
    double learning_rate = 2e-3;
    std::string optimizer = "adamw";  // adamw | sgd
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Huber width of the training loss in standardized response units; 0
    // trains on the exact pinball subgradient.
    double smoothing = 0.0;
    bool use_deep = true;
    bool use_interactions = true;
    bool init_bias_from_quantiles = true;
    bool standardize_response = true;
    bool standardize_features = true;
    double embed_init_sd = 0.05;
    std::uint64_t seed = 0;

    void validate() const;
};

// Exact pinball (delta == 0) or its Huber smoothing, and the derivative in u.
double smoothed_pinball(double u, double tau, double delta);
double smoothed_pinball_grad(double u, double tau, double delta);

struct DeepFmTrainReport {
    double initial_loss = 0.0;        // mean summed pinball loss before the first step
    std::vector<double> epoch_loss;   // mean summed pinball loss per epoch, original units
    int increases = 0;                // epochs whose loss exceeded the previous epoch
    long steps = 0;
    std::string status = "ok";
};

// Training stopped early (divergence or non-finite parameters).
class TrainingAborted : public FitError {
public:
    TrainingAborted(const std::string& what, DeepFmTrainReport report)
        : FitError(what), report_(std::move(report)) {}
    const DeepFmTrainReport& report() const { return report_; }

private:
    DeepFmTrainReport report_;
};

struct FeatureScaling {
    Vector cont_mean;  // per continuous field
    Vector cont_sd;
    double y_mean = 0.0;
    double y_scale = 1.0;
};

// One (column, value) pair per field and row: F x B.
struct FeatureBatch {
    Eigen::MatrixXi cols;
    Matrix vals;
    long size() const { return cols.cols(); }
};

namespace detail {

// Offsets of each parameter block inside the flat parameter vector.
struct DeepFmShape {
    int m1 = 0;  // grid levels
    int p = 0;   // one-hot width
    int k = 0;   // embedding size
    int F = 0;   // fields
    std::vector<int> hidden;
    std::vector<int> in;  // input width of each hidden layer
    bool deep = true;
    bool interactions = true;
    bool relu = true;
    Eigen::Index off_b = 0, off_w = 0, off_s = 0, off_v = 0, off_head = 0, size = 0;
    std::vector<Eigen::Index> off_lw, off_lc;
};

}  // namespace detail

struct ParameterGroup {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
};

// Per level j:
//   y_j(x) = b_j + <w_j, x> + s_j * fm(x) + <h_j, mlp(e(x))>
// with fm the second-order FM term over shared embeddings V and e(x) the
// concatenated field embeddings. Outputs are in standardized response units
// and mapped back with y_mean + y_scale * y_j.
class DeepFmQuantileModel : public QuantileModel {
public:
    DeepFmQuantileModel(FieldSchema schema, QuantileGrid grid, DeepFmConfig cfg, FeatureScaling scaling);

    // Untrained model with initialized parameters and scaling fitted on `data`.
    static DeepFmQuantileModel initialize(const Dataset& data, const QuantileGrid& grid, const DeepFmConfig& cfg);

    std::string kind() const override { return "deepfm"; }
    const FieldSchema& schema() const override { return schema_; }
    int m() const override { return grid_.m(); }
    Vector raw_quantiles(const Vector& x) const override { return forward(x); }

    const QuantileGrid& grid() const { return grid_; }
    const DeepFmConfig& config() const { return cfg_; }
    const FeatureScaling& scaling() const { return scaling_; }
    const DeepFmTrainReport& train_report() const { return report_; }
    void set_train_report(DeepFmTrainReport r) { report_ = std::move(r); }

    const Vector& parameters() const { return theta_; }
    void set_parameters(const Vector& theta);
    std::vector<ParameterGroup> parameter_groups() const;
    Eigen::Index parameter_count() const { return theta_.size(); }

    // Raw head outputs in original units (may cross).
    Vector forward(const Vector& x) const;
    Vector forward(const std::map<std::string, std::string>& assignment) const;
    // Rearranged; optional subset of grid levels (DomainError if off grid).
    Vector predict_quantiles(const Vector& x, std::span<const double> levels = {}) const;

    // Second-order FM term of a one-hot row after feature scaling.
    double fm_interaction(const Vector& x) const;

    FeatureBatch encode(const Dataset& data, std::span<const long> rows) const;
    FeatureBatch encode_row(const Vector& x) const;

    // Mean over the batch of sum_j rho_delta(y_std - y_j); gradient w.r.t.
    // the parameter vector when `grad` is given. y in original units.
    // `exact` receives the unsmoothed value.
    double objective(const Vector& theta, const FeatureBatch& batch, const Vector& y, double delta,
                     Vector* grad, double* exact = nullptr) const;

    // Mean summed exact pinball loss in original units.
    double mean_loss(const Dataset& data) const;

private:
    FieldSchema schema_;
    QuantileGrid grid_;
    DeepFmConfig cfg_;
    FeatureScaling scaling_;
    detail::DeepFmShape shape_;
    Vector theta_;
    DeepFmTrainReport report_;
};

DeepFmQuantileModel train_deepfm(const Dataset& data, const QuantileGrid& grid, const DeepFmConfig& cfg = {});

}  // namespace qrgmm
