#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/datagen.hpp"
#include "qrgmm/deepfm.hpp"
#include "qrgmm/quantile_model.hpp"
#include "qrgmm/quantreg.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qrgmm {

// tau_hat_j = fraction of test rows with y_i <= q_j(x_i), using the
// rearranged quantiles.
Vector calibration(const QuantileModel& model, const Dataset& test);

// max_j |tau_hat_j - tau_j| over levels inside [lo, hi].
double max_calibration_error(const Vector& tau_hat, int m, double lo = 0.05, double hi = 0.95);

// Two-sample 1-D Wasserstein-1 and Kolmogorov-Smirnov statistics.
double wasserstein1(std::span<const double> a, std::span<const double> b);
double ks_statistic(std::span<const double> a, std::span<const double> b);

// The true conditional quantiles at levels j/m.
class OracleQuantileModel : public QuantileModel {
public:
    OracleQuantileModel(FieldSchema schema, FmLocationScaleParams params, int m);

    std::string kind() const override { return "oracle"; }
    const FieldSchema& schema() const override { return schema_; }
    int m() const override { return m_; }
    Vector raw_quantiles(const Vector& x) const override;

private:
    FieldSchema schema_;
    FmLocationScaleParams params_;
    int m_;
};

struct ReplicationPlan {
    int replications = 100;
    double split = 0.8;            // train fraction
    std::uint64_t seed = 0;        // replication r uses derive_seed(seed, r)
    std::optional<int> m;          // default: default_m(train size)
    std::string model_kind = "linear";  // linear | deepfm
    long K = 10000;                // conditional draws per replication
    int histogram_bins = 60;
    SolverConfig solver;
    DeepFmConfig deepfm;

    void validate() const;
    std::uint64_t replication_seed(int r) const { return derive_seed(seed, static_cast<std::uint64_t>(r)); }
};

// Generated sample vs reference sample.
struct SampleComparison {
    double generated_mean = 0.0;
    double generated_sd = 0.0;
    double reference_mean = 0.0;
    double reference_sd = 0.0;
    double wd = 0.0;
    double ks = 0.0;
};

SampleComparison compare_samples(std::span<const double> generated, std::span<const double> reference);

struct Histogram {
    std::string label;
    std::vector<double> edges;  // bins + 1
    std::vector<long> generated;
    std::vector<long> reference;
};

Histogram histogram(const std::string& label, std::span<const double> generated, std::span<const double> reference,
                    int bins = 60);

struct ReplicationResult {
    int replication = 0;
    std::uint64_t seed = 0;
    std::optional<SampleComparison> unconditional;
    std::optional<SampleComparison> conditional;
    Vector tau_hat;  // empty when not computed
};

struct EvalReport {
    std::string model_kind;
    int m = 0;
    long n_train = 0;
    long n_test = 0;
    long K = 0;
    std::vector<ReplicationResult> replications;
    // Means over replications.
    std::optional<SampleComparison> unconditional;
    std::optional<SampleComparison> conditional;
    Vector tau_hat;
    std::vector<Histogram> histograms;  // from the first replication
    std::optional<double> conditional_truth_mean;  // analytic, when the truth is known
    std::optional<double> conditional_truth_sd;
};

// Averages per-replication metrics into the report aggregates.
void aggregate(EvalReport& report);

// One generated draw per test covariate, compared with the test responses.
// `plan.replications` independent draws from the same fitted model.
EvalReport unconditional_test(const QuantileModel& model, const Dataset& test, const ReplicationPlan& plan);

// K generated draws at x against K draws from the ground truth.
// UnsupportedError when `truth` is null.
EvalReport conditional_test(const QuantileModel& model, const FmLocationScaleParams* truth, const Vector& x,
                            const ReplicationPlan& plan);

std::unique_ptr<QuantileModel> fit_model(const Dataset& train, const QuantileGrid& grid, const ReplicationPlan& plan);

// Full synthetic protocol: parameters drawn once from plan.seed, then per
// replication fresh data, a train/test split, a fit, the unconditional
// and conditional tests and calibration on the test split.
struct SyntheticSetup {
    FieldSchema schema;
    SynthConfig synth;
    long n = 15000;
    std::optional<Vector> x;  // conditional covariate; drawn from plan.seed when absent
};

struct SyntheticRun {
    FmLocationScaleParams params;
    Vector x;
    EvalReport report;
};

SyntheticRun synthetic_replications(const SyntheticSetup& setup, const ReplicationPlan& plan);

// Same protocol on a fixed dataset (no ground truth, so no conditional test):
// per replication a fresh split, a fit, the unconditional test and calibration.
EvalReport dataset_replications(const Dataset& data, const ReplicationPlan& plan);

// Analytic risk measures under the log-normal location-scale truth at x,
// with r3 for g = (l - r y)^2.
struct TrueRisk {
    double r1 = 0.0;
    double r2 = 0.0;
    double r3 = 0.0;
};

TrueRisk true_risk(const FmLocationScaleParams& params, const Vector& x, double r, double l);

// Output tables.
std::string eval_report_json(const EvalReport& report);
// Summary: one row for the reference sample, one for the generator.
std::string summary_csv(const EvalReport& report);
std::string replications_csv(const EvalReport& report);
std::string histograms_csv(const EvalReport& report);
std::string calibration_csv(const EvalReport& report);

}  // namespace qrgmm
