#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/quantile_model.hpp"
#include "qrgmm/schema.hpp"

#include <span>
#include <string>
#include <vector>

namespace qrgmm {

// Levels tau_j = j / m for j = 1..m-1.
class QuantileGrid {
public:
    explicit QuantileGrid(int m = 3);

    int m() const { return m_; }
    int size() const { return m_ - 1; }
    // j is 0-based here: level(0) == 1/m.
    double level(int j) const { return static_cast<double>(j + 1) / m_; }
    Vector levels() const;
    // 0-based index of an exact grid level, or -1.
    int index_of(double tau) const;

    bool operator==(const QuantileGrid& other) const { return m_ == other.m_; }

private:
    int m_;
};

// rho_tau(u) = [tau - I(u <= 0)] * u
template <typename Scalar>
Scalar pinball_loss(Scalar u, Scalar tau) {
    return (tau - (u <= Scalar(0) ? Scalar(1) : Scalar(0))) * u;
}

// Mean pinball loss of residuals y - fitted.
double mean_pinball(const Vector& residuals, double tau);

// round(sqrt(n)) clamped to [3, n - 1]; requires n >= 9.
int default_m(long n);

struct SolverConfig {
    int max_iterations = 500;          // IRLS iterations across all smoothing stages
    double tolerance = 1e-10;          // relative coefficient change per stage
    double smoothing_decay = 0.1;      // kink width multiplier between stages
    double min_smoothing = 1e-9;       // final kink width relative to mean |y|
    int stage_iterations = 10;         // IRLS iterations per kink width before shrinking it
    double ridge = 0.0;                // optional L2 term; disables the exact polish
    bool polish = true;                // exact vertex descent after IRLS
    int max_pivots = -1;               // <0: 20 * rank + 1000
    int threads = 0;                   // 0: hardware concurrency
};

struct LevelFit {
    double tau = 0.0;
    double loss = 0.0;  // mean pinball loss at the returned coefficients
    int iterations = 0;
    int pivots = 0;
    bool converged = false;
    std::string message;
};

struct FitReport {
    std::vector<LevelFit> levels;
    int failed_levels() const;
};

// Design shared by every level: intercept column + one-hot columns, with
// linearly dependent columns removed.
struct Design {
    SparseRows X;               // n x (rank) reduced design
    std::vector<int> columns;   // kept column ids in the augmented layout (0 = intercept, c + 1 = one-hot c)
    int augmented_width = 0;    // 1 + schema width
};

Design make_design(const Dataset& data);

struct LevelSolution {
    Vector coef;    // augmented layout, size 1 + p (intercept first)
    LevelFit fit;
};

LevelSolution fit_level(const Design& design, const Vector& y, double tau, const SolverConfig& cfg = {});

class LinearQuantileModel : public QuantileModel {
public:
    LinearQuantileModel() = default;
    LinearQuantileModel(FieldSchema schema, QuantileGrid grid, Vector intercept, Matrix beta, FitReport report);

    std::string kind() const override { return "linear"; }
    const FieldSchema& schema() const override { return schema_; }
    int m() const override { return grid_.m(); }
    Vector raw_quantiles(const Vector& x) const override { return predict(x); }

    const QuantileGrid& grid() const { return grid_; }
    const Vector& intercept() const { return intercept_; }
    const Matrix& beta() const { return beta_; }  // (m-1) x p
    const FitReport& report() const { return report_; }

    // Raw per-level predictions; no crossing correction.
    Vector predict(const Vector& x) const;
    double predict_level(const Vector& x, int j) const;

private:
    FieldSchema schema_;
    QuantileGrid grid_;
    Vector intercept_;
    Matrix beta_;
    FitReport report_;
};

// Fits every grid level independently. Throws FitError if all levels fail;
// partial failures are recorded in the report.
LinearQuantileModel fit_grid(const Dataset& data, const QuantileGrid& grid, const SolverConfig& cfg = {});

// Fits only the given 0-based level indices; same coefficients as fit_grid.
std::vector<LevelSolution> fit_levels(const Dataset& data, const QuantileGrid& grid, std::span<const int> levels,
                                      const SolverConfig& cfg = {});

}  // namespace qrgmm
