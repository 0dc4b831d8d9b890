#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/quantile_model.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>

namespace qrgmm {

// Distribution of the interpolated inverse transform over m-1 nondecreasing
// knots Q_1..Q_{m-1} at levels j/m: atoms of mass 1/m at Q_1 and Q_{m-1},
// mass 1/m spread uniformly on each [Q_j, Q_{j+1}] (an atom when Q_j == Q_{j+1}).
class PiecewiseCdf {
public:
    PiecewiseCdf(Vector knots, int m);

    // Sorts raw model outputs first (monotone rearrangement).
    static PiecewiseCdf from_raw(Vector raw, int m);
    // Single atom at `value` (all knots equal).
    static PiecewiseCdf point_mass(double value, int m = 3);

    int m() const { return m_; }
    const Vector& knots() const { return q_; }
    double lower() const { return q_[0]; }
    double upper() const { return q_[q_.size() - 1]; }

    // Pr{Y <= y}, right-continuous.
    double cdf(double y) const;
    // Pr{Y < y}.
    double cdf_left(double y) const;

    // u -> Y(u) from the online stage; DomainError off (0, 1).
    double quantile(double u) const;
    // Same map without the domain check; u in [0, 1).
    double quantile_unchecked(double u) const {
        if (u < inv_m_) return q_[0];
        const double s = u * m_;
        if (s >= m_ - 1) return q_[q_.size() - 1];
        const int j = std::max(1, static_cast<int>(s));  // 1 <= j <= m-2
        return q_[j - 1] + std::max(s - j, 0.0) * (q_[j] - q_[j - 1]);
    }

    // E[g(Y) * I{Y < a}]. `nodes` Gauss-Legendre points per segment: exact
    // for polynomial g of degree <= 2 * nodes - 1.
    template <typename G>
    double expect_below(G&& g, double a, int nodes) const;

    double mean() const;
    double variance() const;

    void sample_into(Rng& rng, std::span<double> out) const {
        for (double& v : out) v = quantile_unchecked(uniform01(rng));
    }
    Vector sample(long K, std::uint64_t seed) const;

private:
    Vector q_;
    int m_;
    double inv_m_;
};

// Gauss-Legendre nodes/weights on [-1, 1] for 1..8 points.
std::span<const double> gauss_nodes(int n);
std::span<const double> gauss_weights(int n);

template <typename G>
double PiecewiseCdf::expect_below(G&& g, double a, int nodes) const {
    nodes = std::clamp(nodes, 1, 8);
    const auto x = gauss_nodes(nodes);
    const auto w = gauss_weights(nodes);
    const Eigen::Index last = q_.size() - 1;
    double sum = 0.0;
    if (!(q_[0] < a)) return 0.0;
    sum += g(q_[0]) * inv_m_;
    for (Eigen::Index j = 0; j < last; ++j) {
        const double lo = q_[j];
        const double hi = q_[j + 1];
        if (!(lo < a)) break;
        if (hi == lo) {
            sum += g(lo) * inv_m_;
            continue;
        }
        const double top = std::min(hi, a);
        const double half = 0.5 * (top - lo);
        const double mid = 0.5 * (top + lo);
        double acc = 0.0;
        for (int k = 0; k < nodes; ++k) acc += w[static_cast<std::size_t>(k)] * g(mid + half * x[static_cast<std::size_t>(k)]);
        sum += acc * half * inv_m_ / (hi - lo);
    }
    if (q_[last] < a) sum += g(q_[last]) * inv_m_;
    return sum;
}

// Raw bytes of a covariate row; the cache key for per-x quantiles.
std::string covariate_key(const Vector& x);
std::uint64_t covariate_hash(const Vector& x);

// Online stage over a fitted model: caches the rearranged quantile vector
// per covariate row. Safe for concurrent use.
class ConditionalSampler {
public:
    explicit ConditionalSampler(std::shared_ptr<const QuantileModel> model);

    const QuantileModel& model() const { return *model_; }
    std::shared_ptr<const PiecewiseCdf> at(const Vector& x) const;

    Vector sample(const Vector& x, long K, std::uint64_t seed) const;
    double cdf_eval(const Vector& x, double y) const { return at(x)->cdf(y); }
    double quantile_fn(const Vector& x, double u) const { return at(x)->quantile(u); }

    std::size_t cache_size() const;

private:
    std::shared_ptr<const QuantileModel> model_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, std::shared_ptr<const PiecewiseCdf>> cache_;
};

// Single-column CSV with '#'-prefixed metadata lines.
void write_samples_csv(std::ostream& out, const Vector& samples, const std::map<std::string, std::string>& meta);

}  // namespace qrgmm
