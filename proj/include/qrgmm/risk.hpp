#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/generator.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qrgmm {

// Loan-level risk of lending l against sales Y with net unit revenue r.
struct RiskSpec {
    double r = 1.0;
    double l_bar = 1.0;
    std::vector<double> loan_grid;  // strictly increasing, inside [0, l_bar]
    std::optional<double> xi;       // loss threshold

    void validate() const;
};

// L(l) = (l - r y)^+
template <typename Scalar>
Scalar loss(Scalar l, Scalar y, Scalar r) {
    const Scalar v = l - r * y;
    return v > Scalar(0) ? v : Scalar(0);
}

// g_l(y) with threshold a(l) for r3(l) = E[g_l(Y) I{Y < a(l)}].
struct GeneralizedLoss {
    std::string name;
    std::function<double(double l, double y)> g;
    std::function<double(double l)> a;  // empty: a(l) = l / r
    int degree = -1;                    // polynomial degree of g in y; -1 if not polynomial
    // Optional regularity metadata (Lipschitz constant of g, bound on |g|).
    std::optional<double> lipschitz;
    std::optional<double> bound;
    // False for plugins that may take either sign (excluded from bounded-loss checks).
    bool bounded = true;

    double threshold(double l, double r) const { return a ? a(l) : l / r; }
    int quadrature_nodes() const { return degree >= 0 ? degree / 2 + 1 : 8; }

    static GeneralizedLoss indicator();                    // g = 1
    static GeneralizedLoss shortfall(double r);            // g = l - r y
    static GeneralizedLoss power_shortfall(double r, double p);  // g = (l - r y)^p
    static GeneralizedLoss scenario(double r, double k);   // g = (l - r y)(1 + k y)
};

// "one", "shortfall", "squared", "power:<p>", "scenario:<k>".
GeneralizedLoss loss_plugin(const std::string& spec, double r);
std::vector<std::string> loss_plugin_names();

// Monotone a, a(l) -> 0 as l -> 0, 0 <= a(l) <= a(l_bar) < inf, checked on a
// grid. Returns a list of violations (empty when all hold).
std::vector<std::string> check_threshold_assumptions(const GeneralizedLoss& gl, double r, double l_bar,
                                                     int points = 200);

// Closed forms under the generated distribution. The default event is
// {Y < l / r} (strict), so atoms at l / r are excluded.
double r1_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, double l);
double r2_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, double l);
double r3_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, const GeneralizedLoss& gl, double l);

enum class Measure { r1, r2, r3 };

struct Estimate {
    double value = 0.0;
    double se = 0.0;
};

// Sample-average estimators over draws of Y; se = sample sd / sqrt(K).
Estimate mc_estimate(std::span<const double> samples, const RiskSpec& spec, double l, Measure which,
                     const GeneralizedLoss* gl = nullptr);

struct LgdValue {
    double value = 0.0;
    bool no_default = false;  // r1 == 0; value reported as 0
};

// r2 / (l * r1).
LgdValue lgd(double l, double r1, double r2);

struct ThresholdMeasures {
    double exceed_prob = 0.0;      // Pr{L(l) > xi}
    double expected_excess = 0.0;  // E[L(l) I{L(l) > xi}]
};

ThresholdMeasures threshold_measures(const PiecewiseCdf& cdf, const RiskSpec& spec, double l, double xi);

struct EstimatorConfig {
    enum class Kind { closed_form, monte_carlo };
    Kind kind = Kind::closed_form;
    long K = 100000;
    std::uint64_t seed = 0;
};

struct RiskPoint {
    double l = 0.0;
    double r1 = 0.0;
    double r2 = 0.0;
    double lgd = 0.0;
    bool no_default = false;
    std::optional<double> r3;
    double se_r1 = 0.0;
    double se_r2 = 0.0;
    double se_r3 = 0.0;
    std::optional<double> exceed_prob;
    std::optional<double> expected_excess;
};

struct RiskCurve {
    std::vector<RiskPoint> points;
    std::string estimator;  // "closed-form" | "monte-carlo"
    long K = 0;
    std::uint64_t seed = 0;
    std::string loss_name;
    double r = 1.0;
    double l_bar = 0.0;
    std::optional<double> xi;
};

// `points` equally spaced levels over [l_min, l_bar].
std::vector<double> equally_spaced_grid(double l_min, double l_bar, int points = 100);

// r times the 0.99 quantile of the generated sales.
double default_l_bar(const PiecewiseCdf& cdf, double r);

// Builds a spec with the default l_bar / grid when not given.
RiskSpec make_risk_spec(const PiecewiseCdf& cdf, double r, std::optional<double> l_bar = std::nullopt,
                        double l_min = 0.0, int points = 100, std::optional<double> xi = std::nullopt);

RiskCurve risk_curve(const PiecewiseCdf& cdf, const RiskSpec& spec, const EstimatorConfig& est = {},
                     const GeneralizedLoss* gl = nullptr);

// Columns: l,r1,r2,lgd,r3,estimator,se_r1,se_r2,se_r3[,exceed_prob,expected_excess]
std::string risk_curve_csv(const RiskCurve& curve);

}  // namespace qrgmm
