#include "qrgmm/risk.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace qrgmm {

void RiskSpec::validate() const {
    if (!(r > 0.0) || !std::isfinite(r)) throw DomainError("net unit revenue r must be positive");
    if (!(l_bar > 0.0) || !std::isfinite(l_bar)) throw DomainError("maximum loan l_bar must be positive");
    for (std::size_t i = 0; i < loan_grid.size(); ++i) {
        const double l = loan_grid[i];
        if (!(l >= 0.0 && l <= l_bar)) throw DomainError("loan grid must lie inside [0, l_bar]");
        if (i > 0 && !(l > loan_grid[i - 1])) throw DomainError("loan grid must be strictly increasing");
    }
    if (xi && !(*xi > 0.0)) throw DomainError("loss threshold xi must be positive");
}

GeneralizedLoss GeneralizedLoss::indicator() {
    GeneralizedLoss gl;
    gl.name = "one";
    gl.g = [](double, double) { return 1.0; };
    gl.degree = 0;
    gl.lipschitz = 0.0;
    gl.bound = 1.0;
    return gl;
}

GeneralizedLoss GeneralizedLoss::shortfall(double r) {
    GeneralizedLoss gl;
    gl.name = "shortfall";
    gl.g = [r](double l, double y) { return l - r * y; };
    gl.degree = 1;
    gl.lipschitz = r;
    return gl;
}

GeneralizedLoss GeneralizedLoss::power_shortfall(double r, double p) {
    if (!(p > 0.0)) throw DomainError("power must be positive");
    GeneralizedLoss gl;
    gl.name = "power:" + std::to_string(p);
    if (p == 2.0) {
        gl.name = "squared";
        gl.g = [r](double l, double y) {
            const double s = l - r * y;
            return s * s;
        };
        gl.degree = 2;
    } else {
        // On {y < l / r} the base is positive.
        gl.g = [r, p](double l, double y) { return std::pow(std::max(l - r * y, 0.0), p); };
        const double ip = std::floor(p);
        gl.degree = (ip == p) ? static_cast<int>(p) : -1;
    }
    return gl;
}

GeneralizedLoss GeneralizedLoss::scenario(double r, double k) {
    GeneralizedLoss gl;
    gl.name = "scenario:" + std::to_string(k);
    gl.g = [r, k](double l, double y) { return (l - r * y) * (1.0 + k * y); };
    gl.degree = 2;
    gl.bounded = false;
    return gl;
}

GeneralizedLoss loss_plugin(const std::string& spec, double r) {
    if (spec == "one" || spec == "indicator") return GeneralizedLoss::indicator();
    if (spec == "shortfall") return GeneralizedLoss::shortfall(r);
    if (spec == "squared") return GeneralizedLoss::power_shortfall(r, 2.0);
    auto number_after = [&](std::size_t prefix) {
        double v = 0.0;
        const char* first = spec.data() + prefix;
        const char* last = spec.data() + spec.size();
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last || !std::isfinite(v)) throw DomainError("bad loss plugin '" + spec + "'");
        return v;
    };
    if (spec.rfind("power:", 0) == 0) return GeneralizedLoss::power_shortfall(r, number_after(6));
    if (spec.rfind("scenario:", 0) == 0) return GeneralizedLoss::scenario(r, number_after(9));
    throw DomainError("unknown loss plugin '" + spec + "'");
}

std::vector<std::string> loss_plugin_names() { return {"one", "shortfall", "squared", "power:<p>", "scenario:<k>"}; }

std::vector<std::string> check_threshold_assumptions(const GeneralizedLoss& gl, double r, double l_bar, int points) {
    std::vector<std::string> issues;
    const double a_bar = gl.threshold(l_bar, r);
    if (!std::isfinite(a_bar)) issues.push_back("a(l_bar) is not finite");
    int direction = 0;
    double prev = gl.threshold(0.0, r);
    if (std::abs(prev) > 1e-12 * (1.0 + std::abs(a_bar))) issues.push_back("a(l) does not vanish at l = 0");
    for (int i = 0; i <= points; ++i) {
        const double l = l_bar * i / points;
        const double a = gl.threshold(l, r);
        if (a < 0.0 || a > a_bar * (1 + 1e-12) + 1e-300) {
            issues.push_back("a(l) leaves [0, a(l_bar)] at l = " + std::to_string(l));
            break;
        }
        if (i > 0) {
            const int d = (a > prev) - (a < prev);
            if (d != 0 && direction != 0 && d != direction) {
                issues.push_back("a(l) is not monotone");
                break;
            }
            if (d != 0) direction = d;
        }
        prev = a;
    }
    return issues;
}

double r1_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, double l) {
    return cdf.expect_below([](double) { return 1.0; }, l / spec.r, 1);
}

double r2_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, double l) {
    const double r = spec.r;
    return cdf.expect_below([l, r](double y) { return l - r * y; }, l / r, 1);
}

double r3_closed(const PiecewiseCdf& cdf, const RiskSpec& spec, const GeneralizedLoss& gl, double l) {
    if (!gl.g) throw DomainError("generalized loss has no g");
    const double a = gl.threshold(l, spec.r);
    if (!std::isfinite(a)) throw DomainError("threshold a(l) must be finite");
    if (gl.degree == 0) return cdf.expect_below([&gl, l](double y) { return gl.g(l, y); }, a, 1);
    return cdf.expect_below([&gl, l](double y) { return gl.g(l, y); }, a, gl.quadrature_nodes());
}

Estimate mc_estimate(std::span<const double> samples, const RiskSpec& spec, double l, Measure which,
                     const GeneralizedLoss* gl) {
    const std::size_t K = samples.size();
    if (K == 0) throw DomainError("Monte Carlo estimate needs K >= 1");
    if (which == Measure::r3 && (!gl || !gl->g)) throw DomainError("r3 needs a generalized loss");
    const double r = spec.r;
    const double a = (which == Measure::r3) ? gl->threshold(l, r) : 0.0;
    // Welford accumulation.
    double mean = 0.0, m2 = 0.0;
    std::size_t k = 0;
    for (double y : samples) {
        double v;
        switch (which) {
            case Measure::r1: v = (l - r * y > 0.0) ? 1.0 : 0.0; break;
            case Measure::r2: v = loss(l, y, r); break;
            default: v = (y < a) ? gl->g(l, y) : 0.0; break;
        }
        ++k;
        const double delta = v - mean;
        mean += delta / static_cast<double>(k);
        m2 += delta * (v - mean);
    }
    Estimate e;
    e.value = mean;
    e.se = K > 1 ? std::sqrt(m2 / static_cast<double>(K - 1)) / std::sqrt(static_cast<double>(K)) : 0.0;
    return e;
}

LgdValue lgd(double l, double r1, double r2) {
    if (r1 <= 0.0 || l <= 0.0) return {0.0, true};
    return {r2 / (l * r1), false};
}

ThresholdMeasures threshold_measures(const PiecewiseCdf& cdf, const RiskSpec& spec, double l, double xi) {
    if (!(xi > 0.0 && xi < l)) throw DomainError("threshold xi must lie in (0, l)");
    const double p = r1_closed(cdf, spec, l - xi);
    return {p, r2_closed(cdf, spec, l - xi) + xi * p};
}

std::vector<double> equally_spaced_grid(double l_min, double l_bar, int points) {
    if (points < 1) throw DomainError("loan grid needs at least one point");
    if (!(l_bar >= l_min)) throw DomainError("l_bar must be >= l_min");
    if (points == 1) return {l_bar};
    std::vector<double> grid(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = l_min + (l_bar - l_min) * i / (points - 1);
    grid.back() = l_bar;
    return grid;
}

double default_l_bar(const PiecewiseCdf& cdf, double r) { return r * cdf.quantile(0.99); }

RiskSpec make_risk_spec(const PiecewiseCdf& cdf, double r, std::optional<double> l_bar, double l_min, int points,
                        std::optional<double> xi) {
    RiskSpec spec;
    spec.r = r;
    spec.l_bar = l_bar ? *l_bar : default_l_bar(cdf, r);
    if (!(spec.l_bar > 0.0)) throw DomainError("derived l_bar is not positive; supply one explicitly");
    spec.loan_grid = equally_spaced_grid(l_min, spec.l_bar, points);
    spec.xi = xi;
    spec.validate();
    return spec;
}

RiskCurve risk_curve(const PiecewiseCdf& cdf, const RiskSpec& spec, const EstimatorConfig& est,
                     const GeneralizedLoss* gl) {
    spec.validate();
    if (spec.loan_grid.empty()) throw DomainError("loan grid must be nonempty");
    RiskCurve curve;
    curve.r = spec.r;
    curve.l_bar = spec.l_bar;
    curve.xi = spec.xi;
    curve.loss_name = gl ? gl->name : "";
    const bool mc = est.kind == EstimatorConfig::Kind::monte_carlo;
    curve.estimator = mc ? "monte-carlo" : "closed-form";
    Vector draws;
    if (mc) {
        if (est.K < 1) throw DomainError("Monte Carlo estimator needs K >= 1");
        curve.K = est.K;
        curve.seed = est.seed;
        draws = cdf.sample(est.K, est.seed);
    }
    const std::span<const double> ds(draws.data(), static_cast<std::size_t>(draws.size()));
    for (double l : spec.loan_grid) {
        RiskPoint pt;
        pt.l = l;
        if (mc) {
            const auto e1 = mc_estimate(ds, spec, l, Measure::r1);
            const auto e2 = mc_estimate(ds, spec, l, Measure::r2);
            pt.r1 = e1.value;
            pt.se_r1 = e1.se;
            pt.r2 = e2.value;
            pt.se_r2 = e2.se;
            if (gl) {
                const auto e3 = mc_estimate(ds, spec, l, Measure::r3, gl);
                pt.r3 = e3.value;
                pt.se_r3 = e3.se;
            }
        } else {
            pt.r1 = r1_closed(cdf, spec, l);
            pt.r2 = r2_closed(cdf, spec, l);
            if (gl) pt.r3 = r3_closed(cdf, spec, *gl, l);
        }
        const auto g = lgd(l, pt.r1, pt.r2);
        pt.lgd = g.value;
        pt.no_default = g.no_default;
        if (spec.xi && *spec.xi < l) {
            const double xi = *spec.xi;
            if (mc) {
                const auto p = mc_estimate(ds, spec, l - xi, Measure::r1);
                const auto e = mc_estimate(ds, spec, l - xi, Measure::r2);
                pt.exceed_prob = p.value;
                pt.expected_excess = e.value + xi * p.value;
            } else {
                const auto tm = threshold_measures(cdf, spec, l, xi);
                pt.exceed_prob = tm.exceed_prob;
                pt.expected_excess = tm.expected_excess;
            }
        }
        curve.points.push_back(pt);
    }
    return curve;
}

namespace {

std::string num(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

std::string risk_curve_csv(const RiskCurve& curve) {
    std::ostringstream out;
    out << "l,r1,r2,lgd,r3,estimator,se_r1,se_r2,se_r3";
    if (curve.xi) out << ",exceed_prob,expected_excess";
    out << "\n";
    for (const auto& p : curve.points) {
        out << num(p.l) << ',' << num(p.r1) << ',' << num(p.r2) << ',' << num(p.lgd) << ','
            << (p.r3 ? num(*p.r3) : "") << ',' << curve.estimator << ',' << num(p.se_r1) << ',' << num(p.se_r2)
            << ',' << num(p.se_r3);
        if (curve.xi) {
            out << ',' << (p.exceed_prob ? num(*p.exceed_prob) : "") << ','
                << (p.expected_excess ? num(*p.expected_excess) : "");
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace qrgmm
