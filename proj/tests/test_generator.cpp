#include "doctest.h"
#include "oracles.hpp"
#include "qrgmm/datagen.hpp"
#include "qrgmm/generator.hpp"
#include "qrgmm/quantreg.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

using namespace qrgmm;

namespace {

PiecewiseCdf toy(int m, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    Vector q(m - 1);
    double v = 100.0;
    for (int j = 0; j < m - 1; ++j) q[j] = (v += 1.0 + 20.0 * uniform01(rng));
    return PiecewiseCdf(q, m);
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

// Fixed raw outputs, for exercising the sampler without a fitted model.
class FixedModel : public QuantileModel {
public:
    FixedModel(FieldSchema s, Vector raw) : schema_(std::move(s)), raw_(std::move(raw)) {}
    std::string kind() const override { return "fixed"; }
    const FieldSchema& schema() const override { return schema_; }
    int m() const override { return static_cast<int>(raw_.size()) + 1; }
    Vector raw_quantiles(const Vector& x) const override { return raw_ + Vector::Constant(raw_.size(), x.sum()); }

private:
    FieldSchema schema_;
    Vector raw_;
};

}  // namespace

TEST_CASE("interpolation endpoints and midpoints") {
    const PiecewiseCdf F = toy(10, 1);
    const Vector& q = F.knots();
    for (int j = 1; j <= 9; ++j) CHECK(F.quantile(j / 10.0) == doctest::Approx(q[j - 1]).epsilon(1e-14));
    for (int j = 1; j <= 8; ++j) CHECK(F.quantile((j + 0.5) / 10.0) == doctest::Approx(0.5 * (q[j - 1] + q[j])));
    CHECK(F.quantile(0.05) == q[0]);
    CHECK(F.quantile(0.95) == q[8]);
    CHECK_THROWS_AS(F.quantile(0.0), DomainError);
    CHECK_THROWS_AS(F.quantile(1.0), DomainError);
}

TEST_CASE("cdf atoms and clamps") {
    const PiecewiseCdf F = toy(10, 2);
    const Vector& q = F.knots();
    CHECK(F.cdf(q[0]) == doctest::Approx(0.1));
    CHECK(F.cdf_left(q[0]) == 0.0);
    CHECK(F.cdf(q[0] - 1e-9) == 0.0);
    CHECK(F.cdf(q[8]) == 1.0);
    CHECK(F.cdf_left(q[8]) == doctest::Approx(0.9));
    // Linear between knots with slope (1/m) / gap.
    const double y = 0.3 * q[3] + 0.7 * q[4];
    CHECK(F.cdf(y) == doctest::Approx(0.4 + 0.07));
}

TEST_CASE("flat segments become atoms") {
    Vector q(5);
    q << 1, 2, 2, 2, 5;
    const PiecewiseCdf F(q, 6);
    CHECK(F.cdf_left(2.0) == doctest::Approx(2.0 / 6));
    CHECK(F.cdf(2.0) == doctest::Approx(4.0 / 6));
    CHECK(F.quantile(2.5 / 6) == 2.0);
    CHECK(F.cdf(3.5) == doctest::Approx(4.5 / 6));
    CHECK(F.mean() == doctest::Approx((1 + 1.5 + 2 + 2 + 3.5 + 5) / 6.0));
}

TEST_CASE("rearrangement sorts crossing outputs") {
    Vector raw(3);
    raw << 3, 1, 2;
    const auto F = PiecewiseCdf::from_raw(raw, 4);
    CHECK(F.knots() == Vector::LinSpaced(3, 1, 3));
    CHECK_THROWS_AS(PiecewiseCdf(raw, 4), DomainError);
}

TEST_CASE("draws match the closed-form cdf") {
    const PiecewiseCdf F = toy(50, 3);
    const Vector draws = F.sample(1000000, 17);
    const double ks = oracle::ks_one_sample(to_std(draws), [&](double y) { return F.cdf(y); },
                                            [&](double y) { return F.cdf_left(y); });
    CHECK(ks <= 0.002);

    Rng rng = make_rng(5);
    const double K = static_cast<double>(draws.size());
    for (int t = 0; t < 20; ++t) {
        const double y = F.lower() + (F.upper() - F.lower()) * uniform01(rng);
        const double p = F.cdf(y);
        const double emp = (draws.array() <= y).cast<double>().mean();
        CHECK(std::abs(emp - p) <= 3 * std::sqrt(p * (1 - p) / K) + 1e-12);
    }
    CHECK(draws.minCoeff() >= F.lower());
    CHECK(draws.maxCoeff() <= F.upper());
}

TEST_CASE("sample equals quantile_fn composed with uniforms") {
    const PiecewiseCdf F = toy(20, 4);
    const Vector a = F.sample(100000, 1);
    Rng rng = make_rng(2);
    std::vector<double> b(100000);
    for (double& v : b) {
        double u;
        do u = uniform01(rng);
        while (u == 0.0);
        v = F.quantile(u);
    }
    CHECK(oracle::ks_brute(std::vector<double>(a.data(), a.data() + 2000), std::vector<double>(b.begin(), b.begin() + 2000)) <= 0.06);
    std::vector<double> as = to_std(a);
    std::sort(as.begin(), as.end());
    std::sort(b.begin(), b.end());
    // Merge-based two-sample KS on the full batches.
    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < as.size() && j < b.size()) {
        const double t = std::min(as[i], b[j]);
        while (i < as.size() && as[i] == t) ++i;
        while (j < b.size() && b[j] == t) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) - static_cast<double>(j)) / 100000.0);
    }
    CHECK(d <= 0.01);

    // Same seed, same stream.
    CHECK(F.sample(1000, 9) == F.sample(1000, 9));
}

TEST_CASE("galois inequality and monotonicity") {
    Vector q(7);
    q << 0, 1, 1, 4, 4, 4, 9;
    const PiecewiseCdf F(q, 8);
    double prev = -1e300;
    for (int k = 1; k < 1000; ++k) {
        const double u = k / 1000.0;
        const double y = F.quantile(u);
        CHECK(y >= prev);
        prev = y;
        CHECK(F.cdf(y) >= u - 1e-12);
        const bool on_atom = F.cdf(y) - F.cdf_left(y) > 1e-12;
        if (!on_atom) CHECK(F.cdf(y) == doctest::Approx(u).epsilon(1e-12));
    }
}

TEST_CASE("expect_below against enumeration") {
    Vector q(5);
    q << 0, 0, 1, 1, 3;
    const PiecewiseCdf F(q, 6);
    // Atoms 2/6 at 0, 1/6 at 1, 1/6 at 3; uniform 1/6 on [0,1] and on [1,3].
    auto E = [&](auto g, double a, int nodes) { return F.expect_below(g, a, nodes); };
    CHECK(E([](double) { return 1.0; }, 10, 1) == doctest::Approx(1.0));
    CHECK(E([](double y) { return y; }, 10, 1) == doctest::Approx((0 + 0.5 + 1 + 2 + 3) / 6.0));
    CHECK(E([](double y) { return y * y; }, 10, 2) == doctest::Approx((1.0 / 3 + 1 + 13.0 / 3 + 9) / 6.0));
    // Strict inequality drops the atom at 1.
    CHECK(E([](double) { return 1.0; }, 1.0, 1) == doctest::Approx(3.0 / 6));
    CHECK(E([](double) { return 1.0; }, 2.0, 1) == doctest::Approx(4.5 / 6));
    CHECK(F.variance() == doctest::Approx(E([](double y) { return y * y; }, 10, 2) - F.mean() * F.mean()));
}

TEST_CASE("conditional sampler caches and rearranges") {
    const FieldSchema s({categorical_field("g", 2), continuous_field("c")});
    Vector raw(4);
    raw << 5, 1, 3, 2;
    auto model = std::make_shared<FixedModel>(s, raw);
    const ConditionalSampler sampler(model);
    Vector x(3);
    x << 1, 0, 0.5;
    const auto F = sampler.at(x);
    CHECK(F->knots()[0] == 2.5);
    CHECK(F->knots()[3] == 6.5);
    CHECK(sampler.at(x).get() == F.get());
    CHECK(sampler.cache_size() == 1);
    CHECK(sampler.cdf_eval(x, 2.5) == doctest::Approx(0.2));
    CHECK(sampler.quantile_fn(x, 0.9) == 6.5);
    CHECK(sampler.sample(x, 10, 3) == F->sample(10, 3));
    CHECK_THROWS_AS(sampler.at(Vector::Zero(2)), SchemaError);
}

TEST_CASE("sampler over a fitted linear model") {
    const FieldSchema s({categorical_field("g", 3), continuous_field("c")});
    SynthConfig cfg;
    cfg.linear_only = true;
    const auto prm = draw_params(s, cfg, 7);
    const Dataset d = synth_generate(prm, s, 3000, 8, cfg);
    auto model = std::make_shared<LinearQuantileModel>(fit_grid(d, QuantileGrid(20)));
    const ConditionalSampler sampler(model);
    const Vector x = s.encode({{"g", "1"}, {"c", "0.4"}});
    const auto F = sampler.at(x);
    CHECK(F->knots() == model->quantiles(x));
    CHECK(std::abs(F->quantile(0.5) - true_conditional_quantile(prm, x, 0.5)) <= 0.2 * scale(prm, x));
}

TEST_CASE("samples csv carries metadata") {
    std::ostringstream out;
    Vector v(2);
    v << 1.5, 2;
    write_samples_csv(out, v, {{"seed", "4"}, {"K", "2"}});
    CHECK(out.str() == "# K=2\n# seed=4\ny\n1.5\n2\n");
}

TEST_CASE("throughput smoke") {
    const PiecewiseCdf F = toy(400, 5);
    const auto t0 = std::chrono::steady_clock::now();
    const Vector draws = F.sample(2000000, 1);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(draws.size() == 2000000);
    MESSAGE("draws/sec: " << 2e6 / sec);
    CHECK(2e6 / sec >= 1e6);
}
