#include "qrgmm/generator.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>

namespace qrgmm {

namespace {

// Rows n = 1..8, padded.
constexpr std::array<std::array<double, 8>, 8> kNodes = {{
    {0.0},
    {-0.5773502691896257645, 0.5773502691896257645},
    {-0.7745966692414833770, 0.0, 0.7745966692414833770},
    {-0.8611363115940525752, -0.3399810435848562648, 0.3399810435848562648, 0.8611363115940525752},
    {-0.9061798459386639928, -0.5384693101056830910, 0.0, 0.5384693101056830910, 0.9061798459386639928},
    {-0.9324695142031520279, -0.6612093864662645137, -0.2386191860831969086, 0.2386191860831969086,
     0.6612093864662645137, 0.9324695142031520279},
    {-0.9491079123427585245, -0.7415311855993944399, -0.4058451513773971669, 0.0, 0.4058451513773971669,
     0.7415311855993944399, 0.9491079123427585245},
    {-0.9602898564975362317, -0.7966664774136267396, -0.5255324099163289858, -0.1834346424956498049,
     0.1834346424956498049, 0.5255324099163289858, 0.7966664774136267396, 0.9602898564975362317},
}};

constexpr std::array<std::array<double, 8>, 8> kWeights = {{
    {2.0},
    {1.0, 1.0},
    {0.5555555555555555556, 0.8888888888888888889, 0.5555555555555555556},
    {0.3478548451374538574, 0.6521451548625461426, 0.6521451548625461426, 0.3478548451374538574},
    {0.2369268850561890875, 0.4786286704993664680, 0.5688888888888888889, 0.4786286704993664680,
     0.2369268850561890875},
    {0.1713244923791703450, 0.3607615730481386076, 0.4679139345726910474, 0.4679139345726910474,
     0.3607615730481386076, 0.1713244923791703450},
    {0.1294849661688696933, 0.2797053914892766679, 0.3818300505051189449, 0.4179591836734693878,
     0.3818300505051189449, 0.2797053914892766679, 0.1294849661688696933},
    {0.1012285362903762591, 0.2223810344533744706, 0.3137066458778872873, 0.3626837833783619830,
     0.3626837833783619830, 0.3137066458778872873, 0.2223810344533744706, 0.1012285362903762591},
}};

}  // namespace

std::span<const double> gauss_nodes(int n) {
    n = std::clamp(n, 1, 8);
    return {kNodes[static_cast<std::size_t>(n - 1)].data(), static_cast<std::size_t>(n)};
}

std::span<const double> gauss_weights(int n) {
    n = std::clamp(n, 1, 8);
    return {kWeights[static_cast<std::size_t>(n - 1)].data(), static_cast<std::size_t>(n)};
}

PiecewiseCdf::PiecewiseCdf(Vector knots, int m) : q_(std::move(knots)), m_(m), inv_m_(1.0 / m) {
    if (m < 3) throw DomainError("PiecewiseCdf needs m >= 3");
    if (q_.size() != m - 1) throw DomainError("PiecewiseCdf needs m - 1 knots");
    if (!q_.allFinite()) throw DomainError("PiecewiseCdf knots must be finite");
    for (Eigen::Index j = 1; j < q_.size(); ++j) {
        if (q_[j] < q_[j - 1]) throw DomainError("PiecewiseCdf knots must be nondecreasing");
    }
}

PiecewiseCdf PiecewiseCdf::from_raw(Vector raw, int m) {
    std::sort(raw.data(), raw.data() + raw.size());
    return PiecewiseCdf(std::move(raw), m);
}

PiecewiseCdf PiecewiseCdf::point_mass(double value, int m) { return PiecewiseCdf(Vector::Constant(m - 1, value), m); }

double PiecewiseCdf::cdf(double y) const {
    const Eigen::Index last = q_.size() - 1;
    if (y < q_[0]) return 0.0;
    if (y >= q_[last]) return 1.0;
    // Q_j <= y < Q_{j+1}, so the segment has positive width.
    const auto it = std::upper_bound(q_.data(), q_.data() + q_.size(), y);
    const auto j = static_cast<Eigen::Index>(it - q_.data()) - 1;
    return (static_cast<double>(j + 1) + (y - q_[j]) / (q_[j + 1] - q_[j])) * inv_m_;
}

double PiecewiseCdf::cdf_left(double y) const {
    const Eigen::Index last = q_.size() - 1;
    if (y <= q_[0]) return 0.0;
    if (y > q_[last]) return 1.0;
    // Q_j < y <= Q_{j+1}.
    const auto it = std::lower_bound(q_.data(), q_.data() + q_.size(), y);
    const auto j = static_cast<Eigen::Index>(it - q_.data()) - 1;
    return (static_cast<double>(j + 1) + (y - q_[j]) / (q_[j + 1] - q_[j])) * inv_m_;
}

double PiecewiseCdf::quantile(double u) const {
    if (!(u > 0.0 && u < 1.0)) throw DomainError("quantile level must lie in (0, 1)");
    return quantile_unchecked(u);
}

double PiecewiseCdf::mean() const {
    return expect_below([](double y) { return y; }, std::numeric_limits<double>::infinity(), 1);
}

double PiecewiseCdf::variance() const {
    const double mu = mean();
    return expect_below([mu](double y) { return (y - mu) * (y - mu); }, std::numeric_limits<double>::infinity(), 2);
}

Vector PiecewiseCdf::sample(long K, std::uint64_t seed) const {
    if (K < 1) throw DomainError("sample count must be >= 1");
    Vector out(K);
    Rng rng = make_rng(seed, 0);
    sample_into(rng, {out.data(), static_cast<std::size_t>(K)});
    return out;
}

std::string covariate_key(const Vector& x) {
    return std::string(reinterpret_cast<const char*>(x.data()), static_cast<std::size_t>(x.size()) * sizeof(double));
}

std::uint64_t covariate_hash(const Vector& x) {
    return fnv1a(x.data(), static_cast<std::size_t>(x.size()) * sizeof(double));
}

ConditionalSampler::ConditionalSampler(std::shared_ptr<const QuantileModel> model) : model_(std::move(model)) {
    if (!model_) throw DomainError("ConditionalSampler needs a model");
}

std::shared_ptr<const PiecewiseCdf> ConditionalSampler::at(const Vector& x) const {
    if (x.size() != model_->schema().width()) throw SchemaError("covariate row width does not match model schema");
    const std::string key = covariate_key(x);
    {
        std::lock_guard lock(mutex_);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    auto cdf = std::make_shared<const PiecewiseCdf>(PiecewiseCdf::from_raw(model_->raw_quantiles(x), model_->m()));
    std::lock_guard lock(mutex_);
    return cache_.emplace(key, std::move(cdf)).first->second;
}

Vector ConditionalSampler::sample(const Vector& x, long K, std::uint64_t seed) const {
    return at(x)->sample(K, seed);
}

std::size_t ConditionalSampler::cache_size() const {
    std::lock_guard lock(mutex_);
    return cache_.size();
}

void write_samples_csv(std::ostream& out, const Vector& samples, const std::map<std::string, std::string>& meta) {
    for (const auto& [k, v] : meta) out << "# " << k << "=" << v << "\n";
    out << "y\n";
    char buf[32];
    for (Eigen::Index i = 0; i < samples.size(); ++i) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, samples[i]);
        out.write(buf, ptr - buf);
        out << "\n";
    }
}

}  // namespace qrgmm
