#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace qrgmm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline constexpr const char* kVersion = "1.0.0";

// Error hierarchy. Each maps to one CLI exit code / HTTP status in svc.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    DataError(const std::string& what, long row = -1, std::string column = {})
        : Error(what), row_(row), column_(std::move(column)) {}
    long row() const { return row_; }
    const std::string& column() const { return column_; }

private:
    long row_;
    std::string column_;
};

class UnseenLevelError : public Error {
public:
    UnseenLevelError(const std::string& field, const std::string& level)
        : Error("unseen level '" + level + "' for categorical field '" + field + "'"),
          field_(field), level_(level) {}
    const std::string& field() const { return field_; }
    const std::string& level() const { return level_; }

private:
    std::string field_;
    std::string level_;
};

class FitError : public Error {
public:
    using Error::Error;
};

class UnsupportedError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Randomness. All generators are mt19937_64; independent streams are seeded
// with splitmix64(base ^ golden * (stream + 1)) so stream k never depends on
// how many draws another stream consumed.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;
inline constexpr const char* kRngName = "mt19937_64/splitmix64-streams";

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return splitmix64(base ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    return Rng(derive_seed(seed, stream));
}

// 53-bit uniform on [0, 1).
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double normal_cdf(double x);

// Inverse of the standard normal CDF, accurate to a few ulps on (0, 1).
double normal_quantile(double p);

// FNV-1a over raw bytes; used for content ids and covariate hashes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace qrgmm
