#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/schema.hpp"

#include <string>
#include <vector>

namespace qrgmm {

enum class NoiseKind { lognormal };

// Ground truth of the FM location-scale model:
//   Y(x) = location(x) + scale(x) * u,   log u ~ N(0, 1)
// where location and scale are each a second-order factorization machine
// over the one-hot covariate row.
struct FmLocationScaleParams {
    double w0 = 0.0;
    Vector w;     // p
    Matrix V;     // p x k
    double r0 = 1.0;
    Vector rvec;  // p
    Matrix Z;     // p x k
    NoiseKind noise = NoiseKind::lognormal;

    int dim() const { return static_cast<int>(w.size()); }
};

// Degree-2 factorization machine, O(nnz * k) via the sum-of-squares identity.
double fm_value(double bias, const Vector& linear, const Matrix& latent, const Vector& x);

double location(const FmLocationScaleParams& params, const Vector& x);
double scale(const FmLocationScaleParams& params, const Vector& x);

// Noise quantile exp(Phi^-1(tau)) and its first two moments.
double noise_quantile(NoiseKind noise, double tau);
double noise_mean(NoiseKind noise);
double noise_sd(NoiseKind noise);
double draw_noise(NoiseKind noise, Rng& rng);

// location(x) + scale(x) * exp(Phi^-1(tau)); throws DomainError off (0, 1).
double true_conditional_quantile(const FmLocationScaleParams& params, const Vector& x, double tau);

// Knobs for drawing ground-truth parameters and covariates. None of these
// values come from published experiments; they are tuned so that draws look
// like unit sales in the thousands with a conditional spread around 150.
struct SynthConfig {
    int latent_dim = 8;
    double entry_sd = -1.0;           // <= 0 means 0.1 / sqrt(latent_dim)
    double w0 = 4000.0;
    double location_gain = 20000.0;   // multiplies linear weights; sqrt-gain on latent
    double r0 = 70.0;
    double scale_gain = 80.0;
    double continuous_low = 0.0;
    double continuous_high = 1.0;
    bool linear_only = false;         // V = Z = 0, so quantiles are linear in x
    int max_attempts = 100;
};

// Rejection-samples parameter sets until a conservative lower bound on
// scale(x) over the whole covariate domain is positive.
FmLocationScaleParams draw_params(const FieldSchema& schema, const SynthConfig& cfg, std::uint64_t seed);

// Lower bound of scale(x) over all one-hot rows with continuous features
// inside [low, high].
double scale_lower_bound(const FieldSchema& schema, const FmLocationScaleParams& params, double low, double high);

Dataset synth_generate(const FmLocationScaleParams& params, const FieldSchema& schema, long n,
                       std::uint64_t seed, const SynthConfig& cfg = {});

// Covariate rows only (uniform categories, uniform continuous).
Dataset draw_covariates(const FieldSchema& schema, long n, std::uint64_t seed, const SynthConfig& cfg = {});

// K draws of Y(x) from the ground truth.
Vector sample_truth(const FmLocationScaleParams& params, const Vector& x, long K, std::uint64_t seed);

// The layout used in the synthetic experiments: 100-level product, 300-level
// seller, 10 continuous features (p = 410).
FieldSchema synthetic_layout(int n_products = 100, int n_sellers = 300, int n_continuous = 10);

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct IngestOptions {
    // Strict mode throws on the first bad row; otherwise bad rows are
    // dropped and reported in IngestResult::diagnostics.
    bool strict = true;
    bool allow_negative_response = false;
};

struct IngestResult {
    Dataset data;
    std::vector<std::string> diagnostics;
    long rejected_rows = 0;
};

std::vector<std::vector<std::string>> read_csv(const std::string& path, char delimiter);
std::vector<std::vector<std::string>> parse_csv(const std::string& text, char delimiter);

// Categorical fields with levels declared map against that dictionary (an
// unknown label is an UnseenLevelError); fields without levels build their
// dictionary from the file in first-appearance order.
IngestResult csv_ingest(const std::string& path, const SchemaConfig& cfg, const IngestOptions& opts = {});
IngestResult csv_ingest_text(const std::string& text, const SchemaConfig& cfg, const IngestOptions& opts = {});

void csv_export(const Dataset& data, const std::string& path, const std::string& response_column = "y",
                char delimiter = ',');
std::string csv_format(const Dataset& data, const std::string& response_column = "y", char delimiter = ',');

}  // namespace qrgmm
