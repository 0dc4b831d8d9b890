#include "qrgmm/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace qrgmm {

double fm_value(double bias, const Vector& linear, const Matrix& latent, const Vector& x) {
    const int k = static_cast<int>(latent.cols());
    double value = bias;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(k);
    double sum_sq = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        value += linear[i] * xi;
        if (k == 0) continue;
        const auto v = latent.row(i);
        sum.noalias() += xi * v.transpose();
        sum_sq += xi * xi * v.squaredNorm();
    }
    return value + 0.5 * (sum.squaredNorm() - sum_sq);
}

double location(const FmLocationScaleParams& params, const Vector& x) {
    return fm_value(params.w0, params.w, params.V, x);
}

double scale(const FmLocationScaleParams& params, const Vector& x) {
    return fm_value(params.r0, params.rvec, params.Z, x);
}

double noise_quantile(NoiseKind, double tau) { return std::exp(normal_quantile(tau)); }
double noise_mean(NoiseKind) { return std::exp(0.5); }
double noise_sd(NoiseKind) { return std::sqrt((std::exp(1.0) - 1.0) * std::exp(1.0)); }

double draw_noise(NoiseKind, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    return std::exp(normal(rng));
}

double true_conditional_quantile(const FmLocationScaleParams& params, const Vector& x, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0, 1)");
    const double s = scale(params, x);
    if (!(s > 0.0)) throw ParameterError("scale(x) must be positive");
    return location(params, x) + s * noise_quantile(params.noise, tau);
}

FieldSchema synthetic_layout(int n_products, int n_sellers, int n_continuous) {
    std::vector<Field> fields;
    if (n_products > 0) fields.push_back(categorical_field("product", n_products));
    if (n_sellers > 0) fields.push_back(categorical_field("seller", n_sellers));
    for (int i = 0; i < n_continuous; ++i) fields.push_back(continuous_field("c" + std::to_string(i + 1)));
    return FieldSchema(std::move(fields));
}

double scale_lower_bound(const FieldSchema& schema, const FmLocationScaleParams& params, double low, double high) {
    const auto& Z = params.Z;
    const auto& r = params.rvec;
    double bound = params.r0;
    const std::size_t F = schema.size();

    // Columns a field can activate.
    auto cols = [&](std::size_t f) {
        std::vector<int> c;
        for (int j = 0; j < schema.field(f).cardinality(); ++j) c.push_back(schema.offset(f) + j);
        return c;
    };
    // Range of x_i for a given column in field f (one-hot: exactly 1).
    auto range = [&](std::size_t f) -> std::pair<double, double> {
        return schema.field(f).is_categorical() ? std::pair{1.0, 1.0} : std::pair{low, high};
    };

    for (std::size_t f = 0; f < F; ++f) {
        const auto [lo, hi] = range(f);
        double best = std::numeric_limits<double>::infinity();
        for (int c : cols(f)) best = std::min({best, r[c] * lo, r[c] * hi});
        bound += best;
    }
    if (Z.cols() == 0) return bound;
    for (std::size_t f = 0; f < F; ++f) {
        const auto [flo, fhi] = range(f);
        for (std::size_t g = f + 1; g < F; ++g) {
            const auto [glo, ghi] = range(g);
            const double prods[] = {flo * glo, flo * ghi, fhi * glo, fhi * ghi};
            double best = std::numeric_limits<double>::infinity();
            for (int a : cols(f)) {
                for (int b : cols(g)) {
                    const double q = Z.row(a).dot(Z.row(b));
                    for (double p : prods) best = std::min(best, q * p);
                }
            }
            bound += best;
        }
    }
    return bound;
}

FmLocationScaleParams draw_params(const FieldSchema& schema, const SynthConfig& cfg, std::uint64_t seed) {
    if (cfg.latent_dim < 1) throw ParameterError("latent_dim must be >= 1");
    const int p = schema.width();
    const int k = cfg.latent_dim;
    const double sd = cfg.entry_sd > 0 ? cfg.entry_sd : 0.1 / std::sqrt(static_cast<double>(k));
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        Rng rng = make_rng(seed, 1000 + static_cast<std::uint64_t>(attempt));
        std::normal_distribution<double> normal(0.0, sd);
        auto draw = [&](Eigen::Index rows, Eigen::Index cols, double gain) {
            Matrix m(rows, cols);
            for (Eigen::Index j = 0; j < cols; ++j)
                for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = gain * normal(rng);
            return m;
        };
        FmLocationScaleParams params;
        params.w0 = cfg.w0;
        params.r0 = cfg.r0;
        params.w = draw(p, 1, cfg.location_gain).col(0);
        params.rvec = draw(p, 1, cfg.scale_gain).col(0);
        if (cfg.linear_only) {
            params.V = Matrix::Zero(p, k);
            params.Z = Matrix::Zero(p, k);
        } else {
            params.V = draw(p, k, std::sqrt(cfg.location_gain));
            params.Z = draw(p, k, std::sqrt(cfg.scale_gain));
        }
        if (scale_lower_bound(schema, params, cfg.continuous_low, cfg.continuous_high) > 0.0) return params;
    }
    throw ParameterError("could not draw parameters with positive scale in " + std::to_string(cfg.max_attempts) +
                         " attempts");
}

Dataset draw_covariates(const FieldSchema& schema, long n, std::uint64_t seed, const SynthConfig& cfg) {
    if (n < 1) throw DomainError("n must be >= 1");
    Rng rng = make_rng(seed, 1);
    Eigen::MatrixXi levels(n, schema.categorical_count());
    Matrix cont(n, schema.continuous_count());
    std::uniform_real_distribution<double> unif(cfg.continuous_low, cfg.continuous_high);
    for (long i = 0; i < n; ++i) {
        int c = 0, k = 0;
        for (const auto& f : schema.fields()) {
            if (f.is_categorical()) {
                std::uniform_int_distribution<int> pick(0, f.cardinality() - 1);
                levels(i, c++) = pick(rng);
            } else {
                cont(i, k++) = unif(rng);
            }
        }
    }
    return Dataset(schema, std::move(levels), std::move(cont), Vector::Zero(n));
}

Dataset synth_generate(const FmLocationScaleParams& params, const FieldSchema& schema, long n, std::uint64_t seed,
                       const SynthConfig& cfg) {
    if (params.dim() != schema.width() || params.rvec.size() != schema.width() || params.V.rows() != schema.width() ||
        params.Z.rows() != schema.width()) {
        throw ParameterError("parameter dimension does not match schema width " + std::to_string(schema.width()));
    }
    Dataset cov = draw_covariates(schema, n, seed, cfg);
    Rng noise_rng = make_rng(seed, 2);
    Vector y(n);
    for (long i = 0; i < n; ++i) {
        const Vector x = cov.row(i);
        const double s = scale(params, x);
        if (!(s > 0.0)) {
            throw ParameterError("scale(x) = " + std::to_string(s) + " is not positive at generated row " +
                                 std::to_string(i));
        }
        y[i] = location(params, x) + s * draw_noise(params.noise, noise_rng);
    }
    return Dataset(schema, cov.levels(), cov.continuous(), std::move(y));
}

Vector sample_truth(const FmLocationScaleParams& params, const Vector& x, long K, std::uint64_t seed) {
    const double loc = location(params, x);
    const double s = scale(params, x);
    if (!(s > 0.0)) throw ParameterError("scale(x) must be positive");
    Rng rng = make_rng(seed, 3);
    Vector out(K);
    for (long k = 0; k < K; ++k) out[k] = loc + s * draw_noise(params.noise, rng);
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(const std::string& text, char delimiter) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string cell;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cell.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell.push_back(ch);
            }
            continue;
        }
        if (ch == '"') {
            quoted = true;
            any = true;
        } else if (ch == delimiter) {
            row.push_back(std::move(cell));
            cell.clear();
            any = true;
        } else if (ch == '\n' || ch == '\r') {
            if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !cell.empty()) {
                row.push_back(std::move(cell));
                rows.push_back(std::move(row));
            }
            row.clear();
            cell.clear();
            any = false;
        } else {
            cell.push_back(ch);
            any = true;
        }
    }
    if (quoted) throw DataError("unterminated quoted field", static_cast<long>(rows.size()));
    if (any || !cell.empty()) {
        row.push_back(std::move(cell));
        rows.push_back(std::move(row));
    }
    // Strip a UTF-8 byte order mark from the first header cell.
    if (!rows.empty() && !rows[0].empty() && rows[0][0].rfind("\xEF\xBB\xBF", 0) == 0) rows[0][0].erase(0, 3);
    return rows;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path, char delimiter) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str(), delimiter);
}

namespace {

bool parse_real(const std::string& raw, double& out) {
    std::string_view t(raw);
    while (!t.empty() && (t.front() == ' ' || t.front() == '\t')) t.remove_prefix(1);
    while (!t.empty() && (t.back() == ' ' || t.back() == '\t')) t.remove_suffix(1);
    if (t.empty()) return false;
    if (t.front() == '+') t.remove_prefix(1);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    return ec == std::errc() && ptr == t.data() + t.size() && std::isfinite(out);
}

}  // namespace

IngestResult csv_ingest_text(const std::string& text, const SchemaConfig& cfg, const IngestOptions& opts) {
    const auto table = parse_csv(text, cfg.delimiter);
    if (table.empty()) throw DataError("CSV input has no header row");
    const auto& header = table[0];
    auto column = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw SchemaError("column '" + name + "' not found in CSV header");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t resp_col = column(cfg.response_column);
    std::vector<std::size_t> field_cols;
    for (const auto& f : cfg.fields) field_cols.push_back(column(f.name));

    std::vector<Field> fields = cfg.fields;
    std::vector<std::map<std::string, int>> dict(fields.size());
    std::vector<bool> growing(fields.size(), false);
    for (std::size_t f = 0; f < fields.size(); ++f) {
        if (!fields[f].is_categorical()) continue;
        growing[f] = fields[f].levels.empty();
        for (std::size_t j = 0; j < fields[f].levels.size(); ++j) dict[f][fields[f].levels[j]] = static_cast<int>(j);
    }

    std::vector<std::vector<int>> lv_rows;
    std::vector<std::vector<double>> ct_rows;
    std::vector<double> ys;
    IngestResult result;
    for (std::size_t r = 1; r < table.size(); ++r) {
        const auto& cells = table[r];
        const long data_row = static_cast<long>(r);  // 1-based data row (header is row 0)
        auto reject = [&](const std::string& msg, const std::string& col) {
            const std::string full = "row " + std::to_string(data_row) + ", column '" + col + "': " + msg;
            if (opts.strict) throw DataError(full, data_row, col);
            result.diagnostics.push_back(full);
            ++result.rejected_rows;
        };
        if (cells.size() != header.size()) {
            reject("expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()), "*");
            continue;
        }
        std::vector<int> lv;
        std::vector<double> ct;
        bool ok = true;
        std::vector<std::pair<std::size_t, std::string>> new_levels;
        for (std::size_t f = 0; f < fields.size() && ok; ++f) {
            const std::string& cell = cells[field_cols[f]];
            if (fields[f].is_categorical()) {
                if (cell.empty()) {
                    reject("empty categorical value", fields[f].name);
                    ok = false;
                    break;
                }
                const auto it = dict[f].find(cell);
                if (it != dict[f].end()) {
                    lv.push_back(it->second);
                } else if (growing[f]) {
                    // Committed only once the whole row parses.
                    new_levels.emplace_back(f, cell);
                    lv.push_back(static_cast<int>(dict[f].size()));
                } else {
                    if (opts.strict) throw UnseenLevelError(fields[f].name, cell);
                    reject("unseen level '" + cell + "'", fields[f].name);
                    ok = false;
                }
            } else {
                double v = 0.0;
                if (!parse_real(cell, v)) {
                    reject("not a finite number: '" + cell + "'", fields[f].name);
                    ok = false;
                } else {
                    ct.push_back(v);
                }
            }
        }
        if (!ok) continue;
        double y = 0.0;
        if (!parse_real(cells[resp_col], y)) {
            reject("response is not a finite number: '" + cells[resp_col] + "'", cfg.response_column);
            continue;
        }
        if (y < 0.0 && !opts.allow_negative_response) {
            reject("negative response", cfg.response_column);
            continue;
        }
        for (const auto& [f, label] : new_levels) {
            dict[f][label] = static_cast<int>(dict[f].size());
            fields[f].levels.push_back(label);
        }
        lv_rows.push_back(std::move(lv));
        ct_rows.push_back(std::move(ct));
        ys.push_back(y);
    }
    if (ys.empty()) throw DataError("no valid data rows");

    FieldSchema schema(std::move(fields));
    const long n = static_cast<long>(ys.size());
    Eigen::MatrixXi levels(n, schema.categorical_count());
    Matrix cont(n, schema.continuous_count());
    for (long i = 0; i < n; ++i) {
        for (int c = 0; c < levels.cols(); ++c) levels(i, c) = lv_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
        for (int c = 0; c < cont.cols(); ++c) cont(i, c) = ct_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    }
    result.data = Dataset(std::move(schema), std::move(levels), std::move(cont),
                          Eigen::Map<const Vector>(ys.data(), n));
    return result;
}

IngestResult csv_ingest(const std::string& path, const SchemaConfig& cfg, const IngestOptions& opts) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return csv_ingest_text(ss.str(), cfg, opts);
}

namespace {

std::string quote_if_needed(const std::string& s, char delimiter) {
    if (s.find(delimiter) == std::string::npos && s.find('"') == std::string::npos &&
        s.find('\n') == std::string::npos && s.find('\r') == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string format_real(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

std::string csv_format(const Dataset& data, const std::string& response_column, char delimiter) {
    std::ostringstream out;
    const auto& schema = data.schema();
    for (const auto& f : schema.fields()) out << quote_if_needed(f.name, delimiter) << delimiter;
    out << quote_if_needed(response_column, delimiter) << "\n";
    for (long i = 0; i < data.size(); ++i) {
        int c = 0, k = 0;
        for (const auto& f : schema.fields()) {
            if (f.is_categorical()) {
                out << quote_if_needed(f.levels[static_cast<std::size_t>(data.levels()(i, c++))], delimiter);
            } else {
                out << format_real(data.continuous()(i, k++));
            }
            out << delimiter;
        }
        out << format_real(data.response()[i]) << "\n";
    }
    return out.str();
}

void csv_export(const Dataset& data, const std::string& path, const std::string& response_column, char delimiter) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << csv_format(data, response_column, delimiter);
}

}  // namespace qrgmm
