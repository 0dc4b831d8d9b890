#include "qrgmm/eval.hpp"

#include "qrgmm/generator.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace qrgmm {

namespace {

std::vector<double> sorted_copy(std::span<const double> v) {
    std::vector<double> s(v.begin(), v.end());
    std::sort(s.begin(), s.end());
    return s;
}

void require_nonempty(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw DomainError("two-sample statistics need nonempty samples");
}

std::string num(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void mean_sd(std::span<const double> v, double& mean, double& sd) {
    double mu = 0.0, m2 = 0.0;
    std::size_t k = 0;
    for (double y : v) {
        ++k;
        const double d = y - mu;
        mu += d / static_cast<double>(k);
        m2 += d * (y - mu);
    }
    mean = mu;
    sd = k > 1 ? std::sqrt(m2 / static_cast<double>(k - 1)) : 0.0;
}

}  // namespace

Vector calibration(const QuantileModel& model, const Dataset& test) {
    if (test.size() < 1) throw DomainError("calibration needs a nonempty test set");
    if (!(test.schema() == model.schema())) throw SchemaError("test set schema does not match the model");
    const int m1 = model.m() - 1;
    Vector hits = Vector::Zero(m1);
    for (long i = 0; i < test.size(); ++i) {
        const Vector q = model.quantiles(test.row(i));
        const double y = test.response()[i];
        for (int j = 0; j < m1; ++j) hits[j] += (y <= q[j]) ? 1.0 : 0.0;
    }
    return hits / static_cast<double>(test.size());
}

double max_calibration_error(const Vector& tau_hat, int m, double lo, double hi) {
    double worst = 0.0;
    for (Eigen::Index j = 0; j < tau_hat.size(); ++j) {
        const double tau = static_cast<double>(j + 1) / m;
        if (tau < lo - 1e-12 || tau > hi + 1e-12) continue;
        worst = std::max(worst, std::abs(tau_hat[j] - tau));
    }
    return worst;
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
    require_nonempty(a, b);
    const auto sa = sorted_copy(a);
    const auto sb = sorted_copy(b);
    if (sa.size() == sb.size()) {
        double s = 0.0;
        for (std::size_t i = 0; i < sa.size(); ++i) s += std::abs(sa[i] - sb[i]);
        return s / static_cast<double>(sa.size());
    }
    // Integral of |F_a - F_b| between consecutive pooled points.
    const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double prev = std::min(sa.front(), sb.front());
    double total = 0.0;
    while (i < sa.size() || j < sb.size()) {
        const double t = (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j])) ? sa[i] : sb[j];
        total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (t - prev);
        while (i < sa.size() && sa[i] == t) ++i;
        while (j < sb.size() && sb[j] == t) ++j;
        prev = t;
    }
    return total;
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
    require_nonempty(a, b);
    const auto sa = sorted_copy(a);
    const auto sb = sorted_copy(b);
    const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < sa.size() || j < sb.size()) {
        const double t = (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j])) ? sa[i] : sb[j];
        while (i < sa.size() && sa[i] == t) ++i;
        while (j < sb.size() && sb[j] == t) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

OracleQuantileModel::OracleQuantileModel(FieldSchema schema, FmLocationScaleParams params, int m)
    : schema_(std::move(schema)), params_(std::move(params)), m_(m) {
    if (m < 3) throw DomainError("oracle model needs m >= 3");
    if (params_.dim() != schema_.width()) throw SchemaError("truth parameters do not match the schema width");
}

Vector OracleQuantileModel::raw_quantiles(const Vector& x) const {
    const double loc = location(params_, x);
    const double sc = scale(params_, x);
    Vector q(m_ - 1);
    for (int j = 0; j < m_ - 1; ++j) q[j] = loc + sc * noise_quantile(params_.noise, static_cast<double>(j + 1) / m_);
    return q;
}

void ReplicationPlan::validate() const {
    if (replications < 1) throw ParameterError("replications must be >= 1");
    if (!(split > 0.0 && split < 1.0)) throw ParameterError("split must lie in (0, 1)");
    if (m && *m < 3) throw ParameterError("m must be >= 3");
    if (model_kind != "linear" && model_kind != "deepfm") throw ParameterError("model kind must be linear or deepfm");
    if (K < 1) throw ParameterError("K must be >= 1");
    if (histogram_bins < 1) throw ParameterError("histogram bins must be >= 1");
    if (model_kind == "deepfm") deepfm.validate();
}

SampleComparison compare_samples(std::span<const double> generated, std::span<const double> reference) {
    SampleComparison c;
    mean_sd(generated, c.generated_mean, c.generated_sd);
    mean_sd(reference, c.reference_mean, c.reference_sd);
    c.wd = wasserstein1(generated, reference);
    c.ks = ks_statistic(generated, reference);
    return c;
}

Histogram histogram(const std::string& label, std::span<const double> generated, std::span<const double> reference,
                    int bins) {
    require_nonempty(generated, reference);
    if (bins < 1) throw DomainError("histogram needs at least one bin");
    double lo = generated[0], hi = generated[0];
    for (auto s : {generated, reference})
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi == lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    Histogram h;
    h.label = label;
    h.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b) h.edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
    h.edges.back() = hi;
    auto fill = [&](std::span<const double> s, std::vector<long>& counts) {
        counts.assign(static_cast<std::size_t>(bins), 0);
        for (double v : s) {
            auto b = static_cast<long>((v - lo) / (hi - lo) * bins);
            b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
            ++counts[static_cast<std::size_t>(b)];
        }
    };
    fill(generated, h.generated);
    fill(reference, h.reference);
    return h;
}

void aggregate(EvalReport& report) {
    auto average = [&](auto member) -> std::optional<SampleComparison> {
        SampleComparison acc;
        int count = 0;
        for (const auto& r : report.replications) {
            const auto& c = r.*member;
            if (!c) continue;
            acc.generated_mean += c->generated_mean;
            acc.generated_sd += c->generated_sd;
            acc.reference_mean += c->reference_mean;
            acc.reference_sd += c->reference_sd;
            acc.wd += c->wd;
            acc.ks += c->ks;
            ++count;
        }
        if (count == 0) return std::nullopt;
        const double k = count;
        acc.generated_mean /= k;
        acc.generated_sd /= k;
        acc.reference_mean /= k;
        acc.reference_sd /= k;
        acc.wd /= k;
        acc.ks /= k;
        return acc;
    };
    report.unconditional = average(&ReplicationResult::unconditional);
    report.conditional = average(&ReplicationResult::conditional);
    report.tau_hat.resize(0);
    int count = 0;
    for (const auto& r : report.replications) {
        if (r.tau_hat.size() == 0) continue;
        if (count == 0) report.tau_hat = Vector::Zero(r.tau_hat.size());
        report.tau_hat += r.tau_hat;
        ++count;
    }
    if (count > 0) report.tau_hat /= count;
}

namespace {

std::vector<double> generate_for_rows(const QuantileModel& model, const Dataset& test, std::uint64_t seed) {
    Rng rng = make_rng(seed, 3);
    std::vector<double> out(static_cast<std::size_t>(test.size()));
    for (long i = 0; i < test.size(); ++i) {
        const PiecewiseCdf cdf = PiecewiseCdf::from_raw(model.raw_quantiles(test.row(i)), model.m());
        out[static_cast<std::size_t>(i)] = cdf.quantile_unchecked(uniform01(rng));
    }
    return out;
}

SampleComparison conditional_once(const PiecewiseCdf& cdf, const FmLocationScaleParams& truth, const Vector& x,
                                  long K, std::uint64_t seed, EvalReport* hist_into, int bins) {
    const Vector gen = cdf.sample(K, derive_seed(seed, 4));
    const Vector ref = sample_truth(truth, x, K, derive_seed(seed, 5));
    const std::span<const double> g(gen.data(), static_cast<std::size_t>(K));
    const std::span<const double> r(ref.data(), static_cast<std::size_t>(K));
    if (hist_into) hist_into->histograms.push_back(histogram("conditional", g, r, bins));
    return compare_samples(g, r);
}

}  // namespace

EvalReport unconditional_test(const QuantileModel& model, const Dataset& test, const ReplicationPlan& plan) {
    plan.validate();
    if (test.size() < 1) throw DomainError("unconditional test needs a nonempty test set");
    if (!(test.schema() == model.schema())) throw SchemaError("test set schema does not match the model");
    EvalReport rep;
    rep.model_kind = model.kind();
    rep.m = model.m();
    rep.n_test = test.size();
    const std::span<const double> ref(test.response().data(), static_cast<std::size_t>(test.size()));
    for (int r = 0; r < plan.replications; ++r) {
        ReplicationResult rr;
        rr.replication = r;
        rr.seed = plan.replication_seed(r);
        const auto gen = generate_for_rows(model, test, rr.seed);
        rr.unconditional = compare_samples(gen, ref);
        if (r == 0) rep.histograms.push_back(histogram("unconditional", gen, ref, plan.histogram_bins));
        rep.replications.push_back(std::move(rr));
    }
    aggregate(rep);
    return rep;
}

EvalReport conditional_test(const QuantileModel& model, const FmLocationScaleParams* truth, const Vector& x,
                            const ReplicationPlan& plan) {
    if (!truth) throw UnsupportedError("conditional test needs ground-truth parameters (synthetic data only)");
    plan.validate();
    if (x.size() != model.schema().width()) throw SchemaError("covariate row width does not match the model");
    EvalReport rep;
    rep.model_kind = model.kind();
    rep.m = model.m();
    rep.K = plan.K;
    const PiecewiseCdf cdf = PiecewiseCdf::from_raw(model.raw_quantiles(x), model.m());
    for (int r = 0; r < plan.replications; ++r) {
        ReplicationResult rr;
        rr.replication = r;
        rr.seed = plan.replication_seed(r);
        rr.conditional = conditional_once(cdf, *truth, x, plan.K, rr.seed, r == 0 ? &rep : nullptr, plan.histogram_bins);
        rep.replications.push_back(std::move(rr));
    }
    aggregate(rep);
    rep.conditional_truth_mean = location(*truth, x) + scale(*truth, x) * noise_mean(truth->noise);
    rep.conditional_truth_sd = scale(*truth, x) * noise_sd(truth->noise);
    return rep;
}

std::unique_ptr<QuantileModel> fit_model(const Dataset& train, const QuantileGrid& grid, const ReplicationPlan& plan) {
    if (plan.model_kind == "deepfm") return std::make_unique<DeepFmQuantileModel>(train_deepfm(train, grid, plan.deepfm));
    return std::make_unique<LinearQuantileModel>(fit_grid(train, grid, plan.solver));
}

SyntheticRun synthetic_replications(const SyntheticSetup& setup, const ReplicationPlan& plan) {
    plan.validate();
    SyntheticRun run;
    run.params = draw_params(setup.schema, setup.synth, plan.seed);
    run.x = setup.x ? *setup.x : draw_covariates(setup.schema, 1, derive_seed(plan.seed, 1u << 20), setup.synth).row(0);
    if (run.x.size() != setup.schema.width()) throw SchemaError("conditional covariate width does not match the schema");
    EvalReport& rep = run.report;
    rep.model_kind = plan.model_kind;
    rep.K = plan.K;
    for (int r = 0; r < plan.replications; ++r) {
        ReplicationResult rr;
        rr.replication = r;
        rr.seed = plan.replication_seed(r);
        const Dataset data = synth_generate(run.params, setup.schema, setup.n, derive_seed(rr.seed, 1), setup.synth);
        const auto [tr, te] = split_indices(setup.n, plan.split, derive_seed(rr.seed, 2));
        const Dataset train = data.subset(tr), test = data.subset(te);
        if (train.size() < 9 || test.size() < 1) throw ParameterError("sample too small for a train/test split");
        const QuantileGrid grid(plan.m ? *plan.m : default_m(train.size()));
        rep.m = grid.m();
        rep.n_train = train.size();
        rep.n_test = test.size();
        ReplicationPlan fit_plan = plan;
        fit_plan.deepfm.seed = derive_seed(plan.deepfm.seed ^ rr.seed, 6);
        const auto model = fit_model(train, grid, fit_plan);

        const auto gen = generate_for_rows(*model, test, rr.seed);
        const std::span<const double> ref(test.response().data(), static_cast<std::size_t>(test.size()));
        rr.unconditional = compare_samples(gen, ref);
        if (r == 0) rep.histograms.push_back(histogram("unconditional", gen, ref, plan.histogram_bins));
        const PiecewiseCdf cdf = PiecewiseCdf::from_raw(model->raw_quantiles(run.x), grid.m());
        rr.conditional = conditional_once(cdf, run.params, run.x, plan.K, rr.seed, r == 0 ? &rep : nullptr,
                                          plan.histogram_bins);
        rr.tau_hat = calibration(*model, test);
        rep.replications.push_back(std::move(rr));
    }
    aggregate(rep);
    rep.conditional_truth_mean = location(run.params, run.x) + scale(run.params, run.x) * noise_mean(run.params.noise);
    rep.conditional_truth_sd = scale(run.params, run.x) * noise_sd(run.params.noise);
    return run;
}

EvalReport dataset_replications(const Dataset& data, const ReplicationPlan& plan) {
    plan.validate();
    EvalReport rep;
    rep.model_kind = plan.model_kind;
    for (int r = 0; r < plan.replications; ++r) {
        ReplicationResult rr;
        rr.replication = r;
        rr.seed = plan.replication_seed(r);
        const auto [tr, te] = split_indices(data.size(), plan.split, derive_seed(rr.seed, 2));
        const Dataset train = data.subset(tr), test = data.subset(te);
        if (train.size() < 9 || test.size() < 1) throw ParameterError("sample too small for a train/test split");
        const QuantileGrid grid(plan.m ? *plan.m : default_m(train.size()));
        rep.m = grid.m();
        rep.n_train = train.size();
        rep.n_test = test.size();
        ReplicationPlan fit_plan = plan;
        fit_plan.deepfm.seed = derive_seed(plan.deepfm.seed ^ rr.seed, 6);
        const auto model = fit_model(train, grid, fit_plan);
        const auto gen = generate_for_rows(*model, test, rr.seed);
        const std::span<const double> ref(test.response().data(), static_cast<std::size_t>(test.size()));
        rr.unconditional = compare_samples(gen, ref);
        if (r == 0) rep.histograms.push_back(histogram("unconditional", gen, ref, plan.histogram_bins));
        rr.tau_hat = calibration(*model, test);
        rep.replications.push_back(std::move(rr));
    }
    aggregate(rep);
    return rep;
}

TrueRisk true_risk(const FmLocationScaleParams& params, const Vector& x, double r, double l) {
    if (params.noise != NoiseKind::lognormal) throw UnsupportedError("analytic risk needs log-normal noise");
    if (!(r > 0.0)) throw DomainError("r must be positive");
    const double loc = location(params, x);
    const double sc = scale(params, x);
    TrueRisk t;
    const double c = (l / r - loc) / sc;  // event {U < c}
    if (!(c > 0.0)) return t;
    const double z = std::log(c);
    const double p = normal_cdf(z);
    const double eu = std::exp(0.5) * normal_cdf(z - 1.0);   // E[U; U < c]
    const double eu2 = std::exp(2.0) * normal_cdf(z - 2.0);  // E[U^2; U < c]
    const double a = l - r * loc;
    const double b = r * sc;
    t.r1 = p;
    t.r2 = a * p - b * eu;
    t.r3 = a * a * p - 2.0 * a * b * eu + b * b * eu2;
    return t;
}

namespace {

nlohmann::json comparison_json(const SampleComparison& c) {
    return {{"generated_mean", c.generated_mean}, {"generated_sd", c.generated_sd},
            {"reference_mean", c.reference_mean}, {"reference_sd", c.reference_sd},
            {"wd", c.wd},                         {"ks", c.ks}};
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

std::string eval_report_json(const EvalReport& report) {
    nlohmann::json j;
    j["model_kind"] = report.model_kind;
    j["m"] = report.m;
    j["n_train"] = report.n_train;
    j["n_test"] = report.n_test;
    j["K"] = report.K;
    j["replication_count"] = report.replications.size();
    auto& reps = j["replications"] = nlohmann::json::array();
    for (const auto& r : report.replications) {
        nlohmann::json e{{"replication", r.replication}, {"seed", r.seed}};
        if (r.unconditional) e["unconditional"] = comparison_json(*r.unconditional);
        if (r.conditional) e["conditional"] = comparison_json(*r.conditional);
        if (r.tau_hat.size() > 0) e["tau_hat"] = to_std(r.tau_hat);
        reps.push_back(std::move(e));
    }
    if (report.unconditional) j["unconditional"] = comparison_json(*report.unconditional);
    if (report.conditional) j["conditional"] = comparison_json(*report.conditional);
    if (report.tau_hat.size() > 0) j["tau_hat"] = to_std(report.tau_hat);
    if (report.conditional_truth_mean) j["conditional_truth_mean"] = *report.conditional_truth_mean;
    if (report.conditional_truth_sd) j["conditional_truth_sd"] = *report.conditional_truth_sd;
    auto& hs = j["histograms"] = nlohmann::json::array();
    for (const auto& h : report.histograms)
        hs.push_back({{"label", h.label}, {"edges", h.edges}, {"generated", h.generated}, {"reference", h.reference}});
    return j.dump(2);
}

std::string summary_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "source,unconditional_mean,unconditional_sd,unconditional_wd,unconditional_ks,"
           "conditional_mean,conditional_sd,conditional_wd,conditional_ks\n";
    const auto& u = report.unconditional;
    const auto& c = report.conditional;
    auto opt = [](const std::optional<SampleComparison>& s, double SampleComparison::*f) {
        return s ? num((*s).*f) : std::string();
    };
    out << "reference," << opt(u, &SampleComparison::reference_mean) << ',' << opt(u, &SampleComparison::reference_sd)
        << ",,," << opt(c, &SampleComparison::reference_mean) << ',' << opt(c, &SampleComparison::reference_sd)
        << ",,\n";
    out << report.model_kind << ',' << opt(u, &SampleComparison::generated_mean) << ','
        << opt(u, &SampleComparison::generated_sd) << ',' << opt(u, &SampleComparison::wd) << ','
        << opt(u, &SampleComparison::ks) << ',' << opt(c, &SampleComparison::generated_mean) << ','
        << opt(c, &SampleComparison::generated_sd) << ',' << opt(c, &SampleComparison::wd) << ','
        << opt(c, &SampleComparison::ks) << '\n';
    return out.str();
}

std::string replications_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "replication,seed,test,generated_mean,generated_sd,reference_mean,reference_sd,wd,ks\n";
    for (const auto& r : report.replications) {
        for (const auto& [name, c] : {std::pair{"unconditional", r.unconditional}, std::pair{"conditional", r.conditional}}) {
            if (!c) continue;
            out << r.replication << ',' << r.seed << ',' << name << ',' << num(c->generated_mean) << ','
                << num(c->generated_sd) << ',' << num(c->reference_mean) << ',' << num(c->reference_sd) << ','
                << num(c->wd) << ',' << num(c->ks) << '\n';
        }
    }
    return out.str();
}

std::string histograms_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "label,bin,left,right,generated,reference\n";
    for (const auto& h : report.histograms) {
        for (std::size_t b = 0; b < h.generated.size(); ++b)
            out << h.label << ',' << b << ',' << num(h.edges[b]) << ',' << num(h.edges[b + 1]) << ','
                << h.generated[b] << ',' << h.reference[b] << '\n';
    }
    return out.str();
}

std::string calibration_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "tau,tau_hat\n";
    for (Eigen::Index j = 0; j < report.tau_hat.size(); ++j)
        out << num(static_cast<double>(j + 1) / report.m) << ',' << num(report.tau_hat[j]) << '\n';
    return out.str();
}

}  // namespace qrgmm
