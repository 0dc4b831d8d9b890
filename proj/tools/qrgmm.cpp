// qrgmm command line: synth, ingest, fit, generate, risk, eval, serve.
// Exit codes: 0 ok, 2 usage, 3 data error, 4 fit failure, 5 internal.

#include "qrgmm/artifact.hpp"
#include "qrgmm/datagen.hpp"
#include "qrgmm/deepfm.hpp"
#include "qrgmm/eval.hpp"
#include "qrgmm/generator.hpp"
#include "qrgmm/http.hpp"
#include "qrgmm/quantreg.hpp"
#include "qrgmm/risk.hpp"
#include "qrgmm/svc.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace qrgmm;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kFit = 4, kInternal = 5 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_file(const std::string& path, const std::string& text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Run metadata next to the primary output: argv plus resolved settings is
// enough to rerun the command and reproduce every output bit for bit.
struct RunMeta {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    json seeds = json::object();
    std::vector<std::string> outputs;

    void write(const std::string& primary) const {
        json j{{"command", command},
               {"argv", argv},
               {"version", kVersion},
               {"rng", kRngName},
               {"config", config},
               {"seeds", seeds},
               {"outputs", outputs},
               {"finished_at", utc_now()}};
        write_file(primary + ".meta.json", j.dump(2) + "\n");
    }
};

std::map<std::string, std::string> parse_assignments(const std::vector<std::string>& items) {
    std::map<std::string, std::string> out;
    for (const auto& item : items) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("covariate '" + item + "' must look like field=value");
        out[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return out;
}

FieldSchema layout_schema(const std::vector<int>& layout) {
    if (layout.size() != 3) throw UsageError("--layout takes three integers: products sellers continuous");
    return synthetic_layout(layout[0], layout[1], layout[2]);
}

Dataset load_dataset(const std::string& csv, const std::string& schema, bool lenient, IngestResult* full = nullptr) {
    IngestOptions opts;
    opts.strict = !lenient;
    IngestResult res = csv_ingest(csv, load_schema_config(schema), opts);
    for (const auto& d : res.diagnostics) std::cerr << "warning: " << d << "\n";
    if (full) *full = res;
    return std::move(res.data);
}

struct DeepFmFlags {
    int epochs = 50;
    int batch = 256;
    double lr = 2e-3;
    int embed = 8;
    std::vector<int> hidden{64, 32};
    std::string activation = "relu";
    std::string optimizer = "adamw";
    double weight_decay = 0.0;
    double smoothing = 0.0;

    void add(CLI::App* app) {
        app->add_option("--epochs", epochs, "DeepFM epochs")->capture_default_str();
        app->add_option("--batch-size", batch, "DeepFM mini-batch size")->capture_default_str();
        app->add_option("--learning-rate", lr, "DeepFM step size")->capture_default_str();
        app->add_option("--embed-dim", embed, "DeepFM embedding size k")->capture_default_str();
        app->add_option("--hidden", hidden, "DeepFM hidden layer widths")->capture_default_str();
        app->add_option("--activation", activation, "relu | tanh")->capture_default_str();
        app->add_option("--optimizer", optimizer, "adamw | sgd")->capture_default_str();
        app->add_option("--weight-decay", weight_decay, "decoupled weight decay")->capture_default_str();
        app->add_option("--smoothing", smoothing, "Huber width of the training loss (0: exact pinball)")->capture_default_str();
    }
    DeepFmConfig config(std::uint64_t seed) const {
        DeepFmConfig c;
        c.epochs = epochs;
        c.batch_size = batch;
        c.learning_rate = lr;
        c.embed_dim = embed;
        c.hidden_sizes = hidden;
        c.activation = activation;
        c.optimizer = optimizer;
        c.weight_decay = weight_decay;
        c.smoothing = smoothing;
        c.seed = seed;
        c.validate();
        return c;
    }
    json to_json() const {
        return {{"epochs", epochs},   {"batch_size", batch},       {"learning_rate", lr},
                {"embed_dim", embed}, {"hidden_sizes", hidden},    {"activation", activation},
                {"optimizer", optimizer}, {"weight_decay", weight_decay}, {"smoothing", smoothing}};
    }
};

int run(int argc, char** argv) {
    CLI::App app{"Quantile-regression generative metamodel for loan risk"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    RunMeta meta;
    for (int i = 0; i < argc; ++i) meta.argv.emplace_back(argv[i]);

    // synth
    auto* synth = app.add_subcommand("synth", "Draw a synthetic FM location-scale dataset");
    long synth_n = 15000;
    std::uint64_t synth_seed = 0;
    std::vector<int> synth_layout{100, 300, 10};
    bool synth_linear = false;
    std::string synth_out, synth_schema_out;
    synth->add_option("-n,--rows", synth_n, "rows")->capture_default_str();
    synth->add_option("--seed", synth_seed, "seed for parameters and rows")->capture_default_str();
    synth->add_option("--layout", synth_layout, "products sellers continuous")->expected(3)->capture_default_str();
    synth->add_flag("--linear-only", synth_linear, "no pairwise interactions (linear conditional quantiles)");
    synth->add_option("-o,--out", synth_out, "output CSV")->required();
    synth->add_option("--schema-out", synth_schema_out, "schema config output (default: <out>.schema)");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate a CSV against a schema config");
    std::string in_csv, in_schema, in_out, in_schema_out;
    bool in_lenient = false;
    ingest->add_option("--csv", in_csv, "input CSV")->required();
    ingest->add_option("--schema", in_schema, "schema config")->required();
    ingest->add_flag("--lenient", in_lenient, "drop bad rows instead of failing");
    ingest->add_option("-o,--out", in_out, "normalized CSV output")->required();
    ingest->add_option("--schema-out", in_schema_out, "resolved schema (levels filled in; default: <out>.schema)");

    // fit
    auto* fit = app.add_subcommand("fit", "Fit a quantile model on every grid level");
    std::string fit_csv, fit_schema, fit_out, fit_kind = "linear";
    std::optional<int> fit_m;
    std::uint64_t fit_seed = 0;
    int fit_threads = 0;
    bool fit_lenient = false;
    DeepFmFlags fit_net;
    fit->add_option("--csv", fit_csv, "training CSV")->required();
    fit->add_option("--schema", fit_schema, "schema config")->required();
    fit->add_option("--kind", fit_kind, "linear | deepfm")->capture_default_str()->check(CLI::IsMember({"linear", "deepfm"}));
    fit->add_option("-m", fit_m, "grid size m (default round(sqrt(n)))");
    fit->add_option("--seed", fit_seed, "DeepFM seed")->capture_default_str();
    fit->add_option("--threads", fit_threads, "quantreg solver threads (0: all cores)")->capture_default_str();
    fit->add_flag("--lenient", fit_lenient, "drop bad CSV rows instead of failing");
    fit->add_option("-o,--out", fit_out, "model artifact (JSON)")->required();
    fit_net.add(fit);

    // generate
    auto* gen = app.add_subcommand("generate", "Draw K conditional samples at a covariate profile");
    std::string gen_model, gen_out;
    std::vector<std::string> gen_x;
    long gen_K = 100000;
    std::uint64_t gen_seed = 0;
    gen->add_option("--model", gen_model, "model artifact")->required();
    gen->add_option("-x,--covariate", gen_x, "field=value, one per field")->required();
    gen->add_option("-K", gen_K, "number of draws")->capture_default_str();
    gen->add_option("--seed", gen_seed, "sampling seed")->capture_default_str();
    gen->add_option("-o,--out", gen_out, "samples CSV")->required();

    // risk
    auto* risk = app.add_subcommand("risk", "Risk curves r1, r2, LGD and optional r3 over a loan grid");
    std::string risk_model, risk_out, risk_estimator = "closed-form", risk_loss;
    std::vector<std::string> risk_x;
    double risk_r = 1.0, risk_l_min = 0.0;
    std::optional<double> risk_l_bar, risk_xi;
    int risk_points = 100;
    long risk_K = 100000;
    std::uint64_t risk_seed = 0;
    risk->add_option("--model", risk_model, "model artifact")->required();
    risk->add_option("-x,--covariate", risk_x, "field=value, one per field")->required();
    risk->add_option("-r", risk_r, "net unit revenue")->required();
    risk->add_option("--l-bar", risk_l_bar, "maximum loan (default r * generated 0.99 quantile)");
    risk->add_option("--l-min", risk_l_min, "smallest loan level")->capture_default_str();
    risk->add_option("--points", risk_points, "loan grid size")->capture_default_str();
    risk->add_option("--xi", risk_xi, "loss threshold for Pr{L > xi} and E[L; L > xi]");
    risk->add_option("--estimator", risk_estimator, "closed-form | monte-carlo")
        ->capture_default_str()
        ->check(CLI::IsMember({"closed-form", "monte-carlo"}));
    risk->add_option("-K", risk_K, "Monte Carlo draws")->capture_default_str();
    risk->add_option("--seed", risk_seed, "Monte Carlo seed")->capture_default_str();
    risk->add_option("--loss", risk_loss, "r3 plugin: one | shortfall | squared | power:<p> | scenario:<k>");
    risk->add_option("-o,--out", risk_out, "curve CSV (a .json twin is written next to it)")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "Replicated generative evaluation");
    std::string ev_out, ev_csv, ev_schema, ev_kind = "linear";
    long ev_n = 15000, ev_K = 10000;
    int ev_reps = 10;
    double ev_split = 0.8;
    std::optional<int> ev_m;
    std::uint64_t ev_seed = 0;
    std::vector<int> ev_layout{100, 300, 10};
    bool ev_linear = false;
    DeepFmFlags ev_net;
    ev->add_option("--csv", ev_csv, "evaluate on this dataset instead of synthetic data");
    ev->add_option("--schema", ev_schema, "schema config for --csv");
    ev->add_option("-n,--rows", ev_n, "synthetic rows per replication")->capture_default_str();
    ev->add_option("--layout", ev_layout, "products sellers continuous")->expected(3)->capture_default_str();
    ev->add_flag("--linear-only", ev_linear, "no pairwise interactions in the synthetic truth");
    ev->add_option("--replications", ev_reps, "replications")->capture_default_str();
    ev->add_option("--split", ev_split, "train fraction")->capture_default_str();
    ev->add_option("-m", ev_m, "grid size m (default round(sqrt(n_train)))");
    ev->add_option("-K", ev_K, "conditional draws per replication")->capture_default_str();
    ev->add_option("--kind", ev_kind, "linear | deepfm")->capture_default_str()->check(CLI::IsMember({"linear", "deepfm"}));
    ev->add_option("--seed", ev_seed, "base seed")->capture_default_str();
    ev->add_option("-o,--out-dir", ev_out, "output directory")->required();
    ev_net.add(ev);

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP/JSON service");
    std::string sv_config, sv_host, sv_model_dir, sv_static;
    std::optional<int> sv_port;
    serve->add_option("--config", sv_config, "config file (key = value); also QRGMM_CONFIG");
    serve->add_option("--host", sv_host, "bind address");
    serve->add_option("--port", sv_port, "port");
    serve->add_option("--model-dir", sv_model_dir, "model registry directory");
    serve->add_option("--static-dir", sv_static, "UI bundle served under /ui");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    if (synth->parsed()) {
        meta.command = "synth";
        SynthConfig sc;
        sc.linear_only = synth_linear;
        const FieldSchema schema = layout_schema(synth_layout);
        const auto params = draw_params(schema, sc, synth_seed);
        const Dataset data = synth_generate(params, schema, synth_n, derive_seed(synth_seed, 1), sc);
        csv_export(data, synth_out, "y");
        const std::string schema_path = synth_schema_out.empty() ? synth_out + ".schema" : synth_schema_out;
        write_file(schema_path, format_schema_config(to_config(schema, "y")));
        meta.seeds = {{"seed", synth_seed}, {"row_seed", derive_seed(synth_seed, 1)}};
        meta.config = {{"rows", synth_n}, {"layout", synth_layout}, {"linear_only", synth_linear}};
        meta.outputs = {synth_out, schema_path};
        meta.write(synth_out);
        std::cout << "wrote " << synth_n << " rows, " << schema.width() << " one-hot columns to " << synth_out << "\n";
    } else if (ingest->parsed()) {
        meta.command = "ingest";
        IngestResult res;
        const Dataset data = load_dataset(in_csv, in_schema, in_lenient, &res);
        const auto cfg = load_schema_config(in_schema);
        csv_export(data, in_out, cfg.response_column, cfg.delimiter);
        const std::string schema_path = in_schema_out.empty() ? in_out + ".schema" : in_schema_out;
        write_file(schema_path, format_schema_config(to_config(data.schema(), cfg.response_column, cfg.delimiter)));
        meta.config = {{"csv", in_csv}, {"schema", in_schema}, {"lenient", in_lenient}, {"rows", data.size()},
                       {"rejected_rows", res.rejected_rows}, {"diagnostics", res.diagnostics}};
        meta.outputs = {in_out, schema_path};
        meta.write(in_out);
        std::cout << "ingested " << data.size() << " rows (" << res.rejected_rows << " rejected)\n";
    } else if (fit->parsed()) {
        meta.command = "fit";
        const Dataset data = load_dataset(fit_csv, fit_schema, fit_lenient);
        if (!fit_m && data.size() < 9) throw UsageError("need at least 9 rows for the default m; pass -m");
        const QuantileGrid grid(fit_m ? *fit_m : default_m(data.size()));
        json report;
        std::unique_ptr<QuantileModel> model;
        if (fit_kind == "deepfm") {
            auto net = train_deepfm(data, grid, fit_net.config(fit_seed));
            const auto& r = net.train_report();
            report = {{"kind", "deepfm"}, {"initial_loss", r.initial_loss}, {"epoch_loss", r.epoch_loss},
                      {"increases", r.increases}, {"steps", r.steps}, {"status", r.status}};
            model = std::make_unique<DeepFmQuantileModel>(std::move(net));
        } else {
            SolverConfig sc;
            sc.threads = fit_threads;
            auto lin = fit_grid(data, grid, sc);
            json levels = json::array();
            for (const auto& l : lin.report().levels)
                levels.push_back({{"tau", l.tau}, {"loss", l.loss}, {"iterations", l.iterations}, {"pivots", l.pivots},
                                  {"converged", l.converged}, {"message", l.message}});
            report = {{"kind", "linear"}, {"failed_levels", lin.report().failed_levels()}, {"levels", levels}};
            model = std::make_unique<LinearQuantileModel>(std::move(lin));
        }
        report["m"] = grid.m();
        report["rows"] = data.size();
        report["model_id"] = model_id(*model);
        save_model(*model, fit_out, {{"source", fit_csv}});
        const std::string report_path = fit_out + ".fit_report.json";
        write_file(report_path, report.dump(2) + "\n");
        meta.config = {{"csv", fit_csv}, {"schema", fit_schema}, {"kind", fit_kind}, {"m", grid.m()}, {"threads", fit_threads}};
        if (fit_kind == "deepfm") meta.config["deepfm"] = fit_net.to_json();
        meta.seeds = {{"seed", fit_seed}};
        meta.outputs = {fit_out, report_path};
        meta.write(fit_out);
        std::cout << "model " << report["model_id"].get<std::string>() << " (" << fit_kind << ", m=" << grid.m() << ") -> " << fit_out << "\n";
    } else if (gen->parsed()) {
        meta.command = "generate";
        std::shared_ptr<const QuantileModel> model = load_model(gen_model);
        const Vector x = model->schema().encode(parse_assignments(gen_x));
        if (gen_K < 1) throw UsageError("-K must be >= 1");
        const ConditionalSampler sampler(model);
        const Vector draws = sampler.sample(x, gen_K, gen_seed);
        std::ofstream out(gen_out, std::ios::binary);
        if (!out) throw DataError("cannot write '" + gen_out + "'");
        write_samples_csv(out, draws, {{"model_id", model_id(*model)}, {"seed", std::to_string(gen_seed)}, {"K", std::to_string(gen_K)}});
        meta.config = {{"model", gen_model}, {"covariates", gen_x}, {"K", gen_K}};
        meta.seeds = {{"seed", gen_seed}};
        meta.outputs = {gen_out};
        meta.write(gen_out);
    } else if (risk->parsed()) {
        meta.command = "risk";
        std::shared_ptr<const QuantileModel> model = load_model(risk_model);
        const Vector x = model->schema().encode(parse_assignments(risk_x));
        const ConditionalSampler sampler(model);
        const auto cdf = sampler.at(x);
        const RiskSpec spec = make_risk_spec(*cdf, risk_r, risk_l_bar, risk_l_min, risk_points, risk_xi);
        EstimatorConfig est;
        est.kind = risk_estimator == "monte-carlo" ? EstimatorConfig::Kind::monte_carlo : EstimatorConfig::Kind::closed_form;
        est.K = risk_K;
        est.seed = risk_seed;
        std::optional<GeneralizedLoss> gl;
        if (!risk_loss.empty()) {
            gl = loss_plugin(risk_loss, risk_r);
            for (const auto& issue : check_threshold_assumptions(*gl, risk_r, spec.l_bar))
                std::cerr << "warning: loss '" << risk_loss << "': " << issue << "\n";
        }
        const RiskCurve curve = risk_curve(*cdf, spec, est, gl ? &*gl : nullptr);
        write_file(risk_out, risk_curve_csv(curve));
        json j = risk_curve_json(curve);
        j["model_id"] = model_id(*model);
        const std::string json_path = risk_out + ".json";
        write_file(json_path, j.dump(2) + "\n");
        meta.config = {{"model", risk_model}, {"covariates", risk_x}, {"r", risk_r}, {"l_bar", spec.l_bar},
                       {"l_min", risk_l_min}, {"points", risk_points}, {"estimator", risk_estimator}, {"K", risk_K},
                       {"loss", risk_loss}};
        if (risk_xi) meta.config["xi"] = *risk_xi;
        meta.seeds = {{"seed", risk_seed}};
        meta.outputs = {risk_out, json_path};
        meta.write(risk_out);
    } else if (ev->parsed()) {
        meta.command = "eval";
        ReplicationPlan plan;
        plan.replications = ev_reps;
        plan.split = ev_split;
        plan.seed = ev_seed;
        plan.m = ev_m;
        plan.model_kind = ev_kind;
        plan.K = ev_K;
        if (ev_kind == "deepfm") plan.deepfm = ev_net.config(ev_seed);
        plan.validate();
        EvalReport rep;
        if (!ev_csv.empty()) {
            if (ev_schema.empty()) throw UsageError("--csv needs --schema");
            rep = dataset_replications(load_dataset(ev_csv, ev_schema, false), plan);
        } else {
            SyntheticSetup setup;
            setup.schema = layout_schema(ev_layout);
            setup.synth.linear_only = ev_linear;
            setup.n = ev_n;
            rep = synthetic_replications(setup, plan).report;
        }
        const std::filesystem::path dir(ev_out);
        std::filesystem::create_directories(dir);
        const std::vector<std::pair<std::string, std::string>> files{
            {"report.json", eval_report_json(rep) + "\n"},
            {"summary.csv", summary_csv(rep)},
            {"replications.csv", replications_csv(rep)},
            {"histograms.csv", histograms_csv(rep)},
            {"calibration.csv", calibration_csv(rep)}};
        for (const auto& [name, text] : files) {
            write_file((dir / name).string(), text);
            meta.outputs.push_back((dir / name).string());
        }
        meta.config = {{"csv", ev_csv}, {"rows", ev_n}, {"layout", ev_layout}, {"linear_only", ev_linear},
                       {"replications", ev_reps}, {"split", ev_split}, {"m", rep.m}, {"K", ev_K}, {"kind", ev_kind}};
        if (ev_kind == "deepfm") meta.config["deepfm"] = ev_net.to_json();
        meta.seeds = {{"seed", ev_seed}};
        meta.write((dir / "eval").string());
        std::cout << summary_csv(rep);
    } else if (serve->parsed()) {
        meta.command = "serve";
        std::string config_path = sv_config;
        if (config_path.empty()) config_path = process_env("QRGMM_CONFIG").value_or("");
        std::map<std::string, std::string> flags;
        if (!sv_host.empty()) flags["host"] = sv_host;
        if (sv_port) flags["port"] = std::to_string(*sv_port);
        if (!sv_model_dir.empty()) flags["model_dir"] = sv_model_dir;
        if (!sv_static.empty()) flags["static_dir"] = sv_static;
        const ServiceConfig cfg =
            resolve_service_config(config_path.empty() ? "" : read_file(config_path), process_env, flags);
        Service service(cfg, &std::cerr);
        return run_server(service) == 0 ? kOk : kInternal;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const UnseenLevelError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const SchemaError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const FitError& e) {
        std::cerr << "fit failed: " << e.what() << "\n";
        return kFit;
    } catch (const ParameterError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const DomainError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}
