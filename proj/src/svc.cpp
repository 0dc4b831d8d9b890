#include "qrgmm/svc.hpp"

#include "qrgmm/artifact.hpp"
#include "qrgmm/datagen.hpp"
#include "qrgmm/deepfm.hpp"
#include "qrgmm/quantreg.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>

namespace qrgmm {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

long parse_long(const std::string& key, const std::string& v) {
    long out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw ParameterError("config '" + key + "' is not an integer: '" + v + "'");
    return out;
}

void apply_setting(ServiceConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "host") cfg.host = value;
    else if (key == "port") cfg.port = static_cast<int>(parse_long(key, value));
    else if (key == "model_dir") cfg.model_dir = value;
    else if (key == "sync_rows") cfg.sync_rows = parse_long(key, value);
    else if (key == "max_samples") cfg.max_samples = parse_long(key, value);
    else if (key == "static_dir") cfg.static_dir = value;
    else if (key == "fit_threads") cfg.fit_threads = static_cast<int>(parse_long(key, value));
    else throw ParameterError("unknown service setting '" + key + "'");
}

const char* const kSettingKeys[] = {"host", "port", "model_dir", "sync_rows", "max_samples", "static_dir", "fit_threads"};

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

double number_or(const json& body, const char* key, double fallback) {
    if (!body.contains(key) || body.at(key).is_null()) return fallback;
    if (!body.at(key).is_number()) throw ApiError(400, "invalid_request", std::string("'") + key + "' must be a number", key);
    return body.at(key).get<double>();
}

long integer_or(const json& body, const char* key, long fallback) {
    if (!body.contains(key) || body.at(key).is_null()) return fallback;
    if (!body.at(key).is_number_integer()) throw ApiError(400, "invalid_request", std::string("'") + key + "' must be an integer", key);
    return body.at(key).get<long>();
}

std::uint64_t seed_or(const json& body, const char* key, std::uint64_t fallback) {
    if (!body.contains(key) || body.at(key).is_null()) return fallback;
    if (!body.at(key).is_number_unsigned() && !(body.at(key).is_number_integer() && body.at(key).get<long>() >= 0))
        throw ApiError(400, "invalid_request", std::string("'") + key + "' must be a nonnegative integer", key);
    return body.at(key).get<std::uint64_t>();
}

const json& require_object(const json& body, const char* key) {
    if (!body.is_object() || !body.contains(key) || !body.at(key).is_object())
        throw ApiError(400, "invalid_request", std::string("request needs an object '") + key + "'", key);
    return body.at(key);
}

struct FitSpec {
    std::string kind = "linear";
    std::optional<int> m;
    DeepFmConfig deepfm;
};

FitSpec parse_fit_spec(const json& body) {
    FitSpec spec;
    if (!body.contains("model")) return spec;
    const json& jm = body.at("model");
    if (!jm.is_object()) throw ApiError(400, "invalid_request", "'model' must be an object", "model");
    spec.kind = jm.value("kind", std::string("linear"));
    if (spec.kind != "linear" && spec.kind != "deepfm")
        throw ApiError(400, "invalid_request", "model kind must be linear or deepfm", "model.kind");
    if (jm.contains("m") && !jm.at("m").is_null()) {
        const long m = integer_or(jm, "m", 0);
        if (m < 3) throw ApiError(400, "invalid_request", "m must be >= 3", "model.m");
        spec.m = static_cast<int>(m);
    }
    DeepFmConfig& c = spec.deepfm;
    if (jm.contains("deepfm")) {
        const json& d = jm.at("deepfm");
        c.embed_dim = static_cast<int>(integer_or(d, "embed_dim", c.embed_dim));
        if (d.contains("hidden_sizes")) c.hidden_sizes = d.at("hidden_sizes").get<std::vector<int>>();
        c.activation = d.value("activation", c.activation);
        c.epochs = static_cast<int>(integer_or(d, "epochs", c.epochs));
        c.batch_size = static_cast<int>(integer_or(d, "batch_size", c.batch_size));
        c.learning_rate = number_or(d, "learning_rate", c.learning_rate);
        c.optimizer = d.value("optimizer", c.optimizer);
        c.weight_decay = number_or(d, "weight_decay", c.weight_decay);
        c.smoothing = number_or(d, "smoothing", c.smoothing);
    }
    c.seed = seed_or(jm, "seed", c.seed);
    c.validate();
    return spec;
}

Dataset parse_dataset(const json& jd, std::string& source) {
    if (jd.contains("csv")) {
        if (!jd.at("csv").is_string() || !jd.contains("schema") || !jd.at("schema").is_string())
            throw ApiError(400, "invalid_request", "csv datasets need string fields 'csv' and 'schema'", "dataset");
        IngestOptions opts;
        opts.strict = jd.value("strict", true);
        auto res = csv_ingest_text(jd.at("csv").get<std::string>(), parse_schema_config(jd.at("schema").get<std::string>()), opts);
        source = "csv";
        return std::move(res.data);
    }
    if (jd.contains("synthetic")) {
        const json& s = jd.at("synthetic");
        const long n = integer_or(s, "n", 2000);
        if (n < 10) throw ApiError(400, "invalid_request", "synthetic n must be >= 10", "dataset.synthetic.n");
        const FieldSchema schema = synthetic_layout(static_cast<int>(integer_or(s, "products", 100)),
                                                    static_cast<int>(integer_or(s, "sellers", 300)),
                                                    static_cast<int>(integer_or(s, "continuous", 10)));
        SynthConfig sc;
        sc.linear_only = s.value("linear_only", false);
        const std::uint64_t seed = seed_or(s, "seed", 0);
        const auto params = draw_params(schema, sc, seed);
        source = "synthetic";
        return synth_generate(params, schema, n, derive_seed(seed, 1), sc);
    }
    throw ApiError(400, "invalid_request", "dataset needs 'csv' or 'synthetic'", "dataset");
}

}  // namespace

ServiceConfig resolve_service_config(const std::string& file_text,
                                     const std::function<std::optional<std::string>(const std::string&)>& env,
                                     const std::map<std::string, std::string>& flags) {
    ServiceConfig cfg;
    std::size_t start = 0;
    int line_no = 0;
    while (start <= file_text.size()) {
        auto end = file_text.find('\n', start);
        if (end == std::string::npos) end = file_text.size();
        ++line_no;
        std::string line = file_text.substr(start, end - start);
        start = end + 1;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParameterError("config line " + std::to_string(line_no) + " has no '='");
        apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    if (env) {
        for (const char* key : kSettingKeys) {
            std::string var = "QRGMM_";
            for (const char* c = key; *c; ++c) var += static_cast<char>(std::toupper(static_cast<unsigned char>(*c)));
            if (auto v = env(var)) apply_setting(cfg, key, *v);
        }
    }
    for (const auto& [k, v] : flags) apply_setting(cfg, k, v);
    if (cfg.port < 0 || cfg.port > 65535) throw ParameterError("port must lie in [0, 65535]");
    if (cfg.max_samples < 1) throw ParameterError("max_samples must be >= 1");
    return cfg;
}

std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

ApiError to_api_error(std::exception_ptr e) {
    try {
        std::rethrow_exception(e);
    } catch (const ApiError& a) {
        return a;
    } catch (const UnseenLevelError& u) {
        return {422, "unseen_level", u.what(), u.field()};
    } catch (const DataError& d) {
        return {400, "data_error", d.what(), d.column()};
    } catch (const SchemaError& s) {
        return {400, "schema_error", s.what()};
    } catch (const DomainError& d) {
        return {400, "invalid_request", d.what()};
    } catch (const ParameterError& p) {
        return {400, "invalid_request", p.what()};
    } catch (const UnsupportedError& u) {
        return {400, "unsupported", u.what()};
    } catch (const nlohmann::json::exception& j) {
        return {400, "bad_json", j.what()};
    } catch (const FitError& f) {
        return {500, "fit_failed", f.what()};
    } catch (const std::exception& x) {
        return {500, "internal", x.what()};
    } catch (...) {
        return {500, "internal", "unknown error"};
    }
}

json ModelRegistryEntry::summary() const {
    return {{"id", id},   {"kind", kind},       {"schema", schema},         {"m", m},
            {"created_at", created_at}, {"artifact_path", artifact_path}, {"meta", meta}};
}

ModelRegistry::ModelRegistry(std::string dir) : dir_(std::move(dir)) {}

int ModelRegistry::load_all() {
    if (dir_.empty() || !std::filesystem::is_directory(dir_)) return 0;
    int loaded = 0;
    for (const auto& f : std::filesystem::directory_iterator(dir_)) {
        if (f.path().extension() != ".json") continue;
        std::shared_ptr<const QuantileModel> model = load_model(f.path().string());
        const json artifact = model_to_json(*model);
        auto e = std::make_shared<ModelRegistryEntry>();
        e->id = model_id(artifact);
        e->kind = model->kind();
        e->schema = artifact.at("schema");
        e->m = model->m();
        e->artifact_path = f.path().string();
        e->created_at = utc_now();
        e->model = model;
        e->sampler = std::make_shared<ConditionalSampler>(model);
        std::lock_guard lock(mutex_);
        if (entries_.emplace(e->id, e).second) ++loaded;
    }
    return loaded;
}

std::shared_ptr<const ModelRegistryEntry> ModelRegistry::add(std::shared_ptr<const QuantileModel> model, json meta) {
    const json artifact = model_to_json(*model);
    const std::string id = model_id(artifact);
    {
        std::lock_guard lock(mutex_);
        if (auto it = entries_.find(id); it != entries_.end()) return it->second;
    }
    auto e = std::make_shared<ModelRegistryEntry>();
    e->id = id;
    e->kind = model->kind();
    e->schema = artifact.at("schema");
    e->m = model->m();
    e->created_at = utc_now();
    meta["created_at"] = e->created_at;
    e->meta = meta;
    if (!dir_.empty()) {
        e->artifact_path = (std::filesystem::path(dir_) / (id + ".json")).string();
        save_model(*model, e->artifact_path, meta);
    }
    e->model = model;
    e->sampler = std::make_shared<ConditionalSampler>(model);
    std::lock_guard lock(mutex_);
    return entries_.emplace(id, e).first->second;
}

std::shared_ptr<const ModelRegistryEntry> ModelRegistry::find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : it->second;
}

std::vector<std::shared_ptr<const ModelRegistryEntry>> ModelRegistry::list() const {
    std::lock_guard lock(mutex_);
    std::vector<std::shared_ptr<const ModelRegistryEntry>> out;
    for (const auto& [id, e] : entries_) out.push_back(e);
    return out;
}

struct Service::Job {
    std::string id;
    std::string dataset_hash;
    std::string status = "queued";  // queued | running | succeeded | failed
    std::string model_id;
    json error;
    json request_meta;
    FitSpec spec;
    std::optional<Dataset> data;
    std::string submitted_at;
    std::string finished_at;
};

Service::Service(ServiceConfig cfg, std::ostream* log)
    : cfg_(std::move(cfg)), log_(log), registry_(cfg_.model_dir) {
    const int loaded = registry_.load_all();
    if (loaded > 0) this->log("info", "-", {{"event", "registry_loaded"}, {"models", loaded}});
    worker_ = std::thread([this] { worker_loop(); });
}

Service::~Service() {
    {
        std::lock_guard lock(jobs_mutex_);
        stopping_ = true;
    }
    jobs_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

void Service::log(const std::string& level, const std::string& correlation_id, const json& fields) const {
    if (!log_) return;
    json line = fields;
    line["ts"] = utc_now();
    line["level"] = level;
    line["correlation_id"] = correlation_id;
    std::lock_guard lock(log_mutex_);
    *log_ << line.dump() << '\n';
    log_->flush();
}

Response Service::health() const {
    return {200, {{"status", "ok"}, {"version", kVersion}, {"models", registry_.list().size()}}};
}

Response Service::submit_fit(const json& body) {
    const json& jd = require_object(body, "dataset");
    const FitSpec spec = parse_fit_spec(body);
    const std::string hash = hex64(fnv1a(jd.dump().data(), jd.dump().size()));
    std::string source;
    Dataset data = parse_dataset(jd, source);
    if (spec.m && *spec.m > data.size()) throw ApiError(400, "invalid_request", "m exceeds the number of rows", "model.m");
    if (!spec.m && data.size() < 9) throw ApiError(400, "invalid_request", "need at least 9 rows for the default m", "dataset");

    auto job = std::make_shared<Job>();
    job->dataset_hash = hash;
    job->spec = spec;
    job->submitted_at = utc_now();
    job->request_meta = {{"dataset_hash", hash}, {"source", source}, {"rows", data.size()}, {"model", body.value("model", json::object())}};
    const bool sync = spec.kind == "linear" && data.size() <= cfg_.sync_rows;
    {
        std::lock_guard lock(jobs_mutex_);
        for (const auto& [id, j] : jobs_) {
            if (j->dataset_hash == hash && (j->status == "queued" || j->status == "running"))
                throw ApiError(409, "duplicate_job", "a training job for this dataset is already " + j->status + " (" + id + ")");
        }
        job->id = "job-" + std::to_string(++job_counter_);
        job->data = std::move(data);
        jobs_[job->id] = job;
        if (sync) job->status = "running";
        else queue_.push_back(job);
    }
    if (sync) {
        run_job(*job);
        const Response r = this->job(job->id);
        return {job->status == "succeeded" ? 201 : 500, r.body};
    }
    jobs_cv_.notify_all();
    return {202, {{"job_id", job->id}, {"status", "queued"}, {"dataset_hash", hash}}};
}

void Service::worker_loop() {
    for (;;) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock lock(jobs_mutex_);
            jobs_cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            job = queue_.front();
            queue_.pop_front();
            job->status = "running";
        }
        run_job(*job);
    }
}

void Service::run_job(Job& job) {
    log("info", job.id, {{"event", "fit_started"}, {"kind", job.spec.kind}, {"rows", job.data->size()}});
    std::string status, model_id;
    json error;
    try {
        const Dataset& data = *job.data;
        const QuantileGrid grid(job.spec.m ? *job.spec.m : default_m(data.size()));
        std::shared_ptr<const QuantileModel> model;
        json meta = job.request_meta;
        if (job.spec.kind == "deepfm") {
            auto net = std::make_shared<DeepFmQuantileModel>(train_deepfm(data, grid, job.spec.deepfm));
            meta["final_loss"] = net->train_report().epoch_loss.empty() ? json(nullptr) : json(net->train_report().epoch_loss.back());
            model = net;
        } else {
            SolverConfig sc;
            sc.threads = cfg_.fit_threads;
            auto lin = std::make_shared<LinearQuantileModel>(fit_grid(data, grid, sc));
            meta["failed_levels"] = lin->report().failed_levels();
            model = lin;
        }
        model_id = registry_.add(model, meta)->id;
        status = "succeeded";
    } catch (...) {
        const ApiError e = to_api_error(std::current_exception());
        status = "failed";
        error = {{"code", e.code}, {"message", e.what()}};
    }
    log(status == "succeeded" ? "info" : "error", job.id, {{"event", "fit_finished"}, {"status", status}, {"model_id", model_id}});
    {
        std::lock_guard lock(jobs_mutex_);
        job.status = status;
        job.model_id = model_id;
        job.error = error;
        job.finished_at = utc_now();
        job.data.reset();
    }
    jobs_cv_.notify_all();
}

void Service::wait(const std::string& job_id) const {
    std::unique_lock lock(jobs_mutex_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return;
    const auto job = it->second;
    jobs_cv_.wait(lock, [&] { return job->status != "queued" && job->status != "running"; });
}

Response Service::job(const std::string& id) const {
    std::lock_guard lock(jobs_mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw ApiError(404, "unknown_job", "no job '" + id + "'");
    const Job& j = *it->second;
    json body{{"job_id", j.id}, {"status", j.status}, {"dataset_hash", j.dataset_hash}, {"submitted_at", j.submitted_at}};
    if (!j.model_id.empty()) body["model_id"] = j.model_id;
    if (!j.error.is_null()) body["error"] = j.error;
    if (!j.finished_at.empty()) body["finished_at"] = j.finished_at;
    return {200, body};
}

std::shared_ptr<const ModelRegistryEntry> Service::require_model(const std::string& id) const {
    auto e = registry_.find(id);
    if (!e) throw ApiError(404, "unknown_model", "no model '" + id + "'");
    return e;
}

Response Service::list_models() const {
    json arr = json::array();
    for (const auto& e : registry_.list()) arr.push_back({{"id", e->id}, {"kind", e->kind}, {"m", e->m}, {"created_at", e->created_at}});
    return {200, {{"models", arr}}};
}

Response Service::model(const std::string& id) const { return {200, require_model(id)->summary()}; }

Vector encode_covariates(const FieldSchema& schema, const json& covariates) {
    if (!covariates.is_object()) throw ApiError(400, "invalid_request", "'covariates' must be an object keyed by field name", "covariates");
    std::map<std::string, std::string> assignment;
    for (const auto& [name, v] : covariates.items()) {
        if (v.is_string()) assignment[name] = v.get<std::string>();
        else if (v.is_number()) assignment[name] = v.dump();
        else throw ApiError(400, "invalid_request", "covariate '" + name + "' must be a string or number", name);
    }
    try {
        return schema.encode(assignment);
    } catch (const SchemaError& e) {
        throw ApiError(400, "schema_error", e.what(), "covariates");
    }
}

Response Service::samples(const std::string& id, const json& body) const {
    const auto e = require_model(id);
    if (!body.is_object()) throw ApiError(400, "invalid_request", "request body must be an object");
    const Vector x = encode_covariates(e->model->schema(), body.value("covariates", json()));
    const long K = integer_or(body, "K", 1000);
    if (K < 1 || K > cfg_.max_samples)
        throw ApiError(400, "invalid_request", "K must lie in [1, " + std::to_string(cfg_.max_samples) + "]", "K");
    const std::uint64_t seed = seed_or(body, "seed", 0);
    const Vector draws = e->sampler->sample(x, K, seed);
    return {200, {{"model_id", e->id}, {"seed", seed}, {"K", K}, {"estimator", "qrgmm-inverse-transform"},
                  {"samples", std::vector<double>(draws.data(), draws.data() + draws.size())}}};
}

json risk_curve_json(const RiskCurve& curve) {
    json pts = json::array();
    for (const auto& p : curve.points) {
        json e{{"l", p.l},         {"r1", p.r1},       {"r2", p.r2},       {"lgd", p.lgd},
               {"no_default", p.no_default}, {"r3", optional_json(p.r3)}, {"se_r1", p.se_r1},
               {"se_r2", p.se_r2}, {"se_r3", p.se_r3}};
        if (curve.xi) {
            e["exceed_prob"] = optional_json(p.exceed_prob);
            e["expected_excess"] = optional_json(p.expected_excess);
        }
        pts.push_back(std::move(e));
    }
    return {{"estimator", curve.estimator}, {"K", curve.K},        {"seed", curve.seed},
            {"loss", curve.loss_name.empty() ? json(nullptr) : json(curve.loss_name)},
            {"r", curve.r},                 {"l_bar", curve.l_bar}, {"xi", optional_json(curve.xi)},
            {"points", pts}};
}

Response Service::risk_curve(const std::string& id, const json& body) const {
    const auto e = require_model(id);
    if (!body.is_object()) throw ApiError(400, "invalid_request", "request body must be an object");
    const Vector x = encode_covariates(e->model->schema(), body.value("covariates", json()));
    if (!body.contains("r")) throw ApiError(400, "invalid_request", "RiskQuery needs 'r'", "r");
    const double r = number_or(body, "r", 1.0);
    std::optional<double> l_bar;
    if (body.contains("l_bar") && !(body.at("l_bar").is_string() && body.at("l_bar") == "auto"))
        if (!body.at("l_bar").is_null()) l_bar = number_or(body, "l_bar", 0.0);
    std::optional<double> xi;
    if (body.contains("xi") && !body.at("xi").is_null()) xi = number_or(body, "xi", 0.0);
    const double l_min = number_or(body, "l_min", 0.0);
    const long points = integer_or(body, "points", 100);
    if (points < 1 || points > 100000) throw ApiError(400, "invalid_request", "points must lie in [1, 100000]", "points");
    EstimatorConfig est;
    const std::string estimator = body.value("estimator", std::string("closed-form"));
    if (estimator == "monte-carlo") est.kind = EstimatorConfig::Kind::monte_carlo;
    else if (estimator != "closed-form")
        throw ApiError(400, "invalid_request", "estimator must be closed-form or monte-carlo", "estimator");
    est.K = integer_or(body, "K", est.K);
    if (est.K < 1 || est.K > cfg_.max_samples)
        throw ApiError(400, "invalid_request", "K must lie in [1, " + std::to_string(cfg_.max_samples) + "]", "K");
    est.seed = seed_or(body, "seed", 0);
    const auto cdf = e->sampler->at(x);
    const RiskSpec spec = make_risk_spec(*cdf, r, l_bar, l_min, static_cast<int>(points), xi);
    std::optional<GeneralizedLoss> gl;
    if (body.contains("loss") && !body.at("loss").is_null()) {
        if (!body.at("loss").is_string()) throw ApiError(400, "invalid_request", "'loss' must be a plugin name", "loss");
        gl = loss_plugin(body.at("loss").get<std::string>(), r);
    }
    const RiskCurve curve = qrgmm::risk_curve(*cdf, spec, est, gl ? &*gl : nullptr);
    json out = risk_curve_json(curve);
    out["model_id"] = e->id;
    return {200, out};
}

}  // namespace qrgmm
