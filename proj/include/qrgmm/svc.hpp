#pragma once

#include "qrgmm/generator.hpp"
#include "qrgmm/quantile_model.hpp"
#include "qrgmm/risk.hpp"

#include <json.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace qrgmm {

// Precedence: flags > environment (QRGMM_*) > config file > defaults.
struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string model_dir = "models";   // empty: registry kept in memory only
    long sync_rows = 2000;              // linear fits up to this many rows finish inside POST /models
    long max_samples = 10000000;        // per /samples request
    std::string static_dir;             // optional UI bundle served under /ui
    int fit_threads = 0;                // quantreg solver threads (0: hardware)
};

// `file_text` uses the `key = value` format with keys host, port, model_dir,
// sync_rows, max_samples, static_dir, fit_threads. `env` maps a variable
// name to its value (QRGMM_HOST, QRGMM_PORT, ...).
ServiceConfig resolve_service_config(const std::string& file_text,
                                     const std::function<std::optional<std::string>(const std::string&)>& env,
                                     const std::map<std::string, std::string>& flags);
std::optional<std::string> process_env(const std::string& name);

// Error surfaced to HTTP clients.
struct ApiError : std::runtime_error {
    int status;
    std::string code;
    std::string field;
    ApiError(int status, std::string code, const std::string& message, std::string field = {})
        : std::runtime_error(message), status(status), code(std::move(code)), field(std::move(field)) {}
};

// Maps the library error hierarchy to HTTP statuses:
// 400 malformed request / invalid values, 404 unknown model, 409 duplicate
// job, 422 unseen categorical level, 500 anything else.
ApiError to_api_error(std::exception_ptr e);

struct ModelRegistryEntry {
    std::string id;
    std::string kind;
    nlohmann::json schema;
    int m = 0;
    std::string created_at;
    std::string artifact_path;  // empty when not persisted
    nlohmann::json meta;
    std::shared_ptr<const QuantileModel> model;
    std::shared_ptr<const ConditionalSampler> sampler;

    nlohmann::json summary() const;
};

// Id -> model. Inserts are atomic; entries are immutable once inserted.
class ModelRegistry {
public:
    explicit ModelRegistry(std::string dir = {});

    // Loads every artifact in the directory; returns the number loaded.
    int load_all();
    // Returns the existing entry when the same model is already registered.
    std::shared_ptr<const ModelRegistryEntry> add(std::shared_ptr<const QuantileModel> model,
                                                  nlohmann::json meta = nlohmann::json::object());
    std::shared_ptr<const ModelRegistryEntry> find(const std::string& id) const;
    std::vector<std::shared_ptr<const ModelRegistryEntry>> list() const;

private:
    std::string dir_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<const ModelRegistryEntry>> entries_;
};

struct Response {
    int status = 200;
    nlohmann::json body;
};

// Transport-independent request handlers behind the HTTP routes. Bodies
// are documented in docs/api.md.
class Service {
public:
    explicit Service(ServiceConfig cfg, std::ostream* log = nullptr);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    const ServiceConfig& config() const { return cfg_; }
    ModelRegistry& registry() { return registry_; }

    Response health() const;
    Response submit_fit(const nlohmann::json& body);
    Response job(const std::string& id) const;
    Response list_models() const;
    Response model(const std::string& id) const;
    Response samples(const std::string& id, const nlohmann::json& body) const;
    Response risk_curve(const std::string& id, const nlohmann::json& body) const;

    // Blocks until the job leaves the queued/running states.
    void wait(const std::string& job_id) const;

    void log(const std::string& level, const std::string& correlation_id, const nlohmann::json& fields) const;

private:
    struct Job;
    void worker_loop();
    void run_job(Job& job);
    std::shared_ptr<const ModelRegistryEntry> require_model(const std::string& id) const;

    ServiceConfig cfg_;
    std::ostream* log_;
    mutable std::mutex log_mutex_;
    ModelRegistry registry_;

    mutable std::mutex jobs_mutex_;
    mutable std::condition_variable jobs_cv_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
    std::deque<std::shared_ptr<Job>> queue_;
    std::atomic<long> job_counter_{0};
    bool stopping_ = false;
    std::thread worker_;
};

// JSON helpers shared by the service and the CLI.
Vector encode_covariates(const FieldSchema& schema, const nlohmann::json& covariates);
nlohmann::json risk_curve_json(const RiskCurve& curve);

}  // namespace qrgmm
