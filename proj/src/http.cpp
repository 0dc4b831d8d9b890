#include "qrgmm/http.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <csignal>

namespace qrgmm {

using nlohmann::json;

namespace {

std::atomic<httplib::Server*> g_server{nullptr};

std::string new_correlation_id() {
    static std::atomic<std::uint64_t> counter{0};
    static const std::uint64_t salt =
        static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
    return hex64(splitmix64(salt ^ (counter.fetch_add(1) * 0x9E3779B97F4A7C15ULL)));
}

template <typename F>
void handle(Service& svc, const httplib::Request& req, httplib::Response& res, F&& f) {
    const std::string cid = req.has_header("X-Correlation-Id") ? req.get_header_value("X-Correlation-Id") : new_correlation_id();
    res.set_header("X-Correlation-Id", cid);
    const auto t0 = std::chrono::steady_clock::now();
    int status = 500;
    try {
        Response r = f();
        status = r.status;
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    } catch (...) {
        const ApiError e = to_api_error(std::current_exception());
        status = e.status;
        json err{{"code", e.code}, {"message", e.what()}, {"correlation_id", cid}};
        if (!e.field.empty()) err["field"] = e.field;
        res.status = e.status;
        res.set_content(json{{"error", err}}.dump(), "application/json");
        svc.log(e.status >= 500 ? "error" : "warn", cid, {{"event", "request_failed"}, {"code", e.code}, {"message", e.what()}});
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    svc.log("info", cid, {{"event", "request"}, {"method", req.method}, {"path", req.path}, {"status", status}, {"ms", ms}});
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw ApiError(400, "bad_json", std::string("request body is not valid JSON: ") + e.what());
    }
}

}  // namespace

void mount_routes(httplib::Server& server, Service& svc) {
    server.Get("/health", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.health(); });
    });
    server.Post("/models", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.submit_fit(parse_body(req)); });
    });
    server.Get("/models", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.list_models(); });
    });
    server.Get(R"(/jobs/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.job(req.matches[1]); });
    });
    server.Get(R"(/models/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.model(req.matches[1]); });
    });
    server.Post(R"(/models/([^/]+)/samples)", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.samples(req.matches[1], parse_body(req)); });
    });
    server.Post(R"(/models/([^/]+)/risk-curve)", [&svc](const httplib::Request& req, httplib::Response& res) {
        handle(svc, req, res, [&] { return svc.risk_curve(req.matches[1], parse_body(req)); });
    });
    if (!svc.config().static_dir.empty()) server.set_mount_point("/ui", svc.config().static_dir);
}

int run_server(Service& svc) {
    httplib::Server server;
    mount_routes(server, svc);
    g_server = &server;
    std::signal(SIGINT, [](int) { stop_server(); });
    std::signal(SIGTERM, [](int) { stop_server(); });
    const auto& cfg = svc.config();
    svc.log("info", "-", {{"event", "listening"}, {"host", cfg.host}, {"port", cfg.port}});
    const bool ok = server.listen(cfg.host, cfg.port);
    g_server = nullptr;
    return ok ? 0 : 1;
}

void stop_server() {
    if (auto* s = g_server.load()) s->stop();
}

}  // namespace qrgmm
