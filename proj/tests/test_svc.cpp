#include "doctest.h"
#include "qrgmm/artifact.hpp"
#include "qrgmm/datagen.hpp"
#include "qrgmm/deepfm.hpp"
#include "qrgmm/http.hpp"
#include "qrgmm/quantreg.hpp"
#include "qrgmm/svc.hpp"

#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <sstream>
#include <thread>

using namespace qrgmm;
using nlohmann::json;

namespace {

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("qrgmm-test-" + name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

FieldSchema small_schema() {
    return FieldSchema({categorical_field("store", std::vector<std::string>{"north", "south", "east"}),
                        continuous_field("price")});
}

Dataset small_data(long n, std::uint64_t seed) {
    const FieldSchema s = small_schema();
    const auto prm = draw_params(s, {}, seed);
    return synth_generate(prm, s, n, seed + 1);
}

const char* kSchemaText = "response = sales\nfield = store categorical\nfield = price continuous\n";

std::string csv_text(long n, std::uint64_t seed) {
    const Dataset d = small_data(n, seed);
    std::ostringstream out;
    out << "store,price,sales\n";
    for (long i = 0; i < n; ++i) {
        const auto& levels = d.schema().field(0).levels;
        out << levels[static_cast<std::size_t>(d.levels()(i, 0))] << ',' << d.continuous()(i, 0) << ','
            << d.response()[i] << '\n';
    }
    return out.str();
}

// Server on an ephemeral port for the lifetime of the fixture.
struct LiveServer {
    Service svc;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit LiveServer(ServiceConfig cfg) : svc(std::move(cfg)) {
        mount_routes(server, svc);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LiveServer() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(60, 0);
        return c;
    }
};

json post(httplib::Client& c, const std::string& path, const json& body, int expect) {
    auto res = c.Post(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect);
    CHECK(res->has_header("X-Correlation-Id"));
    return json::parse(res->body);
}

}  // namespace

TEST_CASE("linear artifact round trip is bit-exact") {
    const Dataset d = small_data(400, 3);
    const auto model = fit_grid(d, QuantileGrid(12));
    const std::string dir = temp_dir("artifact");
    const std::string path = dir + "/m.json";
    save_model(model, path, {{"note", "x"}});
    const auto loaded = load_model(path);
    CHECK(loaded->kind() == "linear");
    CHECK(loaded->schema() == model.schema());
    CHECK(model_id(*loaded) == model_id(model));
    for (long i = 0; i < 50; ++i) CHECK(loaded->raw_quantiles(d.row(i)) == model.raw_quantiles(d.row(i)));
    // Meta does not enter the id.
    CHECK(model_id(model_to_json(model, {{"a", 1}})) == model_id(model_to_json(model)));
}

TEST_CASE("deepfm artifact round trip is bit-exact") {
    const Dataset d = small_data(300, 5);
    DeepFmConfig cfg;
    cfg.epochs = 2;
    cfg.hidden_sizes = {8, 4};
    cfg.activation = "tanh";
    const auto net = train_deepfm(d, QuantileGrid(9), cfg);
    const json j = model_to_json(net);
    const auto back = model_from_json(json::parse(j.dump()));
    CHECK(back->kind() == "deepfm");
    const auto& b = dynamic_cast<const DeepFmQuantileModel&>(*back);
    CHECK(b.parameters() == net.parameters());
    CHECK(b.train_report().epoch_loss == net.train_report().epoch_loss);
    CHECK(b.config().hidden_sizes == cfg.hidden_sizes);
    for (long i = 0; i < 50; ++i) CHECK(back->raw_quantiles(d.row(i)) == net.raw_quantiles(d.row(i)));
    CHECK(model_id(*back) == model_id(net));
}

TEST_CASE("malformed artifacts are data errors") {
    json j = model_to_json(fit_grid(small_data(100, 7), QuantileGrid(5)));
    json bad = j;
    bad["version"] = 99;
    CHECK_THROWS_AS(model_from_json(bad), DataError);
    bad = j;
    bad["format"] = "other";
    CHECK_THROWS_AS(model_from_json(bad), DataError);
    bad = j;
    bad["model"]["beta"] = json::array({1.0});
    CHECK_THROWS_AS(model_from_json(bad), DataError);
    bad = j;
    bad["model"].erase("intercept");
    CHECK_THROWS_AS(model_from_json(bad), DataError);
    CHECK_THROWS_AS(load_model("/nonexistent/model.json"), DataError);
}

TEST_CASE("service config precedence") {
    const std::string file = "port = 9000\nhost = 0.0.0.0  # all interfaces\nsync_rows = 10\n";
    std::map<std::string, std::string> env{{"QRGMM_PORT", "9100"}, {"QRGMM_MODEL_DIR", "/tmp/env-models"}};
    auto getenv = [&](const std::string& k) -> std::optional<std::string> {
        auto it = env.find(k);
        return it == env.end() ? std::nullopt : std::optional<std::string>(it->second);
    };
    ServiceConfig c = resolve_service_config(file, getenv, {});
    CHECK(c.port == 9100);
    CHECK(c.host == "0.0.0.0");
    CHECK(c.model_dir == "/tmp/env-models");
    CHECK(c.sync_rows == 10);
    c = resolve_service_config(file, getenv, {{"port", "9200"}, {"sync_rows", "5"}});
    CHECK(c.port == 9200);
    CHECK(c.sync_rows == 5);
    c = resolve_service_config("", nullptr, {});
    CHECK(c.port == 8080);
    CHECK_THROWS_AS(resolve_service_config("bogus = 1\n", nullptr, {}), ParameterError);
    CHECK_THROWS_AS(resolve_service_config("port = abc\n", nullptr, {}), ParameterError);
    CHECK_THROWS_AS(resolve_service_config("port\n", nullptr, {}), ParameterError);
}

TEST_CASE("error mapping") {
    auto status = [](auto ex) { return to_api_error(std::make_exception_ptr(ex)).status; };
    CHECK(status(UnseenLevelError("store", "west")) == 422);
    CHECK(status(DataError("bad row", 3, "price")) == 400);
    CHECK(status(DomainError("x")) == 400);
    CHECK(status(SchemaError("x")) == 400);
    CHECK(status(std::runtime_error("boom")) == 500);
    CHECK(to_api_error(std::make_exception_ptr(UnseenLevelError("store", "west"))).field == "store");
}

TEST_CASE("http api end to end") {
    ServiceConfig cfg;
    cfg.model_dir = temp_dir("svc");
    cfg.sync_rows = 100;
    std::string model;
    {
        LiveServer live(cfg);
        auto c = live.client();

        auto h = c.Get("/health");
        REQUIRE(h);
        CHECK(h->status == 200);
        CHECK(json::parse(h->body).at("version") == kVersion);

        // 50-row CSV with m = 5 fits synchronously.
        const json fit{{"dataset", {{"csv", csv_text(50, 11)}, {"schema", kSchemaText}}}, {"model", {{"kind", "linear"}, {"m", 5}}}};
        const json done = post(c, "/models", fit, 201);
        CHECK(done.at("status") == "succeeded");
        model = done.at("model_id").get<std::string>();

        auto meta = c.Get("/models/" + model);
        REQUIRE(meta);
        CHECK(meta->status == 200);
        const json mj = json::parse(meta->body);
        CHECK(mj.at("m") == 5);
        CHECK(mj.at("kind") == "linear");
        CHECK(mj.at("schema").at("fields").at(0).at("levels").size() == 3);
        CHECK(std::filesystem::exists(mj.at("artifact_path").get<std::string>()));

        auto missing = c.Get("/models/ffffffffffffffff");
        REQUIRE(missing);
        CHECK(missing->status == 404);
        const json mb = json::parse(missing->body);
        CHECK(mb.at("error").at("correlation_id") == missing->get_header_value("X-Correlation-Id"));

        // Risk curve with automatic l_bar.
        const json q{{"covariates", {{"store", "south"}, {"price", 0.4}}}, {"r", 1.5}};
        const json curve = post(c, "/models/" + model + "/risk-curve", q, 200);
        CHECK(curve.at("points").size() == 100);
        CHECK(curve.at("model_id") == model);
        CHECK(curve.at("estimator") == "closed-form");
        double prev = -1.0;
        for (const auto& p : curve.at("points")) {
            CHECK(p.at("r1").get<double>() >= prev);
            prev = p.at("r1").get<double>();
        }
        CHECK(post(c, "/models/" + model + "/risk-curve", q, 200).dump() == curve.dump());

        json q1 = q;
        q1["loss"] = "one";
        const json with_one = post(c, "/models/" + model + "/risk-curve", q1, 200);
        for (std::size_t i = 0; i < 100; ++i)
            CHECK(with_one.at("points").at(i).at("r3") == curve.at("points").at(i).at("r1"));

        json mc = q;
        mc["estimator"] = "monte-carlo";
        mc["K"] = 20000;
        mc["seed"] = 4;
        mc["xi"] = 10.0;
        const json mcurve = post(c, "/models/" + model + "/risk-curve", mc, 200);
        CHECK(mcurve.at("seed") == 4);
        CHECK(mcurve.at("K") == 20000);
        CHECK(mcurve.at("points").at(50).contains("exceed_prob"));

        // Errors.
        json unseen = q;
        unseen["covariates"]["store"] = "west";
        const json e422 = post(c, "/models/" + model + "/risk-curve", unseen, 422);
        CHECK(e422.at("error").at("field") == "store");
        json incomplete = q;
        incomplete["covariates"].erase("price");
        post(c, "/models/" + model + "/risk-curve", incomplete, 400);
        json no_r = q;
        no_r.erase("r");
        post(c, "/models/" + model + "/risk-curve", no_r, 400);
        json neg_r = q;
        neg_r["r"] = -1.0;
        post(c, "/models/" + model + "/risk-curve", neg_r, 400);
        auto bad = c.Post("/models/" + model + "/samples", "{not json", "application/json");
        REQUIRE(bad);
        CHECK(bad->status == 400);
        post(c, "/models", json{{"dataset", {{"csv", "store,price,sales\nnorth,x,1\n"}, {"schema", kSchemaText}}}}, 400);

        // Samples: K = 1e5 well inside a second, deterministic in the seed.
        const json sq{{"covariates", {{"store", "north"}, {"price", 0.2}}}, {"K", 100000}, {"seed", 9}};
        const auto t0 = std::chrono::steady_clock::now();
        const json s1 = post(c, "/models/" + model + "/samples", sq, 200);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        MESSAGE("samples K=1e5 round trip " << secs << " s");
        CHECK(secs < 1.0);
        CHECK(s1.at("samples").size() == 100000);
        CHECK(s1.at("seed") == 9);
        CHECK(post(c, "/models/" + model + "/samples", sq, 200).at("samples") == s1.at("samples"));

        // Asynchronous fit and duplicate detection.
        const json big{{"dataset", {{"synthetic", {{"n", 3000}, {"seed", 1}, {"products", 5}, {"sellers", 7}, {"continuous", 2}}}}},
                       {"model", {{"kind", "linear"}}}};
        const json queued = post(c, "/models", big, 202);
        const std::string job = queued.at("job_id");
        post(c, "/models", big, 409);
        live.svc.wait(job);
        auto jr = c.Get("/jobs/" + job);
        REQUIRE(jr);
        const json jj = json::parse(jr->body);
        CHECK(jj.at("status") == "succeeded");
        auto listing = c.Get("/models");
        REQUIRE(listing);
        CHECK(json::parse(listing->body).at("models").size() == 2);
        auto nojob = c.Get("/jobs/job-999");
        REQUIRE(nojob);
        CHECK(nojob->status == 404);
    }
    // A fresh service on the same directory serves the persisted models.
    Service again(cfg);
    CHECK(again.registry().list().size() == 2);
    const json q{{"covariates", {{"store", "south"}, {"price", 0.4}}}, {"r", 1.5}};
    const Response r = again.risk_curve(model, q);
    CHECK(r.status == 200);
    CHECK(r.body.at("points").size() == 100);
}

TEST_CASE("deepfm jobs run in the background") {
    ServiceConfig cfg;
    cfg.model_dir.clear();
    Service svc(cfg);
    const json body{{"dataset", {{"csv", csv_text(200, 21)}, {"schema", kSchemaText}}},
                    {"model", {{"kind", "deepfm"}, {"m", 6}, {"seed", 3}, {"deepfm", {{"epochs", 2}, {"hidden_sizes", {4}}}}}}};
    const Response r = svc.submit_fit(body);
    CHECK(r.status == 202);
    svc.wait(r.body.at("job_id"));
    const json j = svc.job(r.body.at("job_id")).body;
    CHECK(j.at("status") == "succeeded");
    CHECK(svc.model(j.at("model_id")).body.at("kind") == "deepfm");
    json bad = body;
    bad["model"]["deepfm"]["learning_rate"] = -1.0;
    CHECK_THROWS_AS(svc.submit_fit(bad), ParameterError);
}
