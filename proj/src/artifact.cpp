#include "qrgmm/artifact.hpp"

#include "qrgmm/deepfm.hpp"
#include "qrgmm/quantreg.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace qrgmm {

using nlohmann::json;

namespace {

json vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector to_vector(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json linear_body(const LinearQuantileModel& m) {
    json levels = json::array();
    for (const auto& l : m.report().levels)
        levels.push_back({{"tau", l.tau}, {"loss", l.loss}, {"iterations", l.iterations}, {"pivots", l.pivots},
                          {"converged", l.converged}, {"message", l.message}});
    // beta row by row, (m-1) x p
    const RowMatrix beta = m.beta();
    return {{"intercept", vec(m.intercept())},
            {"beta", std::vector<double>(beta.data(), beta.data() + beta.size())},
            {"fit_report", levels}};
}

std::unique_ptr<QuantileModel> linear_from(const FieldSchema& schema, int m, const json& body) {
    const Vector intercept = to_vector(body.at("intercept"));
    const auto b = body.at("beta").get<std::vector<double>>();
    const Eigen::Index rows = m - 1, cols = schema.width();
    if (intercept.size() != rows || static_cast<Eigen::Index>(b.size()) != rows * cols)
        throw DataError("artifact coefficient shapes do not match schema and m");
    const Matrix beta = Eigen::Map<const RowMatrix>(b.data(), rows, cols);
    FitReport report;
    for (const auto& l : body.value("fit_report", json::array())) {
        LevelFit f;
        f.tau = l.at("tau").get<double>();
        f.loss = l.at("loss").get<double>();
        f.iterations = l.at("iterations").get<int>();
        f.pivots = l.at("pivots").get<int>();
        f.converged = l.at("converged").get<bool>();
        f.message = l.at("message").get<std::string>();
        report.levels.push_back(std::move(f));
    }
    return std::make_unique<LinearQuantileModel>(schema, QuantileGrid(m), intercept, beta, std::move(report));
}

json deepfm_body(const DeepFmQuantileModel& m) {
    const auto& c = m.config();
    const auto& s = m.scaling();
    const auto& r = m.train_report();
    return {{"config",
             {{"embed_dim", c.embed_dim},
              {"hidden_sizes", c.hidden_sizes},
              {"activation", c.activation},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"optimizer", c.optimizer},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"smoothing", c.smoothing},
              {"use_deep", c.use_deep},
              {"use_interactions", c.use_interactions},
              {"init_bias_from_quantiles", c.init_bias_from_quantiles},
              {"standardize_response", c.standardize_response},
              {"standardize_features", c.standardize_features},
              {"embed_init_sd", c.embed_init_sd},
              {"seed", c.seed}}},
            {"scaling",
             {{"cont_mean", vec(s.cont_mean)}, {"cont_sd", vec(s.cont_sd)}, {"y_mean", s.y_mean}, {"y_scale", s.y_scale}}},
            {"parameters", vec(m.parameters())},
            {"train_report",
             {{"initial_loss", r.initial_loss},
              {"epoch_loss", r.epoch_loss},
              {"increases", r.increases},
              {"steps", r.steps},
              {"status", r.status}}}};
}

std::unique_ptr<QuantileModel> deepfm_from(const FieldSchema& schema, int m, const json& body) {
    const json& jc = body.at("config");
    DeepFmConfig c;
    c.embed_dim = jc.at("embed_dim").get<int>();
    c.hidden_sizes = jc.at("hidden_sizes").get<std::vector<int>>();
    c.activation = jc.at("activation").get<std::string>();
    c.epochs = jc.at("epochs").get<int>();
    c.batch_size = jc.at("batch_size").get<int>();
    c.learning_rate = jc.at("learning_rate").get<double>();
    c.optimizer = jc.at("optimizer").get<std::string>();
    c.weight_decay = jc.at("weight_decay").get<double>();
    c.beta1 = jc.at("beta1").get<double>();
    c.beta2 = jc.at("beta2").get<double>();
    c.epsilon = jc.at("epsilon").get<double>();
    c.smoothing = jc.at("smoothing").get<double>();
    c.use_deep = jc.at("use_deep").get<bool>();
    c.use_interactions = jc.at("use_interactions").get<bool>();
    c.init_bias_from_quantiles = jc.at("init_bias_from_quantiles").get<bool>();
    c.standardize_response = jc.at("standardize_response").get<bool>();
    c.standardize_features = jc.at("standardize_features").get<bool>();
    c.embed_init_sd = jc.at("embed_init_sd").get<double>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    const json& js = body.at("scaling");
    FeatureScaling s;
    s.cont_mean = to_vector(js.at("cont_mean"));
    s.cont_sd = to_vector(js.at("cont_sd"));
    s.y_mean = js.at("y_mean").get<double>();
    s.y_scale = js.at("y_scale").get<double>();
    auto model = std::make_unique<DeepFmQuantileModel>(schema, QuantileGrid(m), c, s);
    model->set_parameters(to_vector(body.at("parameters")));
    const json& jr = body.at("train_report");
    DeepFmTrainReport r;
    r.initial_loss = jr.at("initial_loss").get<double>();
    r.epoch_loss = jr.at("epoch_loss").get<std::vector<double>>();
    r.increases = jr.at("increases").get<int>();
    r.steps = jr.at("steps").get<long>();
    r.status = jr.at("status").get<std::string>();
    model->set_train_report(std::move(r));
    return model;
}

}  // namespace

json schema_to_json(const FieldSchema& schema) {
    json fields = json::array();
    for (const auto& f : schema.fields()) {
        json e{{"name", f.name}, {"kind", f.is_categorical() ? "categorical" : "continuous"}};
        if (f.is_categorical()) e["levels"] = f.levels;
        fields.push_back(std::move(e));
    }
    return {{"fields", fields}, {"width", schema.width()}};
}

FieldSchema schema_from_json(const json& j) {
    std::vector<Field> fields;
    for (const auto& e : j.at("fields")) {
        const auto kind = e.at("kind").get<std::string>();
        const auto name = e.at("name").get<std::string>();
        if (kind == "categorical") {
            fields.push_back(categorical_field(name, e.at("levels").get<std::vector<std::string>>()));
        } else if (kind == "continuous") {
            fields.push_back(continuous_field(name));
        } else {
            throw SchemaError("unknown field kind '" + kind + "'");
        }
    }
    return FieldSchema(std::move(fields));
}

json model_to_json(const QuantileModel& model, const json& meta) {
    json j{{"format", kArtifactFormat},
           {"version", kArtifactVersion},
           {"kind", model.kind()},
           {"schema", schema_to_json(model.schema())},
           {"m", model.m()},
           {"meta", meta}};
    if (const auto* lin = dynamic_cast<const LinearQuantileModel*>(&model)) {
        j["model"] = linear_body(*lin);
    } else if (const auto* net = dynamic_cast<const DeepFmQuantileModel*>(&model)) {
        j["model"] = deepfm_body(*net);
    } else {
        throw UnsupportedError("model kind '" + model.kind() + "' cannot be serialized");
    }
    return j;
}

std::unique_ptr<QuantileModel> model_from_json(const json& j) {
    try {
        if (j.at("format").get<std::string>() != kArtifactFormat) throw DataError("not a qrgmm model artifact");
        const int version = j.at("version").get<int>();
        if (version != kArtifactVersion)
            throw DataError("unsupported artifact version " + std::to_string(version));
        const FieldSchema schema = schema_from_json(j.at("schema"));
        const int m = j.at("m").get<int>();
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "linear") return linear_from(schema, m, j.at("model"));
        if (kind == "deepfm") return deepfm_from(schema, m, j.at("model"));
        throw DataError("unknown model kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed model artifact: ") + e.what());
    }
}

std::string model_id(const json& artifact) {
    json body = artifact;
    body.erase("meta");
    const std::string s = body.dump();
    return hex64(fnv1a(s.data(), s.size()));
}

std::string model_id(const QuantileModel& model) { return model_id(model_to_json(model)); }

void save_model(const QuantileModel& model, const std::string& path, const json& meta) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    // Write then rename so readers never see a partial file.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write '" + tmp + "'");
        out << model_to_json(model, meta).dump();
        if (!out) throw DataError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, p);
}

std::unique_ptr<QuantileModel> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open model artifact '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw DataError("model artifact '" + path + "' is not valid JSON: " + e.what());
    }
    return model_from_json(j);
}

}  // namespace qrgmm
