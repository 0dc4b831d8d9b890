#include "qrgmm/schema.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace qrgmm {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

double parse_double(const std::string& text, bool& ok) {
    const std::string t = trim(text);
    double v = 0.0;
    const auto* first = t.data();
    const auto* last = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    ok = !t.empty() && ec == std::errc() && ptr == last && std::isfinite(v);
    return v;
}

}  // namespace

Field categorical_field(std::string name, int cardinality) {
    Field f{std::move(name), FieldKind::categorical, {}};
    for (int i = 0; i < cardinality; ++i) f.levels.push_back(std::to_string(i));
    return f;
}

Field categorical_field(std::string name, std::vector<std::string> levels) {
    return Field{std::move(name), FieldKind::categorical, std::move(levels)};
}

Field continuous_field(std::string name) { return Field{std::move(name), FieldKind::continuous, {}}; }

FieldSchema::FieldSchema(std::vector<Field> fields) : fields_(std::move(fields)) {
    std::set<std::string> names;
    for (const auto& f : fields_) {
        if (f.name.empty()) throw SchemaError("field names must be nonempty");
        if (!names.insert(f.name).second) throw SchemaError("duplicate field name '" + f.name + "'");
        if (f.is_categorical()) {
            if (f.levels.size() < 2) {
                throw SchemaError("categorical field '" + f.name + "' needs cardinality >= 2");
            }
            std::set<std::string> lv(f.levels.begin(), f.levels.end());
            if (lv.size() != f.levels.size()) {
                throw SchemaError("categorical field '" + f.name + "' has duplicate levels");
            }
            ++n_categorical_;
        }
        offsets_.push_back(width_);
        width_ += f.cardinality();
    }
}

std::optional<std::size_t> FieldSchema::find(const std::string& name) const {
    for (std::size_t i = 0; i < fields_.size(); ++i) {
        if (fields_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t FieldSchema::index_of(const std::string& name) const {
    if (auto i = find(name)) return *i;
    throw SchemaError("unknown field '" + name + "'");
}

int FieldSchema::level_index(std::size_t field_index, const std::string& label) const {
    const auto& f = field(field_index);
    const auto it = std::find(f.levels.begin(), f.levels.end(), label);
    if (it == f.levels.end()) throw UnseenLevelError(f.name, label);
    return static_cast<int>(it - f.levels.begin());
}

Vector FieldSchema::encode(const std::map<std::string, std::string>& assignment) const {
    for (const auto& [name, value] : assignment) {
        if (!find(name)) throw SchemaError("unknown field '" + name + "'");
    }
    Vector x = Vector::Zero(width_);
    for (std::size_t i = 0; i < fields_.size(); ++i) {
        const auto& f = fields_[i];
        const auto it = assignment.find(f.name);
        if (it == assignment.end()) throw SchemaError("missing covariate '" + f.name + "'");
        if (f.is_categorical()) {
            x[offsets_[i] + level_index(i, it->second)] = 1.0;
        } else {
            bool ok = false;
            x[offsets_[i]] = parse_double(it->second, ok);
            if (!ok) throw SchemaError("covariate '" + f.name + "' is not a finite number: '" + it->second + "'");
        }
    }
    return x;
}

bool FieldSchema::operator==(const FieldSchema& other) const {
    if (fields_.size() != other.fields_.size()) return false;
    for (std::size_t i = 0; i < fields_.size(); ++i) {
        const auto& a = fields_[i];
        const auto& b = other.fields_[i];
        if (a.name != b.name || a.kind != b.kind || a.levels != b.levels) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

Dataset::Dataset(FieldSchema schema, Eigen::MatrixXi levels, Matrix continuous, Vector response)
    : schema_(std::move(schema)), levels_(std::move(levels)), continuous_(std::move(continuous)),
      response_(std::move(response)) {
    const long n = response_.size();
    if (n < 1) throw DataError("dataset must contain at least one row");
    if (levels_.rows() != n || levels_.cols() != schema_.categorical_count()) {
        throw DataError("categorical level matrix has wrong shape");
    }
    if (continuous_.rows() != n || continuous_.cols() != schema_.continuous_count()) {
        throw DataError("continuous matrix has wrong shape");
    }
    int c = 0;
    for (std::size_t f = 0; f < schema_.size(); ++f) {
        if (!schema_.field(f).is_categorical()) continue;
        const int card = schema_.field(f).cardinality();
        for (long i = 0; i < n; ++i) {
            if (levels_(i, c) < 0 || levels_(i, c) >= card) {
                throw DataError("level index out of range", i, schema_.field(f).name);
            }
        }
        ++c;
    }
    if (!continuous_.allFinite()) throw DataError("non-finite continuous covariate");
    if (!response_.allFinite()) throw DataError("non-finite response");
}

Vector Dataset::row(long i) const {
    Vector x = Vector::Zero(schema_.width());
    int c = 0, k = 0;
    for (std::size_t f = 0; f < schema_.size(); ++f) {
        if (schema_.field(f).is_categorical()) {
            x[schema_.offset(f) + levels_(i, c++)] = 1.0;
        } else {
            x[schema_.offset(f)] = continuous_(i, k++);
        }
    }
    return x;
}

SparseRows Dataset::design() const {
    const long n = size();
    SparseRows X(n, schema_.width());
    X.reserve(Eigen::VectorXi::Constant(n, static_cast<int>(schema_.size())));
    for (long i = 0; i < n; ++i) {
        int c = 0, k = 0;
        for (std::size_t f = 0; f < schema_.size(); ++f) {
            if (schema_.field(f).is_categorical()) {
                X.insert(i, schema_.offset(f) + levels_(i, c++)) = 1.0;
            } else {
                X.insert(i, schema_.offset(f)) = continuous_(i, k++);
            }
        }
    }
    X.makeCompressed();
    return X;
}

RowMatrix Dataset::dense() const {
    RowMatrix X(size(), width());
    for (long i = 0; i < size(); ++i) X.row(i) = row(i).transpose();
    return X;
}

Dataset Dataset::subset(const std::vector<long>& rows) const {
    Eigen::MatrixXi lv(static_cast<long>(rows.size()), levels_.cols());
    Matrix ct(static_cast<long>(rows.size()), continuous_.cols());
    Vector y(static_cast<long>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const long i = rows[k];
        if (i < 0 || i >= size()) throw DomainError("subset row index out of range");
        lv.row(static_cast<long>(k)) = levels_.row(i);
        ct.row(static_cast<long>(k)) = continuous_.row(i);
        y[static_cast<long>(k)] = response_[i];
    }
    return Dataset(schema_, std::move(lv), std::move(ct), std::move(y));
}

std::pair<std::vector<long>, std::vector<long>> split_indices(long n, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("split ratio must lie in (0, 1)");
    std::vector<long> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0L);
    Rng rng = make_rng(seed, 0x5917);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    std::vector<long> train(idx.begin(), idx.begin() + static_cast<long>(n_train));
    std::vector<long> test(idx.begin() + static_cast<long>(n_train), idx.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

SchemaConfig parse_schema_config(const std::string& text) {
    SchemaConfig cfg;
    std::map<std::string, std::vector<std::string>> level_lists;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        // A '#' immediately after '=' is a literal delimiter value.
        std::string body = line;
        if (hash != std::string::npos) {
            const auto eq = line.find('=');
            const bool literal = eq != std::string::npos && hash > eq && trim(line.substr(eq + 1, hash - eq - 1)).empty() &&
                                 trim(line.substr(0, eq)) == "delimiter";
            if (!literal) body = line.substr(0, hash);
        }
        body = trim(body);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw SchemaError("schema config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        if (key == "delimiter") {
            if (value == "tab" || value == "\\t") {
                cfg.delimiter = '\t';
            } else if (value.size() == 1) {
                cfg.delimiter = value[0];
            } else {
                throw SchemaError("schema config line " + std::to_string(lineno) + ": delimiter must be one character");
            }
        } else if (key == "response") {
            cfg.response_column = value;
        } else if (key == "field") {
            const auto tok = split_ws(value);
            if (tok.size() < 2) {
                throw SchemaError("schema config line " + std::to_string(lineno) + ": field = <name> <kind> [cardinality]");
            }
            if (tok[1] == "continuous") {
                cfg.fields.push_back(continuous_field(tok[0]));
            } else if (tok[1] == "categorical") {
                int card = 0;
                if (tok.size() > 2) card = std::stoi(tok[2]);
                if (tok.size() > 2 && card < 2) {
                    throw SchemaError("schema config line " + std::to_string(lineno) + ": cardinality must be >= 2");
                }
                cfg.fields.push_back(categorical_field(tok[0], card));
            } else {
                throw SchemaError("schema config line " + std::to_string(lineno) + ": unknown field kind '" + tok[1] + "'");
            }
        } else if (key.rfind("levels.", 0) == 0) {
            std::vector<std::string> levels;
            std::string cur;
            std::istringstream lv(value);
            while (std::getline(lv, cur, ',')) levels.push_back(trim(cur));
            level_lists[key.substr(7)] = std::move(levels);
        } else {
            throw SchemaError("schema config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    for (auto& [name, levels] : level_lists) {
        auto it = std::find_if(cfg.fields.begin(), cfg.fields.end(), [&](const Field& f) { return f.name == name; });
        if (it == cfg.fields.end() || !it->is_categorical()) {
            throw SchemaError("levels given for unknown categorical field '" + name + "'");
        }
        if (!it->levels.empty() && it->levels.size() != levels.size()) {
            throw SchemaError("levels list for '" + name + "' disagrees with declared cardinality");
        }
        it->levels = std::move(levels);
    }
    return cfg;
}

SchemaConfig load_schema_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open schema config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_schema_config(ss.str());
}

std::string format_schema_config(const SchemaConfig& cfg) {
    std::ostringstream out;
    if (cfg.delimiter == '\t') {
        out << "delimiter = tab\n";
    } else {
        out << "delimiter = " << cfg.delimiter << "\n";
    }
    out << "response = " << cfg.response_column << "\n";
    for (const auto& f : cfg.fields) {
        out << "field = " << f.name << (f.is_categorical() ? " categorical" : " continuous");
        if (f.is_categorical() && !f.levels.empty()) out << " " << f.levels.size();
        out << "\n";
    }
    for (const auto& f : cfg.fields) {
        if (!f.is_categorical() || f.levels.empty()) continue;
        out << "levels." << f.name << " = ";
        for (std::size_t i = 0; i < f.levels.size(); ++i) out << (i ? "," : "") << f.levels[i];
        out << "\n";
    }
    return out.str();
}

SchemaConfig to_config(const FieldSchema& schema, std::string response_column, char delimiter) {
    return SchemaConfig{schema.fields(), std::move(response_column), delimiter};
}

FieldSchema resolve_schema(const SchemaConfig& cfg) { return FieldSchema(cfg.fields); }

}  // namespace qrgmm
