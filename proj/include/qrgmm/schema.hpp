#pragma once

#include "qrgmm/core.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qrgmm {

enum class FieldKind { categorical, continuous };

struct Field {
    std::string name;
    FieldKind kind = FieldKind::continuous;
    // Level dictionary for categorical fields; index = one-hot position.
    std::vector<std::string> levels;

    int cardinality() const { return kind == FieldKind::categorical ? static_cast<int>(levels.size()) : 1; }
    bool is_categorical() const { return kind == FieldKind::categorical; }
};

Field categorical_field(std::string name, int cardinality);
Field categorical_field(std::string name, std::vector<std::string> levels);
Field continuous_field(std::string name);

// Ordered list of fields and their one-hot column layout. Immutable.
class FieldSchema {
public:
    FieldSchema() = default;
    explicit FieldSchema(std::vector<Field> fields);

    const std::vector<Field>& fields() const { return fields_; }
    std::size_t size() const { return fields_.size(); }
    const Field& field(std::size_t i) const { return fields_.at(i); }

    // One-hot expansion width: sum of cardinalities + continuous count.
    int width() const { return width_; }
    int offset(std::size_t field_index) const { return offsets_.at(field_index); }
    int categorical_count() const { return n_categorical_; }
    int continuous_count() const { return static_cast<int>(fields_.size()) - n_categorical_; }

    std::optional<std::size_t> find(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;  // throws SchemaError
    int level_index(std::size_t field_index, const std::string& label) const;  // throws UnseenLevelError

    // Encode a by-name assignment (categorical labels or numeric strings).
    Vector encode(const std::map<std::string, std::string>& assignment) const;

    bool operator==(const FieldSchema& other) const;

private:
    std::vector<Field> fields_;
    std::vector<int> offsets_;
    int width_ = 0;
    int n_categorical_ = 0;
};

// Covariates are held compactly: one level index per categorical field and
// one value per continuous field, so one-hot validity holds by construction.
// `row(i)` and `design()` expand to the one-hot layout on demand.
class Dataset {
public:
    Dataset() = default;
    Dataset(FieldSchema schema, Eigen::MatrixXi levels, Matrix continuous, Vector response);

    const FieldSchema& schema() const { return schema_; }
    long size() const { return response_.size(); }
    int width() const { return schema_.width(); }

    const Eigen::MatrixXi& levels() const { return levels_; }
    const Matrix& continuous() const { return continuous_; }
    const Vector& response() const { return response_; }

    Vector row(long i) const;
    SparseRows design() const;
    RowMatrix dense() const;

    Dataset subset(const std::vector<long>& rows) const;

private:
    FieldSchema schema_;
    Eigen::MatrixXi levels_;   // n x categorical_count
    Matrix continuous_;        // n x continuous_count
    Vector response_;
};

// Split indices 0..n-1 into (train, test) with train fraction `ratio`.
std::pair<std::vector<long>, std::vector<long>> split_indices(long n, double ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Schema config file: line-oriented `key = value`, '#' comments.
//   delimiter = ,
//   response  = sales
//   field     = product categorical 100
//   field     = price continuous
//   levels.product = a,b,c
// ---------------------------------------------------------------------------
// Categorical fields declared without levels or cardinality get their
// dictionary from the data at ingest time.
struct SchemaConfig {
    std::vector<Field> fields;
    std::string response_column = "y";
    char delimiter = ',';
};

SchemaConfig parse_schema_config(const std::string& text);
SchemaConfig load_schema_config(const std::string& path);
std::string format_schema_config(const SchemaConfig& cfg);
SchemaConfig to_config(const FieldSchema& schema, std::string response_column, char delimiter = ',');
// Strict conversion; every categorical field must already carry its levels.
FieldSchema resolve_schema(const SchemaConfig& cfg);

}  // namespace qrgmm
