#include "doctest.h"
#include "oracles.hpp"
#include "qrgmm/datagen.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

using namespace qrgmm;

namespace {

FmLocationScaleParams flat_params(int p, double w0, double r0) {
    FmLocationScaleParams prm;
    prm.w0 = w0;
    prm.r0 = r0;
    prm.w = Vector::Zero(p);
    prm.rvec = Vector::Zero(p);
    prm.V = Matrix::Zero(p, 2);
    prm.Z = Matrix::Zero(p, 2);
    return prm;
}

FieldSchema small_schema() {
    return FieldSchema({categorical_field("shop", 4), categorical_field("item", 3), continuous_field("price")});
}

}  // namespace

TEST_CASE("schema layout and validation") {
    const FieldSchema s = small_schema();
    CHECK(s.width() == 8);
    CHECK(s.offset(1) == 4);
    CHECK(s.offset(2) == 7);
    CHECK_THROWS_AS(FieldSchema({continuous_field("a"), continuous_field("a")}), SchemaError);
    CHECK_THROWS_AS(FieldSchema({categorical_field("a", 1)}), SchemaError);
    CHECK_THROWS_AS(s.level_index(0, "zz"), UnseenLevelError);
    const Vector x = s.encode({{"shop", "2"}, {"item", "0"}, {"price", "0.5"}});
    CHECK(x[2] == 1.0);
    CHECK(x[4] == 1.0);
    CHECK(x[7] == 0.5);
    CHECK(x.sum() == doctest::Approx(2.5));
}

TEST_CASE("paper covariate layout has 410 columns") {
    const FieldSchema s = synthetic_layout();
    CHECK(s.width() == 410);
    const auto prm = draw_params(s, {}, 11);
    const Dataset d = synth_generate(prm, s, 150000, 12);
    CHECK(d.size() == 150000);
    CHECK(d.width() == 410);
    CHECK(d.design().cols() == 410);
}

TEST_CASE("degenerate scale is rejected") {
    const FieldSchema s({continuous_field("c")});
    CHECK_THROWS_AS(synth_generate(flat_params(1, 5.0, 0.0), s, 10, 1), ParameterError);
    CHECK_THROWS_AS(synth_generate(flat_params(1, 5.0, -1.0), s, 10, 1), ParameterError);
}

TEST_CASE("draw_params gives up after max attempts") {
    SynthConfig cfg;
    cfg.r0 = -1e9;
    cfg.max_attempts = 3;
    CHECK_THROWS_AS(draw_params(small_schema(), cfg, 1), ParameterError);
}

TEST_CASE("sample mean matches log-normal moments") {
    const FieldSchema s({continuous_field("c")});
    const long n = 1000000;
    const Dataset d = synth_generate(flat_params(1, 5.0, 1.0), s, n, 3);
    const double expected = 5.0 + std::exp(0.5);
    const double sd = std::sqrt((std::exp(1.0) - 1.0) * std::exp(1.0));
    CHECK(std::abs(d.response().mean() - expected) <= 3.0 * sd / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("true conditional quantile") {
    const FieldSchema s = small_schema();
    const auto prm = draw_params(s, {}, 5);
    const Vector x = s.encode({{"shop", "1"}, {"item", "2"}, {"price", "0.3"}});
    const double loc = location(prm, x), sc = scale(prm, x);
    CHECK(sc > 0.0);
    CHECK(true_conditional_quantile(prm, x, 0.5) == doctest::Approx(loc + sc).epsilon(1e-15));
    // Phi(1) = 0.841344746068543 (independent table value).
    CHECK(std::abs(true_conditional_quantile(prm, x, 0.841344746068543) - (loc + sc * std::exp(1.0))) <= 1e-9);
    CHECK_THROWS_AS(true_conditional_quantile(prm, x, 0.0), DomainError);
    CHECK_THROWS_AS(true_conditional_quantile(prm, x, 1.0), DomainError);

    const FieldSchema c({continuous_field("c")});
    CHECK(true_conditional_quantile(flat_params(1, 0.0, 1.0), Vector::Zero(1), 0.5) == doctest::Approx(1.0));
}

TEST_CASE("fm_value matches the pairwise double loop") {
    Rng rng = make_rng(9);
    std::normal_distribution<double> N;
    for (int trial = 0; trial < 20; ++trial) {
        const int p = 12, k = 4;
        Matrix V(p, k);
        Vector w(p), x(p);
        for (int i = 0; i < p; ++i) {
            w[i] = N(rng);
            x[i] = (trial % 2) ? N(rng) : (uniform01(rng) < 0.3 ? 1.0 : 0.0);
            for (int f = 0; f < k; ++f) V(i, f) = N(rng);
        }
        const double expected = 0.7 + w.dot(x) + oracle::fm_pairs_double_loop(V, x);
        CHECK(std::abs(fm_value(0.7, w, V, x) - expected) <= 1e-10 * (1.0 + std::abs(expected)));
    }
}

TEST_CASE("synthetic data is seed-reproducible and one-hot valid") {
    const FieldSchema s = small_schema();
    const auto prm = draw_params(s, {}, 21);
    const Dataset a = synth_generate(prm, s, 500, 4);
    const Dataset b = synth_generate(prm, s, 500, 4);
    const Dataset c = synth_generate(prm, s, 500, 5);
    CHECK(a.response() == b.response());
    CHECK(a.levels() == b.levels());
    CHECK(a.continuous() == b.continuous());
    CHECK(a.response() != c.response());
    const RowMatrix X = a.dense();
    for (long i = 0; i < a.size(); ++i) {
        CHECK(X.row(i).segment(0, 4).sum() == 1.0);
        CHECK(X.row(i).segment(4, 3).sum() == 1.0);
    }
    CHECK(draw_params(s, {}, 21).w == prm.w);
}

TEST_CASE("truth draws match the inverted quantile function") {
    const FieldSchema s = small_schema();
    const auto prm = draw_params(s, {}, 8);
    const Vector x = s.encode({{"shop", "3"}, {"item", "1"}, {"price", "0.9"}});
    const Vector draws = sample_truth(prm, x, 1000000, 77);
    const double loc = location(prm, x), sc = scale(prm, x);
    auto F = [&](double y) { return y <= loc ? 0.0 : normal_cdf(std::log((y - loc) / sc)); };
    const double ks = oracle::ks_one_sample(std::vector<double>(draws.data(), draws.data() + draws.size()), F, F);
    CHECK(ks <= 0.002);
}

TEST_CASE("csv ingest shapes and errors") {
    SchemaConfig cfg;
    cfg.fields = {Field{"color", FieldKind::categorical, {}}, continuous_field("size")};
    cfg.response_column = "sales";
    const auto res = csv_ingest_text("color,size,sales\nred,1.5,10\nblue,2,20\nred,3,5\n", cfg);
    CHECK(res.data.size() == 3);
    CHECK(res.data.width() == 3);
    CHECK(res.data.schema().field(0).levels == std::vector<std::string>{"red", "blue"});

    try {
        csv_ingest_text("color,size,sales\nred,1.5,10\nblue,big,20\n", cfg);
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(e.row() == 2);
        CHECK(e.column() == "size");
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
        CHECK(std::string(e.what()).find("size") != std::string::npos);
    }

    IngestOptions lenient;
    lenient.strict = false;
    const auto skip = csv_ingest_text("color,size,sales\nred,1.5,10\ngreen,big,20\nblue,2,-1\nblue,2,4\n", cfg, lenient);
    CHECK(skip.data.size() == 2);
    CHECK(skip.rejected_rows == 2);
    CHECK(skip.diagnostics.size() == 2);
    // A rejected row never contributes levels.
    CHECK(skip.data.schema().field(0).levels == std::vector<std::string>{"red", "blue"});

    SchemaConfig fixed = cfg;
    fixed.fields[0].levels = {"red", "blue"};
    CHECK_THROWS_AS(csv_ingest_text("color,size,sales\npink,1,1\n", fixed), UnseenLevelError);
    CHECK_THROWS_AS(csv_ingest_text("colour,size,sales\nred,1,1\n", cfg), SchemaError);
}

TEST_CASE("csv parser handles quotes, CRLF and BOM") {
    const auto t = parse_csv("\xEF\xBB\xBF" "a,b\r\n\"x,1\",\"say \"\"hi\"\"\"\r\n", ',');
    REQUIRE(t.size() == 2);
    CHECK(t[0][0] == "a");
    CHECK(t[1][0] == "x,1");
    CHECK(t[1][1] == "say \"hi\"");
}

TEST_CASE("Big Mart shaped table ingests all rows") {
    std::ostringstream csv;
    csv << "Item_Identifier;Outlet_Identifier;Item_MRP;Item_Visibility;Item_Outlet_Sales\n";
    Rng rng = make_rng(2);
    for (int i = 0; i < 8523; ++i) {
        csv << "FD" << (i % 1559) << ";OUT0" << (i * 7 % 10) << ";" << 30 + 200 * uniform01(rng) << ";"
            << 0.2 * uniform01(rng) << ";" << 5000 * uniform01(rng) << "\n";
    }
    const auto cfg = parse_schema_config(
        "delimiter = ;\nresponse = Item_Outlet_Sales\nfield = Item_Identifier categorical\n"
        "field = Outlet_Identifier categorical\nfield = Item_MRP continuous\nfield = Item_Visibility continuous\n");
    const auto res = csv_ingest_text(csv.str(), cfg);
    CHECK(res.data.size() == 8523);
    CHECK(res.data.schema().field(0).cardinality() == 1559);
    CHECK(res.data.schema().field(1).cardinality() == 10);
    CHECK(res.data.width() == 1559 + 10 + 2);
}

TEST_CASE("schema config round trip") {
    SchemaConfig cfg = to_config(small_schema(), "sales", ';');
    const SchemaConfig back = parse_schema_config(format_schema_config(cfg));
    CHECK(back.response_column == "sales");
    CHECK(back.delimiter == ';');
    CHECK(resolve_schema(back) == small_schema());
}

TEST_CASE("csv export round trip") {
    const FieldSchema s = small_schema();
    const auto prm = draw_params(s, {}, 3);
    const Dataset d = synth_generate(prm, s, 50, 9);
    const auto back = csv_ingest_text(csv_format(d, "sales"), to_config(s, "sales"));
    CHECK(back.data.response() == d.response());
    CHECK(back.data.levels() == d.levels());
    CHECK(back.data.continuous() == d.continuous());
}

TEST_CASE("split indices partition the rows") {
    const auto [tr, te] = split_indices(1000, 0.8, 3);
    CHECK(tr.size() == 800);
    CHECK(te.size() == 200);
    std::vector<long> all(tr);
    all.insert(all.end(), te.begin(), te.end());
    std::sort(all.begin(), all.end());
    for (long i = 0; i < 1000; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
}
