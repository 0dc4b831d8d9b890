#include "doctest.h"

#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Workdir {
    fs::path dir;
    Workdir() {
        dir = fs::temp_directory_path() / ("qrgmm_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workdir() { fs::remove_all(dir); }
    std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args) {
    const std::string cmd = std::string(QRGMM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    FAIL("missing column " << name);
    return 0;
}

const char* kX = "-x product=0 seller=1 c1=0.5 c2=0.2";

}  // namespace

TEST_CASE("synth, fit, generate and risk from the command line") {
    Workdir w;
    REQUIRE(run("synth --layout 5 7 2 -n 50 --seed 3 -o " + w / "d.csv") == 0);
    CHECK(fs::exists(w / "d.csv.schema"));
    CHECK(fs::exists(w / "d.csv.meta.json"));
    CHECK(read_csv(w / "d.csv").size() == 51);

    REQUIRE(run("fit --csv " + w / "d.csv" + " --schema " + w / "d.csv.schema" + " -m 5 -o " + w / "m.json") == 0);
    const auto artifact = nlohmann::json::parse(slurp(w / "m.json"));
    CHECK(artifact.at("format") == "qrgmm-model");
    CHECK(artifact.at("m") == 5);
    const auto report = nlohmann::json::parse(slurp(w / "m.json.fit_report.json"));
    CHECK(report.is_object());
    const auto meta = nlohmann::json::parse(slurp(w / "m.json.meta.json"));
    CHECK(meta.at("command") == "fit");
    CHECK(meta.contains("version"));
    CHECK(meta.contains("rng"));

    REQUIRE(run("generate --model " + w / "m.json" + " " + kX + " -K 200 --seed 4 -o " + w / "g.csv") == 0);
    const auto g = read_csv(w / "g.csv");
    CHECK(g.size() == 201);
    CHECK(g[0][0] == "y");

    REQUIRE(run("risk --model " + w / "m.json" + " " + kX + " -r 1.2 --points 40 --loss one -o " + w / "r.csv") == 0);
    CHECK(fs::exists(w / "r.csv.json"));
    const auto rows = read_csv(w / "r.csv");
    REQUIRE(rows.size() == 41);
    const auto i1 = column(rows[0], "r1"), i3 = column(rows[0], "r3");
    double prev = -1.0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const double r1 = std::stod(rows[i][i1]);
        CHECK(std::stod(rows[i][i3]) == r1);
        CHECK(r1 >= prev);
        prev = r1;
    }
}

TEST_CASE("small eval writes every table") {
    Workdir w;
    REQUIRE(run("eval -n 1000 --layout 4 5 2 --replications 2 -K 1000 --seed 1 -o " + w / "ev") == 0);
    for (const char* f : {"report.json", "summary.csv", "replications.csv", "histograms.csv", "calibration.csv"})
        CHECK(fs::exists(w / (std::string("ev/") + f)));
    const auto t = read_csv(w / "ev/summary.csv");
    REQUIRE(t.size() == 3);
    CHECK(t[1][0] == "reference");
    CHECK(t[2][0] == "linear");
    CHECK(read_csv(w / "ev/replications.csv").size() == 5);
}

TEST_CASE("exit codes") {
    Workdir w;
    CHECK(run("") == 2);
    CHECK(run("--help") == 0);
    CHECK(run("fit --csv nowhere.csv") == 2);
    REQUIRE(run("synth --layout 3 3 1 -n 60 -o " + w / "d.csv") == 0);
    const std::string data = " --csv " + w / "d.csv" + " --schema " + w / "d.csv.schema";
    CHECK(run("fit" + data + " -m 1 -o " + w / "z.json") == 2);

    std::ofstream(w / "bad.csv") << "product,seller,c1,y\n1,1,abc,3\n";
    CHECK(run("fit --csv " + w / "bad.csv" + " --schema " + w / "d.csv.schema" + " -o " + w / "z.json") == 3);

    REQUIRE(run("fit" + data + " -m 4 -o " + w / "m.json") == 0);
    CHECK(run("risk --model " + w / "m.json" + " -x product=7 seller=0 c1=0.1 -r 1.1 -o " + w / "r.csv") == 3);

    CHECK(run("fit" + data + " --kind deepfm --optimizer sgd --learning-rate 1e7 --epochs 20 -o " + w / "f.json") == 4);
    CHECK_FALSE(fs::exists(w / "f.json"));
}
