#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "mqr/study.hpp"

using namespace mqr;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& suffix, const std::string& content = "") {
        path = std::string(std::tmpnam(nullptr)) + suffix;
        if (!content.empty()) {
            std::ofstream out(path);
            out << content;
        }
    }
    ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string write_dataset_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    for (int j = 0; j < data.p(); ++j) out << (j ? "," : "") << "y" << j + 1;
    for (int s = 1; s < data.k(); ++s) out << ",x" << s;
    out << "\n";
    out.precision(17);
    for (int i = 0; i < data.n(); ++i) {
        for (int j = 0; j < data.p(); ++j) out << (j ? "," : "") << data.responses(i, j);
        for (int s = 1; s < data.k(); ++s) out << "," << data.design(i, s);
        out << "\n";
    }
    return path;
}

Dataset small_dataset(int n, Rng& rng) {
    Matrix beta(2, 3);
    beta << 0.5, 1.0, -0.7,
            1.5, -0.4, 0.2;
    Vector delta(2);
    delta << 0.5, 0.8;
    Matrix psi = Matrix::Identity(2, 2);
    psi(0, 1) = psi(1, 0) = 0.4;
    const Vector tau = (Vector(2) << 0.75, 0.25).finished();
    return testutil::mal_dataset(n, beta, delta, psi, build_spec(tau), rng);
}

}  // namespace

TEST_CASE("fit happy path writes a parseable JSON report") {
    Rng rng(61);
    const Dataset data = small_dataset(150, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    TempFile out(".json");

    const int code = run_cli({"fit", "--data", csv.path, "--responses", "2", "--tau",
                              "0.75,0.25", "--out", out.path});
    CHECK(code == 0);
    const auto report = nlohmann::json::parse(slurp(out.path));
    CHECK(report.contains("params"));
    CHECK(report["tau"][0] == 0.75);
    CHECK(report["params"]["beta"].size() == 2);
}

TEST_CASE("format text emits the plain-text table") {
    Rng rng(62);
    const Dataset data = small_dataset(100, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    TempFile out(".txt");
    const int code = run_cli({"fit", "--data", csv.path, "--responses", "2", "--format",
                              "text", "--out", out.path});
    CHECK(code == 0);
    const std::string text = slurp(out.path);
    CHECK(text.find("beta") != std::string::npos);
    CHECK(text.find("converged") != std::string::npos);
}

TEST_CASE("input errors exit with code 2") {
    TempFile bad(".csv", "y,x\n1.0,oops\n");
    TempFile out(".json");
    CHECK(run_cli({"fit", "--data", bad.path, "--responses", "1", "--out", out.path}) ==
          2);
    CHECK(run_cli({"fit", "--data", "/nonexistent.csv", "--responses", "1"}) == 2);
    CHECK(run_cli({"fit", "--bogus-flag"}) == 2);
    CHECK(run_cli({}) == 2);

    Rng rng(63);
    const Dataset data = small_dataset(40, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    CHECK(run_cli({"fit", "--data", csv.path, "--responses", "2", "--tau", "0.5"}) == 2);
    CHECK(run_cli({"simulate", "--preset", "no-such-preset"}) == 2);
    CHECK(run_cli({"simulate", "--family", "cauchy"}) == 2);
}

TEST_CASE("preset families are routed to the matching subcommand") {
    CHECK(run_cli({"simulate", "--preset", "table3-panelA-normal", "--reps", "2"}) == 2);
    CHECK(run_cli({"tpr-study", "--preset", "table1-panelA", "--reps", "1"}) == 2);
}

TEST_CASE("config file supplies defaults and CLI flags override it") {
    Rng rng(64);
    const Dataset data = small_dataset(120, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    TempFile cfg(".json", "{\"max-iter\": 2, \"fit\": {\"responses\": 2}}");
    TempFile out(".json");

    const int code = run_cli(
        {"--config", cfg.path, "fit", "--data", csv.path, "--out", out.path});
    CHECK(code == 0);
    const auto capped = nlohmann::json::parse(slurp(out.path));
    CHECK(capped["iterations"] == 2);
    CHECK(capped["converged"] == false);

    const int code2 = run_cli({"--config", cfg.path, "--max-iter", "400", "fit", "--data",
                               csv.path, "--out", out.path});
    CHECK(code2 == 0);
    const auto full = nlohmann::json::parse(slurp(out.path));
    CHECK(full["iterations"].get<int>() > 2);

    TempFile bad_cfg(".json", "{not json");
    CHECK(run_cli({"--config", bad_cfg.path, "fit", "--data", csv.path}) == 2);
}

TEST_CASE("simulate is byte-identical under a fixed seed") {
    TempFile out1(".json"), out2(".json");
    const std::vector<std::string> base = {"simulate", "--preset", "table1-panelA",
                                           "--reps",   "2",        "--n",
                                           "200",      "--seed",   "7"};
    auto with_out = [&](const std::string& path) {
        auto args = base;
        args.push_back("--out");
        args.push_back(path);
        return args;
    };
    CHECK(run_cli(with_out(out1.path)) == 0);
    CHECK(run_cli(with_out(out2.path)) == 0);
    const std::string a = slurp(out1.path), b = slurp(out2.path);
    CHECK(!a.empty());
    CHECK(a == b);
    const auto report = nlohmann::json::parse(a);
    CHECK(report["replications"] == 2);
}

TEST_CASE("lasso with a fixed lambda and with cross-validation") {
    Rng rng(65);
    const Dataset data = small_dataset(80, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    TempFile out(".json");

    CHECK(run_cli({"lasso", "--data", csv.path, "--responses", "2", "--lambda", "5.0",
                   "--out", out.path}) == 0);
    const auto fixed = nlohmann::json::parse(slurp(out.path));
    CHECK(fixed.contains("params"));

    CHECK(run_cli({"lasso", "--data", csv.path, "--responses", "2", "--folds", "3",
                   "--grid-size", "4", "--grid-ratio", "0.1", "--seed", "11", "--out",
                   out.path}) == 0);
    const auto cv = nlohmann::json::parse(slurp(out.path));
    CHECK(cv.contains("lambda_grid"));
    CHECK(cv.contains("mean_scores"));
}

TEST_CASE("bootstrap subcommand smoke") {
    Rng rng(66);
    const Dataset data = small_dataset(100, rng);
    TempFile csv(".csv");
    write_dataset_csv(data, csv.path);
    TempFile out(".json");
    CHECK(run_cli({"bootstrap", "--data", csv.path, "--responses", "2", "--reps", "3",
                   "--seed", "4", "--out", out.path}) == 0);
    const auto report = nlohmann::json::parse(slurp(out.path));
    CHECK(report["resamples"] == 3);
    CHECK(report["se"].size() == 2);
}

TEST_CASE("tpr-study single-replication smoke") {
    TempFile out(".json");
    const int code = run_cli({"tpr-study", "--preset", "table3-panelA-normal", "--reps",
                              "1", "--n", "300", "--folds", "4", "--grid-size", "5",
                              "--grid-ratio", "0.1", "--seed", "3", "--out", out.path});
    CHECK(code == 0);
    const auto report = nlohmann::json::parse(slurp(out.path));
    REQUIRE(report["tpr_pct"].size() == 6);
    for (const auto& v : report["tpr_pct"])
        CHECK((v.get<double>() == 0.0 || v.get<double>() == 100.0));
}
