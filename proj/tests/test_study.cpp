#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "mqr/study.hpp"

using namespace mqr;

namespace {

struct TempCsv {
    std::string path;
    explicit TempCsv(const std::string& content) {
        path = std::string(std::tmpnam(nullptr)) + ".csv";
        std::ofstream out(path);
        out << content;
    }
    ~TempCsv() { std::remove(path.c_str()); }
};

Matrix sample_errors(const DgpConfig& config, int n, std::uint64_t seed) {
    DgpConfig c = config;
    c.n = n;
    Rng rng = rng_for(seed, 0);
    const Dataset data = simulate_dataset(c, rng);
    return data.responses - data.design * c.beta_true.transpose();
}

}  // namespace

TEST_CASE("splitmix64 matches the reference sequence") {
    // first outputs of the published SplitMix64 generator seeded with 0 and 42
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFULL);
    CHECK(splitmix64(42) == 13679457532755275413ULL);
    CHECK(splitmix64(1) != splitmix64(2));
}

TEST_CASE("rng_for streams are deterministic and distinct") {
    Rng a = rng_for(7, 3), b = rng_for(7, 3), c = rng_for(7, 4);
    CHECK(a() == b());
    Rng a2 = rng_for(7, 3);
    CHECK(a2() != c());
}

TEST_CASE("presets encode the published true parameters") {
    const DgpConfig a = preset_table1('A', ErrorFamily::Normal, 1);
    CHECK(a.n == 1000);
    Matrix beta(3, 3);
    beta << -0.382, -0.372, 0.715,
             1.993,  0.650, 0.764,
             0.670,  1.079, 0.584;
    CHECK((a.beta_true - beta).cwiseAbs().maxCoeff() == 0.0);
    Vector delta(3);
    delta << 0.13, 0.30, 0.23;
    CHECK((a.delta_true - delta).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.psi_true(0, 1) == 0.5);
    CHECK(a.psi_true(0, 2) == 0.3);
    CHECK(a.psi_true(1, 2) == 0.4);
    CHECK((a.tau_levels.array() == 0.5).all());

    const DgpConfig b = preset_table1('B', ErrorFamily::Normal, 1);
    CHECK(b.tau_levels[0] == 0.25);
    CHECK(b.tau_levels[2] == 0.75);
    const DgpConfig c = preset_table1('C', ErrorFamily::StudentT, 1);
    CHECK(c.tau_levels[0] == 0.10);
    CHECK(c.tau_levels[2] == 0.90);
    CHECK(c.t_dof == 3);
    CHECK_THROWS_AS(preset_table1('D', ErrorFamily::Normal, 1), std::domain_error);

    const DgpConfig t3 = preset_table3(Vector::Constant(3, 0.5), ErrorFamily::Normal, 1);
    CHECK(t3.beta_true.cols() == 5);
    for (const auto& [j, s] : table3_zero_coords()) CHECK(t3.beta_true(j, s) == 0.0);
    CHECK(t3.beta_true(0, 0) == -0.382);
    CHECK(t3.beta_true(2, 3) == 1.079);
}

TEST_CASE("simulate_dataset is deterministic and validates psi") {
    const DgpConfig c = preset_table1('A', ErrorFamily::StudentT, 9);
    Rng r1 = rng_for(c.seed, 0), r2 = rng_for(c.seed, 0);
    const Dataset d1 = simulate_dataset(c, r1);
    const Dataset d2 = simulate_dataset(c, r2);
    CHECK((d1.responses - d2.responses).cwiseAbs().maxCoeff() == 0.0);
    CHECK((d1.design - d2.design).cwiseAbs().maxCoeff() == 0.0);
    CHECK((d1.design.col(0).array() == 1.0).all());

    DgpConfig bad = c;
    bad.psi_true(0, 1) = 2.0;
    Rng r3(1);
    CHECK_THROWS(simulate_dataset(bad, r3));
    DgpConfig mismatched = c;
    mismatched.delta_true = Vector::Ones(2);
    CHECK_THROWS_AS(simulate_dataset(mismatched, r3), std::domain_error);
}

TEST_CASE("normal error family has the stated covariance and quantile centring") {
    const DgpConfig c = preset_table1('B', ErrorFamily::Normal, 17);
    const int n = 1000000;
    const Matrix eps = sample_errors(c, n, 17);

    const QuantileSpec spec = build_spec(c.tau_levels);
    const Matrix d = c.delta_true.asDiagonal();
    const Vector dxi = d * spec.skew;
    const Matrix cov = dxi * dxi.transpose() + d * spec.sigma_tilde(c.psi_true) * d;

    const Matrix centered = eps.rowwise() - eps.colwise().mean();
    const Matrix sample_cov = centered.transpose() * centered / (n - 1.0);
    for (int j = 0; j < 3; ++j)
        for (int m = 0; m < 3; ++m) {
            const double se =
                std::sqrt((cov(j, j) * cov(m, m) + cov(j, m) * cov(j, m)) / n);
            CHECK(std::fabs(sample_cov(j, m) - cov(j, m)) < 4.0 * se);
        }

    for (int j = 0; j < 3; ++j) {
        const double frac = (eps.col(j).array() < 0.0).cast<double>().mean();
        CHECK(std::fabs(frac - c.tau_levels[j]) < 0.005);
    }
}

TEST_CASE("t error family is centred at the tau quantiles") {
    const DgpConfig c = preset_table1('C', ErrorFamily::StudentT, 23);
    const Matrix eps = sample_errors(c, 1000000, 23);
    for (int j = 0; j < 3; ++j) {
        const double frac = (eps.col(j).array() < 0.0).cast<double>().mean();
        CHECK(std::fabs(frac - c.tau_levels[j]) < 0.005);
    }
}

TEST_CASE("run_monte_carlo smoke run, determinism and RMSE consistency") {
    DgpConfig c = preset_table1('A', ErrorFamily::Normal, 3);
    c.n = 250;
    const QuantileSpec spec = build_spec(c.tau_levels);
    const McSummary s = run_monte_carlo(c, 2, spec);
    CHECK(s.B == 2);
    CHECK(s.mean_joint.rows() == 3);
    CHECK(s.mean_joint.cols() == 3);
    CHECK(s.mean_uni.rows() == 3);
    CHECK(s.rmse_uni.cols() == 3);

    const McSummary again = run_monte_carlo(c, 2, spec);
    CHECK((s.mean_joint - again.mean_joint).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s.rmse_uni - again.rmse_uni).cwiseAbs().maxCoeff() == 0.0);

    // RMSE^2 - bias^2 = variance >= 0 (bias here in raw units)
    for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
            const double raw_bias = s.mean_joint(j, k) - c.beta_true(j, k);
            CHECK(s.rmse_joint(j, k) * s.rmse_joint(j, k) - raw_bias * raw_bias >=
                  -1e-12);
        }
    CHECK_THROWS_AS(run_monte_carlo(c, 1, spec), std::domain_error);
}

TEST_CASE("run_tpr_study single-replication smoke") {
    DgpConfig c = preset_table3(Vector::Constant(3, 0.5), ErrorFamily::Normal, 5);
    c.n = 300;
    TprOptions o;
    o.grid_size = 6;
    o.grid_ratio = 0.1;
    o.folds = 4;
    const TprSummary s = run_tpr_study(c, 1, o);
    REQUIRE(s.tpr.size() == 6);
    for (int i = 0; i < 6; ++i) CHECK((s.tpr[i] == 0.0 || s.tpr[i] == 100.0));
    CHECK(s.zero_coords == table3_zero_coords());

    DgpConfig bad = c;
    bad.beta_true(0, 1) = 0.2;  // designated zero not zero
    CHECK_THROWS_AS(run_tpr_study(bad, 1, o), std::domain_error);
}

TEST_CASE("bootstrap determinism and manual resample replication") {
    Rng rng(31);
    Matrix beta(2, 3);
    beta << 0.5, 1.0, -0.7,
            1.5, -0.4, 0.2;
    Vector delta(2);
    delta << 0.5, 0.8;
    Matrix psi = Matrix::Identity(2, 2);
    psi(0, 1) = psi(1, 0) = 0.4;
    const Vector tau = (Vector(2) << 0.3, 0.6).finished();
    const QuantileSpec spec = build_spec(tau);
    const Dataset data = testutil::mal_dataset(200, beta, delta, psi, spec, rng);

    const std::uint64_t seed = 77;
    const FitOptions opts;
    const BootstrapResult r1 = bootstrap_se(data, spec, 5, opts, seed);
    const BootstrapResult r2 = bootstrap_se(data, spec, 5, opts, seed);
    CHECK((r1.se - r2.se).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r1.replicates - r2.replicates).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r1.se.array() >= 0.0).all());
    CHECK(r1.replicates.rows() + r1.excluded == 5);

    // replicate the first two resamples by hand from the seeding contract
    REQUIRE(r1.excluded == 0);
    for (int b = 0; b < 2; ++b) {
        Rng stream = rng_for(seed, b);
        std::uniform_int_distribution<int> pick(0, data.n() - 1);
        Dataset resample;
        resample.responses.resize(data.n(), data.p());
        resample.design.resize(data.n(), data.k());
        for (int i = 0; i < data.n(); ++i) {
            const int r = pick(stream);
            resample.responses.row(i) = data.responses.row(r);
            resample.design.row(i) = data.design.row(r);
        }
        const FitResult fit = fit_em(resample, spec, opts);
        for (int j = 0; j < data.p(); ++j)
            for (int s = 0; s < data.k(); ++s)
                CHECK(r1.replicates(b, j * data.k() + s) == fit.params.beta(j, s));
    }

    CHECK_THROWS_AS(bootstrap_se(data, spec, 1, opts, seed), std::domain_error);
}

TEST_CASE("bootstrap index stream is uniform (chi-square at 1%)") {
    // the per-resample index stream: rng_for(seed, b) driving uniform_int(0, n-1)
    const int n = 10, B = 10000;
    Vector counts = Vector::Zero(n);
    for (int b = 0; b < B; ++b) {
        Rng rng = rng_for(1234, b);
        std::uniform_int_distribution<int> pick(0, n - 1);
        for (int i = 0; i < n; ++i) counts[pick(rng)] += 1.0;
    }
    const double expected = double(B * n) / n;
    double chi2 = 0.0;
    for (int i = 0; i < n; ++i)
        chi2 += (counts[i] - expected) * (counts[i] - expected) / expected;
    CHECK(chi2 < 21.666);  // chi-square(9) 1% critical value
}

TEST_CASE("bootstrap SE tracks the Monte-Carlo sd and shrinks with n") {
    DgpConfig c = preset_table1('A', ErrorFamily::Normal, 41);
    c.n = 400;
    const QuantileSpec spec = build_spec(c.tau_levels);
    const int B = 60;
    const McSummary mc = run_monte_carlo(c, B, spec);

    Rng rng = rng_for(c.seed, 999);
    const Dataset data = simulate_dataset(c, rng);
    const BootstrapResult boot = bootstrap_se(data, spec, B, {}, 314);
    for (int j = 0; j < 3; ++j)
        for (int s = 0; s < 3; ++s) {
            CHECK(boot.se(j, s) <= 1.5 * mc.sd_joint(j, s));
            CHECK(boot.se(j, s) >= mc.sd_joint(j, s) / 1.5);
        }

    DgpConfig big = c;
    big.n = 800;
    Rng rng2 = rng_for(c.seed, 1000);
    const Dataset data2 = simulate_dataset(big, rng2);
    const BootstrapResult boot2 = bootstrap_se(data2, spec, B, {}, 314);
    double ratio_sum = 0.0;
    for (int j = 0; j < 3; ++j)
        for (int s = 0; s < 3; ++s) ratio_sum += boot.se(j, s) / boot2.se(j, s);
    const double avg_ratio = ratio_sum / 9.0;
    CHECK(avg_ratio >= 1.2);
    CHECK(avg_ratio <= 1.7);
}

TEST_CASE("load_csv happy path") {
    TempCsv csv("y1,y2,x1,x2\n1.0,2.0,0.5,-1.5\n3.5,-0.25,1e-2,4\n");
    const Dataset d = load_csv(csv.path, 2);
    CHECK(d.n() == 2);
    CHECK(d.p() == 2);
    CHECK(d.k() == 3);
    CHECK((d.design.col(0).array() == 1.0).all());
    CHECK(d.responses(1, 1) == -0.25);
    CHECK(d.design(1, 1) == 1e-2);

    const Dataset raw = load_csv(csv.path, 2, false);
    CHECK(raw.k() == 2);
    CHECK(raw.design(0, 0) == 0.5);
}

TEST_CASE("load_csv error diagnostics") {
    CHECK_THROWS_WITH_AS(load_csv("/nonexistent/file.csv", 1),
                         doctest::Contains("cannot open"), CsvError);
    TempCsv empty("");
    CHECK_THROWS_WITH_AS(load_csv(empty.path, 1), doctest::Contains("empty file"),
                         CsvError);
    TempCsv short_row("y,x\n1.0,2.0\n3.0\n");
    CHECK_THROWS_WITH_AS(load_csv(short_row.path, 1),
                         doctest::Contains("line 3: expected 2 fields, got 1"), CsvError);
    TempCsv bad_field("y,x\n1.0,abc\n");
    CHECK_THROWS_WITH_AS(load_csv(bad_field.path, 1),
                         doctest::Contains("line 2: field 2 is not numeric: 'abc'"),
                         CsvError);
    TempCsv ok("y,x\n1.0,2.0\n");
    CHECK_THROWS_WITH_AS(load_csv(ok.path, 2), doctest::Contains("--responses"), CsvError);
    TempCsv headers_only("y,x\n");
    CHECK_THROWS_WITH_AS(load_csv(headers_only.path, 1), doctest::Contains("no data rows"),
                         CsvError);
}

TEST_CASE("reports are valid JSON with the documented keys") {
    Rng rng(51);
    Matrix beta(2, 2);
    beta << 0.5, 1.0, -0.2, 0.8;
    Vector delta(2);
    delta << 0.5, 0.7;
    const Matrix psi = Matrix::Identity(2, 2);
    const Vector tau = (Vector(2) << 0.4, 0.6).finished();
    const QuantileSpec spec = build_spec(tau);
    const Dataset data = testutil::mal_dataset(120, beta, delta, psi, spec, rng);

    const FitResult fit = fit_em(data, spec);
    const auto parsed = nlohmann::json::parse(fit_report_json(fit, spec));
    CHECK(parsed.contains("params"));
    CHECK(parsed["params"].contains("beta"));
    CHECK(parsed["params"]["beta"].size() == 2);
    CHECK(parsed.contains("converged"));
    CHECK(fit_report_text(fit, spec).find("tau") != std::string::npos);

    DgpConfig c = preset_table1('A', ErrorFamily::Normal, 3);
    c.n = 250;
    const McSummary mc = run_monte_carlo(c, 2, build_spec(c.tau_levels));
    const auto mc_parsed = nlohmann::json::parse(mc_report_json(mc));
    CHECK(mc_parsed.contains("joint"));
    CHECK(mc_parsed.contains("univariate"));

    const BootstrapResult boot = bootstrap_se(data, spec, 3, {}, 8);
    const auto b_parsed = nlohmann::json::parse(bootstrap_report_json(boot));
    CHECK(b_parsed.contains("se"));

    // byte-identical JSON under a fixed seed
    const BootstrapResult boot2 = bootstrap_se(data, spec, 3, {}, 8);
    CHECK(bootstrap_report_json(boot) == bootstrap_report_json(boot2));
}
