#include "mqr/study.hpp"

#include "mqr/baseline_uqr.hpp"

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_integration.h>
#include <gsl/gsl_randist.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mqr {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng rng_for(std::uint64_t master_seed, std::uint64_t stream) {
    return Rng(splitmix64(master_seed ^ splitmix64(stream)));
}

void set_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

namespace {

struct NctParams {
    double c, loc, sd, dof;
};

double nct_cdf_integrand(double x, void* raw) {
    const auto* p = static_cast<const NctParams*>(raw);
    // P(S (loc + sd Z) < c | chi2 = x), S = sqrt(dof / x)
    return gsl_cdf_ugaussian_P((p->c * std::sqrt(x / p->dof) - p->loc) / p->sd) *
           gsl_ran_chisq_pdf(x, p->dof);
}

// tau-quantile of S (loc + sd Z) with S = sqrt(dof / chi2_dof): the marginal of
// the noncentral multivariate t used by the Student-t error family.
double noncentral_t_quantile(double tau, double loc, double sd, double dof) {
    gsl_integration_workspace* ws = gsl_integration_workspace_alloc(512);
    NctParams p{0.0, loc, sd, dof};
    gsl_function f{&nct_cdf_integrand, &p};
    auto cdf = [&](double c) {
        p.c = c;
        double value = 0.0, abserr = 0.0;
        gsl_integration_qagiu(&f, 0.0, 1e-10, 1e-10, 512, ws, &value, &abserr);
        return value;
    };
    double lo = -1.0, hi = 1.0;
    while (cdf(lo) > tau) lo *= 2.0;
    while (cdf(hi) < tau) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::fabs(lo)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (cdf(mid) < tau ? lo : hi) = mid;
    }
    gsl_integration_workspace_free(ws);
    return 0.5 * (lo + hi);
}

}  // namespace

Dataset simulate_dataset(const DgpConfig& config, Rng& rng) {
    const int p = static_cast<int>(config.tau_levels.size());
    const int k = static_cast<int>(config.beta_true.cols());
    if (config.beta_true.rows() != p || config.delta_true.size() != p)
        throw std::domain_error("simulate_dataset: inconsistent config dimensions");
    validate_correlation(config.psi_true);
    const QuantileSpec spec = build_spec(config.tau_levels);

    std::normal_distribution<double> stdnorm(0.0, 1.0);
    Matrix x(config.n, k);
    x.col(0).setOnes();
    for (int i = 0; i < config.n; ++i)
        for (int s = 1; s < k; ++s) x(i, s) = stdnorm(rng);

    const Matrix d = config.delta_true.asDiagonal();
    const Matrix sigma = spec.sigma_tilde(config.psi_true);
    const Vector skew_loc = d * spec.skew;  // D xi
    const Matrix dsd = d * sigma * d;       // D Sigma D

    Matrix eps(config.n, p);
    Vector z(p);
    // Each error marginal is recentred at its theoretical tau_j-quantile so
    // that the true coefficients are the conditional-quantile coefficients.
    if (config.error_family == ErrorFamily::Normal) {
        const Matrix cov = skew_loc * skew_loc.transpose() + dsd;
        const Matrix chol = Eigen::LLT<Matrix>(cov).matrixL();
        Vector shift(p);
        for (int j = 0; j < p; ++j)
            shift[j] = std::sqrt(cov(j, j)) * gsl_cdf_ugaussian_Pinv(config.tau_levels[j]);
        for (int i = 0; i < config.n; ++i) {
            for (int j = 0; j < p; ++j) z[j] = stdnorm(rng);
            eps.row(i) = (chol * z - shift).transpose();
        }
    } else {
        // noncentral multivariate t: (D xi + N(0, D Sigma D)) / sqrt(chi2_dof / dof)
        const Matrix chol = Eigen::LLT<Matrix>(dsd).matrixL();
        std::gamma_distribution<double> chi2(config.t_dof / 2.0, 2.0);
        Vector shift(p);
        for (int j = 0; j < p; ++j)
            shift[j] = noncentral_t_quantile(config.tau_levels[j], skew_loc[j],
                                             std::sqrt(dsd(j, j)), config.t_dof);
        for (int i = 0; i < config.n; ++i) {
            for (int j = 0; j < p; ++j) z[j] = stdnorm(rng);
            const double scale = std::sqrt(config.t_dof / chi2(rng));
            eps.row(i) = (scale * (skew_loc + chol * z) - shift).transpose();
        }
    }

    Dataset data;
    data.design = std::move(x);
    data.responses = data.design * config.beta_true.transpose() + eps;
    return data;
}

McSummary run_monte_carlo(const DgpConfig& config, int B, const QuantileSpec& spec,
                          const FitOptions& opts) {
    if (B < 2) throw std::domain_error("run_monte_carlo: need at least 2 replications");
    const int p = static_cast<int>(config.beta_true.rows());
    const int k = static_cast<int>(config.beta_true.cols());

    std::vector<Matrix> est_joint(B), est_uni(B);
    std::vector<char> ok_joint(B, 0), ok_uni(B, 0);

#pragma omp parallel for schedule(dynamic)
    for (int b = 0; b < B; ++b) {
        Rng rng = rng_for(config.seed, b);
        const Dataset data = simulate_dataset(config, rng);
        try {
            const FitResult fit = fit_em(data, spec, opts);
            if (fit.converged) {
                est_joint[b] = fit.params.beta;
                ok_joint[b] = 1;
            }
        } catch (const FitterError&) {
        }
        try {
            Matrix uni(p, k);
            bool all_ok = true;
            for (int j = 0; j < p; ++j) {
                const UnivariateFit fit = fit_univariate_qr(data.responses.col(j),
                                                            data.design,
                                                            config.tau_levels[j], opts);
                all_ok &= fit.converged;
                uni.row(j) = fit.beta.transpose();
            }
            if (all_ok) {
                est_uni[b] = uni;
                ok_uni[b] = 1;
            }
        } catch (const FitterError&) {
        }
    }

    auto aggregate = [&](const std::vector<Matrix>& est, const std::vector<char>& ok,
                         Matrix& mean, Matrix& bias, Matrix& rmse, Matrix* sd, int& kept) {
        mean = Matrix::Zero(p, k);
        Matrix msq = Matrix::Zero(p, k);
        kept = 0;
        for (int b = 0; b < B; ++b) {
            if (!ok[b]) continue;
            mean += est[b];
            msq += (est[b] - config.beta_true).array().square().matrix();
            ++kept;
        }
        if (kept == 0) throw FitterError("run_monte_carlo: no replication converged");
        mean /= kept;
        rmse = (msq / kept).array().sqrt().matrix();
        bias.resize(p, k);
        for (int j = 0; j < p; ++j)
            for (int s = 0; s < k; ++s) {
                const double truth = config.beta_true(j, s);
                bias(j, s) = std::fabs(truth) > 1e-12
                                 ? 100.0 * (mean(j, s) - truth) / truth
                                 : std::numeric_limits<double>::quiet_NaN();
            }
        if (sd) {
            Matrix var = Matrix::Zero(p, k);
            for (int b = 0; b < B; ++b)
                if (ok[b]) var += (est[b] - mean).array().square().matrix();
            *sd = (var / std::max(kept - 1, 1)).array().sqrt().matrix();
        }
    };

    McSummary s;
    s.beta_true = config.beta_true;
    s.B = B;
    int kept_joint = 0, kept_uni = 0;
    aggregate(est_joint, ok_joint, s.mean_joint, s.bias_joint, s.rmse_joint, &s.sd_joint,
              kept_joint);
    aggregate(est_uni, ok_uni, s.mean_uni, s.bias_uni, s.rmse_uni, nullptr, kept_uni);
    s.excluded_joint = B - kept_joint;
    s.excluded_uni = B - kept_uni;
    return s;
}

const std::vector<std::pair<int, int>>& table3_zero_coords() {
    static const std::vector<std::pair<int, int>> coords = {{0, 1}, {0, 3}, {1, 2},
                                                            {1, 3}, {2, 1}, {2, 2}};
    return coords;
}

TprSummary run_tpr_study(const DgpConfig& config, int B, const TprOptions& opts) {
    const int p = static_cast<int>(config.beta_true.rows());
    const int k = static_cast<int>(config.beta_true.cols());
    const QuantileSpec spec = build_spec(config.tau_levels);
    const auto& coords = table3_zero_coords();
    for (const auto& [j, s] : coords)
        if (j >= p || s >= k || config.beta_true(j, s) != 0.0)
            throw std::domain_error("run_tpr_study: config does not zero the designated "
                                    "coefficients");

    std::vector<std::vector<char>> zeroed(B);
    std::vector<char> ok(B, 0);

#pragma omp parallel for schedule(dynamic)
    for (int b = 0; b < B; ++b) {
        try {
            Rng rng = rng_for(config.seed, b);
            Dataset data = simulate_dataset(config, rng);
            // standardize the non-intercept covariates; zeros are scale invariant
            for (int s = 1; s < k; ++s) {
                const double mean = data.design.col(s).mean();
                const double sd = std::sqrt(
                    (data.design.col(s).array() - mean).square().mean());
                data.design.col(s) = (data.design.col(s).array() - mean) / sd;
            }
            const LambdaGrid grid =
                lambda_grid(data, spec, opts.grid_size, opts.grid_ratio);
            Rng cv_rng = rng_for(config.seed, 0x10000000ULL + b);
            const CvResult cv =
                cross_validate(data, spec, opts.folds, grid, opts.fit, cv_rng);
            std::vector<char> hits;
            for (const auto& [j, s] : coords)
                hits.push_back(cv.final_fit.params.beta(j, s) == 0.0 ? 1 : 0);
            zeroed[b] = std::move(hits);
            ok[b] = 1;
        } catch (const std::exception&) {
        }
    }

    TprSummary s;
    s.zero_coords = coords;
    s.B = B;
    s.tpr = Vector::Zero(coords.size());
    int kept = 0;
    for (int b = 0; b < B; ++b) {
        if (!ok[b]) continue;
        ++kept;
        for (size_t c = 0; c < coords.size(); ++c) s.tpr[c] += zeroed[b][c];
    }
    if (kept == 0) throw FitterError("run_tpr_study: no replication completed");
    s.tpr *= 100.0 / kept;
    s.excluded = B - kept;
    return s;
}

BootstrapResult bootstrap_se(const Dataset& data, const QuantileSpec& spec, int B,
                             const FitOptions& opts, std::uint64_t seed) {
    if (B < 2) throw std::domain_error("bootstrap_se: need at least 2 resamples");
    const int p = data.p(), k = data.k();
    std::vector<Vector> reps(B);
    std::vector<char> ok(B, 0);

#pragma omp parallel for schedule(dynamic)
    for (int b = 0; b < B; ++b) {
        Rng rng = rng_for(seed, b);
        std::uniform_int_distribution<int> pick(0, data.n() - 1);
        Dataset resample;
        resample.responses.resize(data.n(), p);
        resample.design.resize(data.n(), k);
        for (int i = 0; i < data.n(); ++i) {
            const int r = pick(rng);
            resample.responses.row(i) = data.responses.row(r);
            resample.design.row(i) = data.design.row(r);
        }
        try {
            const FitResult fit = fit_em(resample, spec, opts);
            if (fit.converged) {
                Vector flat(p * k);
                for (int j = 0; j < p; ++j)
                    for (int s = 0; s < k; ++s) flat[j * k + s] = fit.params.beta(j, s);
                reps[b] = std::move(flat);
                ok[b] = 1;
            }
        } catch (const FitterError&) {
        }
    }

    BootstrapResult out;
    out.B = B;
    out.seed = seed;
    int kept = 0;
    for (int b = 0; b < B; ++b) kept += ok[b];
    if (kept < 2) throw FitterError("bootstrap_se: fewer than 2 resamples converged");
    out.excluded = B - kept;
    out.replicates.resize(kept, p * k);
    int row = 0;
    for (int b = 0; b < B; ++b)
        if (ok[b]) out.replicates.row(row++) = reps[b].transpose();
    out.se.resize(p, k);
    for (int j = 0; j < p; ++j)
        for (int s = 0; s < k; ++s) {
            const auto col = out.replicates.col(j * k + s);
            const double mean = col.mean();
            out.se(j, s) = std::sqrt((col.array() - mean).square().sum() / (kept - 1));
        }
    return out;
}

DgpConfig preset_table1(char panel, ErrorFamily family, std::uint64_t seed) {
    DgpConfig c;
    c.n = 1000;
    c.beta_true.resize(3, 3);
    c.beta_true << -0.382, -0.372, 0.715,
                    1.993,  0.650, 0.764,
                    0.670,  1.079, 0.584;
    c.delta_true.resize(3);
    c.delta_true << 0.13, 0.30, 0.23;
    c.psi_true.resize(3, 3);
    c.psi_true << 1.0, 0.5, 0.3,
                  0.5, 1.0, 0.4,
                  0.3, 0.4, 1.0;
    c.tau_levels.resize(3);
    switch (panel) {
        case 'A': c.tau_levels << 0.50, 0.50, 0.50; break;
        case 'B': c.tau_levels << 0.25, 0.50, 0.75; break;
        case 'C': c.tau_levels << 0.10, 0.50, 0.90; break;
        default: throw std::domain_error("preset_table1: panel must be A, B or C");
    }
    c.error_family = family;
    c.seed = seed;
    return c;
}

DgpConfig preset_table3(const Vector& tau_levels, ErrorFamily family, std::uint64_t seed) {
    DgpConfig c = preset_table1('A', family, seed);
    c.tau_levels = tau_levels;
    c.beta_true.resize(3, 5);
    c.beta_true << -0.382, 0.0,   -0.372, 0.0,   0.715,
                    1.993, 0.650,  0.0,   0.0,   0.764,
                    0.670, 0.0,    0.0,   1.079, 0.584;
    return c;
}

Dataset load_csv(const std::string& path, int responses, bool add_intercept) {
    std::ifstream in(path);
    if (!in) throw CsvError(path + ": cannot open file");
    std::string line;
    if (!std::getline(in, line)) throw CsvError(path + ": empty file (header row required)");

    auto split = [](const std::string& s) {
        std::vector<std::string> cells;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!s.empty() && s.back() == ',') cells.push_back("");
        return cells;
    };

    const int ncols = static_cast<int>(split(line).size());
    if (responses < 1 || responses >= ncols)
        throw CsvError(path + ": --responses must be in [1, " + std::to_string(ncols - 1) +
                       "]");

    std::vector<std::vector<double>> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split(line);
        if (static_cast<int>(cells.size()) != ncols)
            throw CsvError(path + ": line " + std::to_string(lineno) + ": expected " +
                           std::to_string(ncols) + " fields, got " +
                           std::to_string(cells.size()));
        std::vector<double> row(ncols);
        for (int c = 0; c < ncols; ++c) {
            try {
                size_t used = 0;
                row[c] = std::stod(cells[c], &used);
                while (used < cells[c].size() && std::isspace(cells[c][used])) ++used;
                if (used != cells[c].size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw CsvError(path + ": line " + std::to_string(lineno) + ": field " +
                               std::to_string(c + 1) + " is not numeric: '" + cells[c] +
                               "'");
            }
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw CsvError(path + ": no data rows");

    const int n = static_cast<int>(rows.size());
    const int kx = ncols - responses;
    Dataset data;
    data.responses.resize(n, responses);
    data.design.resize(n, kx + (add_intercept ? 1 : 0));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < responses; ++j) data.responses(i, j) = rows[i][j];
        int off = 0;
        if (add_intercept) data.design(i, off++) = 1.0;
        for (int c = 0; c < kx; ++c) data.design(i, off + c) = rows[i][responses + c];
    }
    return data;
}

namespace {

json mat_json(const Matrix& m) {
    json out = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        out.push_back(row);
    }
    return out;
}

json vec_json(const Vector& v) {
    json out = json::array();
    for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

json params_json(const ModelParams& params) {
    return {{"beta", mat_json(params.beta)},
            {"delta", vec_json(params.delta)},
            {"psi", mat_json(params.psi)}};
}

std::string matrix_block(const Matrix& m, const std::string& row_label) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    for (int j = 0; j < m.rows(); ++j) {
        os << "  " << row_label << j + 1 << " ";
        for (int s = 0; s < m.cols(); ++s) os << std::setw(10) << m(j, s);
        os << '\n';
    }
    return os.str();
}

}  // namespace

std::string fit_report_json(const FitResult& fit, const QuantileSpec& spec) {
    json out = {{"tau", vec_json(spec.levels)},
                {"params", params_json(fit.params)},
                {"loglik", fit.loglik_trace.back()},
                {"iterations", fit.iterations},
                {"converged", fit.converged},
                {"psi_repaired", fit.psi_repaired},
                {"delta_solver_warning", fit.delta_solver_warning}};
    return out.dump(2) + "\n";
}

std::string fit_report_text(const FitResult& fit, const QuantileSpec& spec) {
    std::ostringstream os;
    os << "tau:";
    for (int j = 0; j < spec.dim(); ++j) os << ' ' << spec.levels[j];
    os << "\nbeta (rows = responses, cols = covariates):\n"
       << matrix_block(fit.params.beta, "y");
    os << "delta:";
    for (int j = 0; j < spec.dim(); ++j)
        os << ' ' << std::fixed << std::setprecision(4) << fit.params.delta[j];
    os << "\npsi:\n" << matrix_block(fit.params.psi, "y");
    os << "loglik " << std::setprecision(6) << fit.loglik_trace.back() << ", iterations "
       << fit.iterations << ", converged " << (fit.converged ? "yes" : "no") << '\n';
    return os.str();
}

std::string mc_report_json(const McSummary& s) {
    json out = {{"replications", s.B},
                {"excluded_joint", s.excluded_joint},
                {"excluded_univariate", s.excluded_uni},
                {"beta_true", mat_json(s.beta_true)},
                {"joint",
                 {{"mean", mat_json(s.mean_joint)},
                  {"bias_pct", mat_json(s.bias_joint)},
                  {"rmse", mat_json(s.rmse_joint)},
                  {"sd", mat_json(s.sd_joint)}}},
                {"univariate",
                 {{"mean", mat_json(s.mean_uni)},
                  {"bias_pct", mat_json(s.bias_uni)},
                  {"rmse", mat_json(s.rmse_uni)}}}};
    return out.dump(2) + "\n";
}

std::string mc_report_text(const McSummary& s) {
    std::ostringstream os;
    os << "Monte Carlo summary (" << s.B << " replications, " << s.excluded_joint
       << " joint / " << s.excluded_uni << " univariate excluded)\n";
    os << "coefficients reported as (response j, covariate s); column 1 = intercept\n";
    os << "joint mean estimate:\n" << matrix_block(s.mean_joint, "y");
    os << "joint bias (%):\n" << matrix_block(s.bias_joint, "y");
    os << "joint RMSE:\n" << matrix_block(s.rmse_joint, "y");
    os << "univariate mean estimate:\n" << matrix_block(s.mean_uni, "y");
    os << "univariate bias (%):\n" << matrix_block(s.bias_uni, "y");
    os << "univariate RMSE:\n" << matrix_block(s.rmse_uni, "y");
    return os.str();
}

std::string tpr_report_json(const TprSummary& s) {
    json coords = json::array();
    for (const auto& [j, c] : s.zero_coords) coords.push_back({j + 1, c + 1});
    json out = {{"replications", s.B},
                {"excluded", s.excluded},
                {"zero_coefficients", coords},
                {"tpr_pct", vec_json(s.tpr)}};
    return out.dump(2) + "\n";
}

std::string tpr_report_text(const TprSummary& s) {
    std::ostringstream os;
    os << "True positive rate over " << s.B << " replications (" << s.excluded
       << " excluded)\n";
    os << std::fixed << std::setprecision(2);
    for (size_t c = 0; c < s.zero_coords.size(); ++c)
        os << "  beta(" << s.zero_coords[c].first + 1 << ',' << s.zero_coords[c].second + 1
           << "): " << std::setw(7) << s.tpr[c] << " %\n";
    os << "  average: " << std::setw(7) << s.tpr.mean() << " %\n";
    return os.str();
}

std::string bootstrap_report_json(const BootstrapResult& s) {
    json out = {{"resamples", s.B},
                {"excluded", s.excluded},
                {"seed", s.seed},
                {"se", mat_json(s.se)}};
    return out.dump(2) + "\n";
}

std::string bootstrap_report_text(const BootstrapResult& s) {
    std::ostringstream os;
    os << "Bootstrap standard errors (" << s.B << " resamples, " << s.excluded
       << " excluded)\n"
       << matrix_block(s.se, "y");
    return os.str();
}

std::string cv_report_json(const CvResult& cv, const QuantileSpec& spec) {
    json out = {{"lambda_grid", vec_json(cv.grid.values)},
                {"mean_scores", vec_json(cv.mean_scores)},
                {"chosen_lambda", cv.chosen_lambda},
                {"chosen_index", cv.chosen_index},
                {"tau", vec_json(spec.levels)},
                {"fit", params_json(cv.final_fit.params)},
                {"iterations", cv.final_fit.iterations},
                {"converged", cv.final_fit.converged}};
    return out.dump(2) + "\n";
}

std::string cv_report_text(const CvResult& cv, const QuantileSpec& spec) {
    std::ostringstream os;
    os << "Cross-validated LASSO path (" << cv.grid.values.size() << " lambdas)\n";
    os << "chosen lambda " << std::scientific << std::setprecision(4) << cv.chosen_lambda
       << " (index " << cv.chosen_index << ")\n";
    os << "beta at chosen lambda:\n" << matrix_block(cv.final_fit.params.beta, "y");
    os << "delta:";
    for (int j = 0; j < spec.dim(); ++j)
        os << ' ' << std::fixed << std::setprecision(4) << cv.final_fit.params.delta[j];
    os << '\n';
    return os.str();
}

}  // namespace mqr
