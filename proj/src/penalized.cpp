#include "mqr/penalized.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mqr {

double soft_threshold(double v, double gamma) {
    if (gamma < 0.0) throw std::domain_error("soft_threshold: gamma must be nonnegative");
    if (v > gamma) return v - gamma;
    if (v < -gamma) return v + gamma;
    return 0.0;
}

bool has_intercept_column(const Dataset& data) {
    return data.k() >= 1 && (data.design.col(0).array() == 1.0).all();
}

namespace {

struct PenaltyContext {
    Matrix omega;       // (D Sigma D)^{-1}
    Vector offset;      // c = D^{-1} Sigma^{-1} xi
    Vector col_sums;    // sum_i X_is
    Matrix curvature;   // a_js = omega_jj * sum_i z_i X_is^2
};

PenaltyContext make_penalty_context(const Dataset& data, const Vector& z,
                                    const Vector& delta, const Matrix& psi,
                                    const QuantileSpec& spec) {
    const int p = data.p(), k = data.k();
    PenaltyContext ctx;
    const Matrix sigma = spec.sigma_tilde(psi);
    const Matrix sigma_inv = sigma.llt().solve(Matrix::Identity(p, p));
    const Matrix dinv = delta.cwiseInverse().asDiagonal();
    ctx.omega = dinv * sigma_inv * dinv;
    ctx.offset = dinv * (sigma_inv * spec.skew);
    ctx.col_sums = data.design.colwise().sum().transpose();
    const Vector zx2 = (data.design.array().square().colwise() * z.array())
                           .colwise()
                           .sum()
                           .transpose();  // sum_i z_i X_is^2 per column
    ctx.curvature.resize(p, k);
    for (int j = 0; j < p; ++j)
        for (int s = 0; s < k; ++s) ctx.curvature(j, s) = ctx.omega(j, j) * zx2[s];
    return ctx;
}

// Gradient of the smooth part of Q w.r.t. beta_js at the current residuals.
double smooth_gradient(const PenaltyContext& ctx, const Dataset& data, const Vector& z,
                       const Matrix& resid, int j, int s) {
    const Vector t = resid.transpose() * (z.array() * data.design.col(s).array()).matrix();
    return -ctx.offset[j] * ctx.col_sums[s] + ctx.omega.row(j).dot(t);
}

// Finish the minimization exactly with an active-set method. With the signs of
// the nonzero coefficients held fixed the penalized objective is a smooth
// quadratic, so its stationary point is one linear solve; this sidesteps the
// slow crawl of cyclic descent when a few near-zero residuals give the weights
// (and hence the quadratic) an extreme condition number. A sign flip means the
// coefficient should leave the active set: step to its zero crossing, drop it
// and re-solve. After a clean step the subgradient condition is checked at the
// zero coefficients and the worst violator is brought in. Returns true once the
// full optimality conditions hold, i.e. at the global minimizer.
bool active_set_solve(const PenaltyContext& ctx, const Dataset& data, const Vector& z,
                      const Matrix& xzx, double lambda, bool intercept, Matrix& beta,
                      Matrix& resid) {
    const int p = data.p(), k = data.k();
    const double slack = 1e-6 * std::max(1.0, lambda);

    const Matrix t =
        resid.transpose() * (data.design.array().colwise() * z.array()).matrix();
    Matrix grad = -ctx.offset * ctx.col_sums.transpose() + ctx.omega * t;

    Matrix work = beta;
    std::vector<int> aj, as;
    std::vector<double> sgn;
    for (int j = 0; j < p; ++j)
        for (int s = 0; s < k; ++s) {
            const bool penalized = !(intercept && s == 0);
            if (!penalized || work(j, s) != 0.0) {
                aj.push_back(j);
                as.push_back(s);
                sgn.push_back(penalized ? (work(j, s) > 0.0 ? 1.0 : -1.0) : 0.0);
            }
        }

    const int max_rounds = 10 * p * k + 20;
    bool solved = false;
    for (int round = 0; round < max_rounds && !solved; ++round) {
        const int m = static_cast<int>(aj.size());
        Vector step = Vector::Zero(m);
        if (m > 0) {
            Matrix h(m, m);
            Vector rhs(m);
            for (int a = 0; a < m; ++a) {
                for (int b = 0; b < m; ++b)
                    h(a, b) = ctx.omega(aj[a], aj[b]) * xzx(as[a], as[b]);
                rhs[a] = grad(aj[a], as[a]) - lambda * sgn[a];
            }
            const Eigen::LDLT<Matrix> ldlt(h);
            step = ldlt.solve(rhs);
            step += ldlt.solve(rhs - h * step);  // one round of refinement
            if (!step.allFinite()) return false;
        }

        // fraction of the step that keeps every active sign; 1 when none flips
        double frac = 1.0;
        int leaving = -1;
        for (int a = 0; a < m; ++a) {
            const double cur = work(aj[a], as[a]);
            if (sgn[a] != 0.0 && sgn[a] * (cur + step[a]) < 0.0) {
                const double f = cur / (cur - (cur + step[a]));
                if (f < frac) {
                    frac = f;
                    leaving = a;
                }
            }
        }

        for (int a = 0; a < m; ++a) {
            const double d = frac * step[a];
            if (d == 0.0) continue;
            work(aj[a], as[a]) += d;
            for (int j = 0; j < p; ++j)
                for (int s = 0; s < k; ++s) grad(j, s) -= ctx.omega(j, aj[a]) * xzx(s, as[a]) * d;
        }

        if (leaving >= 0) {
            work(aj[leaving], as[leaving]) = 0.0;
            aj.erase(aj.begin() + leaving);
            as.erase(as.begin() + leaving);
            sgn.erase(sgn.begin() + leaving);
            continue;
        }

        // optimal on the current set; bring in the worst zero-set violator
        int worst_j = -1, worst_s = -1;
        double worst = lambda + slack;
        for (int j = 0; j < p; ++j)
            for (int s = intercept ? 1 : 0; s < k; ++s) {
                if (work(j, s) != 0.0) continue;
                if (std::fabs(grad(j, s)) > worst) {
                    worst = std::fabs(grad(j, s));
                    worst_j = j;
                    worst_s = s;
                }
            }
        if (worst_j < 0) {
            solved = true;
        } else {
            aj.push_back(worst_j);
            as.push_back(worst_s);
            sgn.push_back(grad(worst_j, worst_s) > 0.0 ? 1.0 : -1.0);
        }
    }
    if (!solved) return false;

    for (int j = 0; j < p; ++j) resid.col(j) += data.design * (beta.row(j) - work.row(j)).transpose();
    beta = work;
    return true;
}

}  // namespace

Matrix pm_step_beta(const Dataset& data, const EStepWeights& weights, const Vector& delta,
                    const Matrix& psi, const QuantileSpec& spec, double lambda,
                    const Matrix& warm_start, bool* warning) {
    if (lambda < 0.0) throw std::domain_error("pm_step_beta: lambda must be nonnegative");
    if (lambda == 0.0) {
        // unpenalized update has a closed form; keeps lambda = 0 identical to fit_em
        if (warning) *warning = false;
        return m_step_beta(data, weights.z, delta, spec);
    }
    const int p = data.p(), k = data.k();
    const PenaltyContext ctx = make_penalty_context(data, weights.z, delta, psi, spec);
    const bool intercept = has_intercept_column(data);
    const Vector& z = weights.z;

    Matrix beta = warm_start;
    Matrix resid = data.responses - data.design * beta.transpose();
    const Matrix xzx =
        data.design.transpose() * (data.design.array().colwise() * z.array()).matrix();

    constexpr int max_sweeps = 10000;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_change = 0.0;
        for (int j = 0; j < p; ++j) {
            for (int s = 0; s < k; ++s) {
                const double old = beta(j, s);
                const double g = smooth_gradient(ctx, data, z, resid, j, s);
                const double a = ctx.curvature(j, s);
                const double target = a * old + g;
                const bool penalized = !(intercept && s == 0);
                const double next =
                    (penalized ? soft_threshold(target, lambda) : target) / a;
                if (next != old) {
                    resid.col(j) -= data.design.col(s) * (next - old);
                    beta(j, s) = next;
                    max_change = std::max(max_change, std::fabs(next - old));
                }
            }
        }
        if (max_change < 1e-12 * std::max(1.0, beta.cwiseAbs().maxCoeff())) {
            converged = true;
            break;
        }
        if (sweep >= 1 &&
            active_set_solve(ctx, data, z, xzx, lambda, intercept, beta, resid)) {
            converged = true;
            break;
        }
    }
    if (warning) *warning = !converged;
    return beta;
}

ModelParams null_model_params(const Dataset& data, const QuantileSpec& spec,
                              const FitOptions& opts) {
    const int p = data.p(), k = data.k();
    if (has_intercept_column(data)) {
        Dataset null_data;
        null_data.responses = data.responses;
        null_data.design = data.design.col(0);
        const FitResult fit = fit_em(null_data, spec, opts);
        ModelParams params;
        params.beta = Matrix::Zero(p, k);
        params.beta.col(0) = fit.params.beta.col(0);
        params.delta = fit.params.delta;
        params.psi = fit.params.psi;
        return params;
    }
    // no intercept: hold beta = 0 and iterate the scale/correlation updates
    ModelParams params;
    params.beta = Matrix::Zero(p, k);
    params.delta.resize(p);
    for (int j = 0; j < p; ++j)
        params.delta[j] =
            std::max(data.responses.col(j).cwiseAbs().mean() / spec.scale_diag[j], 1e-8);
    params.psi = Matrix::Identity(p, p);
    for (int it = 0; it < opts.max_iter; ++it) {
        const EStepWeights w = e_step(data, params, spec);
        const auto [sigma, psi] = m_step_sigma(data, params.beta, w, params.delta, spec);
        (void)sigma;
        const Vector delta =
            m_step_delta(data, params.beta, w.z, psi, spec, params.delta, opts);
        const double change = std::max((delta - params.delta).cwiseAbs().maxCoeff(),
                                       (psi - params.psi).cwiseAbs().maxCoeff());
        params.delta = delta;
        params.psi = psi;
        if (change < opts.param_tol) break;
    }
    return params;
}

LambdaGrid lambda_grid(const Dataset& data, const QuantileSpec& spec, int size,
                       double ratio) {
    if (size < 2) throw std::domain_error("lambda_grid: size must be at least 2");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::domain_error("lambda_grid: ratio must lie in (0,1)");
    data.validate();

    const ModelParams params = null_model_params(data, spec);
    const EStepWeights weights = e_step(data, params, spec);
    const PenaltyContext ctx =
        make_penalty_context(data, weights.z, params.delta, params.psi, spec);
    const Matrix resid = data.responses - data.design * params.beta.transpose();
    const bool intercept = has_intercept_column(data);

    double lambda_max = 0.0;
    for (int j = 0; j < data.p(); ++j)
        for (int s = intercept ? 1 : 0; s < data.k(); ++s)
            lambda_max = std::max(
                lambda_max, std::fabs(smooth_gradient(ctx, data, weights.z, resid, j, s)));
    if (!(lambda_max > 0.0)) throw FitterError("lambda_grid: degenerate data");

    LambdaGrid grid;
    grid.ratio = ratio;
    grid.values.resize(size);
    const double step = std::log(ratio) / (size - 1);
    for (int i = 0; i < size; ++i) grid.values[i] = lambda_max * std::exp(step * i);
    return grid;
}

FitResult fit_pem(const Dataset& data, const QuantileSpec& spec, double lambda,
                  const FitOptions& opts, const ModelParams* warm) {
    data.validate();
    const bool intercept = has_intercept_column(data);

    auto penalty = [&](const Matrix& beta) {
        double total = 0.0;
        for (int j = 0; j < data.p(); ++j)
            for (int s = intercept ? 1 : 0; s < data.k(); ++s)
                total += std::fabs(beta(j, s));
        return lambda * total;
    };

    FitResult result;
    ModelParams params;
    if (warm)
        params = *warm;
    else if (lambda > 0.0)
        params = null_model_params(data, spec, opts);
    else
        params = initial_params(data, spec);

    // trace records the penalized observed objective
    double prev_obj = observed_log_likelihood(data, params, spec) - penalty(params.beta);
    result.loglik_trace.push_back(prev_obj);

    for (int h = 0; h < opts.max_iter; ++h) {
        const EStepWeights weights = e_step(data, params, spec);
        bool cd_warn = false, repaired = false, degenerate = false, delta_warn = false;
        const Matrix beta = pm_step_beta(data, weights, params.delta, params.psi, spec,
                                         lambda, params.beta, &cd_warn);
        const auto [sigma_raw, psi] =
            m_step_sigma(data, beta, weights, params.delta, spec, &repaired, &degenerate);
        (void)sigma_raw;
        const Vector delta =
            m_step_delta(data, beta, weights.z, psi, spec, params.delta, opts, &delta_warn);
        result.psi_repaired |= repaired;
        result.sigma_degenerate |= degenerate;
        result.delta_solver_warning |= delta_warn || cd_warn;

        ModelParams next{beta, delta, psi};
        double obj = observed_log_likelihood(data, next, spec) - penalty(beta);
        if (!std::isfinite(obj))
            throw FitterError("fit_pem: objective diverged at iteration " +
                              std::to_string(h + 1));
        // Same safeguard as fit_em: the correlation projection makes the M-step
        // approximate, so damp any step that loses objective.
        for (int halvings = 0; obj < prev_obj && halvings < 40; ++halvings) {
            next.beta = 0.5 * (next.beta + params.beta);
            next.delta = 0.5 * (next.delta + params.delta);
            next.psi = 0.5 * (next.psi + params.psi);
            obj = observed_log_likelihood(data, next, spec) - penalty(next.beta);
        }
        if (obj < prev_obj) {
            next = params;
            obj = prev_obj;
        }
        const double param_change =
            std::max({(next.beta - params.beta).cwiseAbs().maxCoeff(),
                      (next.delta - params.delta).cwiseAbs().maxCoeff(),
                      (next.psi - params.psi).cwiseAbs().maxCoeff()});
        params = next;
        result.loglik_trace.push_back(obj);
        result.iterations = h + 1;
        if (std::fabs(obj - prev_obj) < opts.tol && param_change < opts.param_tol) {
            result.converged = true;
            prev_obj = obj;
            break;
        }
        prev_obj = obj;
    }
    result.params = params;
    result.final_weights = e_step(data, params, spec);
    return result;
}

namespace {

double cv_fold_score(const Dataset& test, const ModelParams& params,
                     const QuantileSpec& spec, CvScore score) {
    if (score == CvScore::HeldOutLogLik)
        return -observed_log_likelihood(test, params, spec) / test.n();
    const Matrix resid = test.responses - test.design * params.beta.transpose();
    double total = 0.0;
    for (int j = 0; j < test.p(); ++j) {
        double acc = 0.0;
        for (int i = 0; i < test.n(); ++i)
            acc += check_loss(resid(i, j) / params.delta[j], spec.levels[j]);
        total += acc / test.n();
    }
    return total;
}

Dataset subset_rows(const Dataset& data, const std::vector<int>& rows) {
    Dataset out;
    out.responses.resize(rows.size(), data.p());
    out.design.resize(rows.size(), data.k());
    for (size_t i = 0; i < rows.size(); ++i) {
        out.responses.row(i) = data.responses.row(rows[i]);
        out.design.row(i) = data.design.row(rows[i]);
    }
    return out;
}

}  // namespace

CvResult cross_validate(const Dataset& data, const QuantileSpec& spec, int folds,
                        const LambdaGrid& grid, const FitOptions& opts, Rng& rng,
                        CvScore score) {
    if (folds < 2) throw std::domain_error("cross_validate: need at least 2 folds");
    if (data.n() < folds) throw std::domain_error("cross_validate: more folds than rows");
    const int m = static_cast<int>(grid.values.size());

    std::vector<int> order(data.n());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> fold_of(data.n());
    for (int i = 0; i < data.n(); ++i) fold_of[order[i]] = i % folds;

    CvResult result;
    result.grid = grid;
    result.fold_scores.resize(m, folds);

    std::string fold_error;
#pragma omp parallel for schedule(dynamic)
    for (int f = 0; f < folds; ++f) {
        try {
            std::vector<int> train_rows, test_rows;
            for (int i = 0; i < data.n(); ++i)
                (fold_of[i] == f ? test_rows : train_rows).push_back(i);
            const Dataset train = subset_rows(data, train_rows);
            const Dataset test = subset_rows(data, test_rows);
            try {
                train.validate();
            } catch (const FitterError& e) {
                throw FitterError("cross_validate: fold " + std::to_string(f) + ": " +
                                  e.what());
            }
            ModelParams warm = null_model_params(train, spec, opts);
            for (int l = 0; l < m; ++l) {
                const FitResult fit = fit_pem(train, spec, grid.values[l], opts, &warm);
                warm = fit.params;
                result.fold_scores(l, f) = cv_fold_score(test, fit.params, spec, score);
            }
        } catch (const std::exception& e) {
#pragma omp critical
            if (fold_error.empty()) fold_error = e.what();
        }
    }
    if (!fold_error.empty()) throw FitterError(fold_error);

    result.mean_scores = result.fold_scores.rowwise().mean();
    int best = 0;  // ties resolved toward the largest lambda (smallest index)
    for (int l = 1; l < m; ++l)
        if (result.mean_scores[l] < result.mean_scores[best]) best = l;
    result.chosen_index = best;
    result.chosen_lambda = grid.values[best];

    // refit on the full data, warm-started down the path to the chosen lambda
    ModelParams warm = null_model_params(data, spec, opts);
    FitResult fit;
    for (int l = 0; l <= best; ++l) {
        fit = fit_pem(data, spec, grid.values[l], opts, &warm);
        warm = fit.params;
    }
    result.final_fit = std::move(fit);
    return result;
}

}  // namespace mqr
