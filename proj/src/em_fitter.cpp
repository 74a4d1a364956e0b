#include "mqr/em_fitter.hpp"

#include <cmath>
#include <sstream>

#include "mqr/special_fn.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mqr {

void Dataset::validate() const {
    if (responses.rows() != design.rows())
        throw FitterError("dataset: responses and design row counts differ");
    if (n() <= k()) throw FitterError("dataset: need more observations than covariates");
    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < k()) {
        std::ostringstream msg;
        msg << "dataset: design is rank deficient (rank " << qr.rank() << " of " << k()
            << "); offending columns:";
        const auto perm = qr.colsPermutation().indices();
        for (int j = qr.rank(); j < k(); ++j) msg << ' ' << perm[j];
        throw FitterError(msg.str());
    }
    for (int j = 0; j < p(); ++j) {
        const double sd = std::sqrt(
            (responses.col(j).array() - responses.col(j).mean()).square().mean());
        if (sd < 1e-12) throw FitterError("dataset: response column " + std::to_string(j) +
                                          " has zero variance");
    }
}

namespace {

// Shared E-step core: whitening factor of Sigma and the constant d.
struct EStepContext {
    Matrix chol_l;      // lower factor of Sigma
    double d;           // xi' Sigma^{-1} xi
    double nu;
};

EStepContext make_context(const ModelParams& params, const QuantileSpec& spec) {
    const Matrix sigma = spec.sigma_tilde(params.psi);
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw FitterError("e_step: scale matrix not positive definite");
    EStepContext ctx;
    ctx.chol_l = llt.matrixL();
    ctx.d = ctx.chol_l.triangularView<Eigen::Lower>().solve(spec.skew).squaredNorm();
    ctx.nu = spec.bessel_order();
    return ctx;
}

double mahalanobis(const EStepContext& ctx, const ModelParams& params, const Vector& resid) {
    const Vector scaled = (resid.array() / params.delta.array()).matrix();
    return ctx.chol_l.triangularView<Eigen::Lower>().solve(scaled).squaredNorm();
}

}  // namespace

EStepWeights e_step_serial(const Dataset& data, const ModelParams& params,
                           const QuantileSpec& spec) {
    const EStepContext ctx = make_context(params, spec);
    const Matrix resid = data.responses - data.design * params.beta.transpose();
    EStepWeights w{Vector(data.n()), Vector(data.n())};
    for (int i = 0; i < data.n(); ++i) {
        const double m = std::max(mahalanobis(ctx, params, resid.row(i).transpose()),
                                  special::gig_b_floor);
        const auto mom = special::gig_moments({ctx.nu, 2.0 + ctx.d, m});
        w.u[i] = mom.mean;
        w.z[i] = mom.inverse_mean;
    }
    return w;
}

EStepWeights e_step(const Dataset& data, const ModelParams& params, const QuantileSpec& spec) {
    const EStepContext ctx = make_context(params, spec);
    const Matrix resid = data.responses - data.design * params.beta.transpose();
    EStepWeights w{Vector(data.n()), Vector(data.n())};
#pragma omp parallel for schedule(static)
    for (int i = 0; i < data.n(); ++i) {
        const double m = std::max(mahalanobis(ctx, params, resid.row(i).transpose()),
                                  special::gig_b_floor);
        const auto mom = special::gig_moments({ctx.nu, 2.0 + ctx.d, m});
        w.u[i] = mom.mean;
        w.z[i] = mom.inverse_mean;
    }
    return w;
}

Matrix m_step_beta(const Dataset& data, const Vector& z, const Vector& delta,
                   const QuantileSpec& spec) {
    if ((z.array() <= 0.0).any()) throw FitterError("m_step_beta: weights must be positive");
    const Matrix& x = data.design;
    const Matrix xtzx = x.transpose() * z.asDiagonal() * x;
    Eigen::LDLT<Matrix> ldlt(xtzx);
    const Vector pivots = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        pivots.minCoeff() <= 1e-13 * pivots.maxCoeff()) {
        Eigen::ColPivHouseholderQR<Matrix> qr((z.array().sqrt().matrix()).asDiagonal() * x);
        qr.setThreshold(1e-10);
        std::ostringstream msg;
        msg << "m_step_beta: weighted design rank deficient; offending columns:";
        const auto perm = qr.colsPermutation().indices();
        for (int j = qr.rank(); j < data.k(); ++j) msg << ' ' << perm[j];
        throw FitterError(msg.str());
    }
    const Vector skew_scaled = (spec.skew.array() * delta.array()).matrix();  // D xi
    const Matrix rhs = x.transpose() * z.asDiagonal() * data.responses -
                       x.colwise().sum().transpose() * skew_scaled.transpose();
    return ldlt.solve(rhs).transpose();  // p x k
}

Matrix nearest_correlation(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    Vector ev = es.eigenvalues().cwiseMax(1e-8);
    Matrix fixed = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    const Vector scale = fixed.diagonal().array().sqrt().inverse().matrix();
    Matrix corr = scale.asDiagonal() * fixed * scale.asDiagonal();
    corr = 0.5 * (corr + corr.transpose());
    corr.diagonal().setOnes();
    return corr;
}

std::pair<Matrix, Matrix> m_step_sigma(const Dataset& data, const Matrix& beta,
                                       const EStepWeights& weights, const Vector& delta,
                                       const QuantileSpec& spec, bool* repaired,
                                       bool* degenerate) {
    const int n = data.n(), p = data.p();
    const Matrix resid = data.responses - data.design * beta.transpose();
    // residuals scaled by D^{-1}
    const Matrix rd = resid.array().rowwise() / delta.transpose().array();
    const Vector s = rd.colwise().sum().transpose();  // D^{-1} sum r_i
    Matrix sigma = rd.transpose() * weights.z.asDiagonal() * rd;
    sigma += weights.u.sum() * spec.skew * spec.skew.transpose();
    sigma -= s * spec.skew.transpose() + spec.skew * s.transpose();
    sigma /= static_cast<double>(n);
    sigma = 0.5 * (sigma + sigma.transpose());

    bool degen = false;
    for (int j = 0; j < p; ++j)
        if (sigma(j, j) <= 1e-14) degen = true;
    if (degenerate) *degenerate = degen;

    Matrix psi;
    if (degen) {
        psi = Matrix::Identity(p, p);
    } else {
        const Matrix c = spec.scale_diag.cwiseInverse().asDiagonal() * sigma *
                         spec.scale_diag.cwiseInverse().asDiagonal();
        const Vector scale = c.diagonal().array().sqrt().inverse().matrix();
        psi = scale.asDiagonal() * c * scale.asDiagonal();
        psi = 0.5 * (psi + psi.transpose());
        psi.diagonal().setOnes();
        Eigen::SelfAdjointEigenSolver<Matrix> es(psi, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() <= 1e-10) {
            psi = nearest_correlation(psi);
            if (repaired) *repaired = true;
        } else if (repaired) {
            *repaired = false;
        }
    }
    return {sigma, psi};
}

Vector m_step_delta(const Dataset& data, const Matrix& beta, const Vector& z,
                    const Matrix& psi, const QuantileSpec& spec, const Vector& current_delta,
                    const FitOptions& opts, bool* warning) {
    const int n = data.n(), p = data.p();
    if ((current_delta.array() <= 0.0).any())
        throw FitterError("m_step_delta: warm start must be positive");
    const Matrix resid = data.responses - data.design * beta.transpose();
    const Matrix sigma = spec.sigma_tilde(psi);
    const Matrix sigma_inv = sigma.llt().solve(Matrix::Identity(p, p));
    const Vector s = resid.colwise().sum().transpose();          // sum r_i
    const Matrix c = resid.transpose() * z.asDiagonal() * resid; // sum z_i r_i r_i'
    const Vector a = (s.array() * (sigma_inv * spec.skew).array()).matrix();  // A_jj

    auto residual_of = [&](const Vector& delta) {
        Vector res(p);
        for (int j = 0; j < p; ++j) {
            double cd = 0.0;  // [Sigma^{-1} D^{-1} C]_{jj}
            for (int m = 0; m < p; ++m) cd += sigma_inv(j, m) * c(m, j) / delta[m];
            res[j] = a[j] + n * delta[j] - cd;
        }
        return res;
    };

    Vector delta = current_delta;
    double prev_res = residual_of(delta).cwiseAbs().maxCoeff();
    bool warned = true;
    for (int it = 0; it < opts.delta_solver_max_iter; ++it) {
        Vector next(p);
        for (int j = 0; j < p; ++j) {
            double off = 0.0;
            for (int m = 0; m < p; ++m)
                if (m != j) off += sigma_inv(j, m) * c(m, j) / delta[m];
            const double b = a[j] - off;
            const double q = sigma_inv(j, j) * c(j, j);
            const double disc = b * b + 4.0 * n * q;
            const double root = (-b + std::sqrt(disc)) / (2.0 * n);
            if (!(root > 0.0))
                throw FitterError("m_step_delta: no positive root for coordinate " +
                                  std::to_string(j));
            next[j] = root;
        }
        double next_res = residual_of(next).cwiseAbs().maxCoeff();
        if (next_res > prev_res) {  // damp non-monotone steps
            next = 0.5 * (next + delta);
            next_res = residual_of(next).cwiseAbs().maxCoeff();
        }
        const double change = (next - delta).cwiseAbs().maxCoeff();
        delta = next;
        prev_res = next_res;
        if (change < opts.delta_solver_tol * std::max(1.0, delta.cwiseAbs().maxCoeff())) {
            warned = false;
            break;
        }
    }
    if (warning) *warning = warned;
    return delta;
}

double observed_log_likelihood(const Dataset& data, const ModelParams& params,
                               const QuantileSpec& spec) {
    const int p = data.p();
    const Matrix sigma = spec.sigma_tilde(params.psi);
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw FitterError("log_likelihood: scale matrix not positive definite");
    const Matrix chol_l = llt.matrixL();
    const Vector wxi = chol_l.triangularView<Eigen::Lower>().solve(spec.skew);
    const double d = wxi.squaredNorm();
    const double nu = spec.bessel_order();

    double logdet = 0.0;
    for (int j = 0; j < p; ++j)
        logdet += 2.0 * std::log(params.delta[j]) + 2.0 * std::log(chol_l(j, j));
    const double constant =
        std::log(2.0) - 0.5 * p * std::log(2.0 * M_PI) - 0.5 * logdet;

    const Matrix resid = data.responses - data.design * params.beta.transpose();
    double total = 0.0;
#pragma omp parallel for reduction(+ : total) schedule(static)
    for (int i = 0; i < data.n(); ++i) {
        const Vector scaled =
            (resid.row(i).transpose().array() / params.delta.array()).matrix();
        const Vector wr = chol_l.triangularView<Eigen::Lower>().solve(scaled);
        const double m = std::max(wr.squaredNorm(), special::gig_b_floor);
        total += constant + wr.dot(wxi) + 0.5 * nu * std::log(m / (2.0 + d)) +
                 special::log_bessel_k(nu, std::sqrt((2.0 + d) * m));
    }
    return total;
}

ModelParams initial_params(const Dataset& data, const QuantileSpec& spec) {
    const int p = data.p();
    ModelParams params;
    // equation-by-equation least squares
    Eigen::LDLT<Matrix> ldlt(data.design.transpose() * data.design);
    params.beta = ldlt.solve(data.design.transpose() * data.responses).transpose();
    const Matrix resid = data.responses - data.design * params.beta.transpose();
    params.delta.resize(p);
    for (int j = 0; j < p; ++j)
        params.delta[j] =
            std::max(resid.col(j).cwiseAbs().mean() / spec.scale_diag[j], 1e-8);
    params.psi = Matrix::Identity(p, p);
    return params;
}

FitResult fit_em(const Dataset& data, const QuantileSpec& spec, const FitOptions& opts) {
    data.validate();
    if (data.p() != spec.dim()) throw FitterError("fit_em: spec/response dimension mismatch");

    FitResult result;
    ModelParams params = initial_params(data, spec);
    double prev_ll = observed_log_likelihood(data, params, spec);
    result.loglik_trace.push_back(prev_ll);

    for (int h = 0; h < opts.max_iter; ++h) {
        const EStepWeights weights = e_step(data, params, spec);
        const Matrix beta = m_step_beta(data, weights.z, params.delta, spec);
        bool repaired = false, degenerate = false, warned = false;
        const auto [sigma_raw, psi] =
            m_step_sigma(data, beta, weights, params.delta, spec, &repaired, &degenerate);
        (void)sigma_raw;
        const Vector delta =
            m_step_delta(data, beta, weights.z, psi, spec, params.delta, opts, &warned);
        result.psi_repaired |= repaired;
        result.sigma_degenerate |= degenerate;
        result.delta_solver_warning |= warned;

        ModelParams next{beta, delta, psi};
        double ll = observed_log_likelihood(data, next, spec);
        if (!std::isfinite(ll))
            throw FitterError("fit_em: log-likelihood diverged at iteration " +
                              std::to_string(h + 1));
        // The correlation projection makes the M-step approximate, so a full step
        // can lose likelihood near convergence.  Backtrack toward the previous
        // parameters; if nothing helps, hold position (which ends the loop below).
        for (int halvings = 0; ll < prev_ll && halvings < 40; ++halvings) {
            next.beta = 0.5 * (next.beta + params.beta);
            next.delta = 0.5 * (next.delta + params.delta);
            next.psi = 0.5 * (next.psi + params.psi);
            ll = observed_log_likelihood(data, next, spec);
        }
        if (ll < prev_ll) {
            next = params;
            ll = prev_ll;
        }
        const double param_change =
            std::max({(next.beta - params.beta).cwiseAbs().maxCoeff(),
                      (next.delta - params.delta).cwiseAbs().maxCoeff(),
                      (next.psi - params.psi).cwiseAbs().maxCoeff()});
        params = next;
        result.loglik_trace.push_back(ll);
        result.iterations = h + 1;
        if (std::fabs(ll - prev_ll) < opts.tol && param_change < opts.param_tol) {
            result.converged = true;
            prev_ll = ll;
            break;
        }
        prev_ll = ll;
    }
    result.params = params;
    result.final_weights = e_step(data, params, spec);
    return result;
}

}  // namespace mqr
