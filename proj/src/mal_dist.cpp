#include "mqr/mal_dist.hpp"

#include <cmath>
#include <stdexcept>

#include "mqr/special_fn.hpp"

namespace mqr {

std::pair<double, double> constraint_params(double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw std::domain_error("constraint_params: tau must lie in (0,1)");
    const double t = tau * (1.0 - tau);
    return {(1.0 - 2.0 * tau) / t, 2.0 / t};
}

QuantileSpec build_spec(const Vector& levels) {
    if (levels.size() < 1) throw std::domain_error("build_spec: need at least one level");
    QuantileSpec spec;
    spec.levels = levels;
    spec.skew.resize(levels.size());
    spec.scale_diag.resize(levels.size());
    for (int j = 0; j < levels.size(); ++j) {
        auto [xi, s2] = constraint_params(levels[j]);
        spec.skew[j] = xi;
        spec.scale_diag[j] = std::sqrt(s2);
    }
    return spec;
}

Matrix QuantileSpec::sigma_tilde(const Matrix& psi) const {
    return scale_diag.asDiagonal() * psi * scale_diag.asDiagonal();
}

void validate_correlation(const Matrix& psi) {
    const int p = static_cast<int>(psi.rows());
    if (psi.cols() != p) throw std::domain_error("correlation matrix must be square");
    if (!psi.isApprox(psi.transpose(), 1e-12))
        throw std::domain_error("correlation matrix must be symmetric");
    for (int j = 0; j < p; ++j)
        if (std::fabs(psi(j, j) - 1.0) > 1e-12)
            throw std::domain_error("correlation matrix must have unit diagonal");
    Eigen::SelfAdjointEigenSolver<Matrix> es(psi, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 1e-10)
        throw std::domain_error("correlation matrix is numerically singular");
}

double check_loss(double x, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::domain_error("check_loss: tau must lie in (0,1)");
    return x * (tau - (x < 0.0 ? 1.0 : 0.0));
}

double al_log_density(double y, double mu, double delta, double tau) {
    if (!(delta > 0.0)) throw std::domain_error("al_log_density: delta must be positive");
    const double t = tau * (1.0 - tau);
    return std::log(t / delta) - check_loss((y - mu) / delta, tau);
}

double mal_log_density(const Vector& y, const Vector& mu, const QuantileSpec& spec,
                       const Vector& delta, const Matrix& psi) {
    const int p = spec.dim();
    if (y.size() != p || mu.size() != p || delta.size() != p || psi.rows() != p)
        throw std::domain_error("mal_log_density: dimension mismatch");
    if ((delta.array() <= 0.0).any())
        throw std::domain_error("mal_log_density: delta must be positive");
    validate_correlation(psi);

    const Matrix sigma = spec.sigma_tilde(psi);
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw std::domain_error("mal_log_density: scale matrix not positive definite");

    const Vector r = y - mu;
    // whitened residual L^{-1} D^{-1} r and whitened skew L^{-1} xi
    const Vector wr = llt.matrixL().solve((r.array() / delta.array()).matrix());
    const Vector wxi = llt.matrixL().solve(spec.skew);

    const double m = std::max(wr.squaredNorm(), special::gig_b_floor);
    const double d = wxi.squaredNorm();
    const double nu = spec.bessel_order();

    double logdet = 0.0;  // log |D Sigma D|
    for (int j = 0; j < p; ++j)
        logdet += 2.0 * std::log(delta[j]) + 2.0 * std::log(llt.matrixL()(j, j));

    return std::log(2.0) + wr.dot(wxi) - 0.5 * p * std::log(2.0 * M_PI) - 0.5 * logdet +
           0.5 * nu * std::log(m / (2.0 + d)) +
           special::log_bessel_k(nu, std::sqrt((2.0 + d) * m));
}

Matrix sample_mal(const QuantileSpec& spec, const Vector& mu, const Vector& delta,
                  const Matrix& psi, Rng& rng, int n) {
    const int p = spec.dim();
    if (n < 1) throw std::domain_error("sample_mal: n must be positive");
    if (mu.size() != p || delta.size() != p || psi.rows() != p)
        throw std::domain_error("sample_mal: dimension mismatch");
    if ((delta.array() <= 0.0).any())
        throw std::domain_error("sample_mal: delta must be positive");
    validate_correlation(psi);

    const Matrix chol = Eigen::LLT<Matrix>(spec.sigma_tilde(psi)).matrixL();
    std::exponential_distribution<double> exp1(1.0);
    std::normal_distribution<double> stdnorm(0.0, 1.0);

    Matrix out(n, p);
    Vector z(p);
    for (int i = 0; i < n; ++i) {
        const double w = exp1(rng);
        for (int j = 0; j < p; ++j) z[j] = stdnorm(rng);
        out.row(i) = (mu.array() + delta.array() * spec.skew.array() * w +
                      std::sqrt(w) * delta.array() * (chol * z).array())
                         .transpose();
    }
    return out;
}

}  // namespace mqr
