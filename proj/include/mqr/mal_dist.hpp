#pragma once

#include <Eigen/Dense>
#include <random>
#include <utility>

namespace mqr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Skew and squared scale-diagonal induced by a quantile level:
/// ((1-2t)/(t(1-t)), 2/(t(1-t))).
std::pair<double, double> constraint_params(double tau);

/// Quantile-level vector with the induced skew vector and scale diagonal.
struct QuantileSpec {
    Vector levels;      // tau_j in (0,1)
    Vector skew;        // xi_j = (1-2 tau_j)/(tau_j(1-tau_j))
    Vector scale_diag;  // sigma_j = sqrt(2/(tau_j(1-tau_j)))

    int dim() const { return static_cast<int>(levels.size()); }
    double bessel_order() const { return (2.0 - dim()) / 2.0; }

    // Lambda Psi Lambda; the scale matrix is always derived, never stored.
    Matrix sigma_tilde(const Matrix& psi) const;
};

QuantileSpec build_spec(const Vector& levels);

/// Regression coefficients (p x k), marginal scales delta and correlation Psi.
struct ModelParams {
    Matrix beta;
    Vector delta;
    Matrix psi;
};

// Throws std::domain_error unless psi is symmetric with unit diagonal and its
// smallest eigenvalue exceeds 1e-10.
void validate_correlation(const Matrix& psi);

double check_loss(double x, double tau);

double al_log_density(double y, double mu, double delta, double tau);

double mal_log_density(const Vector& y, const Vector& mu, const QuantileSpec& spec,
                       const Vector& delta, const Matrix& psi);

/// n draws (rows) from MAL(mu, D xi, D Sigma D) via the exponential
/// location-scale mixture; Sigma^{1/2} is the lower Cholesky factor.
Matrix sample_mal(const QuantileSpec& spec, const Vector& mu, const Vector& delta,
                  const Matrix& psi, Rng& rng, int n);

}  // namespace mqr
