#pragma once
// Shared test utilities: independent numerical oracles and random problem
// generators. Everything here is deliberately implemented from first
// principles (quadrature, IRLS, inverse CDFs) so the tests do not reuse the
// library's own numerics as their reference.

#include <cmath>
#include <random>
#include <vector>

#include "mqr/em_fitter.hpp"

namespace testutil {

using mqr::Matrix;
using mqr::Rng;
using mqr::Vector;

// ln K_nu(x) via Simpson quadrature of K_nu(x) = int_0^inf e^{-x cosh t} cosh(nu t) dt,
// factored as e^{-x} int_0^inf e^{-x(cosh t - 1)} cosh(nu t) dt to stay in range.
inline double oracle_log_bessel_k(double nu, double x, int nodes = 400000) {
    nu = std::fabs(nu);
    double tmax = 1.0;
    while (x * (std::cosh(tmax) - 1.0) - nu * tmax < 60.0) tmax *= 1.25;
    const double h = tmax / nodes;
    double sum = 0.0;
    for (int i = 0; i <= nodes; ++i) {
        const double t = i * h;
        const double f = std::exp(-x * (std::cosh(t) - 1.0)) * std::cosh(nu * t);
        sum += f * (i == 0 || i == nodes ? 1.0 : (i % 2 ? 4.0 : 2.0));
    }
    return -x + std::log(sum * h / 3.0);
}

// Random correlation matrix: normalized Gram matrix of a p x (p+4) Gaussian draw.
inline Matrix random_correlation(int p, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix a(p, p + 4);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p + 4; ++j) a(i, j) = n01(rng);
    const Matrix s = a * a.transpose();
    const Vector d = s.diagonal().cwiseSqrt().cwiseInverse();
    Matrix psi = d.asDiagonal() * s * d.asDiagonal();
    psi = 0.5 * (psi + psi.transpose());
    psi.diagonal().setOnes();
    return psi;
}

// Regression dataset whose errors follow the constrained MAL exactly.
inline mqr::Dataset mal_dataset(int n, const Matrix& beta, const Vector& delta,
                                const Matrix& psi, const mqr::QuantileSpec& spec,
                                Rng& rng) {
    const int p = static_cast<int>(beta.rows());
    const int k = static_cast<int>(beta.cols());
    std::normal_distribution<double> n01(0.0, 1.0);
    mqr::Dataset data;
    data.design.resize(n, k);
    data.design.col(0).setOnes();
    for (int i = 0; i < n; ++i)
        for (int s = 1; s < k; ++s) data.design(i, s) = n01(rng);
    const Matrix noise = mqr::sample_mal(spec, Vector::Zero(p), delta, psi, rng, n);
    data.responses = data.design * beta.transpose() + noise;
    return data;
}

// Check-loss objective sum_i rho_tau(y_i - x_i' b).
inline double check_objective(const Vector& y, const Matrix& x, const Vector& b,
                              double tau) {
    double total = 0.0;
    for (int i = 0; i < y.size(); ++i) {
        const double r = y[i] - x.row(i).dot(b);
        total += r * (tau - (r < 0.0 ? 1.0 : 0.0));
    }
    return total;
}

// Iteratively reweighted least squares for the check loss (Schlossmacher):
// w_i = |tau - 1{r_i < 0}| / max(|r_i|, floor), iterated from the OLS start.
inline Vector irls_quantile(const Vector& y, const Matrix& x, double tau,
                            int iters = 2000, double floor_val = 1e-9) {
    const int n = static_cast<int>(x.rows()), k = static_cast<int>(x.cols());
    Vector b = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    for (int it = 0; it < iters; ++it) {
        Vector w(n);
        for (int i = 0; i < n; ++i) {
            const double r = y[i] - x.row(i).dot(b);
            w[i] = (r < 0.0 ? 1.0 - tau : tau) / std::max(std::fabs(r), floor_val);
        }
        const Matrix xtwx = x.transpose() * w.asDiagonal() * x;
        const Vector next = xtwx.ldlt().solve(x.transpose() * (w.asDiagonal() * y));
        if ((next - b).cwiseAbs().maxCoeff() < 1e-14) {
            b = next;
            break;
        }
        b = next;
    }
    // Polish: a quantile-regression solution interpolates k observations; refit
    // exactly through the k smallest-residual points if that lowers the loss.
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int c) {
        return std::fabs(y[a] - x.row(a).dot(b)) < std::fabs(y[c] - x.row(c).dot(b));
    });
    Matrix xs(k, k);
    Vector ys(k);
    for (int i = 0; i < k; ++i) {
        xs.row(i) = x.row(idx[i]);
        ys[i] = y[idx[i]];
    }
    const Eigen::FullPivLU<Matrix> lu(xs);
    if (lu.isInvertible()) {
        const Vector cand = lu.solve(ys);
        if (check_objective(y, x, cand, tau) <= check_objective(y, x, b, tau)) b = cand;
    }
    return b;
}

// Inverse-CDF sampler for the univariate AL(mu, delta, tau) distribution.
inline double al_quantile(double u, double mu, double delta, double tau) {
    if (u < tau) return mu + delta / (1.0 - tau) * std::log(u / tau);
    return mu - delta / tau * std::log((1.0 - u) / (1.0 - tau));
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double d = 0.0;
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j])
            ++i;
        else
            ++j;
        d = std::max(d, std::fabs(double(i) / a.size() - double(j) / b.size()));
    }
    return d;
}

}  // namespace testutil
