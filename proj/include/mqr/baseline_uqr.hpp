#pragma once

#include "mqr/em_fitter.hpp"

namespace mqr {

struct UnivariateFit {
    Vector beta;
    double delta = 0.0;
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Univariate AL quantile regression; the p = 1 specialization of the EM fitter.
UnivariateFit fit_univariate_qr(const Vector& y, const Matrix& x, double tau,
                                const FitOptions& opts = {});

}  // namespace mqr
