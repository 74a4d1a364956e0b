#include "mqr/baseline_uqr.hpp"

namespace mqr {

UnivariateFit fit_univariate_qr(const Vector& y, const Matrix& x, double tau,
                                const FitOptions& opts) {
    Dataset data;
    data.responses = y;
    data.design = x;
    Vector level(1);
    level[0] = tau;
    const FitResult fit = fit_em(data, build_spec(level), opts);
    UnivariateFit out;
    out.beta = fit.params.beta.row(0).transpose();
    out.delta = fit.params.delta[0];
    out.loglik = fit.loglik_trace.back();
    out.iterations = fit.iterations;
    out.converged = fit.converged;
    return out;
}

}  // namespace mqr
