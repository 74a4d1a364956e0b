#include "mqr/special_fn.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_sf_bessel.h>

#include <cmath>
#include <mutex>
#include <stdexcept>
#include <string>

namespace mqr::special {

namespace {

void disable_gsl_abort() {
    static std::once_flag flag;
    std::call_once(flag, [] { gsl_set_error_handler_off(); });
}

// ln K_{1/2}(x) = 0.5 ln(pi/(2x)) - x
double log_k_half(double x) { return 0.5 * std::log(M_PI / (2.0 * x)) - x; }

}  // namespace

double log_bessel_k(double order, double x) {
    if (!(x > 0.0)) throw std::domain_error("log_bessel_k: x must be positive");
    double nu = std::fabs(order);  // K_{-nu} = K_nu
    if (nu == 0.5) return log_k_half(x);
    if (nu == 1.5) return log_k_half(x) + std::log1p(1.0 / x);
    disable_gsl_abort();
    gsl_sf_result res;
    int status = gsl_sf_bessel_lnKnu_e(nu, x, &res);
    if (status != GSL_SUCCESS)
        throw std::domain_error("log_bessel_k: gsl_sf_bessel_lnKnu failed (nu=" +
                                std::to_string(nu) + ", x=" + std::to_string(x) + ")");
    return res.val;
}

double bessel_k_ratio(double order, double x) {
    if (!(x > 0.0)) throw std::domain_error("bessel_k_ratio: x must be positive");
    // Half-integer fast paths cover the p = 1 and p = 3 model orders.
    if (order == -0.5) return 1.0;                       // K_{1/2}/K_{-1/2}
    if (order == 0.5) return 1.0 + 1.0 / x;              // K_{3/2}/K_{1/2}
    if (order == -1.5) return 1.0 / (1.0 + 1.0 / x);     // K_{-1/2}/K_{-3/2}
    return std::exp(log_bessel_k(order + 1.0, x) - log_bessel_k(order, x));
}

GigMoments gig_moments(const GigParams& params) {
    if (!(params.rate > 0.0) || !(params.inverse_rate > 0.0))
        throw std::domain_error("gig_moments: rate and inverse_rate must be positive");
    const double a = params.rate, b = params.inverse_rate, nu = params.order;
    const double x = std::sqrt(a * b);
    const double ratio = bessel_k_ratio(nu, x);
    return {std::sqrt(b / a) * ratio, std::sqrt(a / b) * ratio - 2.0 * nu / b};
}

}  // namespace mqr::special
