#pragma once

namespace mqr::special {

// Parameters of a GIG(nu, a, b) distribution with density
// proportional to w^{nu-1} exp(-(a w + b/w)/2).
struct GigParams {
    double order;         // nu
    double rate;          // a, coefficient of w
    double inverse_rate;  // b, coefficient of 1/w
};

struct GigMoments {
    double mean;          // E[W]
    double inverse_mean;  // E[1/W]
};

// Lower clamp applied to the 1/w coefficient by callers before forming
// GigParams; keeps the moment formulas finite when a residual is exactly zero.
inline constexpr double gig_b_floor = 1e-12;

/// ln K_nu(x), the log of the modified Bessel function of the third kind.
/// Valid for any real nu (uses K_{-nu} = K_nu) and x > 0.
double log_bessel_k(double order, double x);

/// K_{nu+1}(x) / K_nu(x), evaluated without over/underflowing intermediates.
double bessel_k_ratio(double order, double x);

/// E[W] and E[1/W] for W ~ GIG(nu, a, b):
///   E[W]   = sqrt(b/a) R,   E[1/W] = sqrt(a/b) R - 2 nu / b,
/// with R = K_{nu+1}(sqrt(ab)) / K_nu(sqrt(ab)).
GigMoments gig_moments(const GigParams& params);

}  // namespace mqr::special
