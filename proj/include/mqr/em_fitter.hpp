#pragma once

#include <string>
#include <vector>

#include "mqr/mal_dist.hpp"

namespace mqr {

struct Dataset {
    Matrix responses;  // n x p
    Matrix design;     // n x k (first column all ones when an intercept is used)

    int n() const { return static_cast<int>(responses.rows()); }
    int p() const { return static_cast<int>(responses.cols()); }
    int k() const { return static_cast<int>(design.cols()); }

    // n > k, full-column-rank design, no zero-variance response column.
    void validate() const;
};

struct EStepWeights {
    Vector u;  // E[W_i | .]
    Vector z;  // E[1/W_i | .]
};

struct FitOptions {
    int max_iter = 500;
    double tol = 1e-6;
    double delta_solver_tol = 1e-10;
    int delta_solver_max_iter = 100;
    double param_tol = 1e-5;  // additional stop rule on max parameter change
};

struct FitResult {
    ModelParams params;
    std::vector<double> loglik_trace;
    int iterations = 0;
    bool converged = false;
    EStepWeights final_weights;
    bool psi_repaired = false;       // nearest-correlation repair was needed
    bool sigma_degenerate = false;   // raw Sigma update was (near) zero
    bool delta_solver_warning = false;
};

struct FitterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

EStepWeights e_step(const Dataset& data, const ModelParams& params, const QuantileSpec& spec);
// Plain serial loop kept as the reference implementation for the OpenMP kernel.
EStepWeights e_step_serial(const Dataset& data, const ModelParams& params,
                           const QuantileSpec& spec);

Matrix m_step_beta(const Dataset& data, const Vector& z, const Vector& delta,
                   const QuantileSpec& spec);

// Returns the raw (unconstrained) Sigma update and the projected correlation.
std::pair<Matrix, Matrix> m_step_sigma(const Dataset& data, const Matrix& beta,
                                       const EStepWeights& weights, const Vector& delta,
                                       const QuantileSpec& spec, bool* repaired = nullptr,
                                       bool* degenerate = nullptr);

Vector m_step_delta(const Dataset& data, const Matrix& beta, const Vector& z,
                    const Matrix& psi, const QuantileSpec& spec, const Vector& current_delta,
                    const FitOptions& opts, bool* warning = nullptr);

double observed_log_likelihood(const Dataset& data, const ModelParams& params,
                               const QuantileSpec& spec);

ModelParams initial_params(const Dataset& data, const QuantileSpec& spec);

FitResult fit_em(const Dataset& data, const QuantileSpec& spec, const FitOptions& opts = {});

// Eigenvalue clipping at 1e-8 followed by renormalization to unit diagonal.
Matrix nearest_correlation(const Matrix& m);

}  // namespace mqr
