#pragma once

#include "mqr/em_fitter.hpp"

namespace mqr {

double soft_threshold(double v, double gamma);

// True when the first design column is all ones; that column is never penalized.
bool has_intercept_column(const Dataset& data);

struct LambdaGrid {
    Vector values;  // strictly decreasing, log-spaced, values[0] = lambda_max
    double ratio = 1e-3;
};

enum class CvScore { CheckLoss, HeldOutLogLik };

struct CvResult {
    LambdaGrid grid;
    Matrix fold_scores;   // m x K
    Vector mean_scores;   // m
    double chosen_lambda = 0.0;
    int chosen_index = 0;
    FitResult final_fit;
};

/// One penalized M-step for beta: cyclic coordinate descent with soft
/// thresholding, intercept column unpenalized. Agrees with m_step_beta at
/// lambda = 0.
Matrix pm_step_beta(const Dataset& data, const EStepWeights& weights, const Vector& delta,
                    const Matrix& psi, const QuantileSpec& spec, double lambda,
                    const Matrix& warm_start, bool* warning = nullptr);

LambdaGrid lambda_grid(const Dataset& data, const QuantileSpec& spec, int size = 100,
                       double ratio = 1e-3);

FitResult fit_pem(const Dataset& data, const QuantileSpec& spec, double lambda,
                  const FitOptions& opts = {}, const ModelParams* warm = nullptr);

CvResult cross_validate(const Dataset& data, const QuantileSpec& spec, int folds,
                        const LambdaGrid& grid, const FitOptions& opts, Rng& rng,
                        CvScore score = CvScore::CheckLoss);

// Null model used for the path start: intercepts (if any) fitted, every
// penalized coefficient exactly zero.
ModelParams null_model_params(const Dataset& data, const QuantileSpec& spec,
                              const FitOptions& opts = {});

}  // namespace mqr
