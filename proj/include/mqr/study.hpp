#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mqr/em_fitter.hpp"
#include "mqr/penalized.hpp"

namespace mqr {

// Counter-based stream seeding: deterministic per-task generators independent
// of scheduling.
std::uint64_t splitmix64(std::uint64_t x);
Rng rng_for(std::uint64_t master_seed, std::uint64_t stream);

enum class ErrorFamily { Normal, StudentT };

struct DgpConfig {
    int n = 1000;
    Vector tau_levels;
    Matrix beta_true;   // p x k (column 0 = intercept)
    Vector delta_true;  // p
    Matrix psi_true;    // p x p
    ErrorFamily error_family = ErrorFamily::Normal;
    int t_dof = 3;
    std::uint64_t seed = 0;
};

struct McSummary {
    Matrix mean_joint, bias_joint, rmse_joint, sd_joint;  // p x k
    Matrix mean_uni, bias_uni, rmse_uni;                  // p x k
    Matrix beta_true;
    int B = 0;
    int excluded_joint = 0;
    int excluded_uni = 0;
};

struct TprSummary {
    std::vector<std::pair<int, int>> zero_coords;  // (response, covariate column)
    Vector tpr;                                    // percent, aligned with zero_coords
    int B = 0;
    int excluded = 0;
};

struct BootstrapResult {
    Matrix se;          // p x k
    Matrix replicates;  // B_kept x (p*k), row-major beta flattening
    int B = 0;
    int excluded = 0;
    std::uint64_t seed = 0;
};

Dataset simulate_dataset(const DgpConfig& config, Rng& rng);

McSummary run_monte_carlo(const DgpConfig& config, int B, const QuantileSpec& spec,
                          const FitOptions& opts = {});

struct TprOptions {
    int folds = 10;
    int grid_size = 25;
    double grid_ratio = 1e-3;
    FitOptions fit;
};

TprSummary run_tpr_study(const DgpConfig& config, int B, const TprOptions& opts = {});

BootstrapResult bootstrap_se(const Dataset& data, const QuantileSpec& spec, int B,
                             const FitOptions& opts, std::uint64_t seed);

// Section-5 simulation presets.
DgpConfig preset_table1(char panel, ErrorFamily family, std::uint64_t seed);  // 'A','B','C'
DgpConfig preset_table3(const Vector& tau_levels, ErrorFamily family, std::uint64_t seed);
const std::vector<std::pair<int, int>>& table3_zero_coords();

struct CsvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Header row required; the first `responses` columns are responses, the rest
// covariates; an intercept column is prepended unless add_intercept is false.
Dataset load_csv(const std::string& path, int responses, bool add_intercept = true);

// Report rendering (JSON strings and aligned text tables).
std::string fit_report_json(const FitResult& fit, const QuantileSpec& spec);
std::string fit_report_text(const FitResult& fit, const QuantileSpec& spec);
std::string mc_report_json(const McSummary& s);
std::string mc_report_text(const McSummary& s);
std::string tpr_report_json(const TprSummary& s);
std::string tpr_report_text(const TprSummary& s);
std::string bootstrap_report_json(const BootstrapResult& s);
std::string bootstrap_report_text(const BootstrapResult& s);
std::string cv_report_json(const CvResult& cv, const QuantileSpec& spec);
std::string cv_report_text(const CvResult& cv, const QuantileSpec& spec);

void set_threads(int threads);

// CLI entry point (exit codes: 0 success, 1 numerical failure, 2 input error).
int run_cli(const std::vector<std::string>& args);

}  // namespace mqr
