#include "mqr/study.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

namespace mqr {

namespace {

using nlohmann::json;

// JSON config files mirror the CLI flags; nested objects map to subcommands.
// Command-line values take precedence over file values (CLI11 default).
class JsonConfig : public CLI::Config {
  public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        return "{}\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            j = json::parse(input);
        } catch (const json::parse_error& e) {
            throw CLI::FileError(std::string("config file is not valid JSON: ") + e.what());
        }
        std::vector<CLI::ConfigItem> out;
        walk(j, {}, out);
        return out;
    }

  private:
    static void walk(const json& j, std::vector<std::string> parents,
                     std::vector<CLI::ConfigItem>& out) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it->is_object()) {
                auto p = parents;
                p.push_back(it.key());
                walk(*it, std::move(p), out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = it.key();
            if (it->is_array())
                for (const auto& v : *it) item.inputs.push_back(scalar(v));
            else
                item.inputs.push_back(scalar(*it));
            out.push_back(std::move(item));
        }
    }

    static std::string scalar(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }
};

struct GlobalFlags {
    std::uint64_t seed = 0;
    int threads = 0;
    std::string out;
    std::string format = "json";
};

void emit(const std::string& text, const GlobalFlags& g) {
    if (g.out.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream f(g.out);
    if (!f) throw CsvError(g.out + ": cannot open output file");
    f << text;
}

ErrorFamily parse_family(const std::string& name) {
    if (name == "normal") return ErrorFamily::Normal;
    if (name == "t" || name == "student-t") return ErrorFamily::StudentT;
    throw std::domain_error("unknown error family '" + name + "' (use normal|t)");
}

Vector to_vector(const std::vector<double>& v) {
    Vector out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i];
    return out;
}

// table1-panel{A,B,C}: normal errors; table2-panel{A,B,C}: Student-t errors;
// table3-panel{A,B,C}-{normal,t}: sparse 4-covariate design for the TPR study.
DgpConfig preset_by_name(const std::string& name, std::uint64_t seed, bool* is_tpr) {
    auto panel_tau = [](char panel) {
        return preset_table1(panel, ErrorFamily::Normal, 0).tau_levels;
    };
    *is_tpr = false;
    if (name.rfind("table1-panel", 0) == 0 && name.size() == 13)
        return preset_table1(name[12], ErrorFamily::Normal, seed);
    if (name.rfind("table2-panel", 0) == 0 && name.size() == 13)
        return preset_table1(name[12], ErrorFamily::StudentT, seed);
    if (name.rfind("table3-panel", 0) == 0 && name.size() >= 15 && name[13] == '-') {
        *is_tpr = true;
        const char panel = name[12];
        if (panel < 'A' || panel > 'C')
            throw std::domain_error("unknown preset '" + name + "'");
        return preset_table3(panel_tau(panel), parse_family(name.substr(14)), seed);
    }
    throw std::domain_error("unknown preset '" + name + "'");
}

Vector tau_or_default(const std::vector<double>& tau, int p) {
    if (tau.empty()) return Vector::Constant(p, 0.5);
    if (static_cast<int>(tau.size()) != p)
        throw std::domain_error("--tau must list one level per response (" +
                                std::to_string(p) + " expected, got " +
                                std::to_string(tau.size()) + ")");
    return to_vector(tau);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Joint quantile regression under a constrained multivariate "
                 "asymmetric Laplace model"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "JSON config file mirroring the CLI flags");
    app.config_formatter(std::make_shared<JsonConfig>());

    GlobalFlags g;
    app.add_option("--seed", g.seed, "master RNG seed");
    app.add_option("--threads", g.threads, "worker thread count (0 = library default)");
    app.add_option("--out", g.out, "output path (default: stdout)");
    app.add_option("--format", g.format, "report format")
        ->check(CLI::IsMember({"json", "text"}));

    FitOptions fopts;
    app.add_option("--max-iter", fopts.max_iter, "EM iteration cap");
    app.add_option("--tol", fopts.tol, "log-likelihood convergence tolerance");

    // shared data-ingestion flags
    std::string data_path;
    int responses = 1;
    bool no_intercept = false;
    std::vector<double> tau;
    auto add_data_flags = [&](CLI::App* cmd) {
        cmd->add_option("--data", data_path, "CSV file (header row required)")->required();
        cmd->add_option("--responses", responses,
                        "number of leading response columns")->check(CLI::PositiveNumber);
        cmd->add_flag("--no-intercept", no_intercept, "do not prepend an intercept column");
        cmd->add_option("--tau", tau, "comma-separated quantile levels, one per response")
            ->delimiter(',');
    };

    auto* fit_cmd = app.add_subcommand("fit", "joint quantile regression fit");
    add_data_flags(fit_cmd);

    auto* lasso_cmd =
        app.add_subcommand("lasso", "penalized fit: lambda path with K-fold CV");
    add_data_flags(lasso_cmd);
    int folds = 10, grid_size = 100;
    double grid_ratio = 1e-3, fixed_lambda = -1.0;
    lasso_cmd->add_option("--folds", folds, "CV folds")->check(CLI::Range(2, 1000000));
    lasso_cmd->add_option("--grid-size", grid_size, "lambda grid size")
        ->check(CLI::PositiveNumber);
    lasso_cmd->add_option("--grid-ratio", grid_ratio,
                          "lambda_min / lambda_max")->check(CLI::PositiveNumber);
    lasso_cmd->add_option("--lambda", fixed_lambda,
                          "fit at this fixed lambda instead of cross-validating");

    auto* boot_cmd = app.add_subcommand("bootstrap", "nonparametric bootstrap standard errors");
    add_data_flags(boot_cmd);
    int boot_reps = 500;
    boot_cmd->add_option("--reps", boot_reps, "bootstrap resamples")
        ->check(CLI::Range(2, 1000000));

    auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo bias/RMSE study");
    std::string preset, family_name = "normal";
    int reps = 100, sim_n = 1000;
    sim_cmd->add_option("--preset", preset, "table1-panel{A,B,C} or table2-panel{A,B,C}");
    sim_cmd->add_option("--tau", tau, "quantile levels (overrides preset)")->delimiter(',');
    sim_cmd->add_option("--family", family_name, "error family: normal|t");
    sim_cmd->add_option("--reps", reps, "Monte Carlo replications")
        ->check(CLI::Range(2, 1000000));
    sim_cmd->add_option("--n", sim_n, "sample size per replication")
        ->check(CLI::PositiveNumber);

    auto* tpr_cmd = app.add_subcommand("tpr-study", "LASSO true-positive-rate study");
    TprOptions topts;
    tpr_cmd->add_option("--preset", preset, "table3-panel{A,B,C}-{normal,t}");
    tpr_cmd->add_option("--tau", tau, "quantile levels (overrides preset)")->delimiter(',');
    tpr_cmd->add_option("--family", family_name, "error family: normal|t");
    tpr_cmd->add_option("--reps", reps, "replications");
    tpr_cmd->add_option("--n", sim_n, "sample size per replication")
        ->check(CLI::PositiveNumber);
    tpr_cmd->add_option("--folds", topts.folds, "CV folds")->check(CLI::Range(2, 1000000));
    tpr_cmd->add_option("--grid-size", topts.grid_size, "lambda grid size")
        ->check(CLI::PositiveNumber);
    tpr_cmd->add_option("--grid-ratio", topts.grid_ratio, "lambda_min / lambda_max")
        ->check(CLI::PositiveNumber);

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const bool json_out = g.format == "json";
    try {
        set_threads(g.threads);
        if (*fit_cmd) {
            const Dataset data = load_csv(data_path, responses, !no_intercept);
            data.validate();
            const QuantileSpec spec = build_spec(tau_or_default(tau, data.p()));
            const FitResult fit = fit_em(data, spec, fopts);
            emit(json_out ? fit_report_json(fit, spec) : fit_report_text(fit, spec), g);
        } else if (*lasso_cmd) {
            const Dataset data = load_csv(data_path, responses, !no_intercept);
            data.validate();
            const QuantileSpec spec = build_spec(tau_or_default(tau, data.p()));
            if (fixed_lambda >= 0.0) {
                const FitResult fit = fit_pem(data, spec, fixed_lambda, fopts);
                emit(json_out ? fit_report_json(fit, spec) : fit_report_text(fit, spec), g);
            } else {
                const LambdaGrid grid = lambda_grid(data, spec, grid_size, grid_ratio);
                Rng rng = rng_for(g.seed, 0);
                const CvResult cv = cross_validate(data, spec, folds, grid, fopts, rng);
                emit(json_out ? cv_report_json(cv, spec) : cv_report_text(cv, spec), g);
            }
        } else if (*boot_cmd) {
            const Dataset data = load_csv(data_path, responses, !no_intercept);
            data.validate();
            const QuantileSpec spec = build_spec(tau_or_default(tau, data.p()));
            const BootstrapResult boot = bootstrap_se(data, spec, boot_reps, fopts, g.seed);
            emit(json_out ? bootstrap_report_json(boot) : bootstrap_report_text(boot), g);
        } else if (*sim_cmd) {
            bool is_tpr = false;
            DgpConfig config = preset.empty()
                                   ? preset_table1('A', parse_family(family_name), g.seed)
                                   : preset_by_name(preset, g.seed, &is_tpr);
            if (is_tpr)
                throw std::domain_error("preset '" + preset +
                                        "' belongs to tpr-study, not simulate");
            if (preset.empty() || sim_cmd->count("--family"))
                config.error_family = parse_family(family_name);
            if (!tau.empty()) config.tau_levels = tau_or_default(tau, config.beta_true.rows());
            config.n = sim_n;
            config.seed = g.seed;
            const McSummary s =
                run_monte_carlo(config, reps, build_spec(config.tau_levels), fopts);
            emit(json_out ? mc_report_json(s) : mc_report_text(s), g);
        } else if (*tpr_cmd) {
            bool is_tpr = true;
            DgpConfig config =
                preset.empty()
                    ? preset_table3(Vector::Constant(3, 0.5), parse_family(family_name),
                                    g.seed)
                    : preset_by_name(preset, g.seed, &is_tpr);
            if (!is_tpr)
                throw std::domain_error("preset '" + preset +
                                        "' belongs to simulate, not tpr-study");
            if (tpr_cmd->count("--family")) config.error_family = parse_family(family_name);
            if (!tau.empty()) config.tau_levels = tau_or_default(tau, config.beta_true.rows());
            config.n = sim_n;
            config.seed = g.seed;
            topts.fit = fopts;
            const TprSummary s = run_tpr_study(config, reps, topts);
            emit(json_out ? tpr_report_json(s) : tpr_report_text(s), g);
        }
    } catch (const FitterError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace mqr
