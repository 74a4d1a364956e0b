// Micro-benchmark: OpenMP E-step kernel vs the serial reference, plus one
// end-to-end EM fit, on a Panel-A style simulated dataset.
#include <chrono>
#include <cstdio>

#include "mqr/study.hpp"

using namespace mqr;

namespace {

template <typename F>
double time_ms(int reps, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main(int argc, char** argv) {
    const int n = argc > 1 ? std::atoi(argv[1]) : 20000;
    const int reps = argc > 2 ? std::atoi(argv[2]) : 20;

    DgpConfig config = preset_table1('A', ErrorFamily::Normal, 42);
    config.n = n;
    Rng rng = rng_for(config.seed, 0);
    const Dataset data = simulate_dataset(config, rng);
    const QuantileSpec spec = build_spec(config.tau_levels);
    const ModelParams params = initial_params(data, spec);

    volatile double sink = 0.0;
    const double serial_ms =
        time_ms(reps, [&] { sink = sink + e_step_serial(data, params, spec).u.sum(); });
    const double parallel_ms =
        time_ms(reps, [&] { sink = sink + e_step(data, params, spec).u.sum(); });

    std::printf("e_step, n=%d, p=%d, %d reps\n", n, spec.dim(), reps);
    std::printf("  serial reference: %8.3f ms\n", serial_ms);
    std::printf("  OpenMP kernel:    %8.3f ms  (speedup %.2fx)\n", parallel_ms,
                serial_ms / parallel_ms);

    const auto t0 = std::chrono::steady_clock::now();
    const FitResult fit = fit_em(data, spec);
    const auto t1 = std::chrono::steady_clock::now();
    std::printf("fit_em: %d iterations, converged=%d, %.1f ms total\n", fit.iterations,
                fit.converged ? 1 : 0,
                std::chrono::duration<double, std::milli>(t1 - t0).count());
    return sink == 12345.0 ? 1 : 0;
}
