#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "erelab/app.hpp"

using namespace erelab;

int main(int argc, char** argv) {
    CLI::App cli{"ere-lab: closed-loop equilibrium strategies for time-inconsistent "
                 "forward-backward LQ control"};
    cli.require_subcommand(1);

    app::RunConfig cfg;

    auto add_common = [&](CLI::App* sub, bool needs_input) {
        if (needs_input)
            sub->add_option("--input", cfg.input,
                            "problem file (JSON) or built-in name: example1, "
                            "classical_reduction, discounted_2x2, smoke_3x2x2, kinked_g2")
                ->required();
        sub->add_option("--out", cfg.out_dir, "output directory")->required();
        sub->add_option("--grid", cfg.grid_override, "override the number of grid steps N");
    };

    CLI::App* validate = cli.add_subcommand("validate", "check assumptions H1-H3 (H4/H5 warn)");
    add_common(validate, true);

    CLI::App* solve = cli.add_subcommand("solve", "solve the equilibrium Riccati system");
    add_common(solve, true);
    solve->add_option("--tol", cfg.tol, "fixed-point tolerance");
    solve->add_option("--max-iters", cfg.max_iters, "total Gamma evaluation budget");
    solve->add_flag("--override-assumptions", cfg.override_assumptions,
                    "solve even if H2 fails");
    solve->add_option("--mollify", cfg.mollify_eps, "mollify weight data with this eps first");

    CLI::App* verify = cli.add_subcommand("verify", "Monte Carlo cross-checks of a solve");
    add_common(verify, true);
    verify->add_option("--paths", cfg.paths, "Monte Carlo paths");
    verify->add_option("--seed", cfg.seed, "Monte Carlo seed");
    verify->add_flag("--antithetic", cfg.antithetic, "antithetic pairs");

    CLI::App* example1 = cli.add_subcommand("example1", "integrate the scalar blow-up example");
    example1->add_option("--out", cfg.out_dir, "output directory")->required();
    example1->add_option("--grid", cfg.grid_override, "grid steps (default 800)");

    CLI::App* tri = cli.add_subcommand("export-triangle", "export the full P1(t,s) triangle");
    add_common(tri, true);
    tri->add_option("--triangle-cap", cfg.triangle_cap, "max cells to export");

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = cli.exit(e);
        return code == 0 ? 0 : app::kUsage;
    }

    return app::run_mapped([&]() -> int {
        if (validate->parsed()) return app::cmd_validate(cfg);
        if (solve->parsed()) return app::cmd_solve(cfg);
        if (verify->parsed()) return app::cmd_verify(cfg);
        if (example1->parsed()) return app::cmd_example1(cfg);
        if (tri->parsed()) return app::cmd_export_triangle(cfg);
        return app::kUsage;
    });
}
