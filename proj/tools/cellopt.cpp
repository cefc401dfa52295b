// cellopt: mesh generation, cell problem solves, shape optimization runs and
// adjoint gradient checks for the periodic unit cell.

#include "cellopt/config.hpp"
#include "cellopt/cost.hpp"
#include "cellopt/io.hpp"
#include "cellopt/optimizer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

using namespace cellopt;
namespace fs = std::filesystem;

namespace {

enum ExitCode { ok = 0, config_error = 2, degenerate = 3, solver_failure = 4, line_search = 5, other = 1 };

struct Options {
    std::string config;
    std::string out;
    std::optional<unsigned> seed;
    bool fixed_order = false; // assembly is always sequential in index order
};

RunConfig load(const Options& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (!o.out.empty()) c.output.directory = o.out;
    if (o.seed) c.gradient_check.seed = *o.seed;
    return c;
}

Mesh build_mesh(const RunConfig& c) {
    if (!c.geometry.mesh.empty()) return load_mesh(c.geometry.mesh);
    return generate_reference_mesh(c.geometry.radius, c.geometry.refinements);
}

fs::path prepare_dir(const RunConfig& c) {
    fs::path dir(c.output.directory);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
    std::ofstream(dir / "config.ini") << write_config(c);
    return dir;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_mesh(const Options& o) {
    const RunConfig c = load(o);
    const Mesh mesh = build_mesh(c);
    const fs::path dir = prepare_dir(c);
    save_mesh(mesh, (dir / "mesh.txt").string());
    std::cout << "cells: " << mesh.num_cells() << "\n"
              << "vertices: " << mesh.num_vertices() << "\n"
              << "interface faces: " << mesh.interface_faces.size() << "\n"
              << "mesh hash: " << hex_hash(mesh_hash(mesh)) << "\n";
    return ok;
}

int run_solve_cell(const Options& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig c = load(o);
    const Mesh mesh = build_mesh(c);
    const fs::path dir = prepare_dir(c);
    const FeSpace space(mesh);
    const DeformationField q = c.deformation.empty() ? zero_deformation(mesh) : load_deformation(c.deformation, mesh);
    const double min_J = min_jacobian(space, q);
    if (!(min_J > 0.0)) throw DegenerateDeformation("deformation has min J = " + std::to_string(min_J));

    CellProblem cp(space, c.material);
    const auto st = cp.solve(q);
    const auto eff = cp.effective_tensor(q, st.chi);

    save_vtk((dir / "corrector.vtk").string(), mesh, {&q, &st.chi.nodal, cell_min_jacobians(space, q)},
             "cellopt corrector");
    Json report{{"command", "solve-cell"},
                {"status", "ok"},
                {"mesh", mesh_summary(mesh)},
                {"sigma", to_json(drude_sigma(c.material))},
                {"min_J", min_J},
                {"effective_tensor", to_json(eff.value)},
                {"target", to_json(c.cost.target)},
                {"deviation_percent", eff.deviation_percent(c.cost.target)},
                {"wall_time_s", seconds_since(t0)}};
    save_json((dir / "report.json").string(), report);
    std::printf("eps_eff:\n  %.8f%+.8fi  %.8f%+.8fi\n  %.8f%+.8fi  %.8f%+.8fi\n", eff.value(0, 0).real(),
                eff.value(0, 0).imag(), eff.value(0, 1).real(), eff.value(0, 1).imag(), eff.value(1, 0).real(),
                eff.value(1, 0).imag(), eff.value(1, 1).real(), eff.value(1, 1).imag());
    std::printf("deviation: %.4f%%\n", eff.deviation_percent(c.cost.target));
    return ok;
}

int run_optimize(const Options& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig c = load(o);
    const Mesh mesh = build_mesh(c);
    const fs::path dir = prepare_dir(c);
    const FeSpace space(mesh);
    ReducedCost cost(space, c.material, c.cost);
    const DeformationField q0 = c.deformation.empty() ? zero_deformation(mesh) : load_deformation(c.deformation, mesh);
    const Eigen::VectorXd x0 = cost.to_control(q0);

    std::ofstream log(dir / "log.csv");
    if (!log) throw Error("cannot open '" + (dir / "log.csv").string() + "' for writing");
    log << csv_header() << "\n";
    int last_vtk = -1;
    auto snapshot = [&](const IterationRecord& r, const ReducedCost::Evaluation& ev) {
        if (!ev.state || r.step == last_vtk) return;
        char name[32];
        std::snprintf(name, sizeof name, "step_%05d.vtk", r.step);
        save_vtk((dir / name).string(), mesh, {&ev.q, &ev.state->chi.nodal, cell_min_jacobians(space, ev.q)},
                 "cellopt step " + std::to_string(r.step));
        last_vtk = r.step;
    };
    auto on_iterate = [&](const IterationRecord& r, const ReducedCost::Evaluation& ev) {
        write_csv_row(log, r);
        log.flush();
        if (c.output.vtk_every > 0 && r.step % c.output.vtk_every == 0) snapshot(r, ev);
        std::printf("step %4d  stage %d  beta %.3g  total %.6e  deviation %.4f%%  optimality %.3e  lambda %.3g\n",
                    r.step, r.stage, r.beta, r.total, r.deviation_percent, r.optimality, r.lambda);
        std::fflush(stdout);
    };

    const OptimizeResult res = optimize(cost, x0, c.stages(), c.optimizer, on_iterate);

    auto final_eval = cost.evaluate(res.x);
    if (final_eval.state && c.output.vtk_every > 0) snapshot(res.records.back(), final_eval);
    save_deformation(res.q, (dir / "q_final.txt").string());

    Json records = Json::array();
    for (const auto& r : res.records) records.push_back(to_json(r));
    int steps = 0;
    for (const auto& r : res.records) steps = std::max(steps, r.step);
    Json report{{"command", "optimize"},
                {"status", res.failed ? "line_search_failure" : (res.converged ? "converged" : "step_budget")},
                {"failure", res.failure},
                {"mesh", mesh_summary(mesh)},
                {"mesh_hash", hex_hash(mesh_hash(mesh))},
                {"config", write_config(c)},
                {"effective_tensor", to_json(res.tensor)},
                {"target", to_json(c.cost.target)},
                {"initial_deviation_percent", res.records.front().deviation_percent},
                {"final_deviation_percent", res.records.back().deviation_percent},
                {"steps", steps},
                {"converged", res.converged},
                {"failed", res.failed},
                {"wall_time_s", seconds_since(t0)},
                {"records", records}};
    save_json((dir / "report.json").string(), report);
    std::printf("deviation: %.4f%% -> %.4f%% in %d steps (%s)\n", res.records.front().deviation_percent,
                res.records.back().deviation_percent, steps, report["status"].get<std::string>().c_str());
    if (res.failed) {
        std::fprintf(stderr, "error: %s\n", res.failure.c_str());
        return line_search;
    }
    return ok;
}

int run_gradient_check(const Options& o) {
    const RunConfig c = load(o);
    const Mesh mesh = build_mesh(c);
    const fs::path dir = prepare_dir(c);
    const FeSpace space(mesh);
    const ReducedCost cost(space, c.material, c.cost);
    std::mt19937 rng(c.gradient_check.seed);

    Json rows = Json::array();
    double worst = 0.0;
    for (int d = 0; d < c.gradient_check.directions; ++d) {
        const Eigen::VectorXd x = random_control(cost, c.gradient_check.amplitude, rng);
        Eigen::VectorXd dir_vec = random_control(cost, 1.0, rng);
        dir_vec /= cost.riesz().norm(dir_vec);
        const GradientCheck g = gradient_check(cost, x, dir_vec);
        Json sweep = Json::array();
        for (const auto& s : g.sweep) sweep.push_back({{"step", s.step}, {"fd", s.fd}, {"error", s.error}});
        rows.push_back({{"direction", d}, {"adjoint", g.exact}, {"best_error", g.best_error()}, {"sweep", sweep}});
        worst = std::max(worst, g.best_error());
        std::printf("direction %2d  adjoint %+.10e  best relative error %.3e\n", d, g.exact, g.best_error());
    }
    save_json((dir / "gradient_check.json").string(),
              Json{{"command", "gradient-check"},
                   {"mesh", mesh_summary(mesh)},
                   {"seed", c.gradient_check.seed},
                   {"worst_best_error", worst},
                   {"directions", rows}});
    std::printf("worst best error: %.3e\n", worst);
    return ok;
}

int report_error(const std::string& kind, const std::exception& e, int code) {
    std::fprintf(stderr, "error: %s\n", e.what());
    std::cout << Json{{"status", "error"}, {"error", {{"kind", kind}, {"message", e.what()}, {"exit_code", code}}}}.dump()
              << std::endl;
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Shape optimization of a periodic unit cell with a conducting interface"};
    app.require_subcommand(1);
    Options opt;
    app.add_option("--config", opt.config, "configuration file (INI)");
    app.add_option("--out", opt.out, "output directory, overrides [output] directory");
    app.add_option("--seed", opt.seed, "random seed for gradient checks");
    app.add_flag("--fixed-order", opt.fixed_order, "deterministic assembly order (always on)");
    app.fallthrough();

    auto* mesh = app.add_subcommand("mesh", "generate the reference mesh");
    auto* solve = app.add_subcommand("solve-cell", "solve the cell problem and report the effective tensor");
    auto* optim = app.add_subcommand("optimize", "run the damped BFGS shape optimization");
    auto* check = app.add_subcommand("gradient-check", "compare adjoint and finite-difference derivatives");
    for (auto* s : {mesh, solve, optim, check}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        if (mesh->parsed()) return run_mesh(opt);
        if (solve->parsed()) return run_solve_cell(opt);
        if (optim->parsed()) return run_optimize(opt);
        if (check->parsed()) return run_gradient_check(opt);
    } catch (const ConfigError& e) {
        return report_error("config", e, config_error);
    } catch (const ParseError& e) {
        return report_error("parse", e, config_error);
    } catch (const ValidationError& e) {
        return report_error("validation", e, config_error);
    } catch (const ResourceError& e) {
        return report_error("resource", e, config_error);
    } catch (const DegenerateDeformation& e) {
        return report_error("degenerate_deformation", e, degenerate);
    } catch (const SolverError& e) {
        return report_error("solver", e, solver_failure);
    } catch (const LineSearchFailure& e) {
        return report_error("line_search", e, line_search);
    } catch (const std::exception& e) {
        return report_error("internal", e, other);
    }
    return other;
}
