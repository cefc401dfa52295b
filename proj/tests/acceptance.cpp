// Acceptance run. Prints one PASS/FAIL line per criterion, with indented
// note lines for diagnostics, and exits nonzero if any criterion fails.

#include "cellopt/config.hpp"
#include "cellopt/cost.hpp"
#include "cellopt/optimizer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

using namespace cellopt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, bool pass, const std::string& what, const std::string& detail) {
    if (!pass) ++failures;
    std::printf("[%s] criterion %d: %s: %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
    std::fflush(stdout);
}

void note(const std::string& s) {
    std::printf("    note: %s\n", s.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[1024];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

CMat2 enz_target() {
    CMat2 t;
    t << Complex(0.5, 0.01), 0.05, 0.05, Complex(0.5, 0.01);
    return t;
}

CostConfig enz_config() {
    CostConfig c;
    c.target = enz_target();
    c.alpha = 1e-3;
    c.alpha_sigma = 10.0;
    c.beta = 0.1;
    return c;
}

/// Smooth bump deformation vanishing on the boundary.
DeformationField smooth_deformation(const Mesh& mesh, double amp, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const double pi = 3.14159265358979323846;
    DeformationField q(mesh.num_vertices(), 2);
    for (int v = 0; v < mesh.num_vertices(); ++v) {
        const double x = mesh.vertices[v].x(), y = mesh.vertices[v].y();
        const double bump = std::sin(pi * x) * std::sin(pi * y);
        q(v, 0) = amp * bump * (a * std::cos(pi * y) + b * std::sin(2 * pi * x));
        q(v, 1) = amp * bump * (c * std::cos(pi * x) + d * std::sin(2 * pi * y));
    }
    const auto bnd = boundary_vertices(mesh);
    for (int v = 0; v < mesh.num_vertices(); ++v)
        if (bnd[v]) q.row(v).setZero();
    return q;
}

// ---------------------------------------------------------------------------

void reference_tensor() {
    const auto t0 = Clock::now();
    const FeSpace space(generate_reference_mesh(0.3, 4));
    CellProblem cp(space, MaterialParameters{});
    const auto q = zero_deformation(space.mesh());
    const CMat2 e = cp.effective_tensor(q, cp.solve(q).chi).value;
    const double t = seconds_since(t0);
    const Complex ref(0.50304, 0.01114);
    const double rx = std::abs(e(0, 0) - ref) / std::abs(ref), ry = std::abs(e(1, 1) - ref) / std::abs(ref);
    const double off = std::max(std::abs(e(0, 1)), std::abs(e(1, 0)));
    verdict(1, rx < 0.01 && ry < 0.01 && off < 1e-3 && t < 60.0, "reference effective tensor (refinement 4)",
            fmt("xx = %.6f%+.6fi (rel. err %.2f%%), yy = %.6f%+.6fi (rel. err %.2f%%), max |off-diag| = %.1e, "
                "%.1f s",
                e(0, 0).real(), e(0, 0).imag(), 100 * rx, e(1, 1).real(), e(1, 1).imag(), 100 * ry, off, t));
    if (std::abs(e(0, 0).real() - ref.real()) / ref.real() < 0.01)
        note(fmt("real part within %.2f%% of 0.50304; the imaginary part %.5f differs from 0.01114 because of "
                 "the Drude relaxation time (tau = 100)",
                 100 * std::abs(e(0, 0).real() - ref.real()) / ref.real(), e(0, 0).imag()));
}

void mesh_sizes() {
    const auto t0 = Clock::now();
    const int c5 = generate_reference_mesh(0.3, 5).num_cells();
    const int c6 = generate_reference_mesh(0.3, 6).num_cells();
    verdict(2, c5 == 13312 && c6 == 53248, "mesh sizes",
            fmt("refinement 5: %d cells, refinement 6: %d cells, %.2f s", c5, c6, seconds_since(t0)));
}

struct EnzRun {
    OptimizeResult result;
    double seconds = 0.0;
};

EnzRun run_enz(int refinement, const MaterialParameters& mat) {
    const auto t0 = Clock::now();
    const FeSpace space(generate_reference_mesh(0.3, refinement));
    ReducedCost cost(space, mat, enz_config());
    OptimizerOptions opt;
    opt.max_steps = 500;
    opt.tolerance = 1e-4;
    EnzRun r;
    r.result = optimize(cost, Eigen::VectorXd::Zero(cost.num_controls()), StageSchedule::single(0.1), opt);
    r.seconds = seconds_since(t0);
    return r;
}

int accepted_steps(const OptimizeResult& r) {
    int n = 0;
    for (const auto& rec : r.records)
        if (!rec.stage_start) ++n;
    return n;
}

void enz_case(const EnzRun& run) {
    const auto& r = run.result;
    const double d0 = r.records.front().deviation_percent, d1 = r.records.back().deviation_percent;
    const int steps = accepted_steps(r);
    const bool pass = !r.failed && std::abs(d0 - 7.09) <= 0.3 && d1 <= 2.0 && steps <= 500 && run.seconds < 1800.0;
    verdict(3, pass, "epsilon-near-zero case (a) (refinement 4)",
            fmt("initial deviation %.3f%% (expected 7.09 +- 0.3), final %.3f%% (expected <= 2) after %d steps, "
                "%s, %.1f s",
                d0, d1, steps, r.failed ? r.failure.c_str() : (r.converged ? "converged" : "step budget"),
                run.seconds));
    note(fmt("final tensor xx = %.5f%+.5fi, xy = %.5f%+.5fi", r.tensor(0, 0).real(), r.tensor(0, 0).imag(),
             r.tensor(0, 1).real(), r.tensor(0, 1).imag()));
}

void enz_diagnostic() {
    MaterialParameters m;
    m.tau = 243.0;
    const EnzRun run = run_enz(4, m);
    const auto& r = run.result;
    note(fmt("same case with tau = 243 (matches the reference tensor 0.50304+0.01114i): deviation %.3f%% -> %.3f%% "
             "in %d steps; absolute |eps - target|_F at step 0 = %.5f",
             r.records.front().deviation_percent, r.records.back().deviation_percent, accepted_steps(r),
             r.records.front().deviation_percent / 100.0 * EffectiveTensor::frobenius(enz_target())));
}

void gradient_consistency() {
    const auto t0 = Clock::now();
    const FeSpace space(generate_reference_mesh(0.3, 2));
    const ReducedCost cost(space, MaterialParameters{}, enz_config());
    std::mt19937 rng(2024);
    double worst = 0.0;
    int n = 0;
    for (; n < 10; ++n) {
        const Eigen::VectorXd x = random_control(cost, 0.03, rng);
        Eigen::VectorXd dir = random_control(cost, 1.0, rng);
        dir /= cost.riesz().norm(dir);
        worst = std::max(worst, gradient_check(cost, x, dir).best_error());
    }
    const double t = seconds_since(t0);
    verdict(4, worst < 1e-4 && t < 300.0, "adjoint gradient consistency (refinement 2)",
            fmt("%d random (q, dq) pairs, worst best-over-step relative error %.2e, %.1f s", n, worst, t));
}

void bfgs_properties(const EnzRun& run) {
    bool theta_ok = true;
    theta_ok &= damping_theta(1.0, 1.0) == 1.0;
    theta_ok &= damping_theta(0.0, 1.0) == 0.8;
    theta_ok &= damping_theta(-1.0, 1.0) == 0.4;
    for (double ys : {0.0, -1.0}) {
        const double t = damping_theta(ys, 1.0);
        theta_ok &= std::abs(t * ys + (1.0 - t) - 0.2) < 1e-15;
    }

    double worst_secant = 0.0, min_curv = INFINITY;
    int armijo_bad = 0, steps = 0;
    for (const auto& rec : run.result.records) {
        if (rec.stage_start) continue;
        ++steps;
        worst_secant = std::max(worst_secant, rec.secant_error);
        min_curv = std::min(min_curv, rec.curvature);
        if (!(rec.slope < 0.0 && rec.total <= rec.previous_total + 0.01 * rec.lambda * rec.slope)) ++armijo_bad;
    }
    verdict(5, theta_ok && worst_secant < 1e-10 && min_curv > 0.0 && armijo_bad == 0 && steps > 0,
            "damped BFGS properties",
            fmt("theta branches %s, worst relative secant residual %.1e, min (y, s_hat) %.2e, Armijo violations "
                "%d of %d steps",
                theta_ok ? "ok" : "wrong", worst_secant, min_curv, armijo_bad, steps));
}

void barrier(const EnzRun& run) {
    const bool values = penalty_density(1.0) == 0.0 && penalty_density(2.0) == 0.5 && penalty_density(0.5) == 0.125;

    double min_J = INFINITY;
    for (const auto& rec : run.result.records) min_J = std::min(min_J, rec.min_J);

    // Direction that folds the mesh at unit step; the line search must back off.
    const FeSpace space(generate_reference_mesh(0.3, 2));
    const ReducedCost cost(space, MaterialParameters{}, enz_config());
    const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(cost.num_controls());
    auto ev0 = cost.evaluate(x0);
    const auto g = cost.gradient(ev0);
    Eigen::VectorXd p = -g.riesz / g.norm;
    while (min_jacobian(space, cost.to_nodal(x0 + p)) > 0.0) p *= 2.0;
    std::vector<std::pair<double, double>> trials; // (lambda, min J)
    bool rejected = false;
    ArmijoResult ls;
    try {
        ls = armijo_search(
            [&](double lambda) {
                const auto ev = cost.evaluate(x0 + lambda * p);
                trials.emplace_back(lambda, ev.cost.min_J);
                return ev.cost.total;
            },
            ev0.cost.total, g.derivative.dot(p));
        rejected = trials.front().second <= 0.0 && ls.lambda < 1.0 &&
                   min_jacobian(space, cost.to_nodal(x0 + ls.lambda * p)) > 0.0;
    } catch (const LineSearchFailure&) {
        rejected = false;
    }
    // The penalty grows without bound as J -> 0 along the folding direction.
    auto step_to = [&](double target) {
        double lo = 0.0, hi = 1.0;
        for (int i = 0; i < 200; ++i) {
            const double mid = 0.5 * (lo + hi);
            const double j = min_jacobian(space, cost.to_nodal(x0 + mid * p));
            if (j > 0.0 && j <= target && j > 0.5 * target) return mid;
            (j > target ? lo : hi) = mid;
        }
        return lo;
    };
    std::vector<ReducedCost::Evaluation> near;
    for (double target : {1e-2, 1e-4, 1e-6}) near.push_back(cost.evaluate(x0 + step_to(target) * p));
    bool blows_up = true;
    for (std::size_t i = 0; i < near.size(); ++i) {
        blows_up &= near[i].cost.admissible();
        if (i > 0) blows_up &= near[i].cost.penalty > 10.0 * near[i - 1].cost.penalty;
    }
    blows_up &= near.back().cost.penalty > 1e3 * ev0.cost.total;

    verdict(6, values && min_J > 0.0 && rejected && blows_up, "barrier and penalty",
            fmt("P(1), P(2), P(0.5) %s; min J over accepted iterates %.4f; folding step: unit-step min J %.3f, "
                "accepted lambda %.4g after %d trials; penalty at min J %.0e, %.0e, %.0e: %.3e, %.3e, %.3e",
                values ? "exact" : "wrong", min_J, trials.empty() ? 0.0 : trials.front().second, ls.lambda,
                ls.trials, near[0].cost.min_J, near[1].cost.min_J, near[2].cost.min_J, near[0].cost.penalty,
                near[1].cost.penalty, near[2].cost.penalty));
}

void theory() {
    const FeSpace space(generate_reference_mesh(0.3, 3));
    CellProblem cp(space, MaterialParameters{});
    const auto q0 = zero_deformation(space.mesh());
    const auto chi0 = cp.solve(q0).chi.nodal;
    const double C0 = corrector_energy(cp, chi0) / apriori_bound_rhs(cp, q0);
    const double C = 2.0 * C0;
    double worst = 0.0;
    int admissible = 0;
    for (unsigned seed = 0; seed < 20; ++seed) {
        const auto q = smooth_deformation(space.mesh(), 0.04, 100 + seed);
        if (!(min_jacobian(space, q) > 0.0)) continue;
        ++admissible;
        worst = std::max(worst, corrector_energy(cp, cp.solve(q).chi.nodal) / apriori_bound_rhs(cp, q));
    }

    const auto dir = smooth_deformation(space.mesh(), 0.04, 7);
    std::vector<double> d;
    for (double t : {1.0, 0.5, 0.25}) d.push_back(std::sqrt(corrector_energy(cp, cp.solve(t * dir).chi.nodal - chi0)));
    bool lipschitz = true;
    for (std::size_t i = 1; i < d.size(); ++i) lipschitz &= d[i - 1] / d[i] >= 1.5 && d[i - 1] / d[i] <= 4.0;

    verdict(7, admissible == 20 && worst <= C && lipschitz, "a-priori bound and Lipschitz dependence (refinement 3)",
            fmt("calibrated C = 2 x %.4e; worst ratio over %d deformations %.4e; corrector distance at scales 1, "
                "1/2, 1/4: %.3e, %.3e, %.3e (ratios %.3f, %.3f)",
                C0, admissible, worst, d[0], d[1], d[2], d[0] / d[1], d[1] / d[2]));
}

void continuation() {
    const FeSpace space(generate_reference_mesh(0.3, 3));
    ReducedCost cost(space, MaterialParameters{}, enz_config());
    const StageSchedule sched = parse_schedule("10:0.8, rest:0.1");
    OptimizerOptions opt;
    opt.max_steps = 25;
    const auto r = optimize(cost, Eigen::VectorXd::Zero(cost.num_controls()), sched, opt);

    int switch_step = -1;
    bool monotone = true, betas = true;
    for (std::size_t i = 0; i < r.records.size(); ++i) {
        const auto& rec = r.records[i];
        betas &= rec.beta == (rec.stage == 0 ? 0.8 : 0.1);
        if (rec.stage_start && rec.stage == 1) switch_step = rec.step;
        if (i > 0 && !rec.stage_start && rec.stage == r.records[i - 1].stage)
            monotone &= rec.total <= r.records[i - 1].total;
    }
    const int steps = accepted_steps(r);
    const bool history = r.history_size == static_cast<std::size_t>(steps);
    verdict(8, !r.failed && switch_step == 10 && betas && monotone && history, "two-stage beta continuation",
            fmt("beta switch 0.8 -> 0.1 logged at step %d, history %zu pairs over %d accepted steps, total "
                "monotone within stages: %s",
                switch_step, r.history_size, steps, monotone ? "yes" : "no"));
}

void frequency_calibration() {
    const FeSpace space(generate_reference_mesh(0.3, 4));
    std::string s;
    for (double w : {0.3, 0.4, 0.5}) {
        MaterialParameters m;
        m.omega = w;
        CostConfig c;
        c.target << Complex(0.8, 0.008), 0.05, 0.05, Complex(0.8, 0.008);
        const ReducedCost rc(space, m, c);
        s += fmt(" omega %.1f -> %.2f%%;", w, rc.evaluate(Eigen::VectorXd::Zero(rc.num_controls())).cost.deviation_percent);
    }
    note("parameter-study target, initial deviation at refinement 4:" + s + " expected 10.97%");
}

} // namespace

int main() {
    try {
        reference_tensor();
        mesh_sizes();
        const EnzRun enz = run_enz(4, MaterialParameters{});
        enz_case(enz);
        enz_diagnostic();
        gradient_consistency();
        bfgs_properties(enz);
        barrier(enz);
        theory();
        continuation();
        frequency_calibration();
    } catch (const std::exception& e) {
        std::printf("[FAIL] acceptance run aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%d criteria failed\n", failures);
    return failures ? 1 : 0;
}
