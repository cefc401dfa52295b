#pragma once

// Damped inverse BFGS in the H1_0 control space with Armijo backtracking and
// a staged barrier weight.

#include "cellopt/cost.hpp"
#include "cellopt/errors.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cellopt {

// ---------------------------------------------------------------------------
// Line search

struct ArmijoParameters {
    double shrink = 0.5;       // beta_ls
    double sufficient = 0.01;  // gamma
    double min_step = 1e-12;

    void validate() const {
        if (!(shrink > 0.0 && shrink < 1.0)) throw ConfigError("armijo shrink factor must lie in (0, 1)");
        if (!(sufficient > 0.0 && sufficient < 0.5)) throw ConfigError("armijo constant must lie in (0, 1/2)");
        if (!(min_step > 0.0)) throw ConfigError("minimum step must be positive");
    }
};

struct ArmijoResult {
    double lambda = 1.0;
    double value = 0.0;
    int trials = 0;
};

/// Largest lambda in {1, b, b^2, ...} with cost(lambda) <= c0 + gamma lambda
/// slope. `cost` returns +inf for inadmissible trial points, which are
/// rejected like any other failed trial.
template <typename CostFn>
ArmijoResult armijo_search(CostFn&& cost, double c0, double slope, const ArmijoParameters& prm = {}) {
    if (!(slope < 0.0)) throw LineSearchFailure("search direction is not a descent direction");
    ArmijoResult r;
    for (double lambda = 1.0; lambda >= prm.min_step; lambda *= prm.shrink) {
        ++r.trials;
        const double c = cost(lambda);
        if (c <= c0 + prm.sufficient * lambda * slope) {
            r.lambda = lambda;
            r.value = c;
            return r;
        }
    }
    std::ostringstream os;
    os << "Armijo step fell below " << prm.min_step << " after " << r.trials << " trials (c0 = " << c0
       << ", slope = " << slope << ")";
    throw LineSearchFailure(os.str());
}

// ---------------------------------------------------------------------------
// Damped inverse BFGS

struct DampedPair {
    double theta = 1.0;
    Eigen::VectorXd s_hat;
};

/// Powell damping in the inner product `(a, b) = a^T K b`.
inline DampedPair damping_theta(double ys, double yBy, const Eigen::VectorXd& s, const Eigen::VectorXd& By) {
    if (!(yBy > 0.0)) throw HistoryCorruption("(y, By) is not positive");
    DampedPair d;
    d.theta = ys >= 0.2 * yBy ? 1.0 : 0.8 * yBy / (yBy - ys);
    d.s_hat = d.theta * s + (1.0 - d.theta) * By;
    return d;
}

inline double damping_theta(double ys, double yBy) {
    if (!(yBy > 0.0)) throw HistoryCorruption("(y, By) is not positive");
    return ys >= 0.2 * yBy ? 1.0 : 0.8 * yBy / (yBy - ys);
}

/// Inverse Hessian approximation B^n = (1/alpha) I plus one rank-two
/// correction per stored pair, in the inner product (a, b) = a^T K b.
class BfgsHistory {
public:
    BfgsHistory(const Eigen::SparseMatrix<double>& K, double alpha, std::optional<std::size_t> cap = {})
        : K_(&K), alpha_(alpha), cap_(cap) {
        if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    }

    struct Pair {
        Eigen::VectorXd s_hat, b;      // s_hat and B^k y^k
        Eigen::VectorXd K_s_hat, K_d;  // K s_hat and K (s_hat - b)
        double ys = 0.0;               // (y, s_hat)
        double dy = 0.0;               // (s_hat - b, y)
    };

    struct Update {
        double theta = 1.0;
        double ys = 0.0;
        bool restarted = false;
    };

    double inner(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const { return a.dot(*K_ * b); }

    Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
        Eigen::VectorXd r = v / alpha_;
        for (const auto& p : pairs_) {
            if (!(p.ys > 0.0)) throw HistoryCorruption("stored curvature (y, s_hat) is not positive");
            const double sv = p.K_s_hat.dot(v);
            const double dv = p.K_d.dot(v);
            r += ((p.s_hat - p.b) * sv + p.s_hat * dv) / p.ys - (p.dy / (p.ys * p.ys)) * sv * p.s_hat;
        }
        return r;
    }

    /// Adds the damped pair built from step s and gradient change y.
    Update update(const Eigen::VectorXd& s, const Eigen::VectorXd& y) {
        Update u;
        if (cap_ && pairs_.size() >= *cap_) {
            pairs_.clear();
            u.restarted = true;
        }
        Pair p;
        p.b = apply(y);
        const Eigen::VectorXd Ky = *K_ * y;
        const double ys = Ky.dot(s), yBy = Ky.dot(p.b);
        const DampedPair d = damping_theta(ys, yBy, s, p.b);
        p.s_hat = d.s_hat;
        p.ys = Ky.dot(p.s_hat);
        if (!(p.ys > 0.0)) throw HistoryCorruption("damped curvature (y, s_hat) is not positive");
        p.dy = Ky.dot(p.s_hat - p.b);
        p.K_s_hat = *K_ * p.s_hat;
        p.K_d = *K_ * (p.s_hat - p.b);
        pairs_.push_back(std::move(p));
        u.theta = d.theta;
        u.ys = pairs_.back().ys;
        return u;
    }

    std::size_t size() const { return pairs_.size(); }
    const std::vector<Pair>& pairs() const { return pairs_; }
    double alpha() const { return alpha_; }

private:
    const Eigen::SparseMatrix<double>* K_;
    double alpha_;
    std::optional<std::size_t> cap_;
    std::vector<Pair> pairs_;
};

inline Eigen::VectorXd bfgs_apply(const BfgsHistory& h, const Eigen::VectorXd& g) { return h.apply(g); }

// ---------------------------------------------------------------------------
// Stage schedule

struct Stage {
    std::optional<int> steps; // empty: run until convergence
    double beta = 0.1;
};

struct StageSchedule {
    std::vector<Stage> stages{Stage{}};

    void validate() const {
        if (stages.empty()) throw ConfigError("stage schedule is empty");
        for (std::size_t i = 0; i < stages.size(); ++i) {
            if (!(stages[i].beta > 0.0)) throw ConfigError("stage beta values must be positive");
            if (stages[i].steps && *stages[i].steps <= 0) throw ConfigError("stage step counts must be positive");
            if (!stages[i].steps && i + 1 != stages.size())
                throw ConfigError("only the last stage may be open-ended");
        }
    }

    static StageSchedule single(double beta) { return {{Stage{std::nullopt, beta}}}; }
};

// ---------------------------------------------------------------------------
// Driver

struct OptimizerOptions {
    int max_steps = 500;
    double tolerance = 1e-4;
    ArmijoParameters armijo;
    std::optional<std::size_t> history_cap;

    void validate() const {
        if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
        if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
        if (history_cap && *history_cap == 0) throw ConfigError("history cap must be positive");
        armijo.validate();
    }
};

struct IterationRecord {
    int step = 0;
    int stage = 0;
    double beta = 0.0;
    double total = 0.0;
    double misfit = 0.0;
    double tikhonov = 0.0;
    double penalty = 0.0;
    double deviation_percent = 0.0;
    double optimality = 1.0;
    double lambda = 0.0;  // step accepted to reach this iterate (0 at a stage start)
    double theta = 1.0;   // damping of the pair formed by that step
    double min_J = 1.0;
    // diagnostics of the step that produced this iterate
    double previous_total = 0.0;
    double slope = 0.0;          // (grad dc, grad p)
    double curvature = 0.0;      // (y, s_hat)
    double secant_error = 0.0;   // |B y - s_hat| / |s_hat| after the update
    bool stage_start = false;
};

struct OptimizeResult {
    Eigen::VectorXd x;
    DeformationField q;
    CMat2 tensor = CMat2::Zero();
    std::vector<IterationRecord> records;
    bool converged = false;
    bool failed = false;
    std::string failure;
    std::size_t history_size = 0;
};

inline IterationRecord make_record(int step, int stage, double beta, const CostBreakdown& c, double optimality) {
    IterationRecord r;
    r.step = step;
    r.stage = stage;
    r.beta = beta;
    r.total = c.total;
    r.misfit = c.misfit;
    r.tikhonov = c.tikhonov;
    r.penalty = c.penalty;
    r.deviation_percent = c.deviation_percent;
    r.min_J = c.min_J;
    r.optimality = optimality;
    return r;
}

using IterationCallback = std::function<void(const IterationRecord&, const ReducedCost::Evaluation&)>;

/// Runs the damped BFGS iteration from control vector x0. The cost's beta is
/// overwritten stage by stage; the BFGS history is kept across stages and the
/// optimality reference is re-anchored at each stage start. Curvature pairs
/// are always formed with a single beta.
inline OptimizeResult optimize(ReducedCost& cost, const Eigen::VectorXd& x0, const StageSchedule& schedule,
                               const OptimizerOptions& opt, const IterationCallback& on_iterate = {}) {
    schedule.validate();
    opt.validate();
    OptimizeResult res;
    BfgsHistory history(cost.riesz().stiffness(), cost.config().alpha, opt.history_cap);

    std::size_t stage = 0;
    cost.set_beta(schedule.stages[0].beta);
    Eigen::VectorXd x = x0;
    auto ev = cost.evaluate(x);
    if (!ev.cost.admissible()) throw DegenerateDeformation("initial deformation is inadmissible");
    auto grad = cost.gradient(ev);
    double norm0 = grad.norm;
    int stage_steps = 0;

    auto optimality = [&](double n) { return norm0 > 0.0 ? n / norm0 : 0.0; };
    auto finish = [&]() {
        res.x = x;
        res.q = ev.q;
        res.tensor = ev.cost.tensor;
        res.history_size = history.size();
        return res;
    };

    IterationRecord first = make_record(0, 0, cost.config().beta, ev.cost, optimality(grad.norm));
    first.stage_start = true;
    res.records.push_back(first);
    if (on_iterate) on_iterate(first, ev);

    for (int step = 1;; ++step) {
        const double opt_now = optimality(grad.norm);
        const Stage& st = schedule.stages[stage];
        const bool stage_done = opt_now < opt.tolerance || (st.steps && stage_steps >= *st.steps);
        if (stage_done) {
            if (stage + 1 == schedule.stages.size()) {
                res.converged = opt_now < opt.tolerance;
                return finish();
            }
            ++stage;
            stage_steps = 0;
            cost.set_beta(schedule.stages[stage].beta);
            ev = cost.evaluate(x);
            grad = cost.gradient(ev);
            norm0 = grad.norm;
            IterationRecord r = make_record(step - 1, static_cast<int>(stage), cost.config().beta, ev.cost,
                                            optimality(grad.norm));
            r.stage_start = true;
            res.records.push_back(r);
            if (on_iterate) on_iterate(r, ev);
            if (optimality(grad.norm) < opt.tolerance && stage + 1 == schedule.stages.size()) {
                res.converged = true;
                return finish();
            }
        }
        if (step > opt.max_steps) return finish();

        Eigen::VectorXd p = -history.apply(grad.riesz);
        double slope = grad.derivative.dot(p);
        const double c0 = ev.cost.total;

        std::optional<ReducedCost::Evaluation> trial;
        ArmijoResult ls;
        try {
            ls = armijo_search(
                [&](double lambda) {
                    trial = cost.evaluate(x + lambda * p);
                    return trial->cost.total;
                },
                c0, slope, opt.armijo);
        } catch (const LineSearchFailure& e) {
            res.failed = true;
            res.failure = e.what();
            return finish();
        }

        const Eigen::VectorXd s = ls.lambda * p;
        auto grad_new = cost.gradient(*trial);
        const Eigen::VectorXd y = grad_new.riesz - grad.riesz;
        BfgsHistory::Update upd;
        try {
            upd = history.update(s, y);
        } catch (const HistoryCorruption& e) {
            res.failed = true;
            res.failure = e.what();
            return finish();
        }
        const auto& last = history.pairs().back();
        const double secant = (history.apply(y) - last.s_hat).norm() / std::max(last.s_hat.norm(), 1e-300);

        x += s;
        ev = std::move(*trial);
        grad = std::move(grad_new);
        ++stage_steps;

        IterationRecord r = make_record(step, static_cast<int>(stage), cost.config().beta, ev.cost,
                                        optimality(grad.norm));
        r.lambda = ls.lambda;
        r.theta = upd.theta;
        r.previous_total = c0;
        r.slope = slope;
        r.curvature = upd.ys;
        r.secant_error = secant;
        res.records.push_back(r);
        if (on_iterate) on_iterate(r, ev);
    }
}

} // namespace cellopt
