#pragma once

// Regularized misfit functional, its adjoint equation and shape derivative,
// and the H1_0 Riesz representative of the derivative.
//
// Complex state variables are differentiated as pairs of real fields: for a
// real function M of chi, the gradient is g = dM/dRe(chi) + i dM/dIm(chi),
// so that dM = Re(g^H dchi).

#include "cellopt/cellproblem.hpp"
#include "cellopt/errors.hpp"
#include "cellopt/fem.hpp"
#include "cellopt/kinematics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace cellopt {

inline constexpr double infinite_cost = std::numeric_limits<double>::infinity();

struct CostConfig {
    CMat2 target = CMat2::Identity();
    double alpha = 1e-3;       // Tikhonov weight
    double alpha_sigma = 10.0; // interface weight in w_h
    double beta = 0.1;         // penalty weight

    void validate() const {
        if (!target.allFinite()) throw ConfigError("target tensor must be finite");
        if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
        if (!(alpha_sigma >= 0.0) || !std::isfinite(alpha_sigma)) throw ConfigError("alpha_sigma must be non-negative");
        if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be non-negative");
    }
};

/// Barrier density: (J-1)^2/2 for J >= 1, (J-1)^2/(4J) for 0 < J < 1,
/// infinite for J <= 0.
inline double penalty_density(double J) {
    if (J >= 1.0) return 0.5 * (J - 1.0) * (J - 1.0);
    if (J > 0.0) return (J - 1.0) * (J - 1.0) / (4.0 * J);
    return infinite_cost;
}

inline double penalty_derivative(double J) {
    if (J >= 1.0) return J - 1.0;
    if (J > 0.0) return (J * J - 1.0) / (4.0 * J * J);
    return -infinite_cost;
}

struct CostBreakdown {
    double misfit = 0.0;
    double tikhonov = 0.0;
    double penalty = 0.0;
    double total = 0.0;
    double deviation_percent = 0.0;
    double min_J = 1.0;
    CMat2 tensor = CMat2::Zero();

    bool admissible() const { return std::isfinite(total); }
};

/// Tikhonov weight per cell: 1 + alpha_sigma / diam(K) on cells with a face on
/// the interface, 1 elsewhere.
inline std::vector<double> tikhonov_weights(const FeSpace& space, double alpha_sigma) {
    std::vector<double> w(space.mesh().cells.size(), 1.0);
    for (int c = 0; c < space.mesh().num_cells(); ++c)
        if (space.interface_adjacent(c)) w[c] += alpha_sigma / space.diameter(c);
    return w;
}

/// (alpha/2) int w |grad q|^2 and beta int P(J), without the misfit.
inline std::pair<double, double> regularization(const FeSpace& space, const DeformationField& q, const CostConfig& cfg,
                                                const std::vector<double>& weights) {
    double tik = 0.0, pen = 0.0;
    for (int c = 0; c < space.mesh().num_cells(); ++c) {
        const auto& cq = space.cells()[c];
        for (int p = 0; p < 4; ++p) {
            const Mat2 g = deformation_gradient_at(space.mesh(), q, c, cq.grads[p]);
            tik += weights[c] * g.squaredNorm() * cq.JxW[p];
            if (cfg.beta > 0.0) pen += penalty_density(deformation_gradient(g).J) * cq.JxW[p];
        }
    }
    return {0.5 * cfg.alpha * tik, cfg.beta * pen};
}

/// Cost for a deformation whose state `chi` is already known.
inline CostBreakdown evaluate_cost(const CellProblem& cp, const DeformationField& q, const CostConfig& cfg,
                                   const CorrectorField& chi) {
    CostBreakdown b;
    b.min_J = min_jacobian(cp.space(), q);
    const auto [tik, pen] = regularization(cp.space(), q, cfg, tikhonov_weights(cp.space(), cfg.alpha_sigma));
    b.tikhonov = tik;
    if (!(b.min_J > 0.0)) {
        b.penalty = b.total = infinite_cost;
        b.misfit = b.deviation_percent = std::numeric_limits<double>::quiet_NaN();
        return b;
    }
    const EffectiveTensor e = cp.effective_tensor(q, chi);
    b.tensor = e.value;
    b.misfit = e.misfit(cfg.target);
    b.deviation_percent = e.deviation_percent(cfg.target);
    b.penalty = pen;
    b.total = b.misfit + b.tikhonov + b.penalty;
    return b;
}

// ---------------------------------------------------------------------------
// Adjoint

/// Gradient of the misfit with respect to the state dofs at fixed q, as one
/// complex column per corrector.
inline Matrix<Complex> misfit_state_gradient(const StateSolution& st, const CMat2& tensor, const CostConfig& cfg) {
    const auto& A = st.system.matrix;
    const Matrix<Complex> L = -st.system.rhs; // L_i[v] = l_i(phi_v)
    const Matrix<Complex>& chi = st.chi.dofs;
    const Matrix<Complex> Lc = L + A * chi.conjugate(); // L_i + A conj(chi_i)
    const Matrix<Complex> Ls = L + A * chi;             // L_j + A chi_j
    const CMat2 r = tensor - cfg.target;
    Matrix<Complex> g(chi.rows(), 2);
    for (int k = 0; k < 2; ++k) {
        Vector<Complex> a = Vector<Complex>::Zero(chi.rows()), b = Vector<Complex>::Zero(chi.rows());
        for (int i = 0; i < 2; ++i) a += std::conj(r(i, k)) * Lc.col(i);
        for (int j = 0; j < 2; ++j) b += std::conj(r(k, j)) * Ls.col(j);
        g.col(k) = a.conjugate() + b;
    }
    return g;
}

/// Adjoint correctors: A^H z_k = dM/dchi_k.
inline CorrectorField solve_adjoint(const CellProblem& cp, StateSolution& st, const CMat2& tensor,
                                    const CostConfig& cfg) {
    const Matrix<Complex> g = misfit_state_gradient(st, tensor, cfg);
    if (g.isZero(0.0)) return cp.make_field(Matrix<Complex>::Zero(g.rows(), 2));
    return cp.make_field(st.solver->solve_adjoint(g));
}

// ---------------------------------------------------------------------------
// Shape derivative

/// Derivative of the reduced cost as a functional on the zero-boundary
/// vector control space:
///   dM/dq|chi + Tikhonov' + penalty' - sum_k Re(z_k^H dR_k/dq),
/// with R_k the state residual. Uses the same quadrature as the primal forms.
inline Eigen::VectorXd shape_derivative(const CellProblem& cp, const DeformationField& q, const CostConfig& cfg,
                                        const CorrectorField& chi, const CMat2& tensor, const CorrectorField& z,
                                        const DofMap& control) {
    const FeSpace& space = cp.space();
    const Mesh& mesh = space.mesh();
    const CMat2& eps = cp.material().eps;
    const Complex kappa = cp.kappa(), sigma = cp.sigma();
    const CMat2 rc = (tensor - cfg.target).conjugate();
    const auto weights = tikhonov_weights(space, cfg.alpha_sigma);

    auto sys = assemble<double>(
        space, control, 1,
        [&](int c, Matrix<double>&, Matrix<double>& b) {
            const auto& cq = space.cells()[c];
            const auto X = cp.cell_values(chi.nodal, c);
            const auto Zv = cp.cell_values(z.nodal, c);
            for (int p = 0; p < 4; ++p) {
                const ShapeGrads& G = cq.grads[p];
                const Mat2 gq = deformation_gradient_at(mesh, q, c, G);
                const auto s = deformation_gradient(gq);
                const CMat2 eh = transformed_permittivity(eps, s);
                const CMat2 U = s.F.transpose().cast<Complex>() + G.cast<Complex>() * X;
                const CMat2 W = U.conjugate();
                const CMat2 gz = (G.cast<Complex>() * Zv).conjugate(); // column k = conj grad z_k
                const CMat2 ehU = eh * U;
                const double pen = cfg.beta > 0.0 ? cfg.beta * penalty_derivative(s.J) : 0.0;
                for (int v = 0; v < 4; ++v)
                    for (int a = 0; a < 2; ++a) {
                        Mat2 dG = Mat2::Zero();
                        dG.row(a) = G.col(v).transpose();
                        const auto d = directional_derivatives(s, dG, eps);
                        const CMat2 dU = dG.transpose().cast<Complex>();
                        const CMat2 deps = W.transpose() * (d.deps_hat * U + eh * dU) + dU.transpose() * ehU;
                        const double dmis = (rc.cwiseProduct(deps)).sum().real();
                        const double dres = (gz.transpose() * (d.deps_hat * U + eh * dU)).trace().real();
                        const double dtik = cfg.alpha * weights[c] * gq.row(a).dot(G.col(v));
                        b(v * 2 + a, 0) += (dmis - dres + dtik + pen * d.dJ) * cq.JxW[p];
                    }
            }
        },
        [&](int f, Matrix<double>&, Matrix<double>& b) {
            const auto& fq = space.faces()[f];
            const auto X = cp.cell_values(chi.nodal, fq.cell);
            const auto Zv = cp.cell_values(z.nodal, fq.cell);
            for (int p = 0; p < 2; ++p) {
                const ShapeGrads& G = fq.grads[p];
                const auto s = deformation_gradient(deformation_gradient_at(mesh, q, fq.cell, G));
                const auto frame = face_frame(fq, p);
                const Complex sh = transformed_conductivity(sigma, s, frame);
                const Eigen::Vector4cd tg = (G.transpose() * fq.tangent).cast<Complex>();
                const Eigen::Vector2cd u = (s.F * fq.tangent).cast<Complex>() + X.transpose() * tg;
                const Eigen::Vector2cd w = u.conjugate();
                const Eigen::Vector2cd tz = (Zv.transpose() * tg).conjugate();
                for (int v = 0; v < 4; ++v)
                    for (int a = 0; a < 2; ++a) {
                        Mat2 dG = Mat2::Zero();
                        dG.row(a) = G.col(v).transpose();
                        const auto d = directional_derivatives(s, dG, eps, sigma, frame);
                        const Eigen::Vector2cd du = (dG * fq.tangent).cast<Complex>();
                        const CMat2 deps = kappa * (d.dsigma_hat * w * u.transpose() + sh * du * u.transpose() +
                                                    sh * w * du.transpose());
                        const double dmis = (rc.cwiseProduct(deps)).sum().real();
                        const double dres =
                            (kappa * (d.dsigma_hat * u + sh * du).cwiseProduct(tz)).sum().real();
                        b(v * 2 + a, 0) += (dmis - dres) * fq.JxW[p];
                    }
            }
            return true;
        });
    return sys.rhs.col(0);
}

/// H1_0 representative of a derivative functional.
inline Eigen::VectorXd riesz_gradient(const H1Riesz& riesz, const Eigen::VectorXd& derivative) {
    return riesz.solve(derivative);
}

// ---------------------------------------------------------------------------
// Reduced cost on control vectors

/// Reduced cost c(q) = C(chi(q); q) on the zero-boundary control space.
class ReducedCost {
public:
    ReducedCost(const FeSpace& space, MaterialParameters material, CostConfig cfg)
        : problem_(space, std::move(material)), cfg_(cfg), riesz_(space) {
        cfg_.validate();
    }

    struct Evaluation {
        CostBreakdown cost;
        DeformationField q;
        std::optional<StateSolution> state; // empty if the deformation is inadmissible
    };

    struct Gradient {
        Eigen::VectorXd derivative; // functional values on control dofs
        Eigen::VectorXd riesz;      // H1_0 representative
        double norm = 0.0;          // H1_0 seminorm of `riesz`
        CorrectorField adjoint;
    };

    const CellProblem& problem() const { return problem_; }
    const FeSpace& space() const { return problem_.space(); }
    const H1Riesz& riesz() const { return riesz_; }
    const DofMap& control_dofs() const { return riesz_.dofs(); }
    const CostConfig& config() const { return cfg_; }
    int num_controls() const { return control_dofs().num_dofs(); }

    void set_beta(double beta) {
        if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
        cfg_.beta = beta;
    }

    DeformationField to_nodal(const Eigen::VectorXd& x) const { return control_dofs().expand<double>(x); }
    Eigen::VectorXd to_control(const DeformationField& q) const {
        validate_deformation(space().mesh(), q);
        return control_dofs().restrict_nodal<double>(q);
    }

    /// Inadmissible deformations (J <= 0 anywhere, or a collapsed interface
    /// tangent) evaluate to an infinite total instead of raising.
    Evaluation evaluate(const Eigen::VectorXd& x) const {
        Evaluation ev;
        ev.q = to_nodal(x);
        ev.cost.min_J = min_jacobian(space(), ev.q);
        if (!(ev.cost.min_J > 0.0)) return inadmissible(std::move(ev));
        try {
            ev.state = problem_.solve(ev.q);
        } catch (const DegenerateDeformation&) {
            return inadmissible(std::move(ev));
        }
        ev.cost = evaluate_cost(problem_, ev.q, cfg_, ev.state->chi);
        return ev;
    }

    double value(const Eigen::VectorXd& x) const { return evaluate(x).cost.total; }

    Gradient gradient(Evaluation& ev) const {
        if (!ev.state) throw DegenerateDeformation("gradient requested at an inadmissible deformation");
        Gradient g;
        g.adjoint = solve_adjoint(problem_, *ev.state, ev.cost.tensor, cfg_);
        g.derivative = shape_derivative(problem_, ev.q, cfg_, ev.state->chi, ev.cost.tensor, g.adjoint, control_dofs());
        g.riesz = riesz_gradient(riesz_, g.derivative);
        g.norm = riesz_.norm(g.riesz);
        return g;
    }

private:
    Evaluation inadmissible(Evaluation ev) const {
        const double mj = ev.cost.min_J;
        ev.cost = CostBreakdown{};
        ev.cost.min_J = mj;
        ev.cost.misfit = ev.cost.deviation_percent = std::numeric_limits<double>::quiet_NaN();
        ev.cost.tikhonov = regularization(space(), ev.q, cfg_, tikhonov_weights(space(), cfg_.alpha_sigma)).first;
        ev.cost.penalty = ev.cost.total = infinite_cost;
        return ev;
    }

    CellProblem problem_;
    CostConfig cfg_;
    H1Riesz riesz_;
};

// ---------------------------------------------------------------------------
// Finite-difference consistency checks

/// Smooth interior deformation with small nodal noise, zero on the boundary.
inline Eigen::VectorXd random_control(const ReducedCost& rc, double amp, std::mt19937& rng) {
    const Mesh& mesh = rc.space().mesh();
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    const double pi = 3.14159265358979323846;
    DeformationField q(mesh.num_vertices(), 2);
    for (int v = 0; v < mesh.num_vertices(); ++v) {
        const double x = mesh.vertices[v].x(), y = mesh.vertices[v].y();
        const double bump = std::sin(pi * x) * std::sin(pi * y);
        q(v, 0) = amp * bump * (a * std::cos(pi * y) + b * std::sin(2 * pi * x) + 0.1 * u(rng));
        q(v, 1) = amp * bump * (c * std::cos(pi * x) + d * std::sin(2 * pi * y) + 0.1 * u(rng));
    }
    const auto bnd = boundary_vertices(mesh);
    for (int v = 0; v < mesh.num_vertices(); ++v)
        if (bnd[v]) q.row(v).setZero();
    return rc.to_control(q);
}

struct FdSample {
    double step = 0.0;
    double fd = 0.0;
    double error = 0.0; // |fd - exact| / max(|fd|, 1e-14)
};

struct GradientCheck {
    double exact = 0.0;
    std::vector<FdSample> sweep;
    double best_error() const {
        double b = std::numeric_limits<double>::infinity();
        for (const auto& s : sweep) b = std::min(b, s.error);
        return b;
    }
};

/// Central differences of the reduced cost along `dir` over a step sweep,
/// against the adjoint directional derivative.
inline GradientCheck gradient_check(const ReducedCost& rc, const Eigen::VectorXd& x, const Eigen::VectorXd& dir) {
    auto ev = rc.evaluate(x);
    if (!ev.cost.admissible()) throw DegenerateDeformation("gradient check at an inadmissible deformation");
    GradientCheck out;
    out.exact = rc.gradient(ev).derivative.dot(dir);
    for (double h : {1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 1e-6}) {
        FdSample s;
        s.step = h;
        s.fd = (rc.value(x + h * dir) - rc.value(x - h * dir)) / (2.0 * h);
        s.error = std::abs(s.fd - out.exact) / std::max(std::abs(s.fd), 1e-14);
        out.sweep.push_back(s);
    }
    return out;
}

} // namespace cellopt
