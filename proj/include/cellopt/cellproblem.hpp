#pragma once

// Periodic cell problem on the deformed unit cell, assembled in reference
// coordinates, and the resulting effective permittivity tensor.

#include "cellopt/errors.hpp"
#include "cellopt/fem.hpp"
#include "cellopt/geometry.hpp"
#include "cellopt/kinematics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

namespace cellopt {

/// Nodal deformation values, one row (q_x, q_y) per mesh vertex.
using DeformationField = Eigen::MatrixXd;

inline DeformationField zero_deformation(const Mesh& mesh) { return DeformationField::Zero(mesh.num_vertices(), 2); }

inline void validate_deformation(const Mesh& mesh, const DeformationField& q) {
    if (q.rows() != mesh.num_vertices() || q.cols() != 2) throw ContractViolation("deformation field has wrong shape");
    if (!q.allFinite()) throw ValidationError("deformation field has non-finite values");
    const auto bnd = boundary_vertices(mesh);
    for (int v = 0; v < mesh.num_vertices(); ++v)
        if (bnd[v] && (q(v, 0) != 0.0 || q(v, 1) != 0.0))
            throw ValidationError("deformation must vanish on the cell boundary (vertex " + std::to_string(v) + ")");
}

/// grad q at a point, given the physical gradients of the cell's four basis
/// functions: (grad q)_{ab} = d q_a / d y_b.
inline Mat2 deformation_gradient_at(const Mesh& mesh, const DeformationField& q, int cell, const ShapeGrads& grads) {
    Mat2 g = Mat2::Zero();
    for (int v = 0; v < 4; ++v) g += q.row(mesh.cells[cell][v]).transpose() * grads.col(v).transpose();
    return g;
}

/// TransformState at volume quadrature point `qp` of `cell`.
inline TransformState transform_at(const FeSpace& space, const DeformationField& q, int cell, int qp) {
    return deformation_gradient(deformation_gradient_at(space.mesh(), q, cell, space.cells()[cell].grads[qp]));
}

/// Smallest J over all volume and interface quadrature points.
inline double min_jacobian(const FeSpace& space, const DeformationField& q) {
    double m = std::numeric_limits<double>::infinity();
    for (int c = 0; c < space.mesh().num_cells(); ++c)
        for (int p = 0; p < 4; ++p) m = std::min(m, transform_at(space, q, c, p).J);
    for (const auto& f : space.faces())
        for (int p = 0; p < 2; ++p)
            m = std::min(m, deformation_gradient(deformation_gradient_at(space.mesh(), q, f.cell, f.grads[p])).J);
    return m;
}

inline double min_jacobian_of_cell(const FeSpace& space, const DeformationField& q, int cell) {
    double m = std::numeric_limits<double>::infinity();
    for (int p = 0; p < 4; ++p) m = std::min(m, transform_at(space, q, cell, p).J);
    return m;
}

/// Frame of interface face `f` as seen from its owning cell.
inline InterfaceFrame face_frame(const FaceQuadrature& f, int qp) {
    return {f.points[qp], f.tangent, f.normal, f.JxW[qp]};
}

/// Coefficient -1/(i omega) = i/omega multiplying the surface terms.
inline Complex surface_factor(double omega) { return Complex(0.0, 1.0 / omega); }

/// Solution of the two cell problems (one per unit direction).
struct CorrectorField {
    Matrix<Complex> dofs;  // num_dofs x 2
    Matrix<Complex> nodal; // num_vertices x 2
};

struct StateSolution {
    SparseSystem<Complex> system;
    CorrectorField chi;
    std::shared_ptr<DirectSolver<Complex>> solver; // factorization of system.matrix, reused by the adjoint
};

struct EffectiveTensor {
    CMat2 value = CMat2::Zero();

    static double frobenius(const CMat2& a) { return std::sqrt(a.cwiseAbs2().sum()); }
    double misfit(const CMat2& target) const { return 0.5 * (value - target).cwiseAbs2().sum(); }
    double deviation(const CMat2& target) const { return frobenius(value - target) / frobenius(target); }
    double deviation_percent(const CMat2& target) const { return 100.0 * deviation(target); }
};

/// Cell problem for a fixed reference mesh and material. Correctors are
/// periodic and pinned to zero at vertex 0.
class CellProblem {
public:
    CellProblem(const FeSpace& space, MaterialParameters material)
        : space_(&space), material_(std::move(material)), sigma_(drude_sigma(material_)),
          dofs_(DofMap::periodic(space.mesh(), 1, 0)) {
        material_.validate();
    }

    const FeSpace& space() const { return *space_; }
    const MaterialParameters& material() const { return material_; }
    const DofMap& dofs() const { return dofs_; }
    Complex sigma() const { return sigma_; }
    Complex kappa() const { return surface_factor(material_.omega); }

    /// Matrix: (eps_hat grad u, grad v) + kappa (sigma_hat t.grad u, t.grad v)_Sigma.
    /// Right-hand side i: -(eps_hat F^T e_i, grad v) - kappa (sigma_hat e_i.F t, t.grad v)_Sigma.
    SparseSystem<Complex> assemble(const DeformationField& q) const {
        const Mesh& mesh = space_->mesh();
        const Complex kappa = this->kappa();
        auto sys = cellopt::assemble<Complex>(
            *space_, dofs_, 2,
            [&](int c, Matrix<Complex>& A, Matrix<Complex>& b) {
                const auto& cq = space_->cells()[c];
                for (int p = 0; p < 4; ++p) {
                    const auto s = deformation_gradient(deformation_gradient_at(mesh, q, c, cq.grads[p]));
                    const CMat2 eh = transformed_permittivity(material_.eps, s);
                    const Eigen::Matrix<Complex, 2, 4> G = cq.grads[p].cast<Complex>();
                    A += G.transpose() * eh * G * cq.JxW[p];
                    const CMat2 forcing = eh * s.F.transpose().cast<Complex>(); // column i = eps_hat F^T e_i
                    b -= G.transpose() * forcing * cq.JxW[p];
                }
            },
            [&](int f, Matrix<Complex>& A, Matrix<Complex>& b) {
                const auto& fq = space_->faces()[f];
                for (int p = 0; p < 2; ++p) {
                    const auto s = deformation_gradient(deformation_gradient_at(mesh, q, fq.cell, fq.grads[p]));
                    const Complex sh = transformed_conductivity(sigma_, s, face_frame(fq, p));
                    const Eigen::Vector4d tg = fq.grads[p].transpose() * fq.tangent;
                    const Vec2 Ft = s.F * fq.tangent;
                    A += (kappa * sh * fq.JxW[p]) * (tg * tg.transpose()).cast<Complex>();
                    b -= (kappa * sh * fq.JxW[p]) * (tg * Ft.transpose()).cast<Complex>();
                }
                return true;
            });
        sys.matrix.makeCompressed();
        sys.symmetric = true;
        return sys;
    }

    StateSolution solve(const DeformationField& q) const {
        StateSolution st;
        st.system = assemble(q);
        st.solver = std::make_shared<DirectSolver<Complex>>(st.system.matrix);
        st.chi.dofs = st.solver->solve(st.system.rhs);
        st.chi.nodal = to_nodal(st.chi.dofs);
        return st;
    }

    /// Two dof columns to two nodal columns (pinned vertex set to zero).
    Matrix<Complex> to_nodal(const Matrix<Complex>& d) const {
        Matrix<Complex> nodal(space_->mesh().num_vertices(), d.cols());
        for (int j = 0; j < d.cols(); ++j) nodal.col(j) = dofs_.expand<Complex>(d.col(j)).col(0);
        return nodal;
    }

    CorrectorField make_field(Matrix<Complex> d) const {
        CorrectorField f;
        f.nodal = to_nodal(d);
        f.dofs = std::move(d);
        return f;
    }

    /// Full bilinear form with conjugated corrector on the test side, valid
    /// for any chi (not only the solution).
    EffectiveTensor effective_tensor(const DeformationField& q, const CorrectorField& chi) const {
        const Mesh& mesh = space_->mesh();
        const Complex kappa = this->kappa();
        CMat2 e = CMat2::Zero();
        for (int c = 0; c < mesh.num_cells(); ++c) {
            const auto& cq = space_->cells()[c];
            const auto X = cell_values(chi.nodal, c);
            for (int p = 0; p < 4; ++p) {
                const auto s = deformation_gradient(deformation_gradient_at(mesh, q, c, cq.grads[p]));
                const CMat2 eh = transformed_permittivity(material_.eps, s);
                const CMat2 gchi = cq.grads[p].cast<Complex>() * X; // column j = grad chi_j
                const CMat2 U = s.F.transpose().cast<Complex>() + gchi;
                const CMat2 W = s.F.transpose().cast<Complex>() + gchi.conjugate();
                e += W.transpose() * eh * U * cq.JxW[p]; // (i,j) = W_i . eps_hat U_j
            }
        }
        for (const auto& fq : space_->faces()) {
            const auto X = cell_values(chi.nodal, fq.cell);
            for (int p = 0; p < 2; ++p) {
                const auto s = deformation_gradient(deformation_gradient_at(mesh, q, fq.cell, fq.grads[p]));
                const Complex sh = transformed_conductivity(sigma_, s, face_frame(fq, p));
                const Eigen::Vector2cd tchi = X.transpose() * (fq.grads[p].transpose() * fq.tangent).cast<Complex>();
                const Eigen::Vector2cd tF = (s.F * fq.tangent).cast<Complex>();
                const Eigen::Vector2cd u = tF + tchi;
                const Eigen::Vector2cd w = tF + tchi.conjugate();
                e += (kappa * sh * fq.JxW[p]) * (w * u.transpose());
            }
        }
        return {e};
    }

    /// Values of both correctors at the four vertices of a cell (4 x 2).
    static Eigen::Matrix<Complex, 4, 2> cell_values(const Matrix<Complex>& nodal, const std::array<int, 4>& cell) {
        Eigen::Matrix<Complex, 4, 2> X;
        for (int v = 0; v < 4; ++v) X.row(v) = nodal.row(cell[v]);
        return X;
    }

    Eigen::Matrix<Complex, 4, 2> cell_values(const Matrix<Complex>& nodal, int cell) const {
        return cell_values(nodal, space_->mesh().cells[cell]);
    }

private:
    const FeSpace* space_;
    MaterialParameters material_;
    Complex sigma_;
    DofMap dofs_;
};

/// Cross-check assembly written directly in deformed quantities: physical
/// gradients F^{-T} grad, volume element J, deformed unit tangent F t/|F t|
/// and line element |F t|, with the untransformed eps and sigma.
inline SparseSystem<Complex> assemble_pullback_form(const CellProblem& cp, const DeformationField& q) {
    const FeSpace& space = cp.space();
    const Mesh& mesh = space.mesh();
    const CMat2& eps = cp.material().eps;
    const Complex kappa = cp.kappa(), sigma = cp.sigma();
    auto sys = assemble<Complex>(
        space, cp.dofs(), 2,
        [&](int c, Matrix<Complex>& A, Matrix<Complex>& b) {
            const auto& cq = space.cells()[c];
            for (int p = 0; p < 4; ++p) {
                const auto s = deformation_gradient(deformation_gradient_at(mesh, q, c, cq.grads[p]));
                if (!(s.J > 0.0)) throw DegenerateDeformation("non-positive transformation determinant");
                const Eigen::Matrix<Complex, 2, 4> Gx = (s.Finv.transpose() * cq.grads[p]).cast<Complex>();
                const double dx = s.J * cq.JxW[p];
                A += Gx.transpose() * eps * Gx * dx;
                b -= Gx.transpose() * eps * dx; // column i: eps e_i . grad_x v
            }
        },
        [&](int f, Matrix<Complex>& A, Matrix<Complex>& b) {
            const auto& fq = space.faces()[f];
            for (int p = 0; p < 2; ++p) {
                const auto s = deformation_gradient(deformation_gradient_at(mesh, q, fq.cell, fq.grads[p]));
                const Vec2 Ft = s.F * fq.tangent;
                const double ds = Ft.norm() * fq.JxW[p];
                const Vec2 tx = Ft / Ft.norm();
                const Eigen::Vector4d tg = (s.Finv.transpose() * fq.grads[p]).transpose() * tx;
                A += (kappa * sigma * ds) * (tg * tg.transpose()).cast<Complex>();
                b -= (kappa * sigma * ds) * (tg * tx.transpose()).cast<Complex>();
            }
            return true;
        });
    sys.matrix.makeCompressed();
    return sys;
}

// ---------------------------------------------------------------------------
// Norms used by the robustness statements

/// sum_i ||grad chi_i||^2_{L2(Y)} + (1/omega) sum_i ||t.grad chi_i||^2_{L2(Sigma)}.
inline double corrector_energy(const CellProblem& cp, const Matrix<Complex>& nodal) {
    const FeSpace& space = cp.space();
    double vol = 0.0, surf = 0.0;
    for (int c = 0; c < space.mesh().num_cells(); ++c) {
        const auto& cq = space.cells()[c];
        const auto X = cp.cell_values(nodal, c);
        for (int p = 0; p < 4; ++p) vol += (cq.grads[p].cast<Complex>() * X).cwiseAbs2().sum() * cq.JxW[p];
    }
    for (const auto& fq : space.faces()) {
        const auto X = cp.cell_values(nodal, fq.cell);
        for (int p = 0; p < 2; ++p)
            surf += (X.transpose() * (fq.grads[p].transpose() * fq.tangent).cast<Complex>()).cwiseAbs2().sum() *
                    fq.JxW[p];
    }
    return vol + surf / cp.material().omega;
}

/// ||eps_hat||_inf^2 ||F^T||^2_{L2(Y)} + (1/omega) ||sigma_hat||_inf^2 ||(F^T)_t||^2_{L2(Sigma)},
/// where (F^T)_t has rows t.F^T e_i, so its squared norm is |F t|^2.
inline double apriori_bound_rhs(const CellProblem& cp, const DeformationField& q) {
    const FeSpace& space = cp.space();
    const Mesh& mesh = space.mesh();
    double eps_inf = 0.0, F2 = 0.0, sig_inf = 0.0, Ft2 = 0.0;
    for (int c = 0; c < mesh.num_cells(); ++c) {
        const auto& cq = space.cells()[c];
        for (int p = 0; p < 4; ++p) {
            const auto s = transform_at(space, q, c, p);
            const CMat2 eh = transformed_permittivity(cp.material().eps, s);
            eps_inf = std::max(eps_inf, eh.operatorNorm());
            F2 += s.F.squaredNorm() * cq.JxW[p];
        }
    }
    for (const auto& fq : space.faces())
        for (int p = 0; p < 2; ++p) {
            const auto s = deformation_gradient(deformation_gradient_at(mesh, q, fq.cell, fq.grads[p]));
            sig_inf = std::max(sig_inf, std::abs(transformed_conductivity(cp.sigma(), s, face_frame(fq, p))));
            Ft2 += (s.F * fq.tangent).squaredNorm() * fq.JxW[p];
        }
    return eps_inf * eps_inf * F2 + sig_inf * sig_inf * Ft2 / cp.material().omega;
}

} // namespace cellopt
