#pragma once

// Bilinear Q1 elements on quadrilaterals: quadrature, degree-of-freedom maps
// with periodic or zero-boundary constraints, sparse assembly and direct
// solvers.

#include "cellopt/errors.hpp"
#include "cellopt/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <array>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

namespace cellopt {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using SparseMatrix = Eigen::SparseMatrix<Scalar>;

using ShapeGrads = Eigen::Matrix<double, 2, 4>; // column v = gradient of basis function v

// ---------------------------------------------------------------------------
// Quadrature

struct QuadratureRule {
    std::vector<Vec2> points; // on [0,1]^2
    std::vector<double> weights;
};

struct LineRule {
    std::array<double, 2> points; // on [0,1]
    std::array<double, 2> weights;
};

/// 2-point Gauss rule on [0,1]; exact for cubics.
inline LineRule face_rule() {
    const double g = 0.5 / std::sqrt(3.0);
    return {{0.5 - g, 0.5 + g}, {0.5, 0.5}};
}

/// 2x2 tensor Gauss rule on the unit square.
inline QuadratureRule volume_rule() {
    const LineRule l = face_rule();
    QuadratureRule r;
    for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
            r.points.emplace_back(l.points[i], l.points[j]);
            r.weights.push_back(l.weights[i] * l.weights[j]);
        }
    return r;
}

inline std::pair<QuadratureRule, LineRule> quadrature_rules() { return {volume_rule(), face_rule()}; }

namespace q1 {

/// Basis ordering follows the counterclockwise cell vertices:
/// (0,0), (1,0), (1,1), (0,1).
inline Eigen::Vector4d values(const Vec2& xi) {
    const double u = xi.x(), v = xi.y();
    return {(1 - u) * (1 - v), u * (1 - v), u * v, (1 - u) * v};
}

inline ShapeGrads reference_gradients(const Vec2& xi) {
    const double u = xi.x(), v = xi.y();
    ShapeGrads g;
    g << -(1 - v), (1 - v), v, -v,
         -(1 - u), -u, u, (1 - u);
    return g;
}

/// Reference coordinates of the point at parameter t along local face f,
/// traversed from local vertex f to local vertex (f+1)%4.
inline Vec2 face_point(int f, double t) {
    switch (f) {
    case 0: return {t, 0.0};
    case 1: return {1.0, t};
    case 2: return {1.0 - t, 1.0};
    default: return {0.0, 1.0 - t};
    }
}

} // namespace q1

// ---------------------------------------------------------------------------
// Precomputed element data

struct CellQuadrature {
    std::array<double, 4> JxW{};
    std::array<ShapeGrads, 4> grads;
    std::array<Vec2, 4> points;
};

struct FaceQuadrature {
    int cell = 0;
    int local_face = 0;
    Vec2 tangent, normal;
    double length = 0.0;
    std::array<double, 2> JxW{};
    std::array<ShapeGrads, 2> grads; // gradients of the owning cell's basis
    std::array<Vec2, 2> points;
};

/// Geometry of the Q1 space on a fixed reference mesh. Immutable after
/// construction.
class FeSpace {
public:
    explicit FeSpace(Mesh mesh) : mesh_(std::move(mesh)) {
        const auto rule = volume_rule();
        cells_.resize(mesh_.cells.size());
        for (int c = 0; c < mesh_.num_cells(); ++c) {
            auto& cq = cells_[c];
            for (int q = 0; q < 4; ++q) {
                const auto [jac_det, grads, point] = map(c, rule.points[q]);
                if (!(jac_det > 0.0))
                    throw ValidationError("cell " + std::to_string(c) + " has non-positive Jacobian");
                cq.JxW[q] = jac_det * rule.weights[q];
                cq.grads[q] = grads;
                cq.points[q] = point;
            }
        }
        const LineRule lr = face_rule();
        for (const auto& d : interface_faces(mesh_)) {
            FaceQuadrature fq;
            fq.cell = d.face.cell;
            fq.local_face = d.face.local_face;
            fq.tangent = d.frames[0].tangent;
            fq.normal = d.frames[0].normal;
            fq.length = d.length;
            for (int q = 0; q < 2; ++q) {
                const auto m = map(fq.cell, q1::face_point(fq.local_face, lr.points[q]));
                fq.JxW[q] = lr.weights[q] * d.length;
                fq.grads[q] = m.grads;
                fq.points[q] = m.point;
            }
            faces_.push_back(fq);
        }
        interface_adjacent_ = interface_adjacent_cells(mesh_);
        diameters_.resize(mesh_.cells.size());
        for (int c = 0; c < mesh_.num_cells(); ++c) diameters_[c] = cell_diameter(mesh_, c);
    }

    struct MappedPoint {
        double jac_det;
        ShapeGrads grads;
        Vec2 point;
    };

    /// Shape-function gradients and the map Jacobian at reference point xi of a cell.
    MappedPoint map(int cell, const Vec2& xi) const {
        const auto& c = mesh_.cells[cell];
        Eigen::Matrix<double, 2, 4> X;
        for (int v = 0; v < 4; ++v) X.col(v) = mesh_.vertices[c[v]];
        const ShapeGrads ref = q1::reference_gradients(xi);
        const Mat2d jac = X * ref.transpose(); // d x / d xi
        const double det = jac.determinant();
        ShapeGrads grads = jac.inverse().transpose() * ref;
        return {det, grads, X * q1::values(xi)};
    }

    const Mesh& mesh() const { return mesh_; }
    const std::vector<CellQuadrature>& cells() const { return cells_; }
    const std::vector<FaceQuadrature>& faces() const { return faces_; }
    bool interface_adjacent(int cell) const { return interface_adjacent_[cell]; }
    double diameter(int cell) const { return diameters_[cell]; }

private:
    using Mat2d = Eigen::Matrix2d;
    Mesh mesh_;
    std::vector<CellQuadrature> cells_;
    std::vector<FaceQuadrature> faces_;
    std::vector<bool> interface_adjacent_;
    std::vector<double> diameters_;
};

// ---------------------------------------------------------------------------
// Degrees of freedom

enum class ConstraintMode { periodic, zero_boundary };

/// Maps (vertex, component) to a global dof after identifying periodic
/// partners or eliminating boundary vertices. Eliminated entries map to -1
/// and carry the value zero.
class DofMap {
public:
    static DofMap periodic(const Mesh& mesh, int components, std::optional<int> pin_vertex = {}) {
        const int nv = mesh.num_vertices();
        std::vector<int> master(nv);
        for (int v = 0; v < nv; ++v) master[v] = v;
        for (const auto& p : mesh.periodic_pairs) master[p.slave] = p.master;
        auto resolve = [&](int v) {
            for (int hops = 0; master[v] != v; ++hops) {
                if (hops > nv) throw ValidationError("cyclic periodic pairing");
                v = master[v];
            }
            return v;
        };
        DofMap d(ConstraintMode::periodic, components, nv);
        std::vector<int> canonical_dof(nv, -1);
        const int pinned = pin_vertex ? resolve(*pin_vertex) : -1;
        int next = 0;
        for (int v = 0; v < nv; ++v) {
            const int m = resolve(v);
            if (m == pinned) continue;
            if (canonical_dof[m] < 0) canonical_dof[m] = next++;
            d.vertex_dof_[v] = canonical_dof[m];
        }
        d.num_free_vertices_ = next;
        d.pin_vertex_ = pin_vertex.value_or(-1);
        return d;
    }

    static DofMap zero_boundary(const Mesh& mesh, int components) {
        const auto boundary = boundary_vertices(mesh);
        DofMap d(ConstraintMode::zero_boundary, components, mesh.num_vertices());
        int next = 0;
        for (int v = 0; v < mesh.num_vertices(); ++v)
            if (!boundary[v]) d.vertex_dof_[v] = next++;
        d.num_free_vertices_ = next;
        return d;
    }

    ConstraintMode mode() const { return mode_; }
    int components() const { return components_; }
    int num_dofs() const { return num_free_vertices_ * components_; }
    int num_vertices() const { return static_cast<int>(vertex_dof_.size()); }
    int pin_vertex() const { return pin_vertex_; }

    int dof(int vertex, int component) const {
        const int d = vertex_dof_[vertex];
        return d < 0 ? -1 : d * components_ + component;
    }

    /// Nodal values (one row per vertex) to the dof vector. Values at
    /// identified vertices are taken from the last vertex visited.
    template <typename Scalar>
    Vector<Scalar> restrict_nodal(const Matrix<Scalar>& nodal) const {
        Vector<Scalar> x = Vector<Scalar>::Zero(num_dofs());
        for (int v = 0; v < num_vertices(); ++v)
            for (int c = 0; c < components_; ++c)
                if (int k = dof(v, c); k >= 0) x[k] = nodal(v, c);
        return x;
    }

    template <typename Scalar>
    Matrix<Scalar> expand(const Vector<Scalar>& x) const {
        if (x.size() != num_dofs()) throw ContractViolation("dof vector has wrong length");
        Matrix<Scalar> nodal = Matrix<Scalar>::Zero(num_vertices(), components_);
        for (int v = 0; v < num_vertices(); ++v)
            for (int c = 0; c < components_; ++c)
                if (int k = dof(v, c); k >= 0) nodal(v, c) = x[k];
        return nodal;
    }

private:
    DofMap(ConstraintMode mode, int components, int nv)
        : mode_(mode), components_(components), vertex_dof_(nv, -1) {}

    ConstraintMode mode_;
    int components_;
    std::vector<int> vertex_dof_;
    int num_free_vertices_ = 0;
    int pin_vertex_ = -1;
};

// ---------------------------------------------------------------------------
// Assembly

template <typename Scalar>
struct SparseSystem {
    SparseMatrix<Scalar> matrix;
    Matrix<Scalar> rhs;
    bool symmetric = false;
};

/// Generic assembly. `cell_fn(cell, A, b)` and `face_fn(face_index, A, b)`
/// fill local (4*components)^2 matrices and (4*components) x n_rhs right-hand
/// sides indexed by local vertex * components + component; face
/// contributions are scattered through the face's owning cell. Cells and
/// faces are visited in index order, so the result is deterministic.
template <typename Scalar, typename CellFn, typename FaceFn>
SparseSystem<Scalar> assemble(const FeSpace& space, const DofMap& dofs, int n_rhs, CellFn&& cell_fn,
                              FaceFn&& face_fn) {
    const int nc = dofs.components();
    const int nloc = 4 * nc;
    const Mesh& mesh = space.mesh();
    std::vector<Eigen::Triplet<Scalar>> triplets;
    triplets.reserve(static_cast<std::size_t>(mesh.num_cells()) * nloc * nloc);
    Matrix<Scalar> rhs = Matrix<Scalar>::Zero(dofs.num_dofs(), n_rhs);

    auto scatter = [&](int cell, const Matrix<Scalar>& A, const Matrix<Scalar>& b) {
        if (A.rows() != nloc || A.cols() != nloc || b.rows() != nloc || b.cols() != n_rhs)
            throw ContractViolation("local contribution has inconsistent size");
        std::array<int, 16> g{};
        for (int v = 0; v < 4; ++v)
            for (int c = 0; c < nc; ++c) g[v * nc + c] = dofs.dof(mesh.cells[cell][v], c);
        for (int i = 0; i < nloc; ++i) {
            if (g[i] < 0) continue;
            for (int r = 0; r < n_rhs; ++r) rhs(g[i], r) += b(i, r);
            for (int j = 0; j < nloc; ++j)
                if (g[j] >= 0 && A(i, j) != Scalar(0)) triplets.emplace_back(g[i], g[j], A(i, j));
        }
    };

    Matrix<Scalar> A(nloc, nloc), b(nloc, n_rhs);
    for (int c = 0; c < mesh.num_cells(); ++c) {
        A.setZero();
        b.setZero();
        cell_fn(c, A, b);
        scatter(c, A, b);
    }
    for (int f = 0; f < static_cast<int>(space.faces().size()); ++f) {
        A.setZero();
        b.setZero();
        if (face_fn(f, A, b)) scatter(space.faces()[f].cell, A, b);
    }
    SparseSystem<Scalar> sys;
    sys.matrix.resize(dofs.num_dofs(), dofs.num_dofs());
    sys.matrix.setFromTriplets(triplets.begin(), triplets.end());
    sys.rhs = std::move(rhs);
    return sys;
}

/// Face callback that contributes nothing.
struct NoFaceTerms {
    template <typename A, typename B>
    bool operator()(int, A&, B&) const {
        return false;
    }
};

/// Stiffness matrix (grad u, grad v) for every component of `dofs`.
inline SparseMatrix<double> laplace_matrix(const FeSpace& space, const DofMap& dofs) {
    const int nc = dofs.components();
    auto sys = assemble<double>(
        space, dofs, 1,
        [&](int cell, Matrix<double>& A, Matrix<double>&) {
            const auto& cq = space.cells()[cell];
            for (int q = 0; q < 4; ++q) {
                const Eigen::Matrix4d K = cq.grads[q].transpose() * cq.grads[q] * cq.JxW[q];
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        for (int c = 0; c < nc; ++c) A(i * nc + c, j * nc + c) += K(i, j);
            }
        },
        NoFaceTerms{});
    sys.matrix.makeCompressed();
    return sys.matrix;
}

inline SparseMatrix<double> mass_matrix(const FeSpace& space, const DofMap& dofs) {
    const int nc = dofs.components();
    const auto rule = volume_rule();
    auto sys = assemble<double>(
        space, dofs, 1,
        [&](int cell, Matrix<double>& A, Matrix<double>&) {
            const auto& cq = space.cells()[cell];
            for (int q = 0; q < 4; ++q) {
                const Eigen::Vector4d N = q1::values(rule.points[q]);
                const Eigen::Matrix4d M = N * N.transpose() * cq.JxW[q];
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        for (int c = 0; c < nc; ++c) A(i * nc + c, j * nc + c) += M(i, j);
            }
        },
        NoFaceTerms{});
    return sys.matrix;
}

// ---------------------------------------------------------------------------
// Linear solvers

inline constexpr double residual_tolerance = 1e-10;

namespace detail {

template <typename Scalar, typename Rhs, typename Sol>
double relative_residual(const SparseMatrix<Scalar>& A, const Rhs& b, const Sol& x, bool adjoint) {
    const double bn = b.norm();
    const Matrix<Scalar> r = adjoint ? Matrix<Scalar>(A.adjoint() * x - b) : Matrix<Scalar>(A * x - b);
    return bn == 0.0 ? r.norm() : r.norm() / bn;
}

} // namespace detail

/// Sparse LU factorization with residual verification on every solve.
template <typename Scalar>
class DirectSolver {
public:
    explicit DirectSolver(SparseMatrix<Scalar> A) : A_(std::move(A)) {
        A_.makeCompressed();
        lu_.analyzePattern(A_);
        lu_.factorize(A_);
        if (lu_.info() != Eigen::Success)
            throw SolverError("sparse LU factorization failed: " + lu_.lastErrorMessage());
    }

    DirectSolver(const DirectSolver&) = delete;
    DirectSolver& operator=(const DirectSolver&) = delete;

    Matrix<Scalar> solve(const Matrix<Scalar>& b) const {
        Matrix<Scalar> x = lu_.solve(b);
        check(b, x, false);
        return x;
    }

    /// Solves A^H x = b with the same factorization.
    Matrix<Scalar> solve_adjoint(const Matrix<Scalar>& b) {
        Matrix<Scalar> x = lu_.adjoint().solve(b);
        check(b, x, true);
        return x;
    }

    const SparseMatrix<Scalar>& matrix() const { return A_; }

private:
    void check(const Matrix<Scalar>& b, const Matrix<Scalar>& x, bool adjoint) const {
        if (!x.allFinite()) throw SolverError("linear solve produced non-finite values");
        const double res = detail::relative_residual(A_, b, x, adjoint);
        if (!(res < residual_tolerance))
            throw SolverError("linear solve residual " + std::to_string(res) + " exceeds tolerance", res);
    }

    SparseMatrix<Scalar> A_;
    Eigen::SparseLU<SparseMatrix<Scalar>, Eigen::COLAMDOrdering<int>> lu_;
};

template <typename Scalar>
Matrix<Scalar> solve(const SparseSystem<Scalar>& sys) {
    DirectSolver<Scalar> s(sys.matrix);
    return s.solve(sys.rhs);
}

/// Solves a complex system through its real 2x2 block form
/// [Re A, -Im A; Im A, Re A].
inline Matrix<std::complex<double>> solve_real_block(const SparseMatrix<std::complex<double>>& A,
                                                     const Matrix<std::complex<double>>& b) {
    const Eigen::Index n = A.rows();
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < A.outerSize(); ++k)
        for (SparseMatrix<std::complex<double>>::InnerIterator it(A, k); it; ++it) {
            const auto i = it.row(), j = it.col();
            const double re = it.value().real(), im = it.value().imag();
            t.emplace_back(i, j, re);
            t.emplace_back(i + n, j + n, re);
            if (im != 0.0) {
                t.emplace_back(i, j + n, -im);
                t.emplace_back(i + n, j, im);
            }
        }
    SparseMatrix<double> R(2 * n, 2 * n);
    R.setFromTriplets(t.begin(), t.end());
    Matrix<double> rb(2 * n, b.cols());
    rb.topRows(n) = b.real();
    rb.bottomRows(n) = b.imag();
    DirectSolver<double> s(std::move(R));
    const Matrix<double> rx = s.solve(rb);
    Matrix<std::complex<double>> x(n, b.cols());
    x.real() = rx.topRows(n);
    x.imag() = rx.bottomRows(n);
    return x;
}

// ---------------------------------------------------------------------------
// H^1_0 Riesz map for vector fields

/// Solves (grad u, grad v) = f[v] for all zero-boundary vector fields v, and
/// provides the matching semi-inner product. The stiffness matrix depends
/// only on the reference mesh, so it is factorized once.
class H1Riesz {
public:
    explicit H1Riesz(const FeSpace& space, int components = 2)
        : dofs_(DofMap::zero_boundary(space.mesh(), components)), K_(laplace_matrix(space, dofs_)) {
        llt_.compute(K_);
        if (llt_.info() != Eigen::Success) throw SolverError("Cholesky factorization of the stiffness matrix failed");
    }

    const DofMap& dofs() const { return dofs_; }
    const SparseMatrix<double>& stiffness() const { return K_; }

    Eigen::VectorXd solve(const Eigen::VectorXd& functional) const {
        if (functional.size() != K_.rows()) throw ContractViolation("functional has wrong length");
        if (functional.isZero(0.0)) return Eigen::VectorXd::Zero(functional.size());
        Eigen::VectorXd x = llt_.solve(functional);
        const double res = (K_ * x - functional).norm() / functional.norm();
        if (!(res < residual_tolerance)) throw SolverError("Riesz solve residual too large", res);
        return x;
    }

    double inner(const Eigen::VectorXd& u, const Eigen::VectorXd& v) const { return u.dot(K_ * v); }
    double norm(const Eigen::VectorXd& u) const { return std::sqrt(std::max(0.0, inner(u, u))); }

private:
    DofMap dofs_;
    SparseMatrix<double> K_;
    Eigen::SimplicialLDLT<SparseMatrix<double>> llt_;
};

inline Eigen::VectorXd h1_riesz_solve(const H1Riesz& riesz, const Eigen::VectorXd& functional) {
    return riesz.solve(functional);
}

} // namespace cellopt
