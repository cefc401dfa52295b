#pragma once

// Deformation-induced quantities at a single quadrature point: transformation
// gradient F = I + grad q, its determinant J, the pulled-back permittivity and
// surface conductivity, and their directional derivatives in q.

#include "cellopt/errors.hpp"
#include "cellopt/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <complex>

namespace cellopt {

using Complex = std::complex<double>;
using Mat2 = Eigen::Matrix2d;
using CMat2 = Eigen::Matrix2cd;
using CVec2 = Eigen::Vector2cd;

struct MaterialParameters {
    CMat2 eps = CMat2::Identity(); // bulk relative permittivity
    double omega = 0.3;            // angular frequency
    double omega_p = 4.0 / 137.0;  // Drude weight
    double tau = 100.0;            // Drude relaxation time

    void validate() const {
        if (!(omega > 0.0)) throw ConfigError("omega must be positive");
        if (!(omega_p >= 0.0)) throw ConfigError("omega_p must be non-negative");
        if (!(tau > 0.0)) throw ConfigError("tau must be positive");
        if (!eps.allFinite()) throw ConfigError("permittivity must be finite");
        const Mat2 re = eps.real(), im = eps.imag();
        if (std::abs(re(0, 1) - re(1, 0)) > 1e-14 || std::abs(im(0, 1) - im(1, 0)) > 1e-14)
            throw ConfigError("permittivity must be symmetric");
        Eigen::SelfAdjointEigenSolver<Mat2> es(im);
        if (es.eigenvalues().minCoeff() < -1e-14)
            throw ConfigError("imaginary part of the permittivity must be positive semidefinite");
    }
};

/// Drude surface conductivity i*omega_p / (omega + i/tau).
inline Complex drude_sigma(double omega, double omega_p, double tau) {
    const Complex i(0.0, 1.0);
    return i * omega_p / (omega + i / tau);
}

inline Complex drude_sigma(const MaterialParameters& m) { return drude_sigma(m.omega, m.omega_p, m.tau); }

struct TransformState {
    Mat2 F = Mat2::Identity();
    Mat2 Finv = Mat2::Identity();
    double J = 1.0;
};

/// F = I + grad_q where (grad_q)_{ab} = d q_a / d y_b. A non-positive J is
/// representable; Finv is then left as the identity.
inline TransformState deformation_gradient(const Mat2& grad_q) {
    TransformState s;
    s.F = Mat2::Identity() + grad_q;
    s.J = s.F.determinant();
    if (s.J != 0.0) s.Finv = s.F.inverse();
    return s;
}

/// Tangent stretch |F t| and the pulled-back normal factor |F^{-T} n| at an
/// interface point.
struct SurfaceStretch {
    double tangent_stretch = 1.0; // |F t|
    double normal_factor = 1.0;   // |F^{-T} n|
};

inline SurfaceStretch surface_stretch(const TransformState& s, const InterfaceFrame& frame) {
    return {(s.F * frame.tangent).norm(), (s.Finv.transpose() * frame.normal).norm()};
}

/// eps_hat = F^{-1} eps F^{-T} J.
inline CMat2 transformed_permittivity(const CMat2& eps, const TransformState& s) {
    if (!(s.J > 0.0)) throw DegenerateDeformation("non-positive transformation determinant");
    const CMat2 Finv = s.Finv.cast<Complex>();
    return Finv * eps * Finv.transpose() * s.J;
}

inline constexpr double min_tangent_stretch = 1e-12;

/// Scalar surface coefficient for an isotropic conductivity in 2D,
/// sigma |F^{-T} n| J / |F t|^2, simplified with |F^{-T} n| J = |F t|.
inline Complex transformed_conductivity(Complex sigma, const TransformState& s,
                                        const InterfaceFrame& frame) {
    if (!(s.J > 0.0)) throw DegenerateDeformation("non-positive transformation determinant");
    const double ft = (s.F * frame.tangent).norm();
    if (ft < min_tangent_stretch) throw DegenerateDeformation("collapsed interface tangent");
    return sigma / ft;
}

/// Same coefficient, without using the Nanson identity.
inline Complex transformed_conductivity_explicit(Complex sigma, const TransformState& s,
                                                 const InterfaceFrame& frame) {
    if (!(s.J > 0.0)) throw DegenerateDeformation("non-positive transformation determinant");
    const auto st = surface_stretch(s, frame);
    if (st.tangent_stretch < min_tangent_stretch) throw DegenerateDeformation("collapsed interface tangent");
    return sigma * st.normal_factor * s.J / (st.tangent_stretch * st.tangent_stretch);
}

/// Directional derivatives of the primal quantities for a perturbation whose
/// gradient is `dgrad` (so dF = dgrad).
struct TransformDerivative {
    Mat2 dF = Mat2::Zero();
    double dJ = 0.0;
    Mat2 dFinv = Mat2::Zero();
    CMat2 deps_hat = CMat2::Zero();
    // interface-only entries
    double dtangent_stretch = 0.0;
    double dnormal_factor = 0.0;
    Complex dsigma_hat = 0.0;
};

inline TransformDerivative directional_derivatives(const TransformState& s, const Mat2& dgrad,
                                                   const CMat2& eps) {
    if (!(s.J > 0.0)) throw DegenerateDeformation("non-positive transformation determinant");
    TransformDerivative d;
    d.dF = dgrad;
    d.dJ = s.J * (s.Finv * dgrad).trace();
    d.dFinv = -s.Finv * dgrad * s.Finv;
    const CMat2 Finv = s.Finv.cast<Complex>();
    const CMat2 dFinv = d.dFinv.cast<Complex>();
    d.deps_hat = (dFinv * eps * Finv.transpose() + Finv * eps * dFinv.transpose()) * s.J +
                 Finv * eps * Finv.transpose() * d.dJ;
    return d;
}

inline TransformDerivative directional_derivatives(const TransformState& s, const Mat2& dgrad,
                                                   const CMat2& eps, Complex sigma,
                                                   const InterfaceFrame& frame) {
    TransformDerivative d = directional_derivatives(s, dgrad, eps);
    const Vec2 ft = s.F * frame.tangent;
    const double ftn = ft.norm();
    if (ftn < min_tangent_stretch) throw DegenerateDeformation("collapsed interface tangent");
    d.dtangent_stretch = ft.dot(dgrad * frame.tangent) / ftn;
    const Vec2 w = s.Finv.transpose() * frame.normal;
    const Vec2 dw = d.dFinv.transpose() * frame.normal;
    d.dnormal_factor = w.dot(dw) / w.norm();
    d.dsigma_hat = -sigma * d.dtangent_stretch / (ftn * ftn);
    return d;
}

} // namespace cellopt
