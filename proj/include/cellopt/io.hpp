#pragma once

// Deformation files, legacy VTK output, iteration logs and JSON reports.

#include "cellopt/cellproblem.hpp"
#include "cellopt/errors.hpp"
#include "cellopt/geometry.hpp"
#include "cellopt/optimizer.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace cellopt {

// ---------------------------------------------------------------------------
// Deformation file
//
//   deformation 1
//   vertices N
//   qx qy          (N lines, in mesh vertex order)

inline void write_deformation(std::ostream& os, const DeformationField& q) {
    os << "deformation 1\n" << "vertices " << q.rows() << "\n" << std::setprecision(17);
    for (Eigen::Index v = 0; v < q.rows(); ++v) os << q(v, 0) << ' ' << q(v, 1) << '\n';
}

inline void save_deformation(const DeformationField& q, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    write_deformation(os, q);
    if (!os) throw Error("write to '" + path + "' failed");
}

/// Reads a deformation and checks it against `mesh` (vertex count, zero on
/// the boundary, periodic consistency).
inline DeformationField read_deformation(std::istream& is, const Mesh& mesh) {
    detail::LineReader r(is);
    {
        auto ss = r.expect("header");
        std::string magic;
        int version = 0;
        detail::read_exact(ss, r.line(), "header", magic, version);
        if (magic != "deformation" || version != 1) throw ParseError("expected header 'deformation 1'", r.line());
    }
    const std::size_t n = detail::read_section(r, "vertices");
    if (n != static_cast<std::size_t>(mesh.num_vertices()))
        throw ValidationError("deformation has " + std::to_string(n) + " vertices, mesh has " +
                              std::to_string(mesh.num_vertices()));
    DeformationField q(n, 2);
    for (std::size_t v = 0; v < n; ++v) {
        auto ss = r.expect("deformation row");
        double x = 0.0, y = 0.0;
        detail::read_exact(ss, r.line(), "deformation row", x, y);
        q(v, 0) = x;
        q(v, 1) = y;
    }
    std::istringstream extra;
    if (r.next(extra)) throw ParseError("unexpected trailing content", r.line());
    validate_deformation(mesh, q);
    return q;
}

inline DeformationField load_deformation(const std::string& path, const Mesh& mesh) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open deformation '" + path + "'");
    try {
        return read_deformation(is, mesh);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), e.line());
    }
}

// ---------------------------------------------------------------------------
// Legacy VTK (ASCII, unstructured grid of VTK_QUAD cells)

struct VtkFields {
    const DeformationField* q = nullptr;
    const Matrix<Complex>* chi = nullptr; // nodal correctors, num_vertices x 2
    std::vector<double> cell_min_J;
};

/// Points are written at their deformed positions x + q(x).
inline void write_vtk(std::ostream& os, const Mesh& mesh, const VtkFields& f, const std::string& title) {
    const int nv = mesh.num_vertices(), nc = mesh.num_cells();
    os << "# vtk DataFile Version 3.0\n" << title.substr(0, 255) << "\nASCII\nDATASET UNSTRUCTURED_GRID\n";
    os << std::setprecision(17);
    os << "POINTS " << nv << " double\n";
    for (int v = 0; v < nv; ++v) {
        Vec2 x = mesh.vertices[v];
        if (f.q) x += f.q->row(v).transpose();
        os << x.x() << ' ' << x.y() << " 0\n";
    }
    os << "CELLS " << nc << ' ' << 5 * nc << "\n";
    for (const auto& c : mesh.cells) os << "4 " << c[0] << ' ' << c[1] << ' ' << c[2] << ' ' << c[3] << '\n';
    os << "CELL_TYPES " << nc << "\n";
    for (int c = 0; c < nc; ++c) os << "9\n";

    if (f.q || f.chi) os << "POINT_DATA " << nv << "\n";
    if (f.q) {
        os << "VECTORS deformation double\n";
        for (int v = 0; v < nv; ++v) os << (*f.q)(v, 0) << ' ' << (*f.q)(v, 1) << " 0\n";
    }
    if (f.chi) {
        for (int j = 0; j < 2; ++j)
            for (int part = 0; part < 2; ++part) {
                os << "SCALARS chi" << j + 1 << (part ? "_im" : "_re") << " double 1\nLOOKUP_TABLE default\n";
                for (int v = 0; v < nv; ++v) {
                    const Complex z = (*f.chi)(v, j);
                    os << (part ? z.imag() : z.real()) << '\n';
                }
            }
    }
    if (!f.cell_min_J.empty()) {
        os << "CELL_DATA " << nc << "\nSCALARS min_J double 1\nLOOKUP_TABLE default\n";
        for (double j : f.cell_min_J) os << j << '\n';
    }
}

inline void save_vtk(const std::string& path, const Mesh& mesh, const VtkFields& f, const std::string& title) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    write_vtk(os, mesh, f, title);
    if (!os) throw Error("write to '" + path + "' failed");
}

inline std::vector<double> cell_min_jacobians(const FeSpace& space, const DeformationField& q) {
    std::vector<double> out(space.mesh().num_cells());
    for (int c = 0; c < space.mesh().num_cells(); ++c) out[c] = min_jacobian_of_cell(space, q, c);
    return out;
}

// ---------------------------------------------------------------------------
// Iteration log

inline const char* csv_header() {
    return "step,stage,beta,total,misfit,tikhonov,penalty,deviation_percent,optimality,lambda,theta,min_J";
}

inline void write_csv_row(std::ostream& os, const IterationRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step,
                  r.stage, r.beta, r.total, r.misfit, r.tikhonov, r.penalty, r.deviation_percent, r.optimality,
                  r.lambda, r.theta, r.min_J);
    os << buf;
}

// ---------------------------------------------------------------------------
// JSON

using Json = nlohmann::json;

inline Json to_json(Complex z) { return Json{{"re", z.real()}, {"im", z.imag()}}; }

inline Json to_json(const CMat2& t) {
    return Json{{"xx", to_json(t(0, 0))}, {"xy", to_json(t(0, 1))}, {"yx", to_json(t(1, 0))}, {"yy", to_json(t(1, 1))}};
}

inline Json to_json(const IterationRecord& r) {
    return Json{{"step", r.step},         {"stage", r.stage},         {"beta", r.beta},
                {"total", r.total},       {"misfit", r.misfit},       {"tikhonov", r.tikhonov},
                {"penalty", r.penalty},   {"deviation_percent", r.deviation_percent},
                {"optimality", r.optimality}, {"lambda", r.lambda},   {"theta", r.theta},
                {"min_J", r.min_J}};
}

inline std::string hex_hash(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline Json mesh_summary(const Mesh& mesh) {
    return Json{{"cells", mesh.num_cells()},
                {"vertices", mesh.num_vertices()},
                {"interface_faces", mesh.interface_faces.size()},
                {"radius", mesh.radius},
                {"refinement", mesh.refinement_level},
                {"hash", hex_hash(mesh_hash(mesh))}};
}

inline void save_json(const std::string& path, const Json& j) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw Error("write to '" + path + "' failed");
}

} // namespace cellopt
