#pragma once

// Interface-fitted quadrilateral meshes of the unit cell [0,1]^2 with an
// inscribed circular interface.

#include "cellopt/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace cellopt {

using Vec2 = Eigen::Vector2d;

/// Face `local_face` of `cell` joins local vertices local_face and (local_face + 1) % 4.
struct InterfaceFace {
    int cell = 0;
    int local_face = 0;
    bool operator==(const InterfaceFace&) const = default;
};

/// `slave` (on x = 1 or y = 1) is identified with `master` (on x = 0 or y = 0).
struct PeriodicPair {
    int slave = 0;
    int master = 0;
    bool operator==(const PeriodicPair&) const = default;
};

struct Mesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 4>> cells; // counterclockwise
    std::vector<InterfaceFace> interface_faces;
    std::vector<PeriodicPair> periodic_pairs;
    int refinement_level = 0;
    double radius = 0.3;
    Vec2 center = Vec2(0.5, 0.5);

    int num_vertices() const { return static_cast<int>(vertices.size()); }
    int num_cells() const { return static_cast<int>(cells.size()); }

    bool structurally_equal(const Mesh& o) const {
        return vertices == o.vertices && cells == o.cells && interface_faces == o.interface_faces &&
               periodic_pairs == o.periodic_pairs;
    }
};

/// Per interface quadrature point: unit tangent (counterclockwise about the
/// circle center), unit normal pointing away from the center, and the
/// reference arc-length weight.
struct InterfaceFrame {
    Vec2 point;
    Vec2 tangent;
    Vec2 normal;
    double weight = 0.0;
};

namespace detail {

inline constexpr double boundary_tol = 1e-12;

inline bool on_line(double x, double value) { return std::abs(x - value) < boundary_tol; }

/// Twice the signed area of the triangle (a, b, c).
inline double cross(const Vec2& a, const Vec2& b, const Vec2& c) {
    return (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
}

// An edge of the coarse mesh: a straight segment or a circular arc.
struct CoarseCurve {
    Vec2 a, b;
    bool arc = false;
    Vec2 center;
    double radius = 0.0;

    Vec2 operator()(double t) const {
        if (!arc) {
            if (t == 0.0) return a;
            if (t == 1.0) return b;
            return a + t * (b - a);
        }
        const double ta = std::atan2(a.y() - center.y(), a.x() - center.x());
        double tb = std::atan2(b.y() - center.y(), b.x() - center.x());
        double d = tb - ta;
        while (d > std::numbers::pi) d -= 2 * std::numbers::pi;
        while (d < -std::numbers::pi) d += 2 * std::numbers::pi;
        if (t == 0.0) return a;
        if (t == 1.0) return b;
        const double th = ta + t * d;
        return center + radius * Vec2(std::cos(th), std::sin(th));
    }
};

} // namespace detail

/// Largest vertex-to-vertex distance of a cell.
inline double cell_diameter(const Mesh& mesh, int cell) {
    const auto& c = mesh.cells.at(static_cast<std::size_t>(cell));
    double d = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            d = std::max(d, (mesh.vertices[c[i]] - mesh.vertices[c[j]]).norm());
    return d;
}

/// Minimum of the bilinear-map Jacobian determinant of a cell. For bilinear
/// quadrilaterals the determinant is affine in each reference coordinate, so
/// its minimum is attained at a corner.
inline double min_cell_jacobian(const Mesh& mesh, int cell) {
    const auto& c = mesh.cells[cell];
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 4; ++i) {
        const Vec2& p = mesh.vertices[c[i]];
        const Vec2& next = mesh.vertices[c[(i + 1) % 4]];
        const Vec2& prev = mesh.vertices[c[(i + 3) % 4]];
        m = std::min(m, detail::cross(p, next, prev));
    }
    return m;
}

inline std::vector<bool> boundary_vertices(const Mesh& mesh) {
    std::vector<bool> flag(mesh.vertices.size(), false);
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        const Vec2& p = mesh.vertices[v];
        flag[v] = detail::on_line(p.x(), 0.0) || detail::on_line(p.x(), 1.0) ||
                  detail::on_line(p.y(), 0.0) || detail::on_line(p.y(), 1.0);
    }
    return flag;
}

/// Cell sharing the edge (a, b) with `cell`, plus its local face index, or
/// {-1, -1} on the domain boundary.
inline std::vector<std::array<int, 2>> face_neighbors(const Mesh& mesh) {
    std::map<std::pair<int, int>, std::vector<std::array<int, 2>>> edges;
    for (int c = 0; c < mesh.num_cells(); ++c)
        for (int f = 0; f < 4; ++f) {
            int a = mesh.cells[c][f], b = mesh.cells[c][(f + 1) % 4];
            edges[{std::min(a, b), std::max(a, b)}].push_back({c, f});
        }
    std::vector<std::array<int, 2>> nb(mesh.cells.size() * 4, {-1, -1});
    for (const auto& [key, owners] : edges) {
        if (owners.size() != 2) continue;
        nb[owners[0][0] * 4 + owners[0][1]] = owners[1];
        nb[owners[1][0] * 4 + owners[1][1]] = owners[0];
    }
    return nb;
}

/// Cells with at least one face on the discrete interface (either side).
inline std::vector<bool> interface_adjacent_cells(const Mesh& mesh) {
    std::vector<bool> flag(mesh.cells.size(), false);
    const auto nb = face_neighbors(mesh);
    for (const auto& f : mesh.interface_faces) {
        flag[f.cell] = true;
        const auto& other = nb[f.cell * 4 + f.local_face];
        if (other[0] >= 0) flag[other[0]] = true;
    }
    return flag;
}

struct InterfaceFaceData {
    InterfaceFace face;
    InterfaceFace neighbor{-1, -1};
    Vec2 start, end; // traversed counterclockwise about the circle center
    double length = 0.0;
    std::array<InterfaceFrame, 2> frames; // 2-point Gauss rule
};

/// Interface faces with tangent/normal frames at the face quadrature points.
inline std::vector<InterfaceFaceData> interface_faces(const Mesh& mesh) {
    const auto nb = face_neighbors(mesh);
    const double g = 0.5 / std::sqrt(3.0);
    std::vector<InterfaceFaceData> out;
    out.reserve(mesh.interface_faces.size());
    for (const auto& f : mesh.interface_faces) {
        InterfaceFaceData d;
        d.face = f;
        const auto& other = nb[f.cell * 4 + f.local_face];
        if (other[0] >= 0) d.neighbor = {other[0], other[1]};
        Vec2 a = mesh.vertices[mesh.cells[f.cell][f.local_face]];
        Vec2 b = mesh.vertices[mesh.cells[f.cell][(f.local_face + 1) % 4]];
        if (detail::cross(mesh.center, a, b) < 0) std::swap(a, b);
        d.start = a;
        d.end = b;
        d.length = (b - a).norm();
        const Vec2 tangent = (b - a) / d.length;
        const Vec2 normal(tangent.y(), -tangent.x());
        for (int q = 0; q < 2; ++q) {
            const double t = q == 0 ? 0.5 - g : 0.5 + g;
            d.frames[q] = InterfaceFrame{a + t * (b - a), tangent, normal, 0.5 * d.length};
        }
        out.push_back(d);
    }
    return out;
}

inline void validate_cells(const Mesh& mesh, double circle_tol = 1e-12) {
    const int nv = mesh.num_vertices();
    for (int c = 0; c < mesh.num_cells(); ++c) {
        const auto& cell = mesh.cells[c];
        for (int i = 0; i < 4; ++i) {
            if (cell[i] < 0 || cell[i] >= nv)
                throw ValidationError("cell " + std::to_string(c) + " references missing vertex");
            for (int j = i + 1; j < 4; ++j)
                if (cell[i] == cell[j])
                    throw ValidationError("cell " + std::to_string(c) + " has a repeated vertex");
        }
        if (!(min_cell_jacobian(mesh, c) > 0.0))
            throw ValidationError("cell " + std::to_string(c) + " is not positively oriented");
    }
    for (const auto& f : mesh.interface_faces) {
        if (f.cell < 0 || f.cell >= mesh.num_cells() || f.local_face < 0 || f.local_face > 3)
            throw ValidationError("interface face out of range");
        for (int k = 0; k < 2; ++k) {
            const Vec2& p = mesh.vertices[mesh.cells[f.cell][(f.local_face + k) % 4]];
            if (std::abs((p - mesh.center).norm() - mesh.radius) > circle_tol)
                throw ValidationError("interface vertex off the circle");
        }
    }
}

/// Per direction, the pairing must be a bijection between opposing sides.
inline void validate_periodic(const Mesh& mesh) {
    const int nv = mesh.num_vertices();
    std::vector<int> slave_count(nv, 0);
    std::vector<int> x_master(nv, 0), y_master(nv, 0);
    for (const auto& p : mesh.periodic_pairs) {
        if (p.slave < 0 || p.slave >= nv || p.master < 0 || p.master >= nv)
            throw ValidationError("periodic pair out of range");
        const Vec2& s = mesh.vertices[p.slave];
        const Vec2& m = mesh.vertices[p.master];
        if (++slave_count[p.slave] > 1) throw ValidationError("vertex paired twice as slave");
        const bool x_pair = detail::on_line(s.x(), 1.0) && detail::on_line(m.x(), 0.0) &&
                            std::abs(s.y() - m.y()) < detail::boundary_tol;
        const bool y_pair = detail::on_line(s.y(), 1.0) && detail::on_line(m.y(), 0.0) &&
                            std::abs(s.x() - m.x()) < detail::boundary_tol;
        if (x_pair) {
            if (++x_master[p.master] > 1) throw ValidationError("periodic pairing is not bijective");
        } else if (y_pair) {
            if (++y_master[p.master] > 1) throw ValidationError("periodic pairing is not bijective");
        } else {
            throw ValidationError("periodic pair does not join opposing boundary vertices");
        }
    }
    for (int v = 0; v < nv; ++v) {
        const Vec2& p = mesh.vertices[v];
        if ((detail::on_line(p.x(), 1.0) || detail::on_line(p.y(), 1.0)) && slave_count[v] != 1)
            throw ValidationError("boundary vertex " + std::to_string(v) + " has no periodic partner");
    }
}

/// Checks every Mesh invariant that does not depend on how the mesh was
/// generated. Throws ValidationError.
inline void validate_mesh(const Mesh& mesh, double circle_tol = 1e-12) {
    validate_cells(mesh, circle_tol);
    validate_periodic(mesh);
}

/// Builds the 13-cell coarse layout (core square, 4 ring cells inside the
/// circle, 4 edge and 4 corner cells outside) and maps a uniform
/// 2^refinements grid of each coarse cell through transfinite interpolation
/// of the coarse cell's edge curves. Circle edges are parametrized by angle,
/// so every vertex created on the interface lies on the circle.
inline Mesh generate_reference_mesh(double radius, int refinements,
                                    std::int64_t max_cells = 20'000'000) {
    if (!(radius > 0.0 && radius < 0.5))
        throw ConfigError("radius must lie in (0, 0.5)");
    if (refinements < 0) throw ConfigError("refinements must be non-negative");
    if (refinements > 15 || 13LL * (1LL << (2 * refinements)) > max_cells)
        throw ResourceError("refinement level " + std::to_string(refinements) +
                            " exceeds the cell budget of " + std::to_string(max_cells));

    const Vec2 c(0.5, 0.5);
    const double s = radius / std::sqrt(2.0); // circle vertices at 45 degree diagonals
    const double h = 0.5 * s;                 // core square corners at radius r/2
    const double lo = 0.5 - s, hi = 0.5 + s;

    // Coarse vertices: core K0..K3, circle C0..C3, boundary B0..B11.
    std::vector<Vec2> cv = {
        c + Vec2(-h, -h), c + Vec2(h, -h), c + Vec2(h, h), c + Vec2(-h, h),
        c + radius * Vec2(-1, -1).normalized(), c + radius * Vec2(1, -1).normalized(),
        c + radius * Vec2(1, 1).normalized(), c + radius * Vec2(-1, 1).normalized(),
        {0, 0}, {lo, 0}, {hi, 0}, {1, 0}, {1, lo}, {1, hi},
        {1, 1}, {hi, 1}, {lo, 1}, {0, 1}, {0, hi}, {0, lo},
    };
    enum { K0, K1, K2, K3, C0, C1, C2, C3, B0, B1, B2, B3, B4, B5, B6, B7, B8, B9, B10, B11 };
    const std::vector<std::array<int, 4>> coarse = {
        {K0, K1, K2, K3},                                                       // core
        {C0, C1, K1, K0}, {C1, C2, K2, K1}, {C2, C3, K3, K2}, {C3, C0, K0, K3}, // ring
        {B1, B2, C1, C0}, {B4, B5, C2, C1}, {B7, B8, C3, C2}, {B10, B11, C0, C3}, // edge
        {B0, B1, C0, B11}, {B2, B3, B4, C1}, {C2, B5, B6, B7}, {B10, C3, B8, B9}, // corner
    };
    const int n_ring_begin = 1, n_ring_end = 5;
    auto is_circle = [&](int v) { return v >= C0 && v <= C3; };
    auto curve = [&](int a, int b) {
        detail::CoarseCurve cc{cv[a], cv[b], is_circle(a) && is_circle(b), c, radius};
        return cc;
    };

    const int n = 1 << refinements;
    Mesh mesh;
    mesh.refinement_level = refinements;
    mesh.radius = radius;
    mesh.center = c;
    mesh.vertices = cv;

    // Edge interior points, stored along the direction min -> max coarse index.
    std::map<std::pair<int, int>, int> edge_first;
    for (const auto& cell : coarse)
        for (int f = 0; f < 4; ++f) {
            int a = cell[f], b = cell[(f + 1) % 4];
            auto key = std::make_pair(std::min(a, b), std::max(a, b));
            if (edge_first.count(key)) continue;
            edge_first[key] = mesh.num_vertices();
            const auto cu = curve(key.first, key.second);
            for (int m = 1; m < n; ++m) mesh.vertices.push_back(cu(double(m) / n));
        }

    mesh.cells.reserve(coarse.size() * n * n);
    for (std::size_t ci = 0; ci < coarse.size(); ++ci) {
        const auto& P = coarse[ci];
        // Local edges: e0 P0->P1 (u), e1 P1->P2 (v), e2 P3->P2 (u), e3 P0->P3 (v).
        const std::array<std::pair<int, int>, 4> ends = {
            std::pair{P[0], P[1]}, std::pair{P[1], P[2]}, std::pair{P[3], P[2]}, std::pair{P[0], P[3]}};
        std::array<detail::CoarseCurve, 4> e;
        for (int k = 0; k < 4; ++k) e[k] = curve(ends[k].first, ends[k].second);

        auto edge_vertex = [&](int k, int m) {
            auto [a, b] = ends[k];
            if (m == 0) return a;
            if (m == n) return b;
            const int first = edge_first.at({std::min(a, b), std::max(a, b)});
            return a < b ? first + m - 1 : first + (n - m) - 1;
        };

        const int interior_first = mesh.num_vertices();
        for (int j = 1; j < n; ++j)
            for (int i = 1; i < n; ++i) {
                const double u = double(i) / n, v = double(j) / n;
                const Vec2 x = (1 - v) * e[0](u) + v * e[2](u) + (1 - u) * e[3](v) + u * e[1](v) -
                               ((1 - u) * (1 - v) * cv[P[0]] + u * (1 - v) * cv[P[1]] +
                                u * v * cv[P[2]] + (1 - u) * v * cv[P[3]]);
                mesh.vertices.push_back(x);
            }
        auto grid = [&](int i, int j) {
            if (j == 0) return edge_vertex(0, i);
            if (j == n) return edge_vertex(2, i);
            if (i == 0) return edge_vertex(3, j);
            if (i == n) return edge_vertex(1, j);
            return interior_first + (j - 1) * (n - 1) + (i - 1);
        };
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const int id = mesh.num_cells();
                mesh.cells.push_back({grid(i, j), grid(i + 1, j), grid(i + 1, j + 1), grid(i, j + 1)});
                if (static_cast<int>(ci) >= n_ring_begin && static_cast<int>(ci) < n_ring_end && j == 0)
                    mesh.interface_faces.push_back({id, 0});
            }
    }

    // Periodic identification: x = 1 -> x = 0 for all, y = 1 -> y = 0 for x < 1.
    std::map<double, int> left, bottom;
    for (int v = 0; v < mesh.num_vertices(); ++v) {
        const Vec2& p = mesh.vertices[v];
        if (p.x() == 0.0) left[p.y()] = v;
        if (p.y() == 0.0) bottom[p.x()] = v;
    }
    auto partner = [](const std::map<double, int>& side, double key) {
        auto it = side.lower_bound(key - detail::boundary_tol);
        if (it == side.end() || std::abs(it->first - key) > detail::boundary_tol)
            throw ValidationError("periodic partner not found");
        return it->second;
    };
    for (int v = 0; v < mesh.num_vertices(); ++v) {
        const Vec2& p = mesh.vertices[v];
        if (p.x() == 1.0)
            mesh.periodic_pairs.push_back({v, partner(left, p.y())});
        else if (p.y() == 1.0)
            mesh.periodic_pairs.push_back({v, partner(bottom, p.x())});
    }
    return mesh;
}

// ---------------------------------------------------------------------------
// Text format
//
//   unitcellmesh 1
//   vertices N      then N lines "x y"
//   cells M         then M lines "v0 v1 v2 v3" (counterclockwise)
//   interface P     then P lines "cell localface"
//   periodic Q      then Q lines "v_slave v_master"
//
// '#' starts a comment. Coordinates are written with 17 significant digits.

namespace detail {

inline void write_mesh_body(std::ostream& os, const Mesh& mesh) {
    os << std::setprecision(17);
    os << "vertices " << mesh.vertices.size() << "\n";
    for (const auto& v : mesh.vertices) os << v.x() << ' ' << v.y() << '\n';
    os << "cells " << mesh.cells.size() << "\n";
    for (const auto& c : mesh.cells) os << c[0] << ' ' << c[1] << ' ' << c[2] << ' ' << c[3] << '\n';
    os << "interface " << mesh.interface_faces.size() << "\n";
    for (const auto& f : mesh.interface_faces) os << f.cell << ' ' << f.local_face << '\n';
    os << "periodic " << mesh.periodic_pairs.size() << "\n";
    for (const auto& p : mesh.periodic_pairs) os << p.slave << ' ' << p.master << '\n';
}

} // namespace detail

inline void write_mesh(std::ostream& os, const Mesh& mesh) {
    os << "unitcellmesh 1\n";
    os << "# radius " << std::setprecision(17) << mesh.radius << " refinement "
       << mesh.refinement_level << "\n";
    detail::write_mesh_body(os, mesh);
}

inline void save_mesh(const Mesh& mesh, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path + "' for writing");
    write_mesh(os, mesh);
    if (!os) throw Error("write to '" + path + "' failed");
}

namespace detail {

/// Line reader that strips comments and skips blank lines.
class LineReader {
public:
    explicit LineReader(std::istream& is) : is_(is) {}

    bool next(std::istringstream& out) {
        std::string line;
        while (std::getline(is_, line)) {
            ++line_no_;
            if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            out.clear();
            out.str(line);
            return true;
        }
        return false;
    }

    std::istringstream expect(const char* what) {
        std::istringstream ss;
        if (!next(ss)) throw ParseError(std::string("unexpected end of file, expected ") + what, line_no_);
        return ss;
    }

    int line() const { return line_no_; }

private:
    std::istream& is_;
    int line_no_ = 0;
};

template <typename... Ts>
void read_exact(std::istringstream& ss, int line, const char* what, Ts&... values) {
    ((ss >> values), ...);
    std::string rest;
    if (ss.fail() || (ss >> rest)) throw ParseError(std::string("malformed ") + what, line);
}

inline std::size_t read_section(LineReader& r, const std::string& name) {
    auto ss = r.expect(name.c_str());
    std::string key;
    long long count = -1;
    ss >> key >> count;
    std::string rest;
    if (key != name || ss.fail() || count < 0 || (ss >> rest))
        throw ParseError("expected '" + name + " <count>'", r.line());
    return static_cast<std::size_t>(count);
}

} // namespace detail

/// Parses and validates a mesh. Radius and refinement level are recovered
/// from the interface vertices and the cell count.
inline Mesh read_mesh(std::istream& is) {
    detail::LineReader r(is);
    {
        auto ss = r.expect("header");
        std::string magic;
        int version = 0;
        detail::read_exact(ss, r.line(), "header", magic, version);
        if (magic != "unitcellmesh" || version != 1)
            throw ParseError("expected header 'unitcellmesh 1'", r.line());
    }
    Mesh mesh;
    mesh.vertices.resize(detail::read_section(r, "vertices"));
    for (auto& v : mesh.vertices) {
        auto ss = r.expect("vertex");
        double x, y;
        detail::read_exact(ss, r.line(), "vertex", x, y);
        if (!std::isfinite(x) || !std::isfinite(y)) throw ParseError("non-finite vertex", r.line());
        v = Vec2(x, y);
    }
    const int nv = mesh.num_vertices();
    mesh.cells.resize(detail::read_section(r, "cells"));
    for (auto& c : mesh.cells) {
        auto ss = r.expect("cell");
        detail::read_exact(ss, r.line(), "cell", c[0], c[1], c[2], c[3]);
        for (int v : c)
            if (v < 0 || v >= nv) throw ParseError("cell vertex index out of range", r.line());
    }
    mesh.interface_faces.resize(detail::read_section(r, "interface"));
    for (auto& f : mesh.interface_faces) {
        auto ss = r.expect("interface face");
        detail::read_exact(ss, r.line(), "interface face", f.cell, f.local_face);
        if (f.cell < 0 || f.cell >= mesh.num_cells() || f.local_face < 0 || f.local_face > 3)
            throw ParseError("interface face out of range", r.line());
    }
    const std::size_t np = detail::read_section(r, "periodic");
    std::vector<int> seen(static_cast<std::size_t>(nv), 0);
    mesh.periodic_pairs.resize(np);
    for (auto& p : mesh.periodic_pairs) {
        auto ss = r.expect("periodic pair");
        detail::read_exact(ss, r.line(), "periodic pair", p.slave, p.master);
        if (p.slave < 0 || p.slave >= nv || p.master < 0 || p.master >= nv)
            throw ParseError("periodic vertex index out of range", r.line());
        if (seen[p.slave]++) throw ParseError("periodic pairing is not bijective", r.line());
    }
    std::istringstream extra;
    if (r.next(extra)) throw ParseError("trailing content", r.line());

    if (!mesh.interface_faces.empty()) {
        double sum = 0.0;
        for (const auto& f : mesh.interface_faces)
            sum += (mesh.vertices[mesh.cells[f.cell][f.local_face]] - mesh.center).norm();
        mesh.radius = sum / static_cast<double>(mesh.interface_faces.size());
    }
    int level = 0;
    for (std::size_t cells = 13; cells < mesh.cells.size(); cells *= 4) ++level;
    mesh.refinement_level = level;

    validate_cells(mesh, 1e-9);
    try {
        validate_periodic(mesh);
    } catch (const ValidationError& e) {
        throw ParseError(e.what(), 0);
    }
    return mesh;
}

inline Mesh load_mesh(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    try {
        return read_mesh(is);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), e.line());
    }
}

/// FNV-1a hash of the serialized mesh data (comments excluded), used to tag
/// run directories.
inline std::uint64_t mesh_hash(const Mesh& mesh) {
    std::ostringstream os;
    detail::write_mesh_body(os, mesh);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : os.str()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace cellopt
