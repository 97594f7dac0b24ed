#pragma once

#include <cmath>
#include <numbers>

#include "slicepath/geometry.h"

namespace slicepath::testing {

using geometry::Triangle;
using geometry::TriangleMesh;
using geometry::Vec3;

// Closed prism over a regular n-gon, outward winding; `inward` flips the
// side walls so they can serve as the hole of a tube.
inline void add_walls(TriangleMesh& mesh, double r, double h, int n, bool inward) {
    for (int i = 0; i < n; ++i) {
        const double a0 = 2.0 * std::numbers::pi * i / n;
        const double a1 = 2.0 * std::numbers::pi * (i + 1) / n;
        const Vec3 p0(r * std::cos(a0), r * std::sin(a0), 0.0);
        const Vec3 p1(r * std::cos(a1), r * std::sin(a1), 0.0);
        const Vec3 q0 = p0 + Vec3(0, 0, h);
        const Vec3 q1 = p1 + Vec3(0, 0, h);
        if (inward) {
            mesh.triangles.push_back({p0, q1, p1});
            mesh.triangles.push_back({p0, q0, q1});
        } else {
            mesh.triangles.push_back({p0, p1, q1});
            mesh.triangles.push_back({p0, q1, q0});
        }
    }
}

inline TriangleMesh cylinder_mesh(double r, double h, int n) {
    TriangleMesh mesh;
    add_walls(mesh, r, h, n, false);
    const Vec3 bottom(0, 0, 0);
    const Vec3 top(0, 0, h);
    for (int i = 0; i < n; ++i) {
        const double a0 = 2.0 * std::numbers::pi * i / n;
        const double a1 = 2.0 * std::numbers::pi * (i + 1) / n;
        const Vec3 p0(r * std::cos(a0), r * std::sin(a0), 0.0);
        const Vec3 p1(r * std::cos(a1), r * std::sin(a1), 0.0);
        mesh.triangles.push_back({bottom, p1, p0});
        mesh.triangles.push_back({top, p0 + Vec3(0, 0, h), p1 + Vec3(0, 0, h)});
    }
    return mesh;
}

inline TriangleMesh tube_mesh(double r_outer, double r_inner, double h, int n) {
    TriangleMesh mesh;
    add_walls(mesh, r_outer, h, n, false);
    add_walls(mesh, r_inner, h, n, true);
    for (int i = 0; i < n; ++i) {
        const double a0 = 2.0 * std::numbers::pi * i / n;
        const double a1 = 2.0 * std::numbers::pi * (i + 1) / n;
        auto at = [&](double r, double a, double z) { return Vec3(r * std::cos(a), r * std::sin(a), z); };
        mesh.triangles.push_back({at(r_inner, a0, 0), at(r_outer, a1, 0), at(r_outer, a0, 0)});
        mesh.triangles.push_back({at(r_inner, a0, 0), at(r_inner, a1, 0), at(r_outer, a1, 0)});
        mesh.triangles.push_back({at(r_inner, a0, h), at(r_outer, a0, h), at(r_outer, a1, h)});
        mesh.triangles.push_back({at(r_inner, a0, h), at(r_outer, a1, h), at(r_inner, a1, h)});
    }
    return mesh;
}

}  // namespace slicepath::testing
