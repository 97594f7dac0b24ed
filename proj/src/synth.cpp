#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "slicepath/error.h"
#include "slicepath/geometry.h"
#include "slicepath/random.h"

namespace slicepath::geometry {

namespace {

constexpr double kPi = std::numbers::pi;

Loop rectangle_loop(double x0, double y0, double x1, double y1) {
    return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
}

Loop circle_loop(const Vec2& c, double r, int segments, bool ccw) {
    Loop loop;
    loop.reserve(static_cast<std::size_t>(segments) + 1);
    for (int i = 0; i < segments; ++i) {
        const double a = 2.0 * kPi * i / segments * (ccw ? 1.0 : -1.0);
        loop.emplace_back(c.x() + r * std::cos(a), c.y() + r * std::sin(a));
    }
    loop.push_back(loop.front());
    return loop;
}

// Annular sector with its opening centred on +x, inset by `inset` from every
// side. Empty when the inset swallows the band.
Loop c_shape_loop(const Vec2& c, double r_outer, double r_inner, double gap, double inset, int segments) {
    const double ro = r_outer - inset;
    const double ri = r_inner + inset;
    if (ro - ri <= 0.0) return {};
    // The straight ends are offset parallel to themselves.
    auto start_angle = [&](double r) { return 0.5 * gap + std::asin(std::min(1.0, inset / r)); };
    const double a0o = start_angle(ro);
    const double a1o = 2.0 * kPi - a0o;
    const double a0i = start_angle(ri);
    const double a1i = 2.0 * kPi - a0i;
    if (a1i - a0i <= 0.0 || a1o - a0o <= 0.0) return {};
    Loop loop;
    const int n = std::max(4, segments / 2);
    for (int i = 0; i <= n; ++i) {
        const double a = a0o + (a1o - a0o) * i / n;
        loop.emplace_back(c.x() + ro * std::cos(a), c.y() + ro * std::sin(a));
    }
    for (int i = n; i >= 0; --i) {
        const double a = a0i + (a1i - a0i) * i / n;
        loop.emplace_back(c.x() + ri * std::cos(a), c.y() + ri * std::sin(a));
    }
    loop.push_back(loop.front());
    return loop;
}

class PathBuilder {
public:
    explicit PathBuilder(double z) { layer_.z = z; }

    void travel_to(const Vec2& p) { append(p, false); }
    void extrude_to(const Vec2& p) { append(p, true); }

    void trace(const Loop& loop) {
        travel_to(loop.front());
        for (std::size_t i = 1; i < loop.size(); ++i) extrude_to(loop[i]);
    }

    gcode::LayerToolpath finish() { return std::move(layer_); }

private:
    void append(const Vec2& p, bool extrude) {
        auto& ks = layer_.keypoints;
        if (ks.empty()) {
            ks.push_back({p.x(), p.y(), 0.0});
            return;
        }
        const Vec2 last(ks.back().x, ks.back().y);
        const double length = (p - last).norm();
        if (length == 0.0) return;
        ks.push_back({p.x(), p.y(), ks.back().e + (extrude ? kExtrusionPerMm * length : 0.0)});
    }

    gcode::LayerToolpath layer_;
};

Vec2 rotate(const Vec2& p, double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    return {c * p.x() - s * p.y(), s * p.x() + c * p.y()};
}

// Inside the region, or within `tol` of its boundary.
bool inside_or_on(const SliceContour& contour, const Vec2& p, double tol) {
    for (const auto& loop : contour.loops) {
        for (std::size_t i = 0; i + 1 < loop.size(); ++i) {
            const Vec2 ab = loop[i + 1] - loop[i];
            const double t = std::clamp((p - loop[i]).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
            if ((loop[i] + t * ab - p).norm() <= tol) return true;
        }
    }
    return contains(contour, p);
}

void rectilinear_fill(const SliceContour& region, double spacing, double angle, PathBuilder& path) {
    // Work in a frame where hatch lines are horizontal.
    SliceContour local;
    for (const auto& loop : region.loops) {
        Loop r;
        for (const auto& p : loop) r.push_back(rotate(p, -angle));
        local.loops.push_back(std::move(r));
    }
    const auto box = local.bounds();
    const double extent = box.sizes().maxCoeff();
    const double tiny = 1e-9 * extent;
    const double ymin = box.min().y();
    const double ymax = box.max().y();
    const int lines = static_cast<int>(std::floor((ymax - ymin) / spacing + 1e-9));

    Vec2 previous;
    int previous_line = -2;
    std::vector<double> xs;
    for (int k = 0; k <= lines; ++k) {
        const double y = ymin + k * spacing;
        const double probe = std::clamp(y, ymin + tiny, ymax - tiny);
        xs.clear();
        for (const auto& loop : local.loops) {
            for (std::size_t i = 0; i + 1 < loop.size(); ++i) {
                const Vec2& a = loop[i];
                const Vec2& b = loop[i + 1];
                if ((a.y() <= probe) != (b.y() <= probe)) {
                    xs.push_back(a.x() + (probe - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
                }
            }
        }
        std::sort(xs.begin(), xs.end());
        std::vector<std::pair<double, double>> spans;
        for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
            if (xs[i + 1] - xs[i] > tiny) spans.emplace_back(xs[i], xs[i + 1]);
        }
        if (spans.empty()) continue;
        const bool forward = k % 2 == 0;
        if (!forward) {
            std::reverse(spans.begin(), spans.end());
            for (auto& s : spans) std::swap(s.first, s.second);
        }
        for (std::size_t s = 0; s < spans.size(); ++s) {
            const Vec2 a = rotate({spans[s].first, y}, angle);
            const Vec2 b = rotate({spans[s].second, y}, angle);
            const bool adjacent = s == 0 && previous_line == k - 1;
            const bool connect = adjacent && inside_or_on(region, 0.5 * (previous + a), 1e-6 * extent);
            if (connect) {
                path.extrude_to(a);
            } else {
                path.travel_to(a);
            }
            path.extrude_to(b);
            previous = b;
        }
        previous_line = k;
    }
}

}  // namespace

Shape parse_shape(const std::string& name) {
    if (name == "square") return Shape::Square;
    if (name == "rectangle") return Shape::Rectangle;
    if (name == "circle") return Shape::Circle;
    if (name == "annulus") return Shape::Annulus;
    if (name == "c-shape" || name == "c_shape" || name == "cshape") return Shape::CShape;
    throw Error(ErrorKind::UnknownShape, "unknown shape '" + name + "'");
}

Infill parse_infill(const std::string& name) {
    if (name == "rectilinear") return Infill::Rectilinear;
    if (name == "concentric") return Infill::Concentric;
    throw Error(ErrorKind::UnknownShape, "unknown infill '" + name + "'");
}

std::string to_string(Shape shape) {
    switch (shape) {
        case Shape::Square: return "square";
        case Shape::Rectangle: return "rectangle";
        case Shape::Circle: return "circle";
        case Shape::Annulus: return "annulus";
        case Shape::CShape: return "c-shape";
    }
    return "?";
}

std::string to_string(Infill infill) {
    return infill == Infill::Rectilinear ? "rectilinear" : "concentric";
}

SyntheticSample synth_sample(const ShapeSpec& input, std::uint64_t seed) {
    ShapeSpec spec = input;
    if (!(spec.density > 0.0 && spec.density <= 1.0)) {
        throw Error(ErrorKind::InvalidArgument, fmt::format("density {} outside (0, 1]", spec.density));
    }
    if (!(spec.size > 0.0) || !(spec.line_width > 0.0) || spec.arc_segments < 8) {
        throw Error(ErrorKind::InvalidArgument, "shape size, line width and arc resolution must be positive");
    }
    if (spec.jitter > 0.0) {
        Rng rng(seed);
        spec.size *= 1.0 + spec.jitter * rng.uniform(-1.0, 1.0);
        spec.aspect = std::clamp(spec.aspect * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0)), 0.1, 1.0);
        spec.hole_ratio = std::clamp(spec.hole_ratio * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0)), 0.1, 0.9);
        spec.hatch_degrees += 90.0 * spec.jitter * rng.uniform(-1.0, 1.0);
    }
    const double spacing = spec.line_width / spec.density;
    const double s = spec.size;
    const Vec2 center(0.5 * s, 0.5 * s);
    const double r_outer = 0.5 * s;
    const double r_inner = spec.hole_ratio * r_outer;
    const double gap = spec.gap_degrees * kPi / 180.0;
    const int n = spec.arc_segments;

    SyntheticSample out;
    auto& loops = out.contour.loops;
    switch (spec.shape) {
        case Shape::Square: loops.push_back(rectangle_loop(0, 0, s, s)); break;
        case Shape::Rectangle: loops.push_back(rectangle_loop(0, 0, s, s * spec.aspect)); break;
        case Shape::Circle: loops.push_back(circle_loop(center, r_outer, n, true)); break;
        case Shape::Annulus:
            loops.push_back(circle_loop(center, r_outer, n, true));
            loops.push_back(circle_loop(center, r_inner, n, false));
            break;
        case Shape::CShape: loops.push_back(c_shape_loop(center, r_outer, r_inner, gap, 0.0, n)); break;
    }

    PathBuilder path(spec.layer_z);
    for (const auto& loop : loops) path.trace(loop);

    if (spec.infill == Infill::Rectilinear) {
        rectilinear_fill(out.contour, spacing, spec.hatch_degrees * kPi / 180.0, path);
    } else {
        const double min_feature = 0.5 * spacing;
        switch (spec.shape) {
            case Shape::Square:
            case Shape::Rectangle: {
                const double h = spec.shape == Shape::Square ? s : s * spec.aspect;
                for (int k = 1;; ++k) {
                    const double d = k * spacing;
                    if (std::min(s, h) - 2.0 * d <= min_feature) break;
                    path.trace(rectangle_loop(d, d, s - d, h - d));
                }
                break;
            }
            case Shape::Circle:
            case Shape::Annulus: {
                const double floor_r = spec.shape == Shape::Circle ? 0.0 : r_inner;
                for (int k = 1;; ++k) {
                    const double r = r_outer - k * spacing;
                    if (r - floor_r <= min_feature) break;
                    path.trace(circle_loop(center, r, n, true));
                }
                break;
            }
            case Shape::CShape: {
                for (int k = 1;; ++k) {
                    const double d = k * spacing;
                    if ((r_outer - d) - (r_inner + d) <= min_feature) break;
                    Loop shell = c_shape_loop(center, r_outer, r_inner, gap, d, n);
                    if (shell.empty()) break;
                    path.trace(shell);
                }
                break;
            }
        }
    }
    out.toolpath = path.finish();
    return out;
}

}  // namespace slicepath::geometry
