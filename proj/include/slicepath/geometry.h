#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slicepath/gcode.h"

namespace slicepath::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

struct Triangle {
    Vec3 v0, v1, v2;
};

struct TriangleMesh {
    std::vector<Triangle> triangles;

    Eigen::AlignedBox3d bounds() const;
};

struct StlResult {
    TriangleMesh mesh;
    std::size_t degenerate_dropped = 0;
};

// Accepts binary and ASCII STL. Zero-area facets are dropped and counted.
StlResult parse_stl(std::span<const std::uint8_t> bytes);
StlResult load_stl(const std::string& path);

// Closed polyline, first vertex repeated at the end.
using Loop = std::vector<Vec2>;

struct SliceContour {
    std::vector<Loop> loops;

    Eigen::AlignedBox2d bounds() const;
};

double signed_area(const Loop& loop);
double perimeter(const Loop& loop);
double total_area(const SliceContour& contour);
bool contains(const SliceContour& contour, const Vec2& p);

inline constexpr double kChainEpsilon = 1e-6;

// Planar cross-section at height z. Outer loops come out counter-clockwise,
// holes clockwise, whatever the facet winding of the input.
SliceContour slice_mesh(const TriangleMesh& mesh, double z);

inline constexpr int kImageSide = 224;
inline constexpr double kFramingFill = 0.9;

// Row 0 is the top of the part (largest y). `origin` is the world position of
// the lower-left image corner.
struct SliceImage {
    Eigen::MatrixXf pixels = Eigen::MatrixXf::Zero(kImageSide, kImageSide);
    double pixel_pitch = 1.0;  // mm per pixel
    Vec2 origin = Vec2::Zero();
};

// Even-odd fill. The contour's bounding box is centered and its larger side
// spans kFramingFill of the image.
SliceImage rasterize(const SliceContour& contour);

// Fill with explicit framing, used when several contours must share a grid.
Eigen::MatrixXf rasterize_on_grid(const SliceContour& contour, int rows, int cols, double pitch, const Vec2& origin);

// 8-bit binary PGM (P5, maxval 255).
std::string encode_pgm(const Eigen::MatrixXf& pixels);
// P5 or P2, any maxval; values scaled to [0, 1].
Eigen::MatrixXf decode_pgm(std::span<const std::uint8_t> bytes);
Eigen::MatrixXf read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Eigen::MatrixXf& pixels);

enum class Shape { Square, Rectangle, Circle, Annulus, CShape };
enum class Infill { Rectilinear, Concentric };

Shape parse_shape(const std::string& name);
Infill parse_infill(const std::string& name);
std::string to_string(Shape shape);
std::string to_string(Infill infill);

struct ShapeSpec {
    Shape shape = Shape::Square;
    Infill infill = Infill::Rectilinear;
    double size = 20.0;          // side of the square / outer diameter, mm
    double aspect = 0.5;         // rectangle height / width
    double hole_ratio = 0.5;     // inner / outer radius for annulus and C-shape
    double gap_degrees = 90.0;   // C-shape opening
    double hatch_degrees = 0.0;  // rectilinear hatch direction
    double density = 0.25;       // line spacing = line_width / density
    double line_width = 0.4;
    double layer_z = 0.2;
    double jitter = 0.0;  // relative random perturbation of size, aspect and hatch angle
    int arc_segments = 128;
};

// Filament advanced per mm of deposited path.
inline constexpr double kExtrusionPerMm = 0.05;

struct SyntheticSample {
    SliceContour contour;
    gcode::LayerToolpath toolpath;
};

// Perimeters first, then infill. Moves that leave the part (hole crossings,
// jumps between shells) carry zero extrusion, so E never decreases.
SyntheticSample synth_sample(const ShapeSpec& spec, std::uint64_t seed);

}  // namespace slicepath::geometry
