#include "slicepath/geometry.h"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "slicepath/error.h"

namespace slicepath::geometry {

namespace {

template <typename T>
T read_le(const std::uint8_t* p) {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
}

bool starts_with_solid(std::span<const std::uint8_t> bytes) {
    std::size_t i = 0;
    while (i < bytes.size() && std::isspace(bytes[i])) ++i;
    static constexpr char kSolid[] = "solid";
    if (bytes.size() - i < 5) return false;
    return std::memcmp(bytes.data() + i, kSolid, 5) == 0;
}

bool degenerate(const Triangle& t) {
    return (t.v1 - t.v0).cross(t.v2 - t.v0).norm() < 1e-15;
}

StlResult parse_ascii(std::span<const std::uint8_t> bytes) {
    std::string text(bytes.begin(), bytes.end());
    std::istringstream in(text);
    std::string token;
    std::vector<Vec3> vertices;
    bool saw_end = false;
    while (in >> token) {
        if (token == "vertex") {
            Vec3 v;
            for (int k = 0; k < 3; ++k) {
                std::string number;
                if (!(in >> number)) throw Error(ErrorKind::TruncatedFile, "ASCII STL ends inside a vertex");
                char* end = nullptr;
                v[k] = std::strtod(number.c_str(), &end);
                if (end == number.c_str() || *end != '\0' || !std::isfinite(v[k])) {
                    throw Error(ErrorKind::MalformedNumber, "bad STL coordinate '" + number + "'");
                }
            }
            vertices.push_back(v);
        } else if (token == "endsolid") {
            saw_end = true;
            break;
        }
    }
    if (vertices.size() % 3 != 0) throw Error(ErrorKind::TruncatedFile, "ASCII STL has an incomplete facet");
    if (vertices.empty() && !saw_end) throw Error(ErrorKind::BadMagic, "no facets found in ASCII STL");
    StlResult result;
    for (std::size_t i = 0; i < vertices.size(); i += 3) {
        Triangle t{vertices[i], vertices[i + 1], vertices[i + 2]};
        if (degenerate(t)) {
            ++result.degenerate_dropped;
        } else {
            result.mesh.triangles.push_back(t);
        }
    }
    return result;
}

StlResult parse_binary(std::span<const std::uint8_t> bytes) {
    const auto count = read_le<std::uint32_t>(bytes.data() + 80);
    const std::size_t needed = 84 + 50 * static_cast<std::size_t>(count);
    if (bytes.size() < needed) {
        throw Error(ErrorKind::TruncatedFile,
                    fmt::format("binary STL declares {} facets ({} bytes) but has {} bytes", count, needed, bytes.size()));
    }
    StlResult result;
    result.mesh.triangles.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = bytes.data() + 84 + 50 * static_cast<std::size_t>(i) + 12;
        std::array<Vec3, 3> v;
        for (int k = 0; k < 3; ++k) {
            for (int c = 0; c < 3; ++c) v[k][c] = read_le<float>(rec + 12 * k + 4 * c);
        }
        Triangle t{v[0], v[1], v[2]};
        if (!t.v0.allFinite() || !t.v1.allFinite() || !t.v2.allFinite()) {
            throw Error(ErrorKind::MalformedNumber, fmt::format("non-finite vertex in facet {}", i));
        }
        if (degenerate(t)) {
            ++result.degenerate_dropped;
        } else {
            result.mesh.triangles.push_back(t);
        }
    }
    return result;
}

// Endpoint lookup for chaining. Points closer than kChainEpsilon always land
// in the same or a neighbouring cell.
class PointIndex {
public:
    explicit PointIndex(double cell) : cell_(cell) {}

    void insert(const Vec2& p, std::size_t id) { cells_.emplace(key(cell_of(p.x()), cell_of(p.y())), id); }

    template <typename Pred>
    std::size_t find(const Vec2& p, Pred&& accept) const {
        const auto cx = cell_of(p.x());
        const auto cy = cell_of(p.y());
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
            for (std::int64_t dy = -1; dy <= 1; ++dy) {
                auto [lo, hi] = cells_.equal_range(key(cx + dx, cy + dy));
                for (auto it = lo; it != hi; ++it) {
                    if (accept(it->second)) return it->second;
                }
            }
        }
        return npos;
    }

    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

private:
    std::int64_t cell_of(double v) const { return static_cast<std::int64_t>(std::floor(v / cell_)); }
    static std::uint64_t key(std::int64_t x, std::int64_t y) {
        return (static_cast<std::uint64_t>(x) * 0x9e3779b97f4a7c15ULL) ^ static_cast<std::uint64_t>(y);
    }

    double cell_;
    std::unordered_multimap<std::uint64_t, std::size_t> cells_;
};

struct Segment {
    Vec2 a, b;
};

// Intersection of edge (p, q) with the plane, computed from a canonical
// endpoint order so that neighbouring facets produce bit-identical points.
Vec2 edge_crossing(Vec3 p, Vec3 q, double z) {
    if (std::tie(q.x(), q.y(), q.z()) < std::tie(p.x(), p.y(), p.z())) std::swap(p, q);
    const double t = (z - p.z()) / (q.z() - p.z());
    return {p.x() + t * (q.x() - p.x()), p.y() + t * (q.y() - p.y())};
}

bool point_in_loop(const Loop& loop, const Vec2& p) {
    bool inside = false;
    for (std::size_t i = 0, j = loop.size() - 1; i < loop.size(); j = i++) {
        const Vec2& a = loop[i];
        const Vec2& b = loop[j];
        if ((a.y() > p.y()) != (b.y() > p.y())) {
            const double x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
            if (p.x() < x) inside = !inside;
        }
    }
    return inside;
}

}  // namespace

Eigen::AlignedBox3d TriangleMesh::bounds() const {
    Eigen::AlignedBox3d box;
    for (const auto& t : triangles) {
        box.extend(t.v0);
        box.extend(t.v1);
        box.extend(t.v2);
    }
    return box;
}

Eigen::AlignedBox2d SliceContour::bounds() const {
    Eigen::AlignedBox2d box;
    for (const auto& loop : loops) {
        for (const auto& p : loop) box.extend(p);
    }
    return box;
}

StlResult parse_stl(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 84) {
        const auto count = read_le<std::uint32_t>(bytes.data() + 80);
        const std::size_t expected = 84 + 50 * static_cast<std::size_t>(count);
        if (bytes.size() == expected) return parse_binary(bytes);
        if (!starts_with_solid(bytes)) return parse_binary(bytes);
    }
    if (starts_with_solid(bytes)) return parse_ascii(bytes);
    throw Error(ErrorKind::BadMagic, fmt::format("{} bytes is neither ASCII nor binary STL", bytes.size()));
}

StlResult load_stl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_stl(bytes);
}

double signed_area(const Loop& loop) {
    double twice = 0.0;
    for (std::size_t i = 0; i + 1 < loop.size(); ++i) {
        twice += loop[i].x() * loop[i + 1].y() - loop[i + 1].x() * loop[i].y();
    }
    return 0.5 * twice;
}

double perimeter(const Loop& loop) {
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < loop.size(); ++i) total += (loop[i + 1] - loop[i]).norm();
    return total;
}

double total_area(const SliceContour& contour) {
    double area = 0.0;
    for (const auto& loop : contour.loops) area += signed_area(loop);
    return area;
}

bool contains(const SliceContour& contour, const Vec2& p) {
    bool inside = false;
    for (const auto& loop : contour.loops) {
        if (point_in_loop(loop, p)) inside = !inside;
    }
    return inside;
}

SliceContour slice_mesh(const TriangleMesh& mesh, double z) {
    const auto box = mesh.bounds();
    if (mesh.triangles.empty() || !(z > box.min().z() && z < box.max().z())) {
        throw Error(ErrorKind::InvalidArgument,
                    fmt::format("slice height {} is not strictly inside the mesh z-range", z));
    }

    std::vector<Segment> segments;
    for (const auto& t : mesh.triangles) {
        const std::array<const Vec3*, 3> v{&t.v0, &t.v1, &t.v2};
        std::array<bool, 3> above;
        for (int k = 0; k < 3; ++k) above[k] = v[k]->z() >= z;
        if (above[0] == above[1] && above[1] == above[2]) continue;
        std::array<Vec2, 2> pts;
        int found = 0;
        for (int k = 0; k < 3; ++k) {
            const int m = (k + 1) % 3;
            if (above[k] != above[m]) pts[found++] = edge_crossing(*v[k], *v[m], z);
        }
        if ((pts[1] - pts[0]).norm() < kChainEpsilon) continue;
        // Orient so the solid lies to the left: direction along z x n.
        const Vec3 n = (t.v1 - t.v0).cross(t.v2 - t.v0);
        const Vec2 dir(-n.y(), n.x());
        if ((pts[1] - pts[0]).dot(dir) < 0.0) std::swap(pts[0], pts[1]);
        segments.push_back({pts[0], pts[1]});
    }

    PointIndex starts(10.0 * kChainEpsilon);
    PointIndex ends(10.0 * kChainEpsilon);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        starts.insert(segments[i].a, i);
        ends.insert(segments[i].b, i);
    }
    std::vector<bool> used(segments.size(), false);

    SliceContour contour;
    for (std::size_t seed = 0; seed < segments.size(); ++seed) {
        if (used[seed]) continue;
        used[seed] = true;
        Loop loop{segments[seed].a, segments[seed].b};
        while ((loop.back() - loop.front()).norm() > kChainEpsilon || loop.size() < 4) {
            const Vec2 tail = loop.back();
            auto near = [&](const Vec2& q) { return (q - tail).norm() <= kChainEpsilon; };
            std::size_t next = starts.find(tail, [&](std::size_t id) { return !used[id] && near(segments[id].a); });
            Vec2 step;
            if (next != PointIndex::npos) {
                step = segments[next].b;
            } else {
                // Inconsistent facet winding: accept the segment reversed.
                next = ends.find(tail, [&](std::size_t id) { return !used[id] && near(segments[id].b); });
                if (next == PointIndex::npos) {
                    if (loop.size() >= 3 && (loop.back() - loop.front()).norm() <= kChainEpsilon) break;
                    throw Error(ErrorKind::OpenContour,
                                fmt::format("contour at z={} cannot be closed; gap {:.3g} mm", z,
                                            (loop.back() - loop.front()).norm()));
                }
                step = segments[next].a;
            }
            used[next] = true;
            loop.push_back(step);
        }
        loop.back() = loop.front();
        if (loop.size() >= 4) contour.loops.push_back(std::move(loop));
    }

    // Nesting depth decides orientation: even depth is solid boundary (CCW).
    for (std::size_t i = 0; i < contour.loops.size(); ++i) {
        int depth = 0;
        for (std::size_t j = 0; j < contour.loops.size(); ++j) {
            if (i != j && point_in_loop(contour.loops[j], contour.loops[i].front())) ++depth;
        }
        const bool want_ccw = depth % 2 == 0;
        if ((signed_area(contour.loops[i]) > 0.0) != want_ccw) {
            std::reverse(contour.loops[i].begin(), contour.loops[i].end());
        }
    }
    return contour;
}

Eigen::MatrixXf rasterize_on_grid(const SliceContour& contour, int rows, int cols, double pitch, const Vec2& origin) {
    Eigen::MatrixXf pixels = Eigen::MatrixXf::Zero(rows, cols);
    std::vector<double> crossings;
    for (int r = 0; r < rows; ++r) {
        const double y = origin.y() + (rows - r - 0.5) * pitch;
        crossings.clear();
        for (const auto& loop : contour.loops) {
            for (std::size_t i = 0; i + 1 < loop.size(); ++i) {
                const Vec2& a = loop[i];
                const Vec2& b = loop[i + 1];
                if ((a.y() <= y) != (b.y() <= y)) {
                    crossings.push_back(a.x() + (y - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
                }
            }
        }
        std::sort(crossings.begin(), crossings.end());
        for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
            const double c0 = (crossings[k] - origin.x()) / pitch - 0.5;
            const double c1 = (crossings[k + 1] - origin.x()) / pitch - 0.5;
            const int first = std::max(0, static_cast<int>(std::ceil(c0)));
            const int last = std::min(cols - 1, static_cast<int>(std::ceil(c1)) - 1);
            for (int c = first; c <= last; ++c) pixels(r, c) = 1.0f;
        }
    }
    return pixels;
}

SliceImage rasterize(const SliceContour& contour) {
    if (contour.loops.empty()) throw Error(ErrorKind::EmptyContour, "nothing to rasterize");
    const auto box = contour.bounds();
    const Vec2 extent = box.sizes();
    const double larger = extent.maxCoeff();
    if (!(larger > 0.0)) throw Error(ErrorKind::EmptyContour, "contour has zero extent");
    SliceImage image;
    image.pixel_pitch = larger / (kFramingFill * kImageSide);
    const Vec2 center = box.center();
    image.origin = center - Vec2::Constant(0.5 * kImageSide * image.pixel_pitch);
    image.pixels = rasterize_on_grid(contour, kImageSide, kImageSide, image.pixel_pitch, image.origin);
    return image;
}

std::string encode_pgm(const Eigen::MatrixXf& pixels) {
    std::string out = fmt::format("P5\n{} {}\n255\n", pixels.cols(), pixels.rows());
    out.reserve(out.size() + static_cast<std::size_t>(pixels.size()));
    for (Eigen::Index r = 0; r < pixels.rows(); ++r) {
        for (Eigen::Index c = 0; c < pixels.cols(); ++c) {
            const float v = std::clamp(pixels(r, c), 0.0f, 1.0f);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
        }
    }
    return out;
}

Eigen::MatrixXf decode_pgm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        std::string token;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') token.push_back(static_cast<char>(bytes[pos++]));
        return token;
    };
    const std::string magic = next_token();
    if (magic != "P5" && magic != "P2") throw Error(ErrorKind::BadMagic, "not a PGM image (magic '" + magic + "')");
    auto number = [&]() {
        const std::string t = next_token();
        char* end = nullptr;
        const long v = std::strtol(t.c_str(), &end, 10);
        if (t.empty() || *end != '\0' || v <= 0) throw Error(ErrorKind::MalformedNumber, "bad PGM header field '" + t + "'");
        return v;
    };
    const long width = number();
    const long height = number();
    const long maxval = number();
    if (maxval > 65535) throw Error(ErrorKind::MalformedNumber, "PGM maxval too large");
    Eigen::MatrixXf pixels(height, width);
    if (magic == "P2") {
        for (long r = 0; r < height; ++r) {
            for (long c = 0; c < width; ++c) {
                const std::string t = next_token();
                if (t.empty()) throw Error(ErrorKind::TruncatedFile, "PGM pixel data ends early");
                pixels(r, c) = static_cast<float>(std::strtol(t.c_str(), nullptr, 10)) / static_cast<float>(maxval);
            }
        }
        return pixels;
    }
    ++pos;  // single whitespace after maxval
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + static_cast<std::size_t>(width * height) * bpp) {
        throw Error(ErrorKind::TruncatedFile, "PGM pixel data ends early");
    }
    for (long r = 0; r < height; ++r) {
        for (long c = 0; c < width; ++c) {
            const std::size_t i = pos + static_cast<std::size_t>(r * width + c) * bpp;
            const unsigned v = bpp == 1 ? bytes[i] : (static_cast<unsigned>(bytes[i]) << 8) | bytes[i + 1];
            pixels(r, c) = static_cast<float>(v) / static_cast<float>(maxval);
        }
    }
    return pixels;
}

Eigen::MatrixXf read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pgm(bytes);
}

void write_pgm(const std::string& path, const Eigen::MatrixXf& pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path);
    const auto data = encode_pgm(pixels);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path);
}

}  // namespace slicepath::geometry
