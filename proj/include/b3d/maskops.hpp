#ifndef B3D_MASKOPS_HPP
#define B3D_MASKOPS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <json.hpp>

#include "b3d/error.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/raster.hpp"

namespace b3d {

struct BuildingMask {
    Grid< std::uint8_t > grid; // H x W, values in {0, 1}

    std::size_t height() const { return grid.dim(0); }
    std::size_t width() const { return grid.dim(1); }
    bool operator()(std::size_t y, std::size_t x) const { return grid(y, x) != 0; }
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

/// Exterior ring of one building footprint. The ring is stored open: the
/// closing edge runs from the last vertex back to the first.
struct FootprintPolygon {
    std::vector< Point2 > ring;
    int component = 0;
};

struct Labeling {
    Grid< std::int32_t > labels; // 0 = background, components numbered from 1
    int count = 0;
};

inline BuildingMask binarize(const Raster& labels, double building_class)
{
    require(labels.channels() == 1, ErrorKind::Shape, "label raster must be single-band");
    BuildingMask m{Grid< std::uint8_t >({labels.height(), labels.width()})};
    for (std::size_t i = 0; i < m.grid.size(); ++i)
        m.grid[i] = labels.grid[i] == building_class ? 1 : 0;
    return m;
}

/// Any value >= threshold counts as building.
inline BuildingMask threshold_mask(const Raster& r, double threshold)
{
    require(r.channels() == 1, ErrorKind::Shape, "mask raster must be single-band");
    BuildingMask m{Grid< std::uint8_t >({r.height(), r.width()})};
    for (std::size_t i = 0; i < m.grid.size(); ++i)
        m.grid[i] = (!r.is_nodata(r.grid[i]) && r.grid[i] >= threshold) ? 1 : 0;
    return m;
}

/// Flood-fill labeling; labels are assigned in raster-scan order of each
/// component's first pixel.
inline Labeling connected_components(const BuildingMask& m, int connectivity = 8)
{
    require(connectivity == 4 || connectivity == 8, ErrorKind::Domain, "connectivity must be 4 or 8");
    const std::ptrdiff_t h = m.height(), w = m.width();
    Labeling out{Grid< std::int32_t >({m.height(), m.width()}), 0};
    static constexpr std::array< std::array< int, 2 >, 8 > kOffsets{
        {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {-1, -1}, {-1, 1}, {1, -1}, {1, 1}}};
    std::deque< std::pair< std::ptrdiff_t, std::ptrdiff_t > > queue;
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            if (!m(y, x) || out.labels(y, x) != 0)
                continue;
            const int id = ++out.count;
            out.labels(y, x) = id;
            queue.push_back({y, x});
            while (!queue.empty()) {
                auto [cy, cx] = queue.front();
                queue.pop_front();
                for (int k = 0; k < connectivity; ++k) {
                    const std::ptrdiff_t ny = cy + kOffsets[k][0], nx = cx + kOffsets[k][1];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w || !m(ny, nx) || out.labels(ny, nx) != 0)
                        continue;
                    out.labels(ny, nx) = id;
                    queue.push_back({ny, nx});
                }
            }
        }
    return out;
}

inline double signed_area(const std::vector< Point2 >& ring)
{
    double a = 0;
    for (std::size_t i = 0, n = ring.size(); i < n; ++i) {
        const auto& p = ring[i];
        const auto& q = ring[(i + 1) % n];
        a += p.x * q.y - q.x * p.y;
    }
    return 0.5 * a;
}

inline double perimeter(const std::vector< Point2 >& ring)
{
    double len = 0;
    for (std::size_t i = 0, n = ring.size(); i < n; ++i)
        len += std::hypot(ring[(i + 1) % n].x - ring[i].x, ring[(i + 1) % n].y - ring[i].y);
    return len;
}

/// Area centroid of a non-degenerate ring.
inline Point2 centroid(const std::vector< Point2 >& ring)
{
    const double a = signed_area(ring);
    require(a != 0.0, ErrorKind::Domain, "centroid of a zero-area ring");
    double cx = 0, cy = 0;
    for (std::size_t i = 0, n = ring.size(); i < n; ++i) {
        const auto& p = ring[i];
        const auto& q = ring[(i + 1) % n];
        const double cross = p.x * q.y - q.x * p.y;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    return {cx / (6 * a), cy / (6 * a)};
}

namespace detail {

inline double orient(const Point2& a, const Point2& b, const Point2& c)
{
    return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

inline bool on_segment(const Point2& a, const Point2& b, const Point2& p)
{
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
}

inline bool segments_intersect(const Point2& p1, const Point2& p2, const Point2& q1, const Point2& q2)
{
    const double d1 = orient(q1, q2, p1), d2 = orient(q1, q2, p2);
    const double d3 = orient(p1, p2, q1), d4 = orient(p1, p2, q2);
    if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
        return true;
    return (d1 == 0 && on_segment(q1, q2, p1)) || (d2 == 0 && on_segment(q1, q2, p2)) ||
           (d3 == 0 && on_segment(p1, p2, q1)) || (d4 == 0 && on_segment(p1, p2, q2));
}

inline double point_segment_distance(const Point2& p, const Point2& a, const Point2& b)
{
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    if (len2 == 0)
        return std::hypot(p.x - a.x, p.y - a.y);
    const double t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
    return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

} // namespace detail

/// True when no two non-adjacent edges touch and adjacent edges share only
/// their common vertex.
inline bool is_simple(const std::vector< Point2 >& ring)
{
    const std::size_t n = ring.size();
    if (n < 3)
        return false;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a1 = ring[i];
        const auto& a2 = ring[(i + 1) % n];
        if (a1 == a2)
            return false;
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto& b1 = ring[j];
            const auto& b2 = ring[(j + 1) % n];
            const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if (adjacent) {
                // Adjacent edges may only meet at the shared vertex: reject
                // fold-backs where they overlap collinearly.
                const Point2& shared = j == i + 1 ? a2 : a1;
                const Point2& other_a = j == i + 1 ? a1 : a2;
                const Point2& other_b = j == i + 1 ? b2 : b1;
                if (detail::orient(other_a, shared, other_b) == 0 &&
                    ((other_a.x - shared.x) * (other_b.x - shared.x) + (other_a.y - shared.y) * (other_b.y - shared.y)) > 0)
                    return false;
                continue;
            }
            if (detail::segments_intersect(a1, a2, b1, b2))
                return false;
        }
    }
    return true;
}

/// Offset applied to pinch vertices where a ring passes the same lattice
/// corner twice, in pixel units.
inline constexpr double kPinchOffset = 1e-3;

namespace detail {

// Lattice directions in pixel space (y down): east, south, west, north.
inline constexpr int kDx[4] = {1, 0, -1, 0};
inline constexpr int kDy[4] = {0, 1, 0, -1};

/// Walks the outer boundary of one component along pixel edges with the
/// component on the right (screen orientation). Returns lattice-corner
/// vertices in pixel units, collinear runs merged.
inline std::vector< Point2 > trace_component(const Grid< std::int32_t >& labels, int id, std::size_t r0,
                                             std::size_t c0, int connectivity)
{
    const std::ptrdiff_t h = labels.dim(0), w = labels.dim(1);
    auto in = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
        return r >= 0 && r < h && c >= 0 && c < w && labels(r, c) == id;
    };
    std::vector< Point2 > ring;
    std::ptrdiff_t cx = c0, cy = r0;
    int dir = 0;
    const std::ptrdiff_t sx = cx, sy = cy;
    const std::size_t limit = 4 * labels.size() + 8;
    for (std::size_t step = 0; step < limit; ++step) {
        cx += kDx[dir];
        cy += kDy[dir];
        const bool tl = in(cy - 1, cx - 1), tr = in(cy - 1, cx), bl = in(cy, cx - 1), br = in(cy, cx);
        int next;
        bool pinch = false;
        if (tl && br && !tr && !bl) {
            pinch = true;
            next = connectivity == 8 ? (dir + 3) % 4 : (dir + 1) % 4;
        } else if (tr && bl && !tl && !br) {
            pinch = true;
            next = connectivity == 8 ? (dir + 3) % 4 : (dir + 1) % 4;
        } else if (br && !tr) {
            next = 0;
        } else if (bl && !br) {
            next = 1;
        } else if (tl && !bl) {
            next = 2;
        } else {
            next = 3;
        }
        if (pinch) {
            // Chamfer the corner so the two passes through it stay apart;
            // the area moves by only offset^2 / 2.
            ring.push_back({double(cx) - kPinchOffset * kDx[dir], double(cy) - kPinchOffset * kDy[dir]});
            ring.push_back({double(cx) + kPinchOffset * kDx[next], double(cy) + kPinchOffset * kDy[next]});
        } else if (next != dir) {
            ring.push_back({double(cx), double(cy)});
        }
        dir = next;
        if (cx == sx && cy == sy && dir == 0)
            return ring;
    }
    fail(ErrorKind::Domain, "contour trace did not close");
}

} // namespace detail

/// Outer boundary rings of every component whose footprint covers at least
/// `min_area_px` pixels. Rings follow pixel edges (each pixel is a unit
/// cell), so a solid block of n pixels yields area n. Holes are ignored.
/// Vertices are mapped to world coordinates and oriented counter-clockwise.
inline std::vector< FootprintPolygon > extract_contours(const Labeling& lab, const Geotransform& geo,
                                                        double min_area_px = 20, int connectivity = 8)
{
    const std::size_t h = lab.labels.dim(0), w = lab.labels.dim(1);
    std::vector< bool > seen(lab.count + 1, false);
    std::vector< FootprintPolygon > out;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const int id = lab.labels(r, c);
            if (id == 0 || seen[id])
                continue;
            seen[id] = true;
            auto ring = detail::trace_component(lab.labels, id, r, c, connectivity);
            if (std::abs(signed_area(ring)) < min_area_px)
                continue;
            for (auto& p : ring)
                p = {geo.x_at(p.x), geo.y_at(p.y)};
            if (signed_area(ring) < 0)
                std::reverse(ring.begin(), ring.end());
            out.push_back({std::move(ring), id});
        }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.component < b.component; });
    return out;
}

inline std::vector< FootprintPolygon > extract_contours(const BuildingMask& m, const Geotransform& geo,
                                                        double min_area_px = 20, int connectivity = 8)
{
    return extract_contours(connected_components(m, connectivity), geo, min_area_px, connectivity);
}

namespace detail {

inline void douglas_peucker(const std::vector< Point2 >& pts, std::size_t first, std::size_t last, double tol,
                            std::vector< bool >& keep)
{
    if (last <= first + 1)
        return;
    const std::size_t n = pts.size();
    double dmax = -1;
    std::size_t idx = first;
    for (std::size_t i = first + 1; i < last; ++i) {
        const double d = point_segment_distance(pts[i % n], pts[first % n], pts[last % n]);
        if (d > dmax) {
            dmax = d;
            idx = i;
        }
    }
    if (dmax > tol) {
        keep[idx % n] = true;
        douglas_peucker(pts, first, idx, tol, keep);
        douglas_peucker(pts, idx, last, tol, keep);
    }
}

inline std::vector< Point2 > simplify_ring(const std::vector< Point2 >& ring, double tol)
{
    const std::size_t n = ring.size();
    std::size_t far = 0;
    double dmax = -1;
    for (std::size_t i = 1; i < n; ++i) {
        const double d = std::hypot(ring[i].x - ring[0].x, ring[i].y - ring[0].y);
        if (d > dmax) {
            dmax = d;
            far = i;
        }
    }
    std::vector< bool > keep(n, false);
    keep[0] = keep[far] = true;
    douglas_peucker(ring, 0, far, tol, keep);
    douglas_peucker(ring, far, n, tol, keep);
    std::vector< Point2 > out;
    for (std::size_t i = 0; i < n; ++i)
        if (keep[i])
            out.push_back(ring[i]);
    // The two split vertices are always kept by the recursion; drop them too
    // when they lie within tolerance of their neighbours' chord.
    for (bool changed = true; changed && out.size() > 3;) {
        changed = false;
        for (std::size_t i = 0; i < out.size() && out.size() > 3; ++i) {
            const auto& prev = out[(i + out.size() - 1) % out.size()];
            const auto& next = out[(i + 1) % out.size()];
            if (point_segment_distance(out[i], prev, next) <= tol) {
                out.erase(out.begin() + std::ptrdiff_t(i));
                changed = true;
                break;
            }
        }
    }
    return out;
}

} // namespace detail

/// Douglas-Peucker on the closed ring. If the result self-intersects, the
/// tolerance is halved until it does not. Throws when fewer than three
/// vertices remain.
inline FootprintPolygon simplify(const FootprintPolygon& p, double tolerance)
{
    require(tolerance >= 0, ErrorKind::Domain, "simplify tolerance must be >= 0");
    if (tolerance == 0 || p.ring.size() <= 3)
        return p;
    const bool was_simple = is_simple(p.ring);
    for (double tol = tolerance; tol > 1e-12 * tolerance; tol *= 0.5) {
        auto ring = detail::simplify_ring(p.ring, tol);
        if (ring.size() < 3 || std::abs(signed_area(ring)) == 0)
            fail(ErrorKind::Domain, "simplification of component " + std::to_string(p.component) +
                                        " degenerated below three vertices");
        if (!was_simple || is_simple(ring))
            return {std::move(ring), p.component};
    }
    return p;
}

/// Pixels whose centers fall inside the polygon (even-odd rule).
inline BuildingMask rasterize(const FootprintPolygon& p, const Geotransform& geo, std::size_t h, std::size_t w)
{
    BuildingMask m{Grid< std::uint8_t >({h, w})};
    const auto& ring = p.ring;
    const std::size_t n = ring.size();
    for (std::size_t r = 0; r < h; ++r) {
        const double py = geo.y_at(double(r) + 0.5);
        for (std::size_t c = 0; c < w; ++c) {
            const double px = geo.x_at(double(c) + 0.5);
            bool inside = false;
            for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                const auto& a = ring[i];
                const auto& b = ring[j];
                if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x)
                    inside = !inside;
            }
            m.grid(r, c) = inside ? 1 : 0;
        }
    }
    return m;
}

/// GeoJSON FeatureCollection with one closed Polygon ring per footprint.
inline nlohmann::json polygons_to_json(const std::vector< FootprintPolygon >& polys)
{
    nlohmann::json features = nlohmann::json::array();
    for (const auto& p : polys) {
        nlohmann::json ring = nlohmann::json::array();
        for (const auto& v : p.ring)
            ring.push_back({v.x, v.y});
        if (!p.ring.empty())
            ring.push_back({p.ring.front().x, p.ring.front().y});
        features.push_back({{"type", "Feature"},
                            {"properties", {{"component", p.component}, {"area", signed_area(p.ring)}}},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}}});
    }
    return {{"type", "FeatureCollection"}, {"features", features}};
}

} // namespace b3d

#endif // B3D_MASKOPS_HPP
