#ifndef B3D_RECON_HPP
#define B3D_RECON_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "b3d/error.hpp"
#include "b3d/maskops.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/raster.hpp"
#include "b3d/rng.hpp"

namespace b3d {

using Vec3 = std::array< double, 3 >;
using Rgb = std::array< std::uint8_t, 3 >;

struct PointCloud {
    std::vector< Vec3 > points;
    std::vector< Rgb > colors; // empty or one per point

    bool has_colors() const { return !colors.empty(); }
};

enum class FaceKind { Roof, Wall };

struct FaceTag {
    FaceKind kind = FaceKind::Roof;
    int component = 0;
};

struct Mesh {
    std::vector< Vec3 > vertices;
    std::vector< std::array< std::uint32_t, 3 > > triangles;
    std::vector< FaceTag > tags; // parallel to triangles
};

struct Lod1Building {
    FootprintPolygon footprint;
    double base = 0.0;
    double top = 0.0;
    int id = 0;

    double volume() const { return signed_area(footprint.ring) * (top - base); }
};

struct CityModel {
    std::vector< Lod1Building > buildings;
    std::size_t dropped = 0; // components whose top did not exceed the base
};

enum class HeightStat { Median, Mean, Max };

inline HeightStat parse_height_stat(const std::string& s)
{
    if (s == "median")
        return HeightStat::Median;
    if (s == "mean")
        return HeightStat::Mean;
    if (s == "max")
        return HeightStat::Max;
    fail(ErrorKind::Domain, "unknown height statistic '" + s + "' (expected median, mean or max)");
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c)
{
    const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    const Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    return 0.5 * std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
}

/// Hadamard product of elevation and mask. Nodata cells stay nodata.
inline Raster mask_elevation(const Raster& e, const BuildingMask& m)
{
    require(e.channels() == 1, ErrorKind::Shape, "elevation raster must be single-band");
    if (e.height() != m.height() || e.width() != m.width())
        fail(ErrorKind::Shape, "elevation and mask shapes differ");
    Raster out = e;
    for (std::size_t i = 0; i < out.grid.size(); ++i)
        if (!e.is_nodata(e.grid[i]))
            out.grid[i] = e.grid[i] * double(m.grid[i]);
    return out;
}

/// One point per retained pixel at the pixel center. Nodata is always
/// skipped; zero elevations are skipped when `skip_zero` is set. Colors
/// come from `image` (gray or RGB, 0..255) when given.
inline PointCloud to_point_cloud(const Raster& e, const Geotransform& geo, const Raster* image = nullptr,
                                 bool skip_zero = true)
{
    if (image && (image->height() != e.height() || image->width() != e.width()))
        fail(ErrorKind::Shape, "color image shape differs from the elevation raster");
    PointCloud pc;
    const std::size_t h = e.height(), w = e.width();
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const double z = e.grid[r * w + c];
            if (e.is_nodata(z) || (skip_zero && z == 0.0))
                continue;
            pc.points.push_back({geo.x_at(double(c) + 0.5), geo.y_at(double(r) + 0.5), z});
            if (image) {
                const std::size_t ch = image->channels();
                auto sample = [&](std::size_t k) {
                    return static_cast< std::uint8_t >(
                        std::lround(std::clamp(image->grid[(r * w + c) * ch + std::min(k, ch - 1)], 0.0, 255.0)));
                };
                pc.colors.push_back({sample(0), sample(1), sample(2)});
            }
        }
    return pc;
}

/// Roof: two triangles per 2x2 block of mask pixels, vertices at pixel
/// centers. Walls: a vertical quad from `base` up to the roof under every
/// roof edge used by a single triangle. Triangles wind counter-clockwise seen
/// from outside. Tags carry the 8-connected component of each face.
inline Mesh heightfield_mesh(const Raster& e, const BuildingMask& m, const Geotransform& geo, double base = 0.0)
{
    if (e.height() != m.height() || e.width() != m.width())
        fail(ErrorKind::Shape, "elevation and mask shapes differ");
    const std::size_t h = e.height(), w = e.width();
    const auto lab = connected_components(m, 8);
    Mesh mesh;
    constexpr std::uint32_t kNone = UINT32_MAX;
    std::vector< std::uint32_t > roof_index(h * w, kNone), base_index(h * w, kNone);
    auto roof_vertex = [&](std::size_t r, std::size_t c) {
        auto& idx = roof_index[r * w + c];
        if (idx == kNone) {
            idx = std::uint32_t(mesh.vertices.size());
            mesh.vertices.push_back({geo.x_at(double(c) + 0.5), geo.y_at(double(r) + 0.5), e.grid[r * w + c]});
        }
        return idx;
    };
    auto base_vertex = [&](std::size_t pixel) {
        auto& idx = base_index[pixel];
        if (idx == kNone) {
            idx = std::uint32_t(mesh.vertices.size());
            const auto& top = mesh.vertices[roof_index[pixel]];
            mesh.vertices.push_back({top[0], top[1], base});
        }
        return idx;
    };
    auto emit = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c, FaceTag tag) {
        if (triangle_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) <= 1e-12)
            return;
        mesh.triangles.push_back({a, b, c});
        mesh.tags.push_back(tag);
    };

    // Directed roof edges keyed by (from pixel, to pixel).
    std::map< std::pair< std::size_t, std::size_t >, int > edge_use;
    std::vector< std::array< std::size_t, 3 > > roof_tris;
    for (std::size_t r = 0; r + 1 < h; ++r)
        for (std::size_t c = 0; c + 1 < w; ++c) {
            if (!m(r, c) || !m(r, c + 1) || !m(r + 1, c) || !m(r + 1, c + 1))
                continue;
            const std::size_t a = r * w + c, b = r * w + c + 1, cc = (r + 1) * w + c + 1, d = (r + 1) * w + c;
            roof_tris.push_back({a, d, cc});
            roof_tris.push_back({a, cc, b});
        }
    for (const auto& t : roof_tris)
        for (int k = 0; k < 3; ++k) {
            const std::size_t p = t[k], q = t[(k + 1) % 3];
            ++edge_use[{std::min(p, q), std::max(p, q)}];
        }
    for (const auto& t : roof_tris) {
        const int comp = lab.labels[t[0]];
        emit(roof_vertex(t[0] / w, t[0] % w), roof_vertex(t[1] / w, t[1] % w), roof_vertex(t[2] / w, t[2] % w),
             {FaceKind::Roof, comp});
    }
    for (const auto& t : roof_tris)
        for (int k = 0; k < 3; ++k) {
            const std::size_t p = t[k], q = t[(k + 1) % 3];
            if (edge_use[{std::min(p, q), std::max(p, q)}] != 1)
                continue;
            // Roof interior lies left of p -> q, so the wall faces right.
            const int comp = lab.labels[p];
            const std::uint32_t pt = roof_index[p], qt = roof_index[q];
            const std::uint32_t pb = base_vertex(p), qb = base_vertex(q);
            emit(pb, qb, qt, {FaceKind::Wall, comp});
            emit(pb, qt, pt, {FaceKind::Wall, comp});
        }
    return mesh;
}

namespace detail {

inline double height_stat(std::vector< double >& v, HeightStat stat)
{
    switch (stat) {
    case HeightStat::Max: return *std::max_element(v.begin(), v.end());
    case HeightStat::Mean: {
        double s = 0;
        for (double x : v)
            s += x;
        return s / double(v.size());
    }
    case HeightStat::Median: {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
    }
    return 0.0;
}

} // namespace detail

/// LOD1 prism per footprint: top = statistic of the component's elevation
/// pixels, base as given. Buildings with top <= base are dropped and counted.
inline CityModel extrude_lod1(const std::vector< FootprintPolygon >& polys, const Raster& e, const Labeling& lab,
                              double base = 0.0, HeightStat stat = HeightStat::Median)
{
    if (e.height() != lab.labels.dim(0) || e.width() != lab.labels.dim(1))
        fail(ErrorKind::Shape, "elevation and label shapes differ");
    std::vector< std::vector< double > > samples(lab.count + 1);
    for (std::size_t i = 0; i < e.grid.size(); ++i) {
        const int id = lab.labels[i];
        if (id > 0 && id <= lab.count && !e.is_nodata(e.grid[i]))
            samples[id].push_back(e.grid[i]);
    }
    CityModel model;
    for (const auto& p : polys) {
        if (p.component <= 0 || p.component > lab.count || samples[p.component].empty())
            fail(ErrorKind::Domain, "footprint of component " + std::to_string(p.component) + " has no pixels");
        const double top = detail::height_stat(samples[p.component], stat);
        if (!(top > base)) {
            ++model.dropped;
            continue;
        }
        model.buildings.push_back({p, base, top, p.component});
    }
    return model;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Gaussian smoothing restricted to each labeled component: taps from the
/// background or from other buildings are dropped and the weights
/// renormalized. Background pixels are copied through unchanged.
inline Raster smooth_within_components(const Raster& e, const Labeling& lab, double sigma)
{
    require(e.channels() == 1, ErrorKind::Shape, "elevation raster must be single-band");
    if (e.height() != lab.labels.dim(0) || e.width() != lab.labels.dim(1))
        fail(ErrorKind::Shape, "elevation and labeling shapes differ");
    require(sigma >= 0.0, ErrorKind::Domain, "sigma must be >= 0");
    if (sigma == 0.0 || lab.count == 0)
        return e;
    const std::size_t h = e.height(), w = e.width();
    const std::size_t radius = std::size_t(std::ceil(3.0 * sigma));
    struct Box {
        std::size_t r0 = SIZE_MAX, c0 = SIZE_MAX, r1 = 0, c1 = 0;
    };
    std::vector< Box > boxes(std::size_t(lab.count) + 1);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            if (const auto id = lab.labels(r, c); id > 0) {
                auto& b = boxes[id];
                b.r0 = std::min(b.r0, r);
                b.c0 = std::min(b.c0, c);
                b.r1 = std::max(b.r1, r);
                b.c1 = std::max(b.c1, c);
            }
    Raster out = e;
    const double hole = std::numeric_limits< double >::quiet_NaN();
    for (int id = 1; id <= lab.count; ++id) {
        const auto& b = boxes[id];
        // pad by the kernel radius so renormalization sees the raster border
        const std::size_t r0 = b.r0 > radius ? b.r0 - radius : 0, c0 = b.c0 > radius ? b.c0 - radius : 0;
        const std::size_t r1 = std::min(h - 1, b.r1 + radius), c1 = std::min(w - 1, b.c1 + radius);
        Raster win{Grid< double >({r1 - r0 + 1, c1 - c0 + 1}), std::nullopt, hole};
        for (std::size_t r = r0; r <= r1; ++r)
            for (std::size_t c = c0; c <= c1; ++c) {
                const double v = e.grid[r * w + c];
                win.grid(r - r0, c - c0) = lab.labels(r, c) == id && !e.is_nodata(v) ? v : hole;
            }
        const auto sm = gaussian_filter(win, sigma);
        for (std::size_t r = b.r0; r <= b.r1; ++r)
            for (std::size_t c = b.c0; c <= b.c1; ++c)
                if (lab.labels(r, c) == id && !e.is_nodata(e.grid[r * w + c]))
                    out.grid[r * w + c] = sm.grid(r - r0, c - c0);
    }
    return out;
}


struct SceneSpec {
    std::size_t height = 256;
    std::size_t width = 256;
    std::size_t n_prisms = 10;
    std::size_t min_side = 10;
    std::size_t max_side = 40;
    double min_height = 3.0;
    double max_height = 30.0;
    std::size_t gap = 2; // empty pixels kept between prisms
    Geotransform geo{0.0, 0.0, 0.5, 0.5};
};

struct Prism {
    std::size_t row = 0, col = 0, rows = 0, cols = 0;
    double height = 0.0;
};

struct SyntheticScene {
    Raster dsm;
    BuildingMask mask;
    std::vector< Prism > prisms;
};

/// Axis-aligned rectangular prisms on flat ground (elevation 0). Heights are
/// whole centimetres so they survive text serialization exactly.
inline SyntheticScene make_synthetic_scene(std::uint64_t seed, const SceneSpec& spec)
{
    require(spec.min_side >= 1 && spec.min_side <= spec.max_side, ErrorKind::Domain, "invalid prism side range");
    require(spec.max_side <= std::min(spec.height, spec.width), ErrorKind::Domain, "prisms larger than the scene");
    require(spec.min_height > 0 && spec.min_height <= spec.max_height, ErrorKind::Domain, "invalid height range");
    Rng rng(seed);
    SyntheticScene s;
    Geotransform geo = spec.geo;
    if (geo.origin_y == 0.0)
        geo.origin_y = double(spec.height) * geo.pixel_size_y;
    s.dsm = Raster{Grid< double >({spec.height, spec.width}), geo, std::nullopt};
    s.mask = BuildingMask{Grid< std::uint8_t >({spec.height, spec.width})};
    constexpr int kAttempts = 1000;
    for (std::size_t i = 0; i < spec.n_prisms; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
            Prism p;
            p.rows = std::size_t(rng.uniform_int(std::int64_t(spec.min_side), std::int64_t(spec.max_side)));
            p.cols = std::size_t(rng.uniform_int(std::int64_t(spec.min_side), std::int64_t(spec.max_side)));
            p.row = std::size_t(rng.uniform_int(0, std::int64_t(spec.height - p.rows)));
            p.col = std::size_t(rng.uniform_int(0, std::int64_t(spec.width - p.cols)));
            p.height = std::round(rng.uniform(spec.min_height, spec.max_height) * 100.0) / 100.0;
            const bool clear = std::none_of(s.prisms.begin(), s.prisms.end(), [&](const Prism& q) {
                return p.row < q.row + q.rows + spec.gap && q.row < p.row + p.rows + spec.gap &&
                       p.col < q.col + q.cols + spec.gap && q.col < p.col + p.cols + spec.gap;
            });
            if (!clear)
                continue;
            for (std::size_t r = p.row; r < p.row + p.rows; ++r)
                for (std::size_t c = p.col; c < p.col + p.cols; ++c) {
                    s.dsm.grid(r, c) = p.height;
                    s.mask.grid(r, c) = 1;
                }
            s.prisms.push_back(p);
            placed = true;
        }
        if (!placed)
            fail(ErrorKind::Domain, "could not place prism " + std::to_string(i) + " without overlap");
    }
    return s;
}

} // namespace b3d

#endif // B3D_RECON_HPP
