#ifndef B3D_RASTER_HPP
#define B3D_RASTER_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "b3d/error.hpp"
#include "b3d/ndgrid.hpp"

namespace b3d {

/// North-up affine pixel-to-world mapping. (origin_x, origin_y) is the outer
/// corner of pixel (row 0, col 0); rows advance southwards.
struct Geotransform {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double pixel_size_x = 1.0;
    double pixel_size_y = 1.0;

    double x_at(double col) const { return origin_x + col * pixel_size_x; }
    double y_at(double row) const { return origin_y - row * pixel_size_y; }
    double col_at(double x) const { return (x - origin_x) / pixel_size_x; }
    double row_at(double y) const { return (origin_y - y) / pixel_size_y; }

    void validate() const
    {
        require(pixel_size_x > 0 && pixel_size_y > 0, ErrorKind::Domain, "pixel sizes must be positive");
    }

    friend bool operator==(const Geotransform&, const Geotransform&) = default;
};

struct Raster {
    Grid< double > grid; // H x W or H x W x C
    std::optional< Geotransform > geo;
    std::optional< double > nodata;

    std::size_t height() const { return grid.dim(0); }
    std::size_t width() const { return grid.dim(1); }
    std::size_t channels() const { return grid.rank() == 3 ? grid.dim(2) : 1; }

    bool is_nodata(double v) const { return nodata && (v == *nodata || (std::isnan(*nodata) && std::isnan(v))); }
};

enum class RasterFormat { Asc, Pgm, Png };

inline RasterFormat format_from_path(const std::filesystem::path& p)
{
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".asc")
        return RasterFormat::Asc;
    if (ext == ".pgm")
        return RasterFormat::Pgm;
    if (ext == ".png")
        return RasterFormat::Png;
    fail(ErrorKind::Parse, "unknown raster format for '" + p.string() + "'");
}

// ---------------------------------------------------------------------------
// ESRI ASCII grid

inline constexpr std::size_t kMaxRasterPixels = std::size_t(1) << 31;
inline constexpr double kAscDefaultNodata = -9999.0;

namespace detail {
[[noreturn]] inline void asc_fail(const std::string& source, const std::string& what)
{
    fail(ErrorKind::Parse, source + ": " + what);
}
} // namespace detail

inline Raster read_asc(std::istream& in, const std::string& source = "<stream>")
{
    std::map< std::string, std::string > header;
    std::string key;
    // Header lines are "key value"; the first token that parses as a number
    // starts the data block.
    std::streampos data_start = in.tellg();
    while (in >> key) {
        std::string lower = key;
        std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
        if (!lower.empty() && (std::isdigit(static_cast<unsigned char>(lower[0])) || lower[0] == '-' ||
                               lower[0] == '+' || lower[0] == '.'))
            break;
        std::string value;
        if (!(in >> value))
            detail::asc_fail(source, "header key '" + key + "' has no value");
        header[lower] = value;
        data_start = in.tellg();
    }
    auto number = [&](const std::string& k) -> std::optional< double > {
        auto it = header.find(k);
        if (it == header.end())
            return std::nullopt;
        try {
            std::size_t used = 0;
            double v = std::stod(it->second, &used);
            if (used != it->second.size())
                detail::asc_fail(source, "header value for '" + k + "' is not numeric");
            return v;
        } catch (const std::logic_error&) {
            detail::asc_fail(source, "header value for '" + k + "' is not numeric");
        }
    };
    const auto ncols = number("ncols"), nrows = number("nrows"), cellsize = number("cellsize");
    if (!ncols || !nrows || !cellsize)
        detail::asc_fail(source, "header must define ncols, nrows and cellsize");
    if (*ncols < 1 || *nrows < 1 || *ncols != std::floor(*ncols) || *nrows != std::floor(*nrows))
        detail::asc_fail(source, "ncols/nrows must be positive integers");
    if (*ncols * *nrows > double(kMaxRasterPixels))
        detail::asc_fail(source, "raster dimensions overflow the supported pixel count");
    if (!(*cellsize > 0))
        detail::asc_fail(source, "cellsize must be positive");
    const std::size_t w = std::size_t(*ncols), h = std::size_t(*nrows);

    Raster r;
    Geotransform g;
    g.pixel_size_x = g.pixel_size_y = *cellsize;
    if (auto x = number("xllcorner"))
        g.origin_x = *x;
    else if (auto xc = number("xllcenter"))
        g.origin_x = *xc - 0.5 * *cellsize;
    else
        detail::asc_fail(source, "header must define xllcorner or xllcenter");
    double yll;
    if (auto y = number("yllcorner"))
        yll = *y;
    else if (auto yc = number("yllcenter"))
        yll = *yc - 0.5 * *cellsize;
    else
        detail::asc_fail(source, "header must define yllcorner or yllcenter");
    g.origin_y = yll + double(h) * *cellsize;
    r.geo = g;
    r.nodata = number("nodata_value");

    in.clear();
    in.seekg(data_start);
    std::vector< double > values;
    values.reserve(w * h);
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            values.push_back(std::stod(tok, &used));
            if (used != tok.size())
                detail::asc_fail(source, "non-numeric cell value '" + tok + "'");
        } catch (const std::logic_error&) {
            detail::asc_fail(source, "non-numeric cell value '" + tok + "'");
        }
        if (values.size() > w * h)
            break;
    }
    if (values.size() != w * h)
        detail::asc_fail(source, "expected " + std::to_string(w * h) + " cells (ncols " + std::to_string(w) + " x nrows " +
                   std::to_string(h) + "), found " + (values.size() > w * h ? "more" : std::to_string(values.size())));
    r.grid = Grid< double >({h, w}, std::move(values));
    return r;
}

inline Raster read_asc(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        fail(ErrorKind::Io, "cannot open " + path.string());
    return read_asc(in, path.string());
}

inline std::string format_number(double v, int significant)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", significant, v);
    return buf;
}

/// Values are written with `significant` digits (default 6); header
/// coordinates always use round-trip precision.
inline void write_asc(const Raster& r, std::ostream& out, int significant = 6)
{
    require(r.grid.rank() == 2 || r.channels() == 1, ErrorKind::Shape, "ESRI ASCII grids hold one band");
    const Geotransform g = r.geo.value_or(Geotransform{0.0, double(r.height()), 1.0, 1.0});
    if (g.pixel_size_x != g.pixel_size_y)
        fail(ErrorKind::Domain, "ESRI ASCII grids need square cells");
    const double nodata = r.nodata.value_or(kAscDefaultNodata);
    out << "ncols " << r.width() << '\n'
        << "nrows " << r.height() << '\n'
        << "xllcorner " << format_number(g.origin_x, 17) << '\n'
        << "yllcorner " << format_number(g.origin_y - double(r.height()) * g.pixel_size_y, 17) << '\n'
        << "cellsize " << format_number(g.pixel_size_x, 17) << '\n'
        << "NODATA_value " << format_number(nodata, 17) << '\n';
    std::string line;
    for (std::size_t y = 0; y < r.height(); ++y) {
        line.clear();
        for (std::size_t x = 0; x < r.width(); ++x) {
            if (x)
                line += ' ';
            const double v = r.grid[y * r.width() + x];
            line += r.is_nodata(v) ? format_number(nodata, 17) : format_number(v, significant);
        }
        out << line << '\n';
    }
}

inline void write_asc(const Raster& r, const std::filesystem::path& path, int significant = 6)
{
    std::ofstream out(path);
    if (!out)
        fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    write_asc(r, out, significant);
    if (!out)
        fail(ErrorKind::Io, "failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// PGM (P2/P5, 8 or 16 bit). Values are raw sample values.

inline Raster read_pgm(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(ErrorKind::Io, "cannot open " + path.string());
    auto bad = [&](const std::string& what) { fail(ErrorKind::Parse, path.string() + ": " + what); };
    auto token = [&]() {
        std::string t;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty())
                    break;
                continue;
            }
            t += c;
        }
        return t;
    };
    const std::string magic = token();
    if (magic != "P2" && magic != "P5")
        bad("not a PGM file");
    long w = 0, h = 0, maxval = 0;
    try {
        w = std::stol(token());
        h = std::stol(token());
        maxval = std::stol(token());
    } catch (const std::logic_error&) {
        bad("malformed header");
    }
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
        bad("invalid header values");
    if (double(w) * double(h) > double(kMaxRasterPixels))
        bad("dimensions overflow");
    Grid< double > g({std::size_t(h), std::size_t(w)});
    if (magic == "P2") {
        for (auto& v : g.flat()) {
            const auto t = token();
            if (t.empty())
                bad("truncated data");
            v = std::stod(t);
        }
    } else {
        const int bytes = maxval > 255 ? 2 : 1;
        std::vector< unsigned char > buf(g.size() * bytes);
        in.read(reinterpret_cast< char* >(buf.data()), std::streamsize(buf.size()));
        if (in.gcount() != std::streamsize(buf.size()))
            bad("truncated data");
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = bytes == 2 ? double((buf[2 * i] << 8) | buf[2 * i + 1]) : double(buf[i]);
    }
    return Raster{std::move(g), std::nullopt, std::nullopt};
}

inline void write_pgm(const Raster& r, const std::filesystem::path& path, bool sixteen_bit = false)
{
    require(r.channels() == 1, ErrorKind::Shape, "PGM holds one band");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    const int maxval = sixteen_bit ? 65535 : 255;
    out << "P5\n" << r.width() << ' ' << r.height() << '\n' << maxval << '\n';
    for (double v : r.grid.flat()) {
        const long q = std::lround(std::clamp(v, 0.0, double(maxval)));
        if (sixteen_bit) {
            out.put(char((q >> 8) & 0xff));
            out.put(char(q & 0xff));
        } else {
            out.put(char(q));
        }
    }
}

// ---------------------------------------------------------------------------
// Tiling and fusion

struct TileAnchor {
    std::size_t row = 0;
    std::size_t col = 0;

    friend bool operator==(const TileAnchor&, const TileAnchor&) = default;
};

/// Sliding-window layout. Tiles are tile_h x tile_w (the requested size,
/// shrunk to the raster when the raster is smaller).
struct TilePlan {
    std::size_t tile = 512;
    std::size_t overlap = 64;
    std::size_t tile_h = 0;
    std::size_t tile_w = 0;
    std::vector< TileAnchor > anchors;
};

inline std::vector< std::size_t > axis_anchors(std::size_t extent, std::size_t tile, std::size_t stride)
{
    std::vector< std::size_t > a{0};
    if (tile >= extent)
        return a;
    std::size_t pos = 0;
    while (pos + tile < extent) {
        pos = std::min(pos + stride, extent - tile);
        a.push_back(pos);
    }
    return a;
}

inline TilePlan plan_tiles(std::size_t h, std::size_t w, std::size_t tile = 512, std::size_t overlap = 64)
{
    if (tile <= overlap)
        fail(ErrorKind::Domain, "tile size must exceed overlap");
    require(h >= 1 && w >= 1, ErrorKind::Domain, "raster extents must be >= 1");
    TilePlan p;
    p.tile = tile;
    p.overlap = overlap;
    p.tile_h = std::min(tile, h);
    p.tile_w = std::min(tile, w);
    const std::size_t stride = tile - overlap;
    for (std::size_t r : axis_anchors(h, p.tile_h, stride))
        for (std::size_t c : axis_anchors(w, p.tile_w, stride))
            p.anchors.push_back({r, c});
    return p;
}

template < typename T >
Grid< T > crop(const Grid< T >& g, std::size_t row, std::size_t col, std::size_t h, std::size_t w)
{
    require(row + h <= g.dim(0) && col + w <= g.dim(1), ErrorKind::Shape, "crop window out of bounds");
    const std::size_t c = g.rank() == 3 ? g.dim(2) : 1;
    Extents shape = g.rank() == 3 ? Extents{h, w, c} : Extents{h, w};
    Grid< T > r(shape);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(g.data().begin() + ((row + y) * g.dim(1) + col) * c, w * c, r.data().begin() + y * w * c);
    return r;
}

struct Patch {
    TileAnchor anchor;
    Grid< double > values; // tile_h x tile_w
};

/// Uniform average of all covering patches, accumulated in patch order. The
/// mean is formed as first + sum(v - first) / n, so identical overlapping
/// values reproduce exactly.
inline Raster fuse_patches(const std::vector< Patch >& patches, std::size_t h, std::size_t w)
{
    Grid< double > base({h, w}), dev({h, w});
    std::vector< std::uint32_t > count(h * w, 0);
    for (const auto& p : patches) {
        require(p.values.rank() == 2, ErrorKind::Shape, "patches must be rank-2");
        const std::size_t ph = p.values.dim(0), pw = p.values.dim(1);
        if (p.anchor.row + ph > h || p.anchor.col + pw > w)
            fail(ErrorKind::Shape, "patch extends past the fused raster");
        for (std::size_t y = 0; y < ph; ++y)
            for (std::size_t x = 0; x < pw; ++x) {
                const std::size_t i = (p.anchor.row + y) * w + p.anchor.col + x;
                const double v = p.values(y, x);
                if (count[i]++ == 0)
                    base[i] = v;
                else
                    dev[i] += v - base[i];
            }
    }
    Raster r{Grid< double >({h, w}), std::nullopt, std::nullopt};
    for (std::size_t i = 0; i < h * w; ++i) {
        if (count[i] == 0)
            fail(ErrorKind::Domain, "pixel (" + std::to_string(i / w) + ", " + std::to_string(i % w) +
                                        ") is not covered by any patch");
        r.grid[i] = count[i] == 1 ? base[i] : base[i] + dev[i] / double(count[i]);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Smoothing

/// Unnormalized half kernel exp(-i^2 / 2 sigma^2), i = 0..ceil(3 sigma).
inline std::vector< double > gaussian_half_kernel(double sigma)
{
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector< double > k(radius + 1);
    for (int i = 0; i <= radius; ++i)
        k[i] = std::exp(-double(i * i) / (2.0 * sigma * sigma));
    return k;
}

/// Separable Gaussian smoothing. Out-of-bounds and nodata taps are dropped
/// and the remaining weights renormalized, which equals the 2-D renormalized
/// filter because the kernel factorizes. Nodata pixels pass through.
inline Raster gaussian_filter(const Raster& r, double sigma)
{
    require(sigma >= 0.0, ErrorKind::Domain, "sigma must be >= 0");
    if (sigma == 0.0)
        return r;
    const auto k = gaussian_half_kernel(sigma);
    const std::ptrdiff_t radius = std::ptrdiff_t(k.size()) - 1;
    const std::ptrdiff_t h = r.height(), w = r.width();
    const std::size_t c = r.channels();
    Raster out = r;
    std::vector< double > sum(h * w), wsum(h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) { return r.grid[(y * w + x) * c + ch]; };
        for (std::ptrdiff_t y = 0; y < h; ++y)
            for (std::ptrdiff_t x = 0; x < w; ++x) {
                double s = 0, ws = 0;
                for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                    const std::ptrdiff_t xx = x + d;
                    if (xx < 0 || xx >= w || r.is_nodata(at(y, xx)))
                        continue;
                    const double kw = k[std::abs(d)];
                    s += kw * at(y, xx);
                    ws += kw;
                }
                sum[y * w + x] = s;
                wsum[y * w + x] = ws;
            }
        for (std::ptrdiff_t y = 0; y < h; ++y)
            for (std::ptrdiff_t x = 0; x < w; ++x) {
                if (r.is_nodata(at(y, x)))
                    continue;
                double s = 0, ws = 0;
                for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                    const std::ptrdiff_t yy = y + d;
                    if (yy < 0 || yy >= h)
                        continue;
                    const double kw = k[std::abs(d)];
                    s += kw * sum[yy * w + x];
                    ws += kw * wsum[yy * w + x];
                }
                out.grid[(y * w + x) * c + ch] = s / ws;
            }
    }
    return out;
}

} // namespace b3d

#endif // B3D_RASTER_HPP
