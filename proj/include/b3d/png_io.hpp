#ifndef B3D_PNG_IO_HPP
#define B3D_PNG_IO_HPP

// PNG reading and writing through libpng. Samples are returned as raw
// integer values (0..255 or 0..65535). A 16-bit elevation PNG may carry a
// sidecar "<file>.png.json" holding {"scale": s, "offset": o}; elevation is
// then raw * s + o.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "b3d/error.hpp"
#include "b3d/raster.hpp"

namespace b3d {

struct PngScale {
    double scale = 1.0;
    double offset = 0.0;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr< std::FILE, FileCloser >;

inline std::filesystem::path sidecar_path(const std::filesystem::path& png)
{
    return std::filesystem::path(png.string() + ".json");
}

} // namespace detail

/// Reads gray, gray+alpha, RGB or RGBA PNGs. Palette images are expanded to
/// RGB. Returns H x W for single-band images and H x W x C otherwise.
inline Raster read_png(const std::filesystem::path& path)
{
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp)
        fail(ErrorKind::Io, "cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        fail(ErrorKind::Parse, path.string() + ": not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorKind::Io, "libpng initialization failed");
    }
    std::vector< unsigned char > pixels;
    std::vector< png_bytep > rows;
    png_uint_32 w = 0, h = 0;
    int depth = 0, channels = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorKind::Parse, path.string() + ": corrupt PNG data");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    depth = png_get_bit_depth(png, info);
    channels = png_get_channels(png, info);
    if (double(w) * double(h) > double(kMaxRasterPixels)) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorKind::Parse, path.string() + ": dimensions overflow");
    }
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    pixels.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = pixels.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Extents shape = channels == 1 ? Extents{h, w} : Extents{h, w, std::size_t(channels)};
    Grid< double > g(shape);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t i = 0; i < std::size_t(w) * channels; ++i) {
            const unsigned char* p = rows[y];
            g[y * w * channels + i] = depth == 16 ? double((p[2 * i] << 8) | p[2 * i + 1]) : double(p[i]);
        }
    return Raster{std::move(g), std::nullopt, std::nullopt};
}

/// Writes raw sample values, rounded and clamped to the bit depth.
inline void write_png(const Raster& r, const std::filesystem::path& path, int bit_depth = 8)
{
    require(bit_depth == 8 || bit_depth == 16, ErrorKind::Domain, "PNG bit depth must be 8 or 16");
    const std::size_t c = r.channels();
    int color = 0;
    switch (c) {
    case 1: color = PNG_COLOR_TYPE_GRAY; break;
    case 2: color = PNG_COLOR_TYPE_GRAY_ALPHA; break;
    case 3: color = PNG_COLOR_TYPE_RGB; break;
    case 4: color = PNG_COLOR_TYPE_RGB_ALPHA; break;
    default: fail(ErrorKind::Shape, "PNG supports 1 to 4 channels");
    }
    const std::size_t h = r.height(), w = r.width();
    const std::size_t bps = bit_depth / 8;
    const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
    std::vector< unsigned char > pixels(h * w * c * bps);
    for (std::size_t i = 0; i < h * w * c; ++i) {
        const long q = std::lround(std::clamp(r.grid[i], 0.0, maxval));
        if (bps == 2) {
            pixels[2 * i] = (q >> 8) & 0xff;
            pixels[2 * i + 1] = q & 0xff;
        } else {
            pixels[i] = static_cast< unsigned char >(q);
        }
    }
    std::vector< png_bytep > rows(h);
    for (std::size_t y = 0; y < h; ++y)
        rows[y] = pixels.data() + y * w * c * bps;

    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp)
        fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorKind::Io, "libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorKind::Io, "failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), bit_depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// 16-bit elevation PNG plus its scale/offset sidecar.
inline void write_elevation_png(const Raster& r, const std::filesystem::path& path, PngScale s)
{
    require(s.scale > 0, ErrorKind::Domain, "PNG elevation scale must be positive");
    Raster raw = r;
    for (auto& v : raw.grid.flat())
        v = (v - s.offset) / s.scale;
    write_png(raw, path, 16);
    std::ofstream js(detail::sidecar_path(path));
    if (!js)
        fail(ErrorKind::Io, "cannot write PNG sidecar for " + path.string());
    js << nlohmann::json{{"scale", s.scale}, {"offset", s.offset}}.dump() << '\n';
}

/// Applies the sidecar scale/offset when present; otherwise raw values.
inline Raster read_elevation_png(const std::filesystem::path& path)
{
    Raster r = read_png(path);
    const auto side = detail::sidecar_path(path);
    if (std::filesystem::exists(side)) {
        std::ifstream js(side);
        PngScale s;
        try {
            const auto j = nlohmann::json::parse(js);
            s.scale = j.at("scale").get< double >();
            s.offset = j.value("offset", 0.0);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Parse, side.string() + ": " + e.what());
        }
        for (auto& v : r.grid.flat())
            v = v * s.scale + s.offset;
    }
    return r;
}

/// Dispatch on file extension. PNG goes through the sidecar-aware reader.
inline Raster read_raster(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        fail(ErrorKind::Io, "no such file: " + path.string());
    switch (format_from_path(path)) {
    case RasterFormat::Asc: return read_asc(path);
    case RasterFormat::Pgm: return read_pgm(path);
    case RasterFormat::Png: return read_elevation_png(path);
    }
    fail(ErrorKind::Parse, "unreachable raster format");
}

inline void write_raster(const Raster& r, const std::filesystem::path& path)
{
    switch (format_from_path(path)) {
    case RasterFormat::Asc: write_asc(r, path); return;
    case RasterFormat::Pgm: write_pgm(r, path); return;
    case RasterFormat::Png: write_png(r, path); return;
    }
}

} // namespace b3d

#endif // B3D_PNG_IO_HPP
