#ifndef B3D_RECON_IO_HPP
#define B3D_RECON_IO_HPP

// Serializers for reconstruction outputs: PLY point clouds, Wavefront OBJ
// meshes and CityGML 2.0 LOD1 building solids. Layouts are documented in
// docs/formats.md.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>

#include "b3d/error.hpp"
#include "b3d/raster.hpp"
#include "b3d/recon.hpp"

namespace b3d {

namespace detail {

inline std::ofstream open_for_write(const std::filesystem::path& path, bool binary = false)
{
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out)
        fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
    return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path)
{
    out.flush();
    if (!out)
        fail(ErrorKind::Io, "failed writing " + path.string());
}

inline std::string num(double v) { return format_number(v, 15); }

} // namespace detail

inline void write_ply(const PointCloud& pc, std::ostream& out, bool binary = true)
{
    if (pc.has_colors() && pc.colors.size() != pc.points.size())
        fail(ErrorKind::Domain, "point cloud color count does not match point count");
    for (const auto& p : pc.points)
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
            fail(ErrorKind::Domain, "point cloud contains non-finite coordinates");
    out << "ply\n"
        << (binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n")
        << "comment b3d point cloud\n"
        << "element vertex " << pc.points.size() << '\n'
        << "property double x\nproperty double y\nproperty double z\n";
    if (pc.has_colors())
        out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out << "end_header\n";
    for (std::size_t i = 0; i < pc.points.size(); ++i) {
        const auto& p = pc.points[i];
        if (binary) {
            for (double v : p) {
                const auto bits = std::bit_cast< std::uint64_t >(v);
                for (int b = 0; b < 8; ++b)
                    out.put(char((bits >> (8 * b)) & 0xff));
            }
            if (pc.has_colors())
                for (auto c : pc.colors[i])
                    out.put(char(c));
        } else {
            out << detail::num(p[0]) << ' ' << detail::num(p[1]) << ' ' << detail::num(p[2]);
            if (pc.has_colors())
                out << ' ' << int(pc.colors[i][0]) << ' ' << int(pc.colors[i][1]) << ' ' << int(pc.colors[i][2]);
            out << '\n';
        }
    }
}

inline void write_ply(const PointCloud& pc, const std::filesystem::path& path, bool binary = true)
{
    auto out = detail::open_for_write(path, true);
    write_ply(pc, out, binary);
    detail::finish(out, path);
}

/// Faces are grouped per component and kind ("g building_<id>_roof",
/// "g building_<id>_wall"); indices are 1-based.
inline void write_obj(const Mesh& mesh, std::ostream& out)
{
    for (const auto& t : mesh.triangles)
        for (auto i : t)
            if (i >= mesh.vertices.size())
                fail(ErrorKind::Domain, "mesh triangle index out of range");
    if (!mesh.tags.empty() && mesh.tags.size() != mesh.triangles.size())
        fail(ErrorKind::Domain, "mesh tag count does not match triangle count");
    out << "# b3d heightfield mesh\n";
    out << "# vertices " << mesh.vertices.size() << " faces " << mesh.triangles.size() << '\n';
    for (const auto& v : mesh.vertices)
        out << "v " << detail::num(v[0]) << ' ' << detail::num(v[1]) << ' ' << detail::num(v[2]) << '\n';
    std::vector< std::size_t > order(mesh.triangles.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!mesh.tags.empty())
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const auto& ta = mesh.tags[a];
            const auto& tb = mesh.tags[b];
            return std::pair(ta.component, int(ta.kind)) < std::pair(tb.component, int(tb.kind));
        });
    std::optional< std::pair< int, int > > group;
    for (std::size_t i : order) {
        if (!mesh.tags.empty()) {
            const auto& tag = mesh.tags[i];
            const std::pair< int, int > g{tag.component, int(tag.kind)};
            if (group != g) {
                out << "g building_" << tag.component << (tag.kind == FaceKind::Roof ? "_roof" : "_wall") << '\n';
                group = g;
            }
        }
        const auto& t = mesh.triangles[i];
        out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
}

inline void write_obj(const Mesh& mesh, const std::filesystem::path& path)
{
    auto out = detail::open_for_write(path);
    write_obj(mesh, out);
    detail::finish(out, path);
}

namespace detail {

inline void write_gml_polygon(std::ostream& out, const std::vector< Vec3 >& ring, const std::string& indent)
{
    out << indent << "<gml:surfaceMember>\n"
        << indent << "  <gml:Polygon>\n"
        << indent << "    <gml:exterior>\n"
        << indent << "      <gml:LinearRing>\n"
        << indent << "        <gml:posList srsDimension=\"3\">";
    for (std::size_t i = 0; i <= ring.size(); ++i) {
        const auto& p = ring[i % ring.size()];
        out << (i ? " " : "") << num(p[0]) << ' ' << num(p[1]) << ' ' << num(p[2]);
    }
    out << "</gml:posList>\n"
        << indent << "      </gml:LinearRing>\n"
        << indent << "    </gml:exterior>\n"
        << indent << "  </gml:Polygon>\n"
        << indent << "</gml:surfaceMember>\n";
}

} // namespace detail

/// One bldg:Building per prism with a gml:Solid of bottom, top and one wall
/// per footprint edge. Every ring is closed and counter-clockwise seen from
/// outside the solid.
inline void write_citygml(const CityModel& model, std::ostream& out, std::optional< int > epsg = std::nullopt)
{
    for (const auto& b : model.buildings) {
        if (!(b.top > b.base) || !std::isfinite(b.top) || !std::isfinite(b.base))
            fail(ErrorKind::Domain, "building " + std::to_string(b.id) + " has top <= base");
        if (b.footprint.ring.size() < 3 || signed_area(b.footprint.ring) <= 0)
            fail(ErrorKind::Domain, "building " + std::to_string(b.id) + " footprint is not a CCW ring");
    }
    const std::string srs = epsg ? " srsName=\"EPSG:" + std::to_string(*epsg) + "\"" : "";
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<core:CityModel xmlns:core=\"http://www.opengis.net/citygml/2.0\"\n"
        << "                xmlns:bldg=\"http://www.opengis.net/citygml/building/2.0\"\n"
        << "                xmlns:gml=\"http://www.opengis.net/gml\">\n";
    if (!model.buildings.empty()) {
        double lo[3] = {INFINITY, INFINITY, INFINITY}, hi[3] = {-INFINITY, -INFINITY, -INFINITY};
        for (const auto& b : model.buildings) {
            for (const auto& p : b.footprint.ring) {
                lo[0] = std::min(lo[0], p.x);
                lo[1] = std::min(lo[1], p.y);
                hi[0] = std::max(hi[0], p.x);
                hi[1] = std::max(hi[1], p.y);
            }
            lo[2] = std::min(lo[2], b.base);
            hi[2] = std::max(hi[2], b.top);
        }
        out << "  <gml:boundedBy>\n"
            << "    <gml:Envelope" << srs << " srsDimension=\"3\">\n"
            << "      <gml:lowerCorner>" << detail::num(lo[0]) << ' ' << detail::num(lo[1]) << ' '
            << detail::num(lo[2]) << "</gml:lowerCorner>\n"
            << "      <gml:upperCorner>" << detail::num(hi[0]) << ' ' << detail::num(hi[1]) << ' '
            << detail::num(hi[2]) << "</gml:upperCorner>\n"
            << "    </gml:Envelope>\n"
            << "  </gml:boundedBy>\n";
    }
    for (const auto& b : model.buildings) {
        const auto& ring = b.footprint.ring;
        const std::size_t n = ring.size();
        out << "  <core:cityObjectMember>\n"
            << "    <bldg:Building gml:id=\"building_" << b.id << "\">\n"
            << "      <bldg:measuredHeight uom=\"m\">" << detail::num(b.top - b.base) << "</bldg:measuredHeight>\n"
            << "      <bldg:lod1Solid>\n"
            << "        <gml:Solid" << srs << ">\n"
            << "          <gml:exterior>\n"
            << "            <gml:CompositeSurface>\n";
        const std::string indent(14, ' ');
        std::vector< Vec3 > face;
        for (std::size_t i = n; i-- > 0;)
            face.push_back({ring[i].x, ring[i].y, b.base});
        detail::write_gml_polygon(out, face, indent);
        face.clear();
        for (const auto& p : ring)
            face.push_back({p.x, p.y, b.top});
        detail::write_gml_polygon(out, face, indent);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = ring[i];
            const auto& q = ring[(i + 1) % n];
            detail::write_gml_polygon(
                out, {{p.x, p.y, b.base}, {q.x, q.y, b.base}, {q.x, q.y, b.top}, {p.x, p.y, b.top}}, indent);
        }
        out << "            </gml:CompositeSurface>\n"
            << "          </gml:exterior>\n"
            << "        </gml:Solid>\n"
            << "      </bldg:lod1Solid>\n"
            << "    </bldg:Building>\n"
            << "  </core:cityObjectMember>\n";
    }
    out << "</core:CityModel>\n";
}

inline void write_citygml(const CityModel& model, const std::filesystem::path& path,
                          std::optional< int > epsg = std::nullopt)
{
    auto out = detail::open_for_write(path);
    write_citygml(model, out, epsg);
    detail::finish(out, path);
}

} // namespace b3d

#endif // B3D_RECON_IO_HPP
