#ifndef B3D_TEST_CITYGML_CHECK_HPP
#define B3D_TEST_CITYGML_CHECK_HPP

// Structural validator for the CityGML element subset the writer documents.
// Parses with Boost.PropertyTree, independent of the writer.

#include <array>
#include <cmath>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

namespace b3d::test {

struct GmlBuilding {
    std::string id;
    double measured_height = 0;
    std::size_t n_polygons = 0;
    double z_min = 0, z_max = 0;
    double wall_area = 0;
    double volume = 0; // divergence theorem over the closed surface
};

struct GmlReport {
    std::vector< GmlBuilding > buildings;
    std::vector< std::string > errors;
    std::string srs_name;

    bool ok() const { return errors.empty(); }
};

inline GmlReport check_citygml(std::istream& in)
{
    namespace pt = boost::property_tree;
    GmlReport rep;
    pt::ptree doc;
    try {
        pt::read_xml(in, doc, pt::xml_parser::trim_whitespace);
    } catch (const pt::xml_parser_error& e) {
        rep.errors.push_back(std::string("xml: ") + e.what());
        return rep;
    }
    const auto root = doc.get_child_optional("core:CityModel");
    if (!root) {
        rep.errors.push_back("root element is not core:CityModel");
        return rep;
    }
    if (root->get< std::string >("<xmlattr>.xmlns:core", "") != "http://www.opengis.net/citygml/2.0")
        rep.errors.push_back("missing CityGML 2.0 namespace");
    if (root->get< std::string >("<xmlattr>.xmlns:gml", "") != "http://www.opengis.net/gml")
        rep.errors.push_back("missing gml namespace");
    for (const auto& [tag, member] : *root) {
        if (tag == "<xmlattr>" || tag == "gml:boundedBy")
            continue;
        if (tag != "core:cityObjectMember") {
            rep.errors.push_back("unexpected element " + tag);
            continue;
        }
        const auto bld = member.get_child_optional("bldg:Building");
        if (!bld) {
            rep.errors.push_back("cityObjectMember without bldg:Building");
            continue;
        }
        GmlBuilding b;
        b.id = bld->get< std::string >("<xmlattr>.gml:id", "");
        if (b.id.empty())
            rep.errors.push_back("building without gml:id");
        b.measured_height = bld->get< double >("bldg:measuredHeight", NAN);
        if (bld->get< std::string >("bldg:measuredHeight.<xmlattr>.uom", "") != "m")
            rep.errors.push_back(b.id + ": measuredHeight without uom=m");
        const auto solid = bld->get_child_optional("bldg:lod1Solid.gml:Solid");
        if (!solid) {
            rep.errors.push_back(b.id + ": no lod1Solid/gml:Solid");
            continue;
        }
        rep.srs_name = solid->get< std::string >("<xmlattr>.srsName", "");
        const auto surf = solid->get_child_optional("gml:exterior.gml:CompositeSurface");
        if (!surf) {
            rep.errors.push_back(b.id + ": no exterior CompositeSurface");
            continue;
        }
        // closed and consistently oriented: each directed edge once, reverse present
        std::map< std::pair< std::array< double, 3 >, std::array< double, 3 > >, int > edges;
        b.z_min = INFINITY;
        b.z_max = -INFINITY;
        for (const auto& [stag, sm] : *surf) {
            if (stag != "gml:surfaceMember") {
                rep.errors.push_back(b.id + ": unexpected " + stag);
                continue;
            }
            const auto pos = sm.get_child_optional("gml:Polygon.gml:exterior.gml:LinearRing.gml:posList");
            if (!pos) {
                rep.errors.push_back(b.id + ": surfaceMember without Polygon/exterior/LinearRing/posList");
                continue;
            }
            if (pos->get< std::string >("<xmlattr>.srsDimension", "") != "3")
                rep.errors.push_back(b.id + ": posList srsDimension != 3");
            std::istringstream ss(pos->data());
            std::vector< std::array< double, 3 > > pts;
            std::array< double, 3 > p;
            while (ss >> p[0] >> p[1] >> p[2])
                pts.push_back(p);
            if (!ss.eof()) {
                rep.errors.push_back(b.id + ": posList length is not a multiple of 3");
                continue;
            }
            if (pts.size() < 4 || pts.front() != pts.back()) {
                rep.errors.push_back(b.id + ": ring not closed or too short");
                continue;
            }
            ++b.n_polygons;
            // Newell normal; its z share of the area classifies walls
            double nx = 0, ny = 0, nz = 0;
            for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
                const auto& a = pts[i];
                const auto& c = pts[i + 1];
                nx += (a[1] - c[1]) * (a[2] + c[2]);
                ny += (a[2] - c[2]) * (a[0] + c[0]);
                nz += (a[0] - c[0]) * (a[1] + c[1]);
                ++edges[{a, c}];
                b.z_min = std::min(b.z_min, a[2]);
                b.z_max = std::max(b.z_max, a[2]);
                // signed volume of the cone to the origin
                const auto& o = pts[0];
                if (i >= 1) {
                    b.volume += (o[0] * (a[1] * c[2] - a[2] * c[1]) - o[1] * (a[0] * c[2] - a[2] * c[0]) +
                                 o[2] * (a[0] * c[1] - a[1] * c[0])) /
                                6.0;
                }
            }
            const double area = 0.5 * std::sqrt(nx * nx + ny * ny + nz * nz);
            if (std::abs(nz) < 1e-9 * (1 + area))
                b.wall_area += area;
        }
        for (const auto& [e, n] : edges)
            if (n != 1 || !edges.count({e.second, e.first})) {
                rep.errors.push_back(b.id + ": surface is not closed with consistent orientation");
                break;
            }
        if (b.n_polygons < 4)
            rep.errors.push_back(b.id + ": solid has fewer than 4 faces");
        if (!(b.volume > 0))
            rep.errors.push_back(b.id + ": faces are not oriented outward (volume " + std::to_string(b.volume) + ")");
        rep.buildings.push_back(b);
    }
    return rep;
}

inline GmlReport check_citygml(const std::string& text)
{
    std::istringstream in(text);
    return check_citygml(in);
}

} // namespace b3d::test

#endif
