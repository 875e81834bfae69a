#ifndef B3D_WEIGHTS_HPP
#define B3D_WEIGHTS_HPP

// Weights are stored as a JSON manifest plus a raw little-endian buffer:
//
//   model.json  {"format": "b3d-weights", "version": 1, "buffer": "model.bin",
//                "config": {...}, "tensors": [{"name", "shape", "dtype",
//                "offset", "nbytes"}, ...]}
//   model.bin   concatenated row-major f64 tensors
//
// The buffer path in the manifest is relative to the manifest's directory.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "b3d/error.hpp"
#include "b3d/sffde.hpp"

namespace b3d {

inline nlohmann::json to_json(const SffdeConfig& c)
{
    return {{"heads", c.heads},
            {"d_model", c.d_model},
            {"width_high", c.width_high},
            {"width_low", c.width_low},
            {"c_fraction", c.c_fraction}};
}

/// Missing keys keep their defaults.
inline SffdeConfig config_from_json(const nlohmann::json& j)
{
    SffdeConfig c;
    try {
        c.heads = j.value("heads", c.heads);
        c.d_model = j.value("d_model", c.d_model);
        c.width_high = j.value("width_high", c.width_high);
        c.width_low = j.value("width_low", c.width_low);
        c.c_fraction = j.value("c_fraction", c.c_fraction);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Calls fn(name, grid) for every parameter tensor in a fixed order.
template < typename Params, typename Fn >
void for_each_tensor(Params& p, Fn&& fn)
{
    auto kernel = [&](const std::string& name, auto& k) {
        fn(name + ".weight", k.weights);
        fn(name + ".bias", k.bias);
    };
    kernel("encoder.conv1", p.encoder.conv1);
    kernel("encoder.conv2", p.encoder.conv2);
    kernel("encoder.conv3", p.encoder.conv3);
    kernel("encoder.conv4", p.encoder.conv4);
    fn("esg.w_q", p.esg.w_q);
    fn("esg.w_k", p.esg.w_k);
    fn("esg.w_v", p.esg.w_v);
    fn("esg.w_out", p.esg.w_out);
    fn("projection.fc", p.projection.fc);
    fn("projection.gamma", p.projection.gamma);
    fn("projection.beta", p.projection.beta);
    kernel("l2g.map_high", p.l2g.map_high);
    kernel("l2g.map_low", p.l2g.map_low);
    kernel("l2g.flow", p.l2g.flow);
    kernel("head", p.head);
}

namespace detail {

inline void write_f64_le(std::ofstream& out, double v)
{
    std::uint64_t bits = std::bit_cast< std::uint64_t >(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i)
        bytes[i] = static_cast< unsigned char >(bits >> (8 * i));
    out.write(reinterpret_cast< const char* >(bytes), 8);
}

inline double read_f64_le(const unsigned char* p)
{
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= std::uint64_t(p[i]) << (8 * i);
    return std::bit_cast< double >(bits);
}

} // namespace detail

template < typename T >
void save_weights(const SffdeParams< T >& p, const std::filesystem::path& manifest_path)
{
    namespace fs = std::filesystem;
    fs::path buffer_path = manifest_path;
    buffer_path.replace_extension(".bin");

    std::ofstream bin(buffer_path, std::ios::binary);
    if (!bin)
        fail(ErrorKind::Io, "cannot open " + buffer_path.string() + " for writing");
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    for_each_tensor(p, [&](const std::string& name, const Grid< T >& g) {
        for (T v : g.flat())
            detail::write_f64_le(bin, double(v));
        const std::uint64_t nbytes = g.size() * 8;
        tensors.push_back({{"name", name}, {"shape", g.shape()}, {"dtype", "f64"}, {"offset", offset},
                           {"nbytes", nbytes}});
        offset += nbytes;
    });
    if (!bin)
        fail(ErrorKind::Io, "failed writing " + buffer_path.string());

    nlohmann::json manifest = {{"format", "b3d-weights"},
                               {"version", 1},
                               {"buffer", buffer_path.filename().string()},
                               {"config", to_json(p.config)},
                               {"tensors", tensors}};
    std::ofstream js(manifest_path);
    if (!js)
        fail(ErrorKind::Io, "cannot open " + manifest_path.string() + " for writing");
    js << manifest.dump(2) << '\n';
}

namespace detail {

template < typename T >
SffdeParams< T > load_weights_unchecked(const std::filesystem::path& manifest_path)
{
    std::ifstream js(manifest_path);
    if (!js)
        fail(ErrorKind::Io, "cannot open weights manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "weights manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "b3d-weights")
        fail(ErrorKind::Parse, "weights manifest: unexpected format tag");

    const auto cfg = config_from_json(manifest.value("config", nlohmann::json::object()));
    // Build a correctly shaped skeleton, then overwrite every tensor.
    auto p = init_params< T >(cfg, 0);

    const auto buffer_path = manifest_path.parent_path() / manifest.at("buffer").get< std::string >();
    std::ifstream bin(buffer_path, std::ios::binary);
    if (!bin)
        fail(ErrorKind::Io, "cannot open weights buffer " + buffer_path.string());
    std::vector< unsigned char > buf((std::istreambuf_iterator< char >(bin)), std::istreambuf_iterator< char >());

    std::map< std::string, nlohmann::json > entries;
    for (const auto& t : manifest.at("tensors"))
        entries[t.at("name").get< std::string >()] = t;

    for_each_tensor(p, [&](const std::string& name, Grid< T >& g) {
        auto it = entries.find(name);
        if (it == entries.end())
            fail(ErrorKind::Parse, "weights manifest is missing tensor " + name);
        const auto& e = it->second;
        const auto shape = e.at("shape").get< Extents >();
        if (shape != g.shape())
            fail(ErrorKind::Parse, "tensor " + name + " has shape " + to_string(shape) + ", expected " +
                                       to_string(g.shape()));
        if (e.value("dtype", "") != "f64")
            fail(ErrorKind::Parse, "tensor " + name + ": only f64 is supported");
        const auto offset = e.at("offset").get< std::uint64_t >();
        if (offset + g.size() * 8 > buf.size())
            fail(ErrorKind::Parse, "tensor " + name + " extends past the end of the buffer");
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = T(detail::read_f64_le(buf.data() + offset + 8 * i));
        if (!g.all_finite())
            fail(ErrorKind::Parse, "tensor " + name + " contains non-finite values");
    });
    return p;
}

} // namespace detail

template < typename T = double >
SffdeParams< T > load_weights(const std::filesystem::path& manifest_path)
{
    try {
        return detail::load_weights_unchecked< T >(manifest_path);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "weights manifest " + manifest_path.string() + ": " + e.what());
    }
}

} // namespace b3d

#endif // B3D_WEIGHTS_HPP
