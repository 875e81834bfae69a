// b3d command-line tool. Every subcommand logs line-delimited JSON to stderr
// and exits 0 on success, 1 on internal errors and 2 on usage/input errors.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "b3d/b3d.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct Log {
    std::string cmd;

    void emit(const char* level, ojson fields) const
    {
        ojson line{{"level", level}, {"cmd", cmd}};
        for (auto& [k, v] : fields.items())
            line[k] = v;
        std::cerr << line.dump() << '\n';
    }
    void info(ojson fields) const { emit("info", std::move(fields)); }
    void warn(ojson fields) const { emit("warning", std::move(fields)); }
};

/// JSON config files. Top-level scalars apply to the active subcommand; a
/// top-level object applies to the subcommand it is named after.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(std::string section) : section_(std::move(section)) {}

    std::string to_config(const CLI::App* app, bool, bool, std::string) const override
    {
        ojson j;
        for (const auto* opt : app->get_options())
            if (opt->count() > 0 && !opt->get_lnames().empty())
                j[opt->get_lnames().front()] = opt->as< std::string >();
        return j.dump(2);
    }

    std::vector< CLI::ConfigItem > from_config(std::istream& in) const override
    {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object())
            throw CLI::ConversionError("config must be a JSON object");
        std::vector< CLI::ConfigItem > items;
        for (auto& [key, value] : j.items()) {
            if (value.is_object()) {
                for (auto& [k, v] : value.items())
                    items.push_back(item({key}, k, v));
            } else if (!section_.empty()) {
                items.push_back(item({section_}, key, value));
            }
        }
        return items;
    }

private:
    static CLI::ConfigItem item(std::vector< std::string > parents, std::string name, const nlohmann::json& v)
    {
        std::replace(name.begin(), name.end(), '_', '-');
        CLI::ConfigItem it;
        it.parents = std::move(parents);
        it.name = std::move(name);
        auto scalar = [](const nlohmann::json& x) { return x.is_string() ? x.get< std::string >() : x.dump(); };
        if (v.is_array())
            for (const auto& x : v)
                it.inputs.push_back(scalar(x));
        else
            it.inputs.push_back(scalar(v));
        return it;
    }

    std::string section_;
};

unsigned default_workers()
{
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written by index; the first failing index is rethrown.
template < typename Fn >
void parallel_for(std::size_t n, unsigned workers, Fn fn)
{
    workers = std::max(1u, std::min< unsigned >(workers, unsigned(std::max< std::size_t >(n, 1))));
    std::vector< std::exception_ptr > errors(n);
    std::atomic< std::size_t > next{0};
    auto body = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        body();
    } else {
        std::vector< std::thread > pool;
        for (unsigned t = 0; t < workers; ++t)
            pool.emplace_back(body);
        for (auto& th : pool)
            th.join();
    }
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

b3d::Geotransform geo_or_default(const b3d::Raster& r)
{
    return r.geo ? *r.geo : b3d::Geotransform{0.0, double(r.height()), 1.0, 1.0};
}

void write_json_file(const fs::path& path, const ojson& j)
{
    std::ofstream out(path);
    if (!out)
        b3d::fail(b3d::ErrorKind::Io, "cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out)
        b3d::fail(b3d::ErrorKind::Io, "failed writing " + path.string());
}

void ensure_dir(const fs::path& dir)
{
    if (dir.empty())
        return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        b3d::fail(b3d::ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file) { ensure_dir(file.parent_path()); }

/// Image raster -> H x W x 3 model input scaled by `scale`.
b3d::Grid< double > model_input(const b3d::Raster& img, double scale)
{
    const std::size_t h = img.height(), w = img.width(), c = img.channels();
    if (c > 4)
        b3d::fail(b3d::ErrorKind::Shape, "image must have 1 to 4 channels");
    b3d::Grid< double > out({h, w, 3});
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t k = 0; k < 3; ++k) {
            // gray and gray+alpha replicate the first band; alpha is ignored
            const std::size_t src = c >= 3 ? k : 0;
            out[i * 3 + k] = img.grid[i * c + src] * scale;
        }
    return out;
}

/// Edge-replicating pad of an H x W (x C) grid to ph x pw.
b3d::Grid< double > pad_edge(const b3d::Grid< double >& g, std::size_t ph, std::size_t pw)
{
    const std::size_t h = g.dim(0), w = g.dim(1), c = g.rank() == 3 ? g.dim(2) : 1;
    b3d::Grid< double > out(g.rank() == 3 ? b3d::Extents{ph, pw, c} : b3d::Extents{ph, pw});
    for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x)
            for (std::size_t k = 0; k < c; ++k)
                out[(y * pw + x) * c + k] = g[(std::min(y, h - 1) * w + std::min(x, w - 1)) * c + k];
    return out;
}

std::size_t round_up8(std::size_t v) { return (v + 7) / 8 * 8; }

b3d::BuildingMask read_mask(const fs::path& path)
{
    return b3d::threshold_mask(b3d::read_raster(path), 0.5);
}

void write_mask(const b3d::BuildingMask& m, const std::optional< b3d::Geotransform >& geo, const fs::path& path)
{
    const bool image = b3d::format_from_path(path) != b3d::RasterFormat::Asc;
    b3d::Raster r{b3d::Grid< double >({m.height(), m.width()}), geo, std::nullopt};
    for (std::size_t i = 0; i < r.grid.size(); ++i)
        r.grid[i] = m.grid[i] ? (image ? 255.0 : 1.0) : 0.0;
    b3d::write_raster(r, path);
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateArgs {
    std::string image, weights, oracle_dsm, out;
    std::size_t tile = 512, overlap = 64;
    double sigma = 2.0;
    double image_scale = 1.0 / 255.0;
    unsigned workers = default_workers();
};

int run_estimate(const EstimateArgs& a, const Log& log)
{
    if (a.oracle_dsm.empty() && (a.image.empty() || a.weights.empty()))
        b3d::fail(b3d::ErrorKind::Domain, "estimate needs --image and --weights, or --oracle-dsm");
    std::optional< b3d::Raster > oracle, image;
    std::optional< b3d::SffdeParams< double > > params;
    if (!a.oracle_dsm.empty()) {
        oracle = b3d::read_raster(a.oracle_dsm);
        if (oracle->channels() != 1)
            b3d::fail(b3d::ErrorKind::Shape, "oracle DSM must be single-band");
    }
    if (!a.image.empty())
        image = b3d::read_raster(a.image);
    if (oracle && image && (oracle->height() != image->height() || oracle->width() != image->width()))
        b3d::fail(b3d::ErrorKind::Shape, "image and oracle DSM shapes differ");
    if (!oracle) {
        params = b3d::load_weights< double >(a.weights);
    }
    const b3d::Raster& ref = oracle ? *oracle : *image;
    const std::size_t h = ref.height(), w = ref.width();
    const auto plan = b3d::plan_tiles(h, w, a.tile, a.overlap);
    log.info({{"event", "plan"},
              {"height", h},
              {"width", w},
              {"tile", a.tile},
              {"overlap", a.overlap},
              {"tiles", plan.anchors.size()},
              {"mode", oracle ? "oracle-dsm" : "model"}});

    std::optional< b3d::Grid< double > > input;
    if (!oracle)
        input = model_input(*image, a.image_scale);
    std::vector< b3d::Patch > patches(plan.anchors.size());
    parallel_for(plan.anchors.size(), a.workers, [&](std::size_t i) {
        const auto anchor = plan.anchors[i];
        if (oracle) {
            patches[i] = {anchor, b3d::crop(oracle->grid, anchor.row, anchor.col, plan.tile_h, plan.tile_w)};
            return;
        }
        const auto tile = b3d::crop(*input, anchor.row, anchor.col, plan.tile_h, plan.tile_w);
        const auto padded = pad_edge(tile, round_up8(plan.tile_h), round_up8(plan.tile_w));
        const auto pred = b3d::sffde_forward(padded, *params);
        patches[i] = {anchor, b3d::crop(pred, 0, 0, plan.tile_h, plan.tile_w)};
    });
    auto fused = b3d::fuse_patches(patches, h, w);
    fused = b3d::gaussian_filter(fused, a.sigma);
    if (!fused.grid.all_finite())
        b3d::fail(b3d::ErrorKind::Numeric, "estimate produced non-finite elevations");
    fused.geo = ref.geo;
    ensure_parent(a.out);
    b3d::write_raster(fused, a.out);
    log.info({{"event", "written"}, {"path", a.out}, {"sigma", a.sigma}});
    return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
    std::string pred, gt, mask, out;
    bool rmse_all = false;
    unsigned workers = default_workers();
};

int run_evaluate(const EvaluateArgs& a, const Log& log)
{
    const auto pred = b3d::read_raster(a.pred);
    const auto gt = b3d::read_raster(a.gt);
    std::optional< b3d::BuildingMask > mask;
    if (!a.mask.empty())
        mask = read_mask(a.mask);
    const b3d::Grid< std::uint8_t >* valid = mask ? &mask->grid : nullptr;
    b3d::check_eval_shapes(pred.grid, gt.grid, valid);

    // row bands accumulated independently; ExactSum makes the merge order-free
    const std::size_t h = gt.height(), row = gt.grid.size() / std::max< std::size_t >(h, 1);
    const std::size_t bands = std::max< std::size_t >(1, std::min< std::size_t >(h, a.workers));
    std::vector< b3d::MetricsAccumulator > acc(bands);
    parallel_for(bands, a.workers, [&](std::size_t b) {
        const std::size_t r0 = h * b / bands, r1 = h * (b + 1) / bands;
        for (std::size_t i = r0 * row; i < r1 * row; ++i) {
            if (valid && (*valid)[i] == 0)
                continue;
            if (pred.is_nodata(pred.grid[i]) || gt.is_nodata(gt.grid[i]))
                acc[b].exclude();
            else
                acc[b].add(pred.grid[i], gt.grid[i]);
        }
    });
    for (std::size_t b = 1; b < bands; ++b)
        acc[0].merge(acc[b]);
    const auto report = b3d::to_json(acc[0].report({a.rmse_all}));
    if (!a.out.empty())
        write_json_file(a.out, report);
    std::cout << report.dump() << '\n';
    log.info({{"event", "evaluated"}, {"n_valid", report["n_valid"]}});
    return kExitOk;
}

// ---------------------------------------------------------------------------
// extract-mask

struct ExtractArgs {
    std::string labels, out, geojson;
    std::optional< double > cls, threshold;
    double min_area = 20.0;
    double simplify = 0.0;
    int connectivity = 8;
};

int run_extract(const ExtractArgs& a, const Log& log)
{
    if (a.cls.has_value() == a.threshold.has_value())
        b3d::fail(b3d::ErrorKind::Domain, "give exactly one of --class or --threshold");
    const auto labels = b3d::read_raster(a.labels);
    const auto mask = a.cls ? b3d::binarize(labels, *a.cls) : b3d::threshold_mask(labels, *a.threshold);
    std::size_t n_on = 0;
    for (auto v : mask.grid.flat())
        n_on += v != 0;
    if (!a.out.empty())
        write_mask(mask, labels.geo, a.out);
    ojson summary{{"event", "mask"}, {"pixels", n_on}};
    if (!a.geojson.empty()) {
        const auto lab = b3d::connected_components(mask, a.connectivity);
        auto polys = b3d::extract_contours(lab, geo_or_default(labels), a.min_area, a.connectivity);
        if (a.simplify > 0)
            for (auto& p : polys)
                p = b3d::simplify(p, a.simplify);
        std::ofstream out(a.geojson);
        if (!out)
            b3d::fail(b3d::ErrorKind::Io, "cannot open " + a.geojson + " for writing");
        out << b3d::polygons_to_json(polys).dump(2) << '\n';
        summary["polygons"] = polys.size();
        summary["components"] = lab.count;
    }
    log.info(summary);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructArgs {
    std::string dsm, mask, image, out_dir;
    std::vector< std::string > emit{"ply", "obj", "citygml"};
    double sigma = 0.0;
    std::string stat = "median";
    double base = 0.0;
    double min_area = 20.0;
    double simplify = 0.0;
    int connectivity = 8;
    std::optional< int > epsg;
    bool ascii_ply = false;
};

int run_reconstruct(const ReconstructArgs& a, const Log& log)
{
    bool emit_ply = false, emit_obj = false, emit_gml = false;
    for (const auto& e : a.emit) {
        if (e == "ply")
            emit_ply = true;
        else if (e == "obj")
            emit_obj = true;
        else if (e == "citygml")
            emit_gml = true;
        else if (e != "none")
            b3d::fail(b3d::ErrorKind::Domain, "unknown --emit value '" + e + "'");
    }
    const auto stat = b3d::parse_height_stat(a.stat);
    const auto dsm = b3d::read_raster(a.dsm);
    if (dsm.channels() != 1)
        b3d::fail(b3d::ErrorKind::Shape, "DSM must be single-band");
    const auto mask = read_mask(a.mask);
    if (mask.height() != dsm.height() || mask.width() != dsm.width())
        b3d::fail(b3d::ErrorKind::Shape, "DSM and mask shapes differ");
    std::optional< b3d::Raster > image;
    if (!a.image.empty())
        image = b3d::read_raster(a.image);
    const auto geo = geo_or_default(dsm);
    ensure_dir(a.out_dir);

    ojson warnings = ojson::array();
    const auto lab = b3d::connected_components(mask, a.connectivity);
    if (lab.count == 0)
        warnings.push_back("mask has no building pixels");
    auto elev = b3d::mask_elevation(dsm, mask);
    elev = b3d::smooth_within_components(elev, lab, a.sigma);
    log.info({{"event", "masked"}, {"components", lab.count}, {"sigma", a.sigma}});

    auto polys = b3d::extract_contours(lab, geo, a.min_area, a.connectivity);
    if (polys.size() < std::size_t(lab.count))
        warnings.push_back(std::to_string(std::size_t(lab.count) - polys.size()) +
                           " component(s) below --min-area skipped");
    if (a.simplify > 0)
        for (auto& p : polys)
            p = b3d::simplify(p, a.simplify);
    const auto model = b3d::extrude_lod1(polys, elev, lab, a.base, stat);
    if (model.dropped > 0)
        warnings.push_back(std::to_string(model.dropped) + " building(s) with top <= base dropped");

    const auto cloud = b3d::to_point_cloud(elev, geo, image ? &*image : nullptr);
    const auto mesh = b3d::heightfield_mesh(elev, mask, geo, a.base);

    ojson outputs = ojson::object();
    if (emit_ply) {
        b3d::write_ply(cloud, fs::path(a.out_dir) / "points.ply", !a.ascii_ply);
        outputs["ply"] = "points.ply";
    }
    if (emit_obj) {
        b3d::write_obj(mesh, fs::path(a.out_dir) / "mesh.obj");
        outputs["obj"] = "mesh.obj";
    }
    if (emit_gml) {
        b3d::write_citygml(model, fs::path(a.out_dir) / "buildings.gml", a.epsg);
        outputs["citygml"] = "buildings.gml";
    }

    ojson buildings = ojson::array();
    for (const auto& b : model.buildings) {
        const auto c = b3d::centroid(b.footprint.ring);
        buildings.push_back({{"id", b.id},
                             {"base", b.base},
                             {"top", b.top},
                             {"height", b.top - b.base},
                             {"footprint_area", b3d::signed_area(b.footprint.ring)},
                             {"centroid", {c.x, c.y}},
                             {"vertices", b.footprint.ring.size()}});
    }
    ojson manifest{{"n_components", lab.count},
                   {"n_buildings", model.buildings.size()},
                   {"n_dropped", model.dropped},
                   {"n_points", cloud.points.size()},
                   {"n_mesh_vertices", mesh.vertices.size()},
                   {"n_mesh_triangles", mesh.triangles.size()},
                   {"sigma", a.sigma},
                   {"stat", a.stat},
                   {"base", a.base},
                   {"buildings", buildings},
                   {"outputs", outputs},
                   {"warnings", warnings}};
    write_json_file(fs::path(a.out_dir) / "manifest.json", manifest);
    for (const auto& w : warnings)
        log.warn({{"message", w}});
    log.info({{"event", "reconstructed"}, {"buildings", model.buildings.size()}});
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck / train-toy / init-weights / synth

struct GradcheckArgs {
    std::uint64_t seed = 1;
    std::size_t seeds = 10;
    std::optional< double > tol;
    std::vector< std::string > ops;
    std::string out;
};

int run_gradcheck(const GradcheckArgs& a, const Log& log)
{
    const auto ops = a.ops.empty() ? b3d::grad_check_ops() : a.ops;
    ojson results = ojson::array();
    bool all_passed = true;
    for (const auto& op : ops) {
        const double tol = a.tol.value_or(b3d::default_tolerance(op));
        double worst = 0;
        std::size_t failed = 0;
        for (std::size_t k = 0; k < a.seeds; ++k) {
            const auto r = b3d::grad_check(op, a.seed + k, tol);
            worst = std::max(worst, r.max_rel_error);
            failed += !r.passed;
        }
        all_passed = all_passed && failed == 0;
        results.push_back({{"op", op},
                           {"tolerance", tol},
                           {"seeds", a.seeds},
                           {"max_rel_error", worst},
                           {"failed", failed},
                           {"passed", failed == 0}});
    }
    const ojson report{{"seed", a.seed}, {"passed", all_passed}, {"ops", results}};
    if (!a.out.empty())
        write_json_file(a.out, report);
    std::cout << report.dump() << '\n';
    if (!all_passed) {
        log.emit("error", {{"kind", "gradcheck"}, {"message", "gradient check exceeded tolerance"}});
        return kExitInternal;
    }
    return kExitOk;
}

struct TrainArgs {
    std::uint64_t seed = 42;
    std::size_t iters = 200;
    double lr = 0.01;
    double momentum = 0.9;
    std::string out, weights_out;
};

int run_train(const TrainArgs& a, const Log& log)
{
    b3d::ToyTrainConfig cfg;
    cfg.learning_rate = a.lr;
    cfg.momentum = a.momentum;
    const auto r = b3d::train_toy(cfg, a.seed, a.iters);
    const auto& L = r.trace.losses;
    const std::size_t q = std::max< std::size_t >(1, L.size() / 4);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < q && i < L.size(); ++i) {
        first += L[i];
        last += L[L.size() - 1 - i];
    }
    const ojson trace{{"seed", a.seed},
                      {"iters", a.iters},
                      {"learning_rate", a.lr},
                      {"momentum", a.momentum},
                      {"first_quartile_mean", first / double(q)},
                      {"last_quartile_mean", last / double(q)},
                      {"losses", L}};
    if (!a.out.empty())
        write_json_file(a.out, trace);
    else
        std::cout << trace.dump() << '\n';
    if (!a.weights_out.empty()) {
        ensure_parent(a.weights_out);
        b3d::save_weights(r.params, a.weights_out);
    }
    log.info({{"event", "trained"},
              {"iters", a.iters},
              {"first_quartile_mean", trace["first_quartile_mean"]},
              {"last_quartile_mean", trace["last_quartile_mean"]}});
    return kExitOk;
}

struct InitArgs {
    std::uint64_t seed = 0;
    b3d::SffdeConfig config;
    std::string out;
};

int run_init(const InitArgs& a, const Log& log)
{
    a.config.validate();
    ensure_parent(a.out);
    b3d::save_weights(b3d::init_params< double >(a.config, a.seed), a.out);
    log.info({{"event", "weights"}, {"path", a.out}, {"seed", a.seed}});
    return kExitOk;
}

struct SynthArgs {
    std::uint64_t seed = 42;
    b3d::SceneSpec spec;
    std::string out_dir;
};

int run_synth(SynthArgs a, const Log& log)
{
    ensure_dir(a.out_dir);
    const auto scene = b3d::make_synthetic_scene(a.seed, a.spec);
    const fs::path dir(a.out_dir);
    b3d::write_asc(scene.dsm, dir / "dsm.asc");
    write_mask(scene.mask, scene.dsm.geo, dir / "mask.asc");
    auto img = b3d::render_synthetic_image(scene, a.spec.max_height, a.seed);
    for (auto& v : img.flat())
        v *= 255.0;
    b3d::write_png(b3d::Raster{std::move(img), std::nullopt, std::nullopt}, dir / "image.png", 8);
    ojson prisms = ojson::array();
    for (const auto& p : scene.prisms) {
        const auto& g = *scene.dsm.geo;
        prisms.push_back({{"row", p.row},
                          {"col", p.col},
                          {"rows", p.rows},
                          {"cols", p.cols},
                          {"height", p.height},
                          {"centroid",
                           {g.x_at(double(p.col) + double(p.cols) / 2), g.y_at(double(p.row) + double(p.rows) / 2)}}});
    }
    const auto& g = *scene.dsm.geo;
    write_json_file(dir / "truth.json", ojson{{"seed", a.seed},
                                              {"height", a.spec.height},
                                              {"width", a.spec.width},
                                              {"geotransform",
                                               {{"origin_x", g.origin_x},
                                                {"origin_y", g.origin_y},
                                                {"pixel_size_x", g.pixel_size_x},
                                                {"pixel_size_y", g.pixel_size_y}}},
                                              {"prisms", prisms}});
    log.info({{"event", "scene"}, {"prisms", scene.prisms.size()}, {"dir", a.out_dir}});
    return kExitOk;
}

int report_error(const std::string& cmd, const std::string& kind, const std::string& message, int code)
{
    ojson line{{"level", "error"}, {"cmd", cmd}, {"kind", kind}, {"message", message}, {"exit_code", code}};
    std::cerr << line.dump() << '\n';
    return code;
}

std::string active_subcommand(int argc, char** argv, const std::vector< std::string >& names)
{
    for (int i = 1; i < argc; ++i)
        if (std::find(names.begin(), names.end(), argv[i]) != names.end())
            return argv[i];
    return {};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"b3d: elevation estimation and LOD1 building reconstruction"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "b3d 0.1.0");

    EstimateArgs est;
    auto* c_est = app.add_subcommand("estimate", "Tile, predict and fuse an elevation raster");
    c_est->add_option("--image", est.image, "Input image (png, pgm, asc)")->check(CLI::ExistingFile);
    c_est->add_option("--weights", est.weights, "Weights manifest (JSON)")->check(CLI::ExistingFile);
    c_est->add_option("--oracle-dsm", est.oracle_dsm, "Pass a ground-truth DSM through instead of the model")
        ->check(CLI::ExistingFile);
    c_est->add_option("--out", est.out, "Output elevation raster (.asc)")->required();
    c_est->add_option("--tile", est.tile, "Tile size in pixels")->capture_default_str()->check(CLI::PositiveNumber);
    c_est->add_option("--overlap", est.overlap, "Tile overlap in pixels")->capture_default_str();
    c_est->add_option("--sigma", est.sigma, "Gaussian smoothing sigma in pixels")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    c_est->add_option("--image-scale", est.image_scale, "Multiplier applied to image samples")->capture_default_str();
    c_est->add_option("--workers", est.workers, "Tile worker threads")->check(CLI::PositiveNumber);

    EvaluateArgs ev;
    auto* c_ev = app.add_subcommand("evaluate", "Rel, RMSE, RMSE(log) and delta accuracies");
    c_ev->add_option("--pred", ev.pred, "Predicted elevation raster")->required()->check(CLI::ExistingFile);
    c_ev->add_option("--gt", ev.gt, "Ground-truth elevation raster")->required()->check(CLI::ExistingFile);
    c_ev->add_option("--mask", ev.mask, "Optional validity mask (>= 0.5 is valid)")->check(CLI::ExistingFile);
    c_ev->add_option("--out", ev.out, "Also write the report here");
    c_ev->add_flag("--rmse-all", ev.rmse_all, "RMSE over all in-mask pixels, including non-positive ones");
    c_ev->add_option("--workers", ev.workers, "Worker threads")->check(CLI::PositiveNumber);

    ExtractArgs ex;
    auto* c_ex = app.add_subcommand("extract-mask", "Building mask from a label or score raster");
    c_ex->add_option("--labels", ex.labels, "Label or score raster")->required()->check(CLI::ExistingFile);
    c_ex->add_option("--class", ex.cls, "Building class value");
    c_ex->add_option("--threshold", ex.threshold, "Score threshold (values >= t are building)");
    c_ex->add_option("--out", ex.out, "Output mask raster");
    c_ex->add_option("--geojson", ex.geojson, "Write footprint polygons as GeoJSON");
    c_ex->add_option("--min-area", ex.min_area, "Minimum component area in pixels")->capture_default_str();
    c_ex->add_option("--simplify", ex.simplify, "Douglas-Peucker tolerance in world units")->capture_default_str();
    c_ex->add_option("--connectivity", ex.connectivity, "4 or 8")->capture_default_str()->check(CLI::IsMember({4, 8}));

    ReconstructArgs rc;
    auto* c_rc = app.add_subcommand("reconstruct", "Point cloud, mesh and LOD1 CityGML from a DSM and mask");
    auto* o_dsm = c_rc->add_option("--dsm", rc.dsm, "Elevation raster")->check(CLI::ExistingFile);
    auto* o_oracle =
        c_rc->add_option("--oracle-dsm", rc.dsm, "Ground-truth DSM used in place of a model estimate")
            ->check(CLI::ExistingFile);
    o_dsm->excludes(o_oracle);
    c_rc->add_option("--mask", rc.mask, "Building mask raster")->required()->check(CLI::ExistingFile);
    c_rc->add_option("--image", rc.image, "Optional color image for the point cloud")->check(CLI::ExistingFile);
    c_rc->add_option("--out-dir", rc.out_dir, "Output directory")->required();
    c_rc->add_option("--emit", rc.emit, "Artifacts: ply, obj, citygml or none")->delimiter(',')->capture_default_str();
    c_rc->add_option("--sigma", rc.sigma, "Per-building Gaussian smoothing sigma in pixels")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    c_rc->add_option("--stat", rc.stat, "LOD1 top height statistic")
        ->capture_default_str()
        ->check(CLI::IsMember({"median", "mean", "max"}));
    c_rc->add_option("--base", rc.base, "Base height")->capture_default_str();
    c_rc->add_option("--min-area", rc.min_area, "Minimum footprint area in pixels")->capture_default_str();
    c_rc->add_option("--simplify", rc.simplify, "Douglas-Peucker tolerance in world units")->capture_default_str();
    c_rc->add_option("--connectivity", rc.connectivity, "4 or 8")->capture_default_str()->check(CLI::IsMember({4, 8}));
    c_rc->add_option("--epsg", rc.epsg, "EPSG code for the CityGML srsName");
    c_rc->add_flag("--ascii-ply", rc.ascii_ply, "Write ASCII instead of binary PLY");

    GradcheckArgs gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Analytic vs central finite-difference gradients");
    c_gc->add_option("--seed", gc.seed, "First seed")->capture_default_str();
    c_gc->add_option("--seeds", gc.seeds, "Number of consecutive seeds per op")->capture_default_str();
    c_gc->add_option("--tol", gc.tol, "Override the per-op relative tolerance");
    c_gc->add_option("--op", gc.ops, "Operator(s) to check (default: all)")
        ->check(CLI::IsMember(b3d::grad_check_ops()));
    c_gc->add_option("--out", gc.out, "Also write the report here");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train-toy", "SGD with momentum on synthetic 32x32 scenes");
    c_tr->add_option("--seed", tr.seed, "Seed")->capture_default_str();
    c_tr->add_option("--iters", tr.iters, "Iterations")->capture_default_str()->check(CLI::PositiveNumber);
    c_tr->add_option("--lr", tr.lr, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    c_tr->add_option("--momentum", tr.momentum, "Momentum")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    c_tr->add_option("--out", tr.out, "Trace JSON path (stdout when omitted)");
    c_tr->add_option("--weights-out", tr.weights_out, "Save trained weights manifest");

    InitArgs in;
    auto* c_in = app.add_subcommand("init-weights", "Write freshly initialized weights");
    c_in->add_option("--seed", in.seed, "Seed")->capture_default_str();
    c_in->add_option("--out", in.out, "Manifest path (.json); the buffer goes next to it")->required();
    c_in->add_option("--heads", in.config.heads, "Attention heads")->capture_default_str();
    c_in->add_option("--d-model", in.config.d_model, "Attention width")->capture_default_str();
    c_in->add_option("--width-high", in.config.width_high, "High-resolution feature width")->capture_default_str();
    c_in->add_option("--width-low", in.config.width_low, "Low-resolution feature width")->capture_default_str();

    SynthArgs sy;
    auto* c_sy = app.add_subcommand("synth", "Write a seeded synthetic prism scene");
    c_sy->add_option("--seed", sy.seed, "Seed")->capture_default_str();
    c_sy->add_option("--height", sy.spec.height, "Rows")->capture_default_str();
    c_sy->add_option("--width", sy.spec.width, "Columns")->capture_default_str();
    c_sy->add_option("--prisms", sy.spec.n_prisms, "Number of prisms")->capture_default_str();
    c_sy->add_option("--min-side", sy.spec.min_side, "Minimum prism side in pixels")->capture_default_str();
    c_sy->add_option("--max-side", sy.spec.max_side, "Maximum prism side in pixels")->capture_default_str();
    c_sy->add_option("--min-height", sy.spec.min_height, "Minimum prism height")->capture_default_str();
    c_sy->add_option("--max-height", sy.spec.max_height, "Maximum prism height")->capture_default_str();
    c_sy->add_option("--pixel-size", sy.spec.geo.pixel_size_x, "Ground sample distance")->capture_default_str();
    c_sy->add_option("--out-dir", sy.out_dir, "Output directory")->required();

    std::vector< std::string > names;
    for (const auto* sub : app.get_subcommands({}))
        names.push_back(sub->get_name());
    const std::string section = active_subcommand(argc, argv, names);
    app.config_formatter(std::make_shared< JsonConfig >(section));
    app.set_config("--config", "", "JSON config; command-line flags take precedence");
    app.allow_config_extras(CLI::config_extras_mode::error);
    for (auto* sub : app.get_subcommands({}))
        sub->fallthrough();

    const Log log{section.empty() ? "b3d" : section};
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error(log.cmd, "usage", e.what(), kExitUsage);
    }

    try {
        if (c_est->parsed())
            return run_estimate(est, log);
        if (c_ev->parsed())
            return run_evaluate(ev, log);
        if (c_ex->parsed())
            return run_extract(ex, log);
        if (c_rc->parsed())
            return run_reconstruct(rc, log);
        if (c_gc->parsed())
            return run_gradcheck(gc, log);
        if (c_tr->parsed())
            return run_train(tr, log);
        if (c_in->parsed())
            return run_init(in, log);
        if (c_sy->parsed()) {
            sy.spec.geo.pixel_size_y = sy.spec.geo.pixel_size_x;
            return run_synth(sy, log);
        }
    } catch (const b3d::Error& e) {
        // Numeric failures are ours; everything else traces back to the input.
        const int code = e.kind() == b3d::ErrorKind::Numeric ? kExitInternal : kExitUsage;
        return report_error(log.cmd, std::string(b3d::to_string(e.kind())), e.what(), code);
    } catch (const std::exception& e) {
        return report_error(log.cmd, "internal", e.what(), kExitInternal);
    }
    return report_error(log.cmd, "usage", "no subcommand", kExitUsage);
}
