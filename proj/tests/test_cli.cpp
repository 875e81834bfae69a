#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "b3d/png_io.hpp"
#include "b3d/raster.hpp"
#include "b3d/grad.hpp"
#include "cli_runner.hpp"
#include "citygml_check.hpp"
#include "test_util.hpp"

using namespace b3d;
using b3d::test::CliResult;
using b3d::test::slurp;
using b3d::test::TempDir;
using json = nlohmann::json;

namespace {

CliResult cli(const TempDir& d, std::vector< std::string > args)
{
    return b3d::test::run_cli(args, d.path());
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

std::optional< json > find_event(const CliResult& r, const std::string& event)
{
    for (const auto& line : r.log())
        if (line.value("event", "") == event)
            return line;
    return std::nullopt;
}

void write_grid_asc(const std::filesystem::path& p, std::size_t h, std::size_t w, std::vector< double > v)
{
    write_asc(Raster{Grid< double >({h, w}, std::move(v)), Geotransform{0, double(h), 1, 1}, std::nullopt}, p);
}

void expect_error_line(const CliResult& r, int code)
{
    EXPECT_EQ(r.code, code) << r.err;
    const auto log = r.log();
    ASSERT_FALSE(log.empty());
    const auto& last = log.back();
    EXPECT_EQ(last["level"], "error");
    EXPECT_TRUE(last.contains("kind"));
    EXPECT_TRUE(last.contains("message"));
    EXPECT_EQ(last["exit_code"], code);
    for (const auto& line : log)
        EXPECT_NE(line["level"], "parse-failure") << line.dump();
}

} // namespace

TEST(Cli, UsageErrors)
{
    TempDir d("cli_usage");
    expect_error_line(cli(d, {}), 2);
    expect_error_line(cli(d, {"frobnicate"}), 2);
    expect_error_line(cli(d, {"evaluate", "--pred", (d / "nope.asc").string(), "--gt", (d / "nope.asc").string()}), 2);
    expect_error_line(cli(d, {"train-toy", "--iters", "-3"}), 2);
    EXPECT_EQ(cli(d, {"--help"}).code, 0);
}

TEST(Cli, EvaluateFixtureAndIdentity)
{
    TempDir d("cli_eval");
    write_grid_asc(d / "gt.asc", 1, 2, {1, 2});
    write_grid_asc(d / "pred.asc", 1, 2, {2, 4});
    const auto r = cli(d, {"evaluate", "--pred", (d / "pred.asc").string(), "--gt", (d / "gt.asc").string(), "--out",
                           (d / "report.json").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    EXPECT_NEAR(j["rel"].get< double >(), 1.0, 1e-12);
    EXPECT_NEAR(j["rmse"].get< double >(), std::sqrt(2.5), 1e-12);
    EXPECT_NEAR(j["rmse_log"].get< double >(), std::log(2.0), 1e-12);
    EXPECT_EQ(j["delta1"], 0.0);
    EXPECT_EQ(j["n_valid"], 2);
    EXPECT_EQ(read_json(d / "report.json"), j);

    const auto same = cli(d, {"evaluate", "--pred", (d / "gt.asc").string(), "--gt", (d / "gt.asc").string()});
    ASSERT_EQ(same.code, 0);
    EXPECT_EQ(json::parse(same.out)["delta1"], 1.0);

    write_grid_asc(d / "zeros.asc", 1, 2, {0, 0});
    expect_error_line(cli(d, {"evaluate", "--pred", (d / "zeros.asc").string(), "--gt", (d / "gt.asc").string()}), 2);
}

TEST(Cli, EvaluateIsIndependentOfWorkers)
{
    TempDir d("cli_eval_workers");
    Rng rng(5);
    write_asc(Raster{b3d::test::random_grid({64, 64}, rng, 0.5, 30), std::nullopt, std::nullopt}, d / "a.asc", 17);
    write_asc(Raster{b3d::test::random_grid({64, 64}, rng, 0.5, 30), std::nullopt, std::nullopt}, d / "b.asc", 17);
    std::string first;
    for (const char* w : {"1", "3", "8"}) {
        const auto r = cli(d, {"evaluate", "--pred", (d / "a.asc").string(), "--gt", (d / "b.asc").string(),
                               "--workers", w});
        ASSERT_EQ(r.code, 0);
        if (first.empty())
            first = r.out;
        EXPECT_EQ(r.out, first);
    }
}

TEST(Cli, EstimateOracleTilingAndDeterminism)
{
    TempDir d("cli_est");
    Rng rng(6);
    write_asc(Raster{b3d::test::random_grid({600, 600}, rng, 0, 40), Geotransform{10, 20, 0.5, 0.5}, std::nullopt},
              d / "dsm.asc");
    const auto src = read_asc(d / "dsm.asc");
    const auto r = cli(d, {"estimate", "--oracle-dsm", (d / "dsm.asc").string(), "--out", (d / "out.asc").string(),
                           "--sigma", "0"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto plan = find_event(r, "plan");
    ASSERT_TRUE(plan);
    EXPECT_EQ((*plan)["tiles"], 4);
    EXPECT_EQ(slurp(d / "out.asc"), slurp(d / "dsm.asc"));
    EXPECT_EQ(read_asc(d / "out.asc").geo, src.geo);

    const auto a = cli(d, {"estimate", "--oracle-dsm", (d / "dsm.asc").string(), "--out", (d / "s1.asc").string(),
                           "--workers", "1"});
    const auto b = cli(d, {"estimate", "--oracle-dsm", (d / "dsm.asc").string(), "--out", (d / "s4.asc").string(),
                           "--workers", "4"});
    ASSERT_EQ(a.code, 0);
    ASSERT_EQ(b.code, 0);
    EXPECT_EQ(slurp(d / "s1.asc"), slurp(d / "s4.asc"));
}

TEST(Cli, EstimateWithModel)
{
    TempDir d("cli_model");
    ASSERT_EQ(cli(d, {"init-weights", "--seed", "3", "--out", (d / "w/weights.json").string()}).code, 0);
    Rng rng(9);
    Grid< double > img({40, 40, 3});
    for (auto& v : img.flat())
        v = double(rng.uniform_int(0, 255));
    write_png(Raster{img, std::nullopt, std::nullopt}, d / "img.png");
    std::string first;
    for (const char* w : {"1", "2"}) {
        const auto out = d / (std::string("e") + w + ".asc");
        const auto r = cli(d, {"estimate", "--image", (d / "img.png").string(), "--weights",
                               (d / "w/weights.json").string(), "--out", out.string(), "--tile", "24", "--overlap",
                               "8", "--workers", w});
        ASSERT_EQ(r.code, 0) << r.err;
        EXPECT_EQ((*find_event(r, "plan"))["tiles"], 4);
        const auto e = read_asc(out);
        EXPECT_EQ(e.grid.shape(), (Extents{40, 40}));
        if (first.empty())
            first = slurp(out);
        EXPECT_EQ(slurp(out), first);
    }

    const auto single = cli(d, {"estimate", "--image", (d / "img.png").string(), "--weights",
                                (d / "w/weights.json").string(), "--out", (d / "one.asc").string(), "--tile", "40", "--overlap", "8"});
    ASSERT_EQ(single.code, 0);
    EXPECT_EQ((*find_event(single, "plan"))["tiles"], 1);

    std::ofstream(d / "bad.json") << "{\"config\": 3";
    expect_error_line(cli(d, {"estimate", "--image", (d / "img.png").string(), "--weights", (d / "bad.json").string(),
                              "--out", (d / "x.asc").string()}),
                      2);
    expect_error_line(cli(d, {"estimate", "--image", (d / "img.png").string(), "--weights",
                              (d / "w/weights.json").string(), "--out", (d / "x.asc").string(), "--tile", "8",
                              "--overlap", "8"}),
                      2);
}

TEST(Cli, SynthReconstructRoundTrip)
{
    TempDir d("cli_recon");
    ASSERT_EQ(cli(d, {"synth", "--seed", "11", "--out-dir", (d / "scene").string()}).code, 0);
    const auto truth = read_json(d / "scene/truth.json");
    ASSERT_EQ(truth["prisms"].size(), 10u);

    const auto r = cli(d, {"reconstruct", "--oracle-dsm", (d / "scene/dsm.asc").string(), "--mask",
                           (d / "scene/mask.asc").string(), "--image", (d / "scene/image.png").string(), "--out-dir",
                           (d / "out").string(), "--epsg", "32632"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_json(d / "out/manifest.json");
    EXPECT_EQ(m["n_buildings"], 10);
    EXPECT_EQ(m["n_components"], 10);
    EXPECT_TRUE(m["warnings"].empty());
    for (const auto& p : truth["prisms"]) {
        bool found = false;
        for (const auto& b : m["buildings"])
            if (std::abs(b["centroid"][0].get< double >() - p["centroid"][0].get< double >()) < 1e-9 &&
                std::abs(b["centroid"][1].get< double >() - p["centroid"][1].get< double >()) < 1e-9) {
                EXPECT_EQ(b["top"], p["height"]);
                found = true;
            }
        EXPECT_TRUE(found) << p.dump();
    }
    const auto gml = b3d::test::check_citygml(slurp(d / "out/buildings.gml"));
    ASSERT_TRUE(gml.ok()) << gml.errors.front();
    EXPECT_EQ(gml.buildings.size(), 10u);
    EXPECT_EQ(gml.srs_name, "EPSG:32632");
    EXPECT_TRUE(std::filesystem::exists(d / "out/points.ply"));
    EXPECT_TRUE(std::filesystem::exists(d / "out/mesh.obj"));
    EXPECT_NE(slurp(d / "out/points.ply").find("property uchar red"), std::string::npos);

    const auto none = cli(d, {"reconstruct", "--dsm", (d / "scene/dsm.asc").string(), "--mask",
                              (d / "scene/mask.asc").string(), "--out-dir", (d / "none").string(), "--emit", "none"});
    ASSERT_EQ(none.code, 0);
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(d / "none"))
        ++files;
    EXPECT_EQ(files, 1u);
    EXPECT_TRUE(read_json(d / "none/manifest.json")["outputs"].empty());

    expect_error_line(cli(d, {"reconstruct", "--dsm", (d / "scene/dsm.asc").string(), "--oracle-dsm",
                              (d / "scene/dsm.asc").string(), "--mask", (d / "scene/mask.asc").string(), "--out-dir",
                              (d / "x").string()}),
                      2);
}

TEST(Cli, ReconstructEmptyMaskWarns)
{
    TempDir d("cli_empty");
    write_grid_asc(d / "dsm.asc", 4, 4, std::vector< double >(16, 5.0));
    write_grid_asc(d / "mask.asc", 4, 4, std::vector< double >(16, 0.0));
    const auto r = cli(d, {"reconstruct", "--dsm", (d / "dsm.asc").string(), "--mask", (d / "mask.asc").string(),
                           "--out-dir", (d / "out").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_json(d / "out/manifest.json");
    EXPECT_EQ(m["n_buildings"], 0);
    EXPECT_FALSE(m["warnings"].empty());
    bool warned = false;
    for (const auto& line : r.log())
        warned = warned || line["level"] == "warning";
    EXPECT_TRUE(warned);
    const auto gml = b3d::test::check_citygml(slurp(d / "out/buildings.gml"));
    EXPECT_TRUE(gml.ok());
    EXPECT_TRUE(gml.buildings.empty());
}

TEST(Cli, ExtractMask)
{
    TempDir d("cli_extract");
    std::vector< double > labels(100, 0.0);
    for (std::size_t y = 2; y < 8; ++y)
        for (std::size_t x = 1; x < 6; ++x)
            labels[y * 10 + x] = 6;
    write_grid_asc(d / "labels.asc", 10, 10, labels);
    const auto r = cli(d, {"extract-mask", "--labels", (d / "labels.asc").string(), "--class", "6", "--out",
                           (d / "mask.png").string(), "--geojson", (d / "poly.json").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto mask = read_png(d / "mask.png");
    EXPECT_EQ(mask.grid(3, 3), 255.0);
    EXPECT_EQ(mask.grid(0, 0), 0.0);
    const auto gj = read_json(d / "poly.json");
    ASSERT_EQ(gj["features"].size(), 1u);
    EXPECT_EQ(gj["features"][0]["properties"]["area"], 30.0);
    expect_error_line(cli(d, {"extract-mask", "--labels", (d / "labels.asc").string()}), 2);
}

TEST(Cli, GradcheckExitPaths)
{
    TempDir d("cli_grad");
    const auto ok = cli(d, {"gradcheck", "--seeds", "2"});
    ASSERT_EQ(ok.code, 0) << ok.err;
    const auto j = json::parse(ok.out);
    EXPECT_TRUE(j["passed"].get< bool >());
    EXPECT_EQ(j["ops"].size(), grad_check_ops().size());

    const auto bad = cli(d, {"gradcheck", "--seeds", "1", "--op", "esg", "--tol", "1e-15"});
    EXPECT_EQ(bad.code, 1);
    EXPECT_FALSE(json::parse(bad.out)["passed"].get< bool >());
    expect_error_line(cli(d, {"gradcheck", "--op", "nonsense"}), 2);
}

TEST(Cli, TrainToyTrace)
{
    TempDir d("cli_train");
    const auto r = cli(d, {"train-toy", "--iters", "12", "--out", (d / "trace.json").string(), "--weights-out",
                           (d / "w/trained.json").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = read_json(d / "trace.json");
    EXPECT_EQ(t["losses"].size(), 12u);
    EXPECT_EQ(t["seed"], 42);
    EXPECT_TRUE(std::filesystem::exists(d / "w/trained.json"));
    const auto again = cli(d, {"train-toy", "--iters", "12"});
    EXPECT_EQ(json::parse(again.out), t);
}

TEST(Cli, ConfigFilePrecedence)
{
    TempDir d("cli_config");
    std::ofstream(d / "cfg.json") << R"({"iters": 5, "seed": 7})";
    const auto r = cli(d, {"train-toy", "--config", (d / "cfg.json").string(), "--iters", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = json::parse(r.out);
    EXPECT_EQ(t["iters"], 3);
    EXPECT_EQ(t["seed"], 7);

    std::ofstream(d / "sect.json") << R"({"train-toy": {"iters": 4}})";
    const auto s = cli(d, {"train-toy", "--config", (d / "sect.json").string()});
    ASSERT_EQ(s.code, 0) << s.err;
    EXPECT_EQ(json::parse(s.out)["losses"].size(), 4u);

    std::ofstream(d / "extra.json") << R"({"bogus_key": 1})";
    expect_error_line(cli(d, {"train-toy", "--config", (d / "extra.json").string()}), 2);
    expect_error_line(cli(d, {"train-toy", "--config", (d / "missing.json").string()}), 2);
}
