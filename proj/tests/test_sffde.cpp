#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "b3d/sffde.hpp"
#include "b3d/weights.hpp"
#include "oracle/naive_sffde.hpp"
#include "test_util.hpp"

using namespace b3d;
using b3d::test::max_abs_diff;
using b3d::test::random_grid;

namespace {

EsgParams< double > random_esg(std::size_t c, std::size_t d, std::size_t heads, Rng& rng)
{
    EsgParams< double > p;
    p.w_q = random_grid({c, d}, rng);
    p.w_k = random_grid({c, d}, rng);
    p.w_v = random_grid({c, d}, rng);
    p.w_out = random_grid({d, d}, rng);
    p.heads = heads;
    return p;
}

L2gParams< double > random_l2g(std::size_t ch, std::size_t cl, std::size_t d, Rng& rng, double flow_scale)
{
    L2gParams< double > p;
    p.map_high = KernelSpec< double >(1, 1, ch, d);
    p.map_high.weights = random_grid({1, 1, ch, d}, rng);
    p.map_high.bias = random_grid({d}, rng);
    p.map_low = KernelSpec< double >(1, 1, cl, d);
    p.map_low.weights = random_grid({1, 1, cl, d}, rng);
    p.map_low.bias = random_grid({d}, rng);
    p.flow = KernelSpec< double >(3, 3, 2 * d, 2);
    p.flow.weights = random_grid({3, 3, 2 * d, 2}, rng, -flow_scale, flow_scale);
    p.flow.bias = random_grid({2}, rng, -1, 1);
    return p;
}

// fixed-seed model used for the recorded forward values
SffdeParams< double > golden_params()
{
    auto p = init_params< double >(SffdeConfig{}, 2024);
    Rng fr(7);
    for (auto& v : p.l2g.flow.weights.flat())
        v = fr.uniform(-0.05, 0.05);
    for (auto& v : p.l2g.flow.bias.flat())
        v = fr.uniform(-0.5, 0.5);
    return p;
}

Grid< double > golden_image()
{
    Rng ir(99);
    Grid< double > img({16, 16, 3});
    for (auto& v : img.flat())
        v = ir.uniform();
    return img;
}

} // namespace

TEST(EsgQkv, Examples)
{
    Rng rng(1);
    const auto f = random_grid({5, 3}, rng);
    EsgParams< double > p{identity< double >(3), identity< double >(3), identity< double >(3), 1, identity< double >(3)};
    const auto qkv = esg_qkv(f, p);
    EXPECT_EQ(qkv.q, f);
    EXPECT_EQ(qkv.k, f);
    EXPECT_EQ(qkv.v, f);
    const auto z = esg_qkv(Grid< double >({5, 3}), random_esg(3, 4, 1, rng));
    EXPECT_EQ(z.q, Grid< double >({5, 4}));

    EsgParams< double > pv{identity< double >(2), identity< double >(2),
                           Grid< double >({2, 2}, std::vector< double >{2, 0, 0, 3}), 1, identity< double >(2)};
    EXPECT_EQ(esg_qkv(Grid< double >({1, 2}, std::vector< double >{1, 0}), pv).v,
              Grid< double >({1, 2}, std::vector< double >{2, 0}));
    EXPECT_THROW(esg_qkv(Grid< double >({5, 2}), p), Error);
}

TEST(EsgAttend, Examples)
{
    Rng rng(2);
    const auto v1 = random_grid({1, 4}, rng);
    EXPECT_EQ(esg_attend(random_grid({1, 4}, rng), random_grid({1, 4}, rng), v1), v1);

    const auto v = random_grid({6, 3}, rng);
    const auto u = esg_attend(Grid< double >({6, 3}), random_grid({6, 3}, rng), v);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double mean = 0;
            for (std::size_t r = 0; r < 6; ++r)
                mean += v(r, j) / 6;
            EXPECT_NEAR(u(i, j), mean, 1e-15);
        }

    // q k^T row 0 = [0, ln 3]
    const Grid< double > q({2, 1}, std::vector< double >{1, 0});
    const Grid< double > k({2, 1}, std::vector< double >{0, std::log(3.0)});
    const Grid< double > vv({2, 2}, std::vector< double >{4, -8, 12, 16});
    const auto o = esg_attend(q, k, vv);
    EXPECT_NEAR(o(0, 0), 0.25 * 4 + 0.75 * 12, 1e-14);
    EXPECT_NEAR(o(0, 1), 0.25 * -8 + 0.75 * 16, 1e-14);
}

TEST(EsgAttend, ConvexCombinationProperty)
{
    Rng rng(12);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng.uniform_int(0, 12), d = 1 + rng.uniform_int(0, 5);
        const auto q = random_grid({n, d}, rng, -3, 3), k = random_grid({n, d}, rng, -3, 3);
        const auto v = random_grid({n, d}, rng);
        const auto o = esg_attend(q, k, v);
        for (std::size_t j = 0; j < d; ++j) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t r = 0; r < n; ++r) {
                lo = std::min(lo, v(r, j));
                hi = std::max(hi, v(r, j));
            }
            for (std::size_t i = 0; i < n; ++i) {
                EXPECT_GE(o(i, j), lo - 1e-12);
                EXPECT_LE(o(i, j), hi + 1e-12);
            }
        }
    }
}

TEST(EsgAttend, PermutationEquivarianceProperty)
{
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.uniform_int(0, 8), c = 1 + rng.uniform_int(0, 4), d = 1 + rng.uniform_int(0, 4);
        const auto f = random_grid({n, c}, rng);
        const auto p = random_esg(c, d, 1, rng);
        std::vector< std::size_t > perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n - 1; i > 0; --i)
            std::swap(perm[i], perm[rng.uniform_int(0, std::int64_t(i))]);
        Grid< double > fp({n, c});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j)
                fp(i, j) = f(perm[i], j);
        const auto a = esg_qkv(f, p), b = esg_qkv(fp, p);
        const auto oa = esg_attend(a.q, a.k, a.v), ob = esg_attend(b.q, b.k, b.v);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                EXPECT_EQ(ob(i, j), oa(perm[i], j));
    }
}

TEST(MultiHeadEsg, Examples)
{
    Rng rng(3);
    const auto f = random_grid({7, 4}, rng);
    auto p = random_esg(4, 6, 1, rng);
    p.w_out = identity< double >(6);
    const auto qkv = esg_qkv(f, p);
    EXPECT_EQ(multi_head_esg(f, p), esg_attend(qkv.q, qkv.k, qkv.v));

    p.w_out = Grid< double >({6, 6});
    EXPECT_EQ(multi_head_esg(f, p), Grid< double >({7, 6}));

    // N = 1 collapses each head's softmax to 1
    auto p2 = random_esg(4, 6, 2, rng);
    const auto f1 = random_grid({1, 4}, rng);
    EXPECT_LT(max_abs_diff(multi_head_esg(f1, p2), matmul(esg_qkv(f1, p2).v, p2.w_out)), 1e-14);

    p2.heads = 4;
    EXPECT_THROW(multi_head_esg(f, p2), Error);
}

TEST(EsgProject, Examples)
{
    const Grid< double > ones({2}, 1.0), zeros({2}, 0.0);
    EXPECT_EQ(esg_project(Grid< double >({3, 2}, 4.0), identity< double >(2), ones, zeros), Grid< double >({3, 2}));
    const auto r = esg_project(Grid< double >({1, 2}, std::vector< double >{1, 3}), identity< double >(2), ones, zeros);
    EXPECT_EQ(r(0, 0), 0.0);
    EXPECT_NEAR(r(0, 1), 1.0, 1e-5);
    Rng rng(4);
    const auto y = esg_project(random_grid({9, 5}, rng), random_grid({5, 5}, rng), random_grid({5}, rng),
                               random_grid({5}, rng));
    for (auto v : y.flat())
        EXPECT_GE(v, 0.0);
}

TEST(PixelLattice, Coordinates)
{
    const auto l = PixelLattice< double >::make(3, 4);
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            EXPECT_EQ(l.coords(y, x, 0), double(x));
            EXPECT_EQ(l.coords(y, x, 1), double(y));
        }
}

TEST(GenFlow, Examples)
{
    Rng rng(5);
    auto p = random_l2g(3, 4, 2, rng, 0.1);
    const auto f_h = random_grid({6, 5, 3}, rng), f_l = random_grid({3, 2, 4}, rng);
    EXPECT_EQ(gen_flow(f_h, f_l, p).s.shape(), (Extents{6, 5, 2}));
    auto pz = p;
    pz.flow.weights = Grid< double >(p.flow.weights.shape());
    pz.flow.bias = Grid< double >({2});
    EXPECT_EQ(gen_flow(f_h, f_l, pz).s, Grid< double >({6, 5, 2}));

    // 1 x 1 grids: only the centre tap of the 3 x 3 flow kernel sees data
    const auto h1 = random_grid({1, 1, 3}, rng), l1 = random_grid({1, 1, 4}, rng);
    const auto s = gen_flow(h1, l1, p).s;
    for (std::size_t o = 0; o < 2; ++o) {
        double hand = p.flow.bias[o];
        for (std::size_t c = 0; c < 2; ++c) {
            double low = p.map_low.bias[c], high = p.map_high.bias[c];
            for (std::size_t i = 0; i < 4; ++i)
                low += l1[i] * p.map_low.weights(0, 0, i, c);
            for (std::size_t i = 0; i < 3; ++i)
                high += h1[i] * p.map_high.weights(0, 0, i, c);
            hand += low * p.flow.weights(1, 1, c, o) + high * p.flow.weights(1, 1, 2 + c, o);
        }
        EXPECT_NEAR(s[o], hand, 1e-14);
    }
    EXPECT_THROW(gen_flow(f_l, f_h, p), Error);
}

TEST(Warp, ZeroFlowEqualsResize)
{
    Rng rng(6);
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + rng.uniform_int(0, 5), w = 1 + rng.uniform_int(0, 5);
        const std::size_t oh = h + rng.uniform_int(0, 8), ow = w + rng.uniform_int(0, 8);
        const auto f = random_grid({h, w, 3}, rng);
        FlowField< double > s{Grid< double >({oh, ow, 2})};
        EXPECT_LT(max_abs_diff(warp(f, s, {oh, ow, 3}), bilinear_resize(f, {oh, ow, 3})), 1e-9);
    }
}

TEST(Warp, HandExample)
{
    // upsampled row [5, 7], shift one pixel right
    const Grid< double > f({1, 2, 1}, std::vector< double >{5, 7});
    FlowField< double > s{Grid< double >({1, 2, 2}, std::vector< double >{1, 0, 1, 0})};
    EXPECT_EQ(warp(f, s, {1, 2, 1}), Grid< double >({1, 2, 1}, std::vector< double >{7, 0}));
}

TEST(Warp, InRangeSamplesStayInRangeProperty)
{
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const auto f = random_grid({3, 3, 2}, rng);
        const Shape2D out{6, 7, 2};
        Grid< double > s({6, 7, 2});
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t x = 0; x < 7; ++x) {
                s(y, x, 0) = rng.uniform(-double(x), 6.0 - double(x));
                s(y, x, 1) = rng.uniform(-double(y), 5.0 - double(y));
            }
        const auto up = bilinear_resize(f, out);
        const auto r = warp(f, FlowField< double >{s}, out);
        for (std::size_t c = 0; c < 2; ++c) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t i = c; i < up.size(); i += 2) {
                lo = std::min(lo, up[i]);
                hi = std::max(hi, up[i]);
            }
            for (std::size_t i = c; i < r.size(); i += 2) {
                EXPECT_GE(r[i], lo - 1e-12);
                EXPECT_LE(r[i], hi + 1e-12);
            }
        }
        const auto k = warp(Grid< double >({3, 3, 2}, 4.5), FlowField< double >{s}, out);
        for (auto v : k.flat())
            EXPECT_NEAR(v, 4.5, 1e-12);
    }
}

TEST(Warp, MatchesTentSumOracle)
{
    Rng rng(8);
    for (int t = 0; t < 30; ++t) {
        const auto up = random_grid({5, 6, 2}, rng);
        const auto s = random_grid({5, 6, 2}, rng, -2.5, 2.5);
        const auto lib = sample_at_flow(up, FlowField< double >{s});
        const auto ref = oracle::tent_warp(oracle::from_grid(up), oracle::from_grid(s));
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 6; ++x)
                for (std::size_t c = 0; c < 2; ++c)
                    EXPECT_NEAR(lib(y, x, c), ref[y][x][c], 1e-13);
    }
}

TEST(L2gRegister, Examples)
{
    Rng rng(9);
    auto p = random_l2g(3, 4, 3, rng, 0.2);
    const auto f_h = random_grid({4, 4, 3}, rng), f_l = random_grid({2, 2, 4}, rng);

    auto zero = p;
    for (auto* k : {&zero.map_high, &zero.map_low, &zero.flow}) {
        k->weights = Grid< double >(k->weights.shape());
        k->bias = Grid< double >(k->bias.shape());
    }
    EXPECT_EQ(l2g_register(f_h, f_l, zero), Grid< double >({4, 4, 3}));

    auto one = p;
    one.map_high = KernelSpec< double >::identity(3);
    one.map_low.bias = Grid< double >({3});
    EXPECT_EQ(l2g_register(f_h, Grid< double >({2, 2, 4}), one), f_h);

    const auto lib = l2g_register(f_h, f_l, p);
    const auto ref = oracle::register_features(oracle::from_grid(f_h), oracle::from_grid(f_l), p);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                EXPECT_NEAR(lib(y, x, c), ref[y][x][c], 1e-12);
}

TEST(BerHu, Examples)
{
    Rng rng(10);
    const auto g = random_grid({4, 4}, rng);
    EXPECT_EQ(berhu_loss(g, g), 0.0);
    EXPECT_NEAR(berhu_loss(Grid< double >({1, 2}, std::vector< double >{0, 0}),
                           Grid< double >({1, 2}, std::vector< double >{0, 5})),
                6.5, 1e-12);
    for (double r : {0.3, 1.0, 7.5}) {
        auto p = g;
        for (auto& v : p.flat())
            v += r;
        EXPECT_NEAR(berhu_loss(p, g), 2.6 * r, 1e-12 * r);
    }
    EXPECT_THROW(berhu_loss(g, Grid< double >({4, 3})), Error);
    const Grid< double > none({4, 4});
    EXPECT_THROW(berhu_loss(g, g, {}, &none), Error);
}

TEST(BerHu, ContinuityAtThreshold)
{
    Rng rng(11);
    for (int t = 0; t < 1000; ++t) {
        const double c = rng.uniform(1e-3, 100);
        const double quad = (c * c + c * c) / (2 * c);
        EXPECT_LT(std::abs(berhu_value(c, c) - quad), 1e-12 * std::max(1.0, c));
        EXPECT_LT(std::abs(berhu_value(-c, c) - quad), 1e-12 * std::max(1.0, c));
    }
}

TEST(BerHu, NonNegativeAndZeroOnlyAtEquality)
{
    Rng rng(12);
    for (int t = 0; t < 200; ++t) {
        const auto p = random_grid({3, 5}, rng), g = random_grid({3, 5}, rng);
        EXPECT_GT(berhu_loss(p, g), 0.0);
    }
    Grid< double > p({2, 2}, std::vector< double >{1, 2, 3, 4}), g = p;
    g[3] = 100;
    const Grid< double > mask({2, 2}, std::vector< double >{1, 1, 1, 0});
    EXPECT_EQ(berhu_loss(p, g, {}, &mask), 0.0);
}

TEST(SffdeForward, ShapeAndDeterminism)
{
    const SffdeConfig cfg{2, 8, 4, 8, 0.2};
    const auto p = init_params< double >(cfg, 3);
    Rng rng(1);
    for (auto [h, w] : {std::pair{8, 8}, {16, 24}, {32, 8}}) {
        const auto img = random_grid({std::size_t(h), std::size_t(w), 3}, rng, 0, 1);
        const auto a = sffde_forward(img, p);
        EXPECT_EQ(a.shape(), (Extents{std::size_t(h), std::size_t(w)}));
        EXPECT_EQ(a, sffde_forward(img, p));
        EXPECT_TRUE(a.all_finite());
    }
    EXPECT_THROW(sffde_forward(Grid< double >({12, 16, 3}), p), Error);
    EXPECT_THROW(sffde_forward(Grid< double >({16, 16, 2}), p), Error);
}

TEST(SffdeForward, AgreesWithStraightLineOracle)
{
    Rng rng(77);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto p = init_params< double >({2, 8, 6, 8, 0.2}, seed);
        for (auto& v : p.l2g.flow.weights.flat())
            v = rng.uniform(-0.1, 0.1);
        const auto img = random_grid({16, 24, 3}, rng, 0, 1);
        const auto lib = sffde_forward(img, p);
        const auto ref = oracle::forward(img, p);
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 24; ++x)
                EXPECT_NEAR(lib(y, x), ref[y][x], 1e-12);
    }
}

TEST(SffdeForward, GoldenValues16x16)
{
    // recorded from oracle::forward on the fixed-seed model
    const double golden_sum = -22.349025192934914;
    const double golden_00 = -0.63450943111782399, golden_79 = -0.5272043857701596;
    const double golden_1515 = 1.2390467500595355, golden_312 = -0.84912271678077555;

    const auto p = golden_params();
    const auto img = golden_image();
    const auto out = sffde_forward(img, p);
    double sum = 0;
    for (auto v : out.flat())
        sum += v;
    EXPECT_NEAR(sum, golden_sum, 1e-11);
    EXPECT_NEAR(out(0, 0), golden_00, 1e-12);
    EXPECT_NEAR(out(7, 9), golden_79, 1e-12);
    EXPECT_NEAR(out(15, 15), golden_1515, 1e-12);
    EXPECT_NEAR(out(3, 12), golden_312, 1e-12);

    const auto ref = oracle::forward(img, p);
    EXPECT_NEAR(ref[7][9], golden_79, 1e-12);
}

TEST(Init, SeededAndShaped)
{
    const SffdeConfig cfg{};
    const auto a = init_params< double >(cfg, 5), b = init_params< double >(cfg, 5), c = init_params< double >(cfg, 6);
    EXPECT_EQ(a.esg.w_q, b.esg.w_q);
    EXPECT_NE(a.esg.w_q, c.esg.w_q);
    EXPECT_EQ(a.encoder.conv1.weights.shape(), (Extents{3, 3, 3, cfg.width_high}));
    EXPECT_EQ(a.l2g.flow.weights, Grid< double >({3, 3, 2 * cfg.d_model, 2}));
    EXPECT_THROW(init_params< double >({3, 64, 32, 64, 0.2}, 1), Error);
    EXPECT_THROW(init_params< double >({8, 64, 32, 64, 0.0}, 1), Error);
}

TEST(Weights, RoundTrip)
{
    b3d::test::TempDir dir("weights");
    const auto p = golden_params();
    save_weights(p, dir / "model.json");
    EXPECT_TRUE(std::filesystem::exists(dir / "model.bin"));
    const auto q = load_weights< double >(dir / "model.json");
    EXPECT_EQ(q.config.heads, p.config.heads);
    std::vector< Grid< double > > a, b;
    auto pc = p;
    auto qc = q;
    for_each_tensor(pc, [&](const std::string&, Grid< double >& g) { a.push_back(g); });
    for_each_tensor(qc, [&](const std::string&, Grid< double >& g) { b.push_back(g); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(sffde_forward(golden_image(), q), sffde_forward(golden_image(), p));
}

TEST(Weights, RejectsBadFiles)
{
    b3d::test::TempDir dir("weights_bad");
    EXPECT_THROW(load_weights< double >(dir / "missing.json"), Error);
    {
        std::ofstream(dir / "junk.json") << "{not json";
    }
    EXPECT_THROW(load_weights< double >(dir / "junk.json"), Error);

    save_weights(init_params< double >({2, 8, 4, 8, 0.2}, 1), dir / "m.json");
    std::filesystem::resize_file(dir / "m.bin", 64);
    try {
        load_weights< double >(dir / "m.json");
        FAIL() << "truncated buffer accepted";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Parse);
    }
}
