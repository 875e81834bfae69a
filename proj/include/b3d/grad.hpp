#ifndef B3D_GRAD_HPP
#define B3D_GRAD_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "b3d/error.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/recon.hpp"
#include "b3d/rng.hpp"
#include "b3d/sffde.hpp"

namespace b3d {

// ---------------------------------------------------------------------------
// Backward passes. Each takes the forward inputs plus the upstream gradient
// of a scalar objective with respect to the forward output.

/// d(mean berHu)/d(pred), holding c fixed.
template < typename T >
Grid< T > backward_berhu(const Grid< T >& pred, const Grid< T >& gt, const BerHuConfig& cfg,
                         const Grid< T >* valid = nullptr)
{
    const auto th = berhu_threshold(pred, gt, cfg, valid);
    Grid< T > g(pred.shape());
    const T n = T(th.n_valid);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        const T x = pred[i] - gt[i];
        if (std::abs(x) <= th.c || th.c == T(0))
            g[i] = T((x > 0) - (x < 0)) / n;
        else
            g[i] = x / (th.c * n);
    }
    return g;
}

template < typename T >
struct EsgGrads {
    Grid< T > dq, dk, dv;
};

template < typename T >
EsgGrads< T > backward_esg(const Grid< T >& q, const Grid< T >& k, const Grid< T >& v, const Grid< T >& upstream)
{
    const auto p = softmax_rows(matmul(q, transpose(k)));
    if (upstream.shape() != Extents{q.dim(0), v.dim(1)})
        fail(ErrorKind::Shape, "backward_esg: upstream shape mismatch");
    EsgGrads< T > g;
    g.dv = matmul(transpose(p), upstream);
    const auto dp = matmul(upstream, transpose(v));
    Grid< T > ds(p.shape());
    for (std::size_t i = 0; i < p.dim(0); ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < p.dim(1); ++j)
            dot += p(i, j) * dp(i, j);
        for (std::size_t j = 0; j < p.dim(1); ++j)
            ds(i, j) = p(i, j) * (dp(i, j) - dot);
    }
    g.dq = matmul(ds, k);
    g.dk = matmul(transpose(ds), q);
    return g;
}

template < typename T >
struct SampleGrads {
    Grid< T > d_src;
    Grid< T > d_flow;
};

/// Reverse of sample_at_flow. Taps are chosen exactly as in the forward pass,
/// so at integer sample coordinates the flow gradient is the left derivative.
template < typename T >
SampleGrads< T > backward_sample(const Grid< T >& src, const FlowField< T >& flow, const Grid< T >& upstream)
{
    if (upstream.shape() != src.shape())
        fail(ErrorKind::Shape, "backward_sample: upstream shape mismatch");
    const std::ptrdiff_t h = src.dim(0), w = src.dim(1);
    const std::size_t d = src.dim(2);
    SampleGrads< T > g{Grid< T >(src.shape()), Grid< T >(flow.s.shape())};
    auto inside = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) { return yy >= 0 && yy < h && xx >= 0 && xx < w; };
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            const T sx = T(x) + flow.s(y, x, 0);
            const T sy = T(y) + flow.s(y, x, 1);
            const T x0f = std::ceil(sx) - T(1);
            const T y0f = std::ceil(sy) - T(1);
            if (!(x0f >= T(-1) && x0f <= T(w - 1) && y0f >= T(-1) && y0f <= T(h - 1)))
                continue;
            const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(x0f);
            const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(y0f);
            const T fx = sx - x0f, fy = sy - y0f;
            const T wts[4] = {(T(1) - fx) * (T(1) - fy), fx * (T(1) - fy), (T(1) - fx) * fy, fx * fy};
            const T dwdx[4] = {-(T(1) - fy), T(1) - fy, -fy, fy};
            const T dwdy[4] = {-(T(1) - fx), -fx, T(1) - fx, fx};
            const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
            const T* up = &upstream(y, x, 0);
            T gx = 0, gy = 0;
            for (int t = 0; t < 4; ++t) {
                if (!inside(ys[t], xs[t]))
                    continue;
                const T* sp = &src(ys[t], xs[t], 0);
                T* dp = &g.d_src(ys[t], xs[t], 0);
                T dot = 0;
                for (std::size_t c = 0; c < d; ++c) {
                    dp[c] += wts[t] * up[c];
                    dot += up[c] * sp[c];
                }
                gx += dwdx[t] * dot;
                gy += dwdy[t] * dot;
            }
            g.d_flow(y, x, 0) = gx;
            g.d_flow(y, x, 1) = gy;
        }
    }
    return g;
}

/// Transpose of bilinear_resize: scatters `upstream` back onto the source grid.
template < typename T >
Grid< T > backward_resize(const Grid< T >& upstream, const Extents& src_shape)
{
    const std::size_t h = src_shape.at(0), w = src_shape.at(1), c = src_shape.size() == 3 ? src_shape[2] : 1;
    const std::size_t oh = upstream.dim(0), ow = upstream.dim(1);
    if (h == oh && w == ow)
        return upstream.reshaped(src_shape);
    Grid< T > g(src_shape);
    const auto ty = linear_taps(h, oh);
    const auto tx = linear_taps(w, ow);
    for (std::size_t y = 0; y < oh; ++y) {
        const T fy = T(ty[y].frac);
        for (std::size_t x = 0; x < ow; ++x) {
            const T fx = T(tx[x].frac);
            const T* up = upstream.data().data() + (y * ow + x) * c;
            T* p00 = g.data().data() + (ty[y].lo * w + tx[x].lo) * c;
            T* p01 = g.data().data() + (ty[y].lo * w + tx[x].hi) * c;
            T* p10 = g.data().data() + (ty[y].hi * w + tx[x].lo) * c;
            T* p11 = g.data().data() + (ty[y].hi * w + tx[x].hi) * c;
            for (std::size_t k = 0; k < c; ++k) {
                p00[k] += (T(1) - fy) * (T(1) - fx) * up[k];
                p01[k] += (T(1) - fy) * fx * up[k];
                p10[k] += fy * (T(1) - fx) * up[k];
                p11[k] += fy * fx * up[k];
            }
        }
    }
    return g;
}

template < typename T >
struct WarpGrads {
    Grid< T > d_f_l;
    Grid< T > d_flow;
};

template < typename T >
WarpGrads< T > backward_warp(const Grid< T >& f_l, const FlowField< T >& s, const Grid< T >& upstream)
{
    const Shape2D out{s.height(), s.width(), f_l.dim(2)};
    const auto up = bilinear_resize(f_l, out);
    auto g = backward_sample(up, s, upstream);
    return {backward_resize(g.d_src, f_l.shape()), std::move(g.d_flow)};
}

template < typename T >
struct ConvGrads {
    Grid< T > d_input;
    KernelSpec< T > d_kernel;
};

template < typename T >
ConvGrads< T > backward_conv2d(const Grid< T >& input, const KernelSpec< T >& k, const Grid< T >& upstream)
{
    const std::ptrdiff_t h = input.dim(0), w = input.dim(1);
    const std::ptrdiff_t ry = k.kh() / 2, rx = k.kw() / 2;
    const std::size_t cin = k.cin(), cout = k.cout();
    if (upstream.shape() != Extents{input.dim(0), input.dim(1), cout})
        fail(ErrorKind::Shape, "backward_conv2d: upstream shape mismatch");
    ConvGrads< T > g{Grid< T >(input.shape()), KernelSpec< T >(k.kh(), k.kw(), cin, cout)};
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            const T* up = &upstream(y, x, 0);
            for (std::size_t co = 0; co < cout; ++co)
                g.d_kernel.bias[co] += up[co];
            for (std::ptrdiff_t dy = -ry; dy <= ry; ++dy) {
                const std::ptrdiff_t sy = y + dy;
                if (sy < 0 || sy >= h)
                    continue;
                for (std::ptrdiff_t dx = -rx; dx <= rx; ++dx) {
                    const std::ptrdiff_t sx = x + dx;
                    if (sx < 0 || sx >= w)
                        continue;
                    const T* ip = &input(sy, sx, 0);
                    T* gi = &g.d_input(sy, sx, 0);
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T* wr = &k.weights(dy + ry, dx + rx, ci, 0);
                        T* gw = &g.d_kernel.weights(dy + ry, dx + rx, ci, 0);
                        T acc = 0;
                        for (std::size_t co = 0; co < cout; ++co) {
                            gw[co] += ip[ci] * up[co];
                            acc += wr[co] * up[co];
                        }
                        gi[ci] += acc;
                    }
                }
            }
        }
    }
    return g;
}

template < typename T >
struct L2gGrads {
    L2gParams< T > d_params;
    Grid< T > d_f_h;
    Grid< T > d_f_l;
};

template < typename T >
L2gGrads< T > backward_l2g(const Grid< T >& f_h, const Grid< T >& f_l, const L2gParams< T >& p,
                           const L2gTrace< T >& t, const Grid< T >& upstream)
{
    // out = registered + high; registered = sample(low_up, flow);
    // flow = conv(cat(low_up, high)); low_up = resize(low).
    auto sg = backward_sample(t.low_up, t.flow, upstream);
    auto fg = backward_conv2d(t.cat, p.flow, sg.d_flow);
    const std::size_t d = t.low_up.dim(2);
    auto d_low_up = add(std::move(sg.d_src), slice_channels(fg.d_input, 0, d));
    auto d_high = add(upstream, slice_channels(fg.d_input, d, d));
    auto d_low = backward_resize(d_low_up, t.low.shape());
    auto hg = backward_conv2d(f_h, p.map_high, d_high);
    auto lg = backward_conv2d(f_l, p.map_low, d_low);
    L2gGrads< T > g;
    g.d_params.map_high = std::move(hg.d_kernel);
    g.d_params.map_low = std::move(lg.d_kernel);
    g.d_params.flow = std::move(fg.d_kernel);
    g.d_f_h = std::move(hg.d_input);
    g.d_f_l = std::move(lg.d_input);
    return g;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t n_checked = 0;
};

struct GradCheckReport {
    std::string op;
    std::uint64_t seed = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::vector< ParamCheck > params;
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

inline double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

namespace detail {

/// One tensor under test: the live parameter the objective reads, its
/// analytic gradient, and an optional filter for entries to skip.
struct Probe {
    std::string name;
    Grid< double >* param;
    Grid< double > analytic;
    std::function< bool(std::size_t) > skip = {};
};

inline GradCheckReport run_probes(const std::string& op, std::uint64_t seed, double tol,
                                  const std::function< double() >& objective, std::vector< Probe >& probes)
{
    GradCheckReport r{op, seed, 0.0, tol, false, {}};
    const double h = kFiniteDifferenceStep;
    for (auto& pr : probes) {
        ParamCheck pc{pr.name, 0.0, 0};
        for (std::size_t i = 0; i < pr.param->size(); ++i) {
            if (pr.skip && pr.skip(i))
                continue;
            double& v = (*pr.param)[i];
            const double saved = v;
            v = saved + h;
            const double fp = objective();
            v = saved - h;
            const double fm = objective();
            v = saved;
            const double numeric = (fp - fm) / (2 * h);
            pc.max_rel_error = std::max(pc.max_rel_error, relative_error(pr.analytic[i], numeric));
            ++pc.n_checked;
        }
        r.max_rel_error = std::max(r.max_rel_error, pc.max_rel_error);
        r.params.push_back(pc);
    }
    r.passed = r.max_rel_error <= tol;
    return r;
}

inline Grid< double > random_grid(Extents shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Grid< double > g(std::move(shape));
    for (auto& v : g.flat())
        v = rng.uniform(lo, hi);
    return g;
}

inline double dot(const Grid< double >& a, const Grid< double >& b)
{
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

/// Flow whose sample coordinates sit at least `margin` away from integers,
/// keeping the piecewise-bilinear objective smooth under the FD step.
inline Grid< double > non_integer_flow(std::size_t h, std::size_t w, Rng& rng, double amp, double margin = 0.05)
{
    Grid< double > s({h, w, 2});
    for (std::size_t i = 0; i < s.size(); ++i) {
        double v;
        do {
            v = rng.uniform(-amp, amp);
        } while (std::abs(v - std::round(v)) < margin);
        s[i] = v;
    }
    return s;
}

inline GradCheckReport check_berhu(std::uint64_t seed, double tol)
{
    Rng rng(seed);
    auto pred = random_grid({4, 4}, rng, -3, 3);
    const auto gt = random_grid({4, 4}, rng, -3, 3);
    const BerHuConfig cfg;
    const auto th = berhu_threshold(pred, gt, cfg);
    double max_abs = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        max_abs = std::max(max_abs, std::abs(pred[i] - gt[i]));
    // c follows the max residual, so the max pixel and anything next to the
    // kink at |x| = c are excluded from the finite-difference probe.
    auto skip = [&, c = th.c, max_abs](std::size_t i) {
        const double a = std::abs(pred[i] - gt[i]);
        return a > max_abs - 1e-3 || std::abs(a - c) < 1e-3 || a < 1e-3;
    };
    std::vector< Probe > probes{{"pred", &pred, backward_berhu(pred, gt, cfg), skip}};
    return run_probes("berhu", seed, tol, [&] { return berhu_loss(pred, gt, cfg); }, probes);
}

inline GradCheckReport check_esg(std::uint64_t seed, double tol)
{
    Rng rng(seed);
    auto q = random_grid({3, 4}, rng);
    auto k = random_grid({3, 4}, rng);
    auto v = random_grid({3, 4}, rng);
    const auto up = random_grid({3, 4}, rng);
    auto g = backward_esg(q, k, v, up);
    std::vector< Probe > probes{{"q", &q, g.dq}, {"k", &k, g.dk}, {"v", &v, g.dv}};
    return run_probes("esg", seed, tol, [&] { return dot(up, esg_attend(q, k, v)); }, probes);
}

inline GradCheckReport check_warp(std::uint64_t seed, double tol)
{
    Rng rng(seed);
    auto f_l = random_grid({3, 3, 2}, rng);
    FlowField< double > s{non_integer_flow(4, 4, rng, 1.5)};
    const auto up = random_grid({4, 4, 2}, rng);
    const Shape2D out{4, 4, 2};
    auto g = backward_warp(f_l, s, up);
    std::vector< Probe > probes{{"f_l", &f_l, g.d_f_l}, {"flow", &s.s, g.d_flow}};
    return run_probes("warp", seed, tol, [&] { return dot(up, warp(f_l, s, out)); }, probes);
}

inline GradCheckReport check_conv2d(std::uint64_t seed, double tol)
{
    Rng rng(seed);
    auto in = random_grid({4, 5, 2}, rng);
    KernelSpec< double > k(3, 3, 2, 3);
    k.weights = random_grid({3, 3, 2, 3}, rng);
    k.bias = random_grid({3}, rng);
    const auto up = random_grid({4, 5, 3}, rng);
    auto g = backward_conv2d(in, k, up);
    std::vector< Probe > probes{
        {"input", &in, g.d_input}, {"weight", &k.weights, g.d_kernel.weights}, {"bias", &k.bias, g.d_kernel.bias}};
    return run_probes("conv2d", seed, tol, [&] { return dot(up, conv2d(in, k)); }, probes);
}

inline GradCheckReport check_resize(std::uint64_t seed, double tol)
{
    Rng rng(seed);
    auto in = random_grid({3, 4, 2}, rng);
    const Shape2D out{5, 7, 2};
    const auto up = random_grid({5, 7, 2}, rng);
    std::vector< Probe > probes{{"input", &in, backward_resize(up, in.shape())}};
    return run_probes("bilinear_resize", seed, tol, [&] { return dot(up, bilinear_resize(in, out)); }, probes);
}

inline GradCheckReport check_l2g(std::uint64_t seed, double tol)
{
    Grid< double > f_h, f_l, up;
    L2gParams< double > p;
    L2gTrace< double > t;
    // Redraw instances whose sample points sit on a kink.
    for (std::uint64_t draw = seed;; draw += 0x9e3779b97f4a7c15ULL) {
        Rng rng(draw);
        f_h = random_grid({4, 4, 3}, rng);
        f_l = random_grid({2, 2, 4}, rng);
        p.map_high = KernelSpec< double >(1, 1, 3, 4);
        p.map_high.weights = random_grid({1, 1, 3, 4}, rng);
        p.map_high.bias = random_grid({4}, rng);
        p.map_low = KernelSpec< double >(1, 1, 4, 4);
        p.map_low.weights = random_grid({1, 1, 4, 4}, rng);
        p.map_low.bias = random_grid({4}, rng);
        p.flow = KernelSpec< double >(3, 3, 8, 2);
        p.flow.weights = random_grid({3, 3, 8, 2}, rng, -0.1, 0.1);
        p.flow.bias = random_grid({2}, rng, -0.5, 0.5);
        up = random_grid({4, 4, 4}, rng);
        t = l2g_trace(f_h, f_l, p);
        bool kink = false;
        for (double v : t.flow.s.flat())
            kink = kink || std::abs(v - std::round(v)) < 1e-3;
        if (!kink)
            break;
    }
    auto g = backward_l2g(f_h, f_l, p, t, up);
    std::vector< Probe > probes{{"f_h", &f_h, g.d_f_h},
                                {"f_l", &f_l, g.d_f_l},
                                {"map_high.weight", &p.map_high.weights, g.d_params.map_high.weights},
                                {"map_high.bias", &p.map_high.bias, g.d_params.map_high.bias},
                                {"map_low.weight", &p.map_low.weights, g.d_params.map_low.weights},
                                {"map_low.bias", &p.map_low.bias, g.d_params.map_low.bias},
                                {"flow.weight", &p.flow.weights, g.d_params.flow.weights},
                                {"flow.bias", &p.flow.bias, g.d_params.flow.bias}};
    auto r = run_probes("l2g_register", seed, tol, [&] { return dot(up, l2g_register(f_h, f_l, p)); }, probes);
    r.seed = seed;
    return r;
}

} // namespace detail

/// Registered operator ids, in reporting order.
inline const std::vector< std::string >& grad_check_ops()
{
    static const std::vector< std::string > ops{"berhu", "esg", "warp", "conv2d", "bilinear_resize", "l2g_register"};
    return ops;
}

/// Default tolerance per operator: 1e-6 for smooth ops, 1e-5 for the
/// piecewise-bilinear sampling paths.
inline double default_tolerance(const std::string& op)
{
    return (op == "warp" || op == "l2g_register") ? 1e-5 : 1e-6;
}

inline GradCheckReport grad_check(const std::string& op, std::uint64_t seed, double tol)
{
    if (op == "berhu")
        return detail::check_berhu(seed, tol);
    if (op == "esg")
        return detail::check_esg(seed, tol);
    if (op == "warp")
        return detail::check_warp(seed, tol);
    if (op == "conv2d")
        return detail::check_conv2d(seed, tol);
    if (op == "bilinear_resize")
        return detail::check_resize(seed, tol);
    if (op == "l2g_register")
        return detail::check_l2g(seed, tol);
    fail(ErrorKind::Lookup, "unknown gradient-check op '" + op + "'");
}

// ---------------------------------------------------------------------------
// Toy training

struct TrainTrace {
    std::uint64_t seed = 0;
    std::vector< double > losses; // one per iteration
};

struct ToyTrainConfig {
    SffdeConfig model{2, 8, 8, 16, 0.2};
    std::size_t extent = 32;
    std::size_t n_scenes = 8;
    double learning_rate = 0.01;
    double momentum = 0.9;
};

struct ToyTrainResult {
    TrainTrace trace;
    SffdeParams< double > params;
};

/// Deterministic three-channel rendering of a synthetic scene: roof
/// brightness, a height cue, and low-amplitude texture.
inline Grid< double > render_synthetic_image(const SyntheticScene& scene, double height_scale, std::uint64_t seed)
{
    const std::size_t h = scene.dsm.grid.dim(0), w = scene.dsm.grid.dim(1);
    Rng rng(seed);
    Grid< double > img({h, w, 3});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double m = scene.mask.grid(y, x);
            img(y, x, 0) = 0.2 + 0.6 * m;
            img(y, x, 1) = scene.dsm.grid(y, x) / height_scale;
            img(y, x, 2) = 0.5 + 0.1 * rng.uniform(-1.0, 1.0);
        }
    return img;
}

namespace detail {

template < typename T >
void momentum_step(Grid< T >& param, Grid< T >& velocity, const Grid< T >& grad, double lr, double mu)
{
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = T(mu) * velocity[i] + grad[i];
        param[i] -= T(lr) * velocity[i];
    }
}

} // namespace detail

/// SGD with momentum on the registration block and prediction head against
/// the berHu loss. The encoder and globalization stay at their seeded
/// initialization. Throws ErrorKind::Numeric if the loss goes non-finite.
inline ToyTrainResult train_toy(const ToyTrainConfig& cfg, std::uint64_t seed, std::size_t iters)
{
    ToyTrainResult result{{seed, {}}, init_params< double >(cfg.model, seed)};
    auto& p = result.params;
    if (iters == 0)
        return result;

    constexpr double kHeightLo = 3.0, kHeightHi = 15.0;
    struct Sample {
        EncodedFeatures< double > features;
        Grid< double > target;
    };
    std::vector< Sample > samples;
    for (std::size_t i = 0; i < cfg.n_scenes; ++i) {
        SceneSpec spec;
        spec.height = spec.width = cfg.extent;
        spec.n_prisms = 2;
        spec.min_side = 6;
        spec.max_side = 12;
        spec.min_height = kHeightLo;
        spec.max_height = kHeightHi;
        const auto scene = make_synthetic_scene(seed * 1000 + i, spec);
        const auto image = render_synthetic_image(scene, kHeightHi, seed * 1000 + i);
        samples.push_back({encode_and_globalize(image, p), scene.dsm.grid});
    }

    L2gParams< double > vel{KernelSpec< double >(1, 1, p.l2g.map_high.cin(), p.l2g.map_high.cout()),
                            KernelSpec< double >(1, 1, p.l2g.map_low.cin(), p.l2g.map_low.cout()),
                            KernelSpec< double >(3, 3, p.l2g.flow.cin(), 2)};
    KernelSpec< double > vel_head(p.head.kh(), p.head.kw(), p.head.cin(), p.head.cout());
    const BerHuConfig berhu{cfg.model.c_fraction};
    const double lr = cfg.learning_rate, mu = cfg.momentum;

    for (std::size_t it = 0; it < iters; ++it) {
        const auto& s = samples[it % samples.size()];
        const std::size_t h = s.target.dim(0), w = s.target.dim(1);
        const auto trace = l2g_trace(s.features.high, s.features.low_global, p.l2g);
        const auto head_map = conv2d(trace.out, p.head);
        const auto pred = bilinear_resize(head_map, {h, w, 1}).reshaped({h, w});
        const double loss = berhu_loss(pred, s.target, berhu);
        if (!std::isfinite(loss))
            fail(ErrorKind::Numeric, "train_toy diverged at iteration " + std::to_string(it));
        result.trace.losses.push_back(loss);

        const auto d_pred = backward_berhu(pred, s.target, berhu);
        const auto d_head_map = backward_resize(d_pred.reshaped({h, w, 1}), head_map.shape());
        const auto hg = backward_conv2d(trace.out, p.head, d_head_map);
        const auto lg = backward_l2g(s.features.high, s.features.low_global, p.l2g, trace, hg.d_input);

        detail::momentum_step(p.head.weights, vel_head.weights, hg.d_kernel.weights, lr, mu);
        detail::momentum_step(p.head.bias, vel_head.bias, hg.d_kernel.bias, lr, mu);
        auto step_kernel = [&](KernelSpec< double >& k, KernelSpec< double >& v, const KernelSpec< double >& g) {
            detail::momentum_step(k.weights, v.weights, g.weights, lr, mu);
            detail::momentum_step(k.bias, v.bias, g.bias, lr, mu);
        };
        step_kernel(p.l2g.map_high, vel.map_high, lg.d_params.map_high);
        step_kernel(p.l2g.map_low, vel.map_low, lg.d_params.map_low);
        step_kernel(p.l2g.flow, vel.flow, lg.d_params.flow);
    }
    return result;
}

} // namespace b3d

#endif // B3D_GRAD_HPP
