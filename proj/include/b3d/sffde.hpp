#ifndef B3D_SFFDE_HPP
#define B3D_SFFDE_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <type_traits>
#include <utility>
#include <string>
#include <vector>

#include "b3d/error.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/rng.hpp"

namespace b3d {

/// Hyperparameters of the elevation network. `d_model` is the channel count
/// of Q, K, V, the multi-head output, the projection, and the registration
/// branch; `width_high` and `width_low` are the encoder widths of the /4 and
/// /8 feature maps.
struct SffdeConfig {
    std::size_t heads = 8;
    std::size_t d_model = 64;
    std::size_t width_high = 32;
    std::size_t width_low = 64;
    double c_fraction = 0.2;

    void validate() const
    {
        require(heads >= 1, ErrorKind::Domain, "heads must be >= 1");
        require(d_model >= 1 && d_model % heads == 0, ErrorKind::Domain, "d_model must be divisible by heads");
        require(width_high >= 1 && width_low >= 1, ErrorKind::Domain, "encoder widths must be >= 1");
        require(c_fraction > 0.0 && c_fraction <= 1.0, ErrorKind::Domain, "c_fraction must lie in (0, 1]");
    }
};

template < typename T >
struct EsgParams {
    Grid< T > w_q, w_k, w_v; // C x D
    std::size_t heads = 1;
    Grid< T > w_out; // D x D, applied to the concatenated heads

    std::size_t dim() const { return w_q.dim(1); }
};

/// Relu(LN(FC(x))) that maps globalized tokens back to a feature map.
template < typename T >
struct EsgProjection {
    Grid< T > fc; // D x D
    Grid< T > gamma, beta;
};

/// Per-pixel semantic displacement in pixels: channel 0 = dx, channel 1 = dy.
template < typename T >
struct FlowField {
    Grid< T > s;

    std::size_t height() const { return s.dim(0); }
    std::size_t width() const { return s.dim(1); }
};

template < typename T >
struct PixelLattice {
    Grid< T > coords; // H x W x 2, (x, y)

    static PixelLattice make(std::size_t height, std::size_t width)
    {
        PixelLattice l{Grid< T >({height, width, 2})};
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                l.coords(y, x, 0) = T(x);
                l.coords(y, x, 1) = T(y);
            }
        return l;
    }
};

struct BerHuConfig {
    double c_fraction = 0.2;
};

/// Weights of the local-to-global registration block.
template < typename T >
struct L2gParams {
    KernelSpec< T > map_high; // 1x1, C_h -> D
    KernelSpec< T > map_low;  // 1x1, D -> D
    KernelSpec< T > flow;     // 3x3, 2D -> 2
};

/// Small stand-in backbone: four 3x3 conv+relu blocks with max pooling after
/// the first three, giving features at /4 (after block 2) and /8 (block 4).
template < typename T >
struct ToyEncoderParams {
    KernelSpec< T > conv1, conv2, conv3, conv4;
};

template < typename T >
struct SffdeParams {
    SffdeConfig config;
    ToyEncoderParams< T > encoder;
    EsgParams< T > esg;
    EsgProjection< T > projection;
    L2gParams< T > l2g;
    KernelSpec< T > head; // 3x3, D -> 1
};

// ---------------------------------------------------------------------------
// Globalization

template < typename T >
struct Qkv {
    Grid< T > q, k, v;
};

template < typename T >
Qkv< T > esg_qkv(const Grid< T >& f, const EsgParams< T >& p)
{
    require(f.rank() == 2, ErrorKind::Shape, "esg_qkv expects flattened N x C tokens");
    if (f.dim(1) != p.w_q.dim(0) || f.dim(1) != p.w_k.dim(0) || f.dim(1) != p.w_v.dim(0))
        fail(ErrorKind::Shape, "esg_qkv: token width " + std::to_string(f.dim(1)) + " does not match weights");
    return {matmul(f, p.w_q), matmul(f, p.w_k), matmul(f, p.w_v)};
}

namespace detail {

// Total order on the bit patterns of a floating-point value.
template < typename T >
auto ordered_bits(T x)
{
    using U = std::conditional_t< sizeof(T) == 8, std::uint64_t, std::uint32_t >;
    const U b = std::bit_cast< U >(x);
    const U sign = U(1) << (8 * sizeof(T) - 1);
    return (b & sign) ? U(~b) : U(b | sign);
}

/// Key/value rows sorted by content, so every reduction over keys runs in
/// an order that does not depend on how the tokens were numbered.
template < typename T >
std::pair< Grid< T >, Grid< T > > canonical_key_order(const Grid< T >& k, const Grid< T >& v)
{
    const std::size_t n = k.dim(0), dk = k.dim(1), dv = v.dim(1);
    std::vector< std::size_t > ord(n);
    std::iota(ord.begin(), ord.end(), std::size_t{0});
    auto less = [&](std::size_t a, std::size_t b) {
        for (std::size_t j = 0; j < dk; ++j)
            if (const auto x = ordered_bits(k(a, j)), y = ordered_bits(k(b, j)); x != y)
                return x < y;
        for (std::size_t j = 0; j < dv; ++j)
            if (const auto x = ordered_bits(v(a, j)), y = ordered_bits(v(b, j)); x != y)
                return x < y;
        return false;
    };
    std::sort(ord.begin(), ord.end(), less);
    Grid< T > ks({n, dk}), vs({n, dv});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(&k(ord[i], 0), dk, &ks(i, 0));
        std::copy_n(&v(ord[i], 0), dv, &vs(i, 0));
    }
    return {std::move(ks), std::move(vs)};
}

} // namespace detail

/// Softmax(Q K^T) V. There is deliberately no 1/sqrt(d) scaling. Keys are
/// visited in content order, which makes the result exactly equivariant
/// under any permutation of the token rows.
template < typename T >
Grid< T > esg_attend(const Grid< T >& q, const Grid< T >& k, const Grid< T >& v)
{
    require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, ErrorKind::Shape, "esg_attend expects rank-2 grids");
    require(q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0), ErrorKind::Shape, "esg_attend shape mismatch");
    if (k.dim(0) == 0 || k.dim(1) == 0 || v.dim(1) == 0)
        return matmul(softmax_rows(matmul(q, transpose(k))), v);
    const auto [ks, vs] = detail::canonical_key_order(k, v);
    return matmul(softmax_rows(matmul(q, transpose(ks))), vs);
}

/// Columns [first, first + count) of an N x D grid.
template < typename T >
Grid< T > slice_columns(const Grid< T >& a, std::size_t first, std::size_t count)
{
    Grid< T > r({a.dim(0), count});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < count; ++j)
            r(i, j) = a(i, first + j);
    return r;
}

template < typename T >
void place_columns(Grid< T >& dst, const Grid< T >& src, std::size_t first)
{
    for (std::size_t i = 0; i < src.dim(0); ++i)
        for (std::size_t j = 0; j < src.dim(1); ++j)
            dst(i, first + j) = src(i, j);
}

/// Heads attend over contiguous channel slices of Q, K, V; the concatenated
/// head outputs go through w_out.
template < typename T >
Grid< T > multi_head_esg(const Grid< T >& f, const EsgParams< T >& p)
{
    require(p.heads >= 1, ErrorKind::Domain, "multi_head_esg needs at least one head");
    const std::size_t d = p.dim();
    if (d % p.heads != 0)
        fail(ErrorKind::Domain, "multi_head_esg: D=" + std::to_string(d) + " not divisible by heads=" +
                                    std::to_string(p.heads));
    const auto qkv = esg_qkv(f, p);
    const std::size_t dh = d / p.heads;
    Grid< T > cat({f.dim(0), d});
    for (std::size_t h = 0; h < p.heads; ++h) {
        const auto head = esg_attend(slice_columns(qkv.q, h * dh, dh), slice_columns(qkv.k, h * dh, dh),
                                     slice_columns(qkv.v, h * dh, dh));
        place_columns(cat, head, h * dh);
    }
    return matmul(cat, p.w_out);
}

template < typename T >
Grid< T > esg_project(const Grid< T >& f_out, const Grid< T >& fc, const Grid< T >& gamma, const Grid< T >& beta)
{
    return relu(layernorm(matmul(f_out, fc), gamma, beta));
}

template < typename T >
Grid< T > esg_project(const Grid< T >& f_out, const EsgProjection< T >& p)
{
    return esg_project(f_out, p.fc, p.gamma, p.beta);
}

// ---------------------------------------------------------------------------
// Registration

/// Bilinear sampling of `src` (H x W x D) at L + S with zero weight for taps
/// outside the grid. Each coordinate uses taps (ceil(x) - 1, ceil(x)), which
/// reproduces the tent-weight sum exactly and makes the flow derivative
/// left-continuous at integer coordinates.
template < typename T >
Grid< T > sample_at_flow(const Grid< T >& src, const FlowField< T >& flow)
{
    require(src.rank() == 3 && flow.s.rank() == 3 && flow.s.dim(2) == 2, ErrorKind::Shape,
            "sample_at_flow expects H x W x D source and H x W x 2 flow");
    if (src.dim(0) != flow.height() || src.dim(1) != flow.width())
        fail(ErrorKind::Shape, "flow shape " + to_string(flow.s.shape()) + " does not match source " +
                                   to_string(src.shape()));
    const std::ptrdiff_t h = src.dim(0), w = src.dim(1);
    const std::size_t d = src.dim(2);
    Grid< T > out(src.shape());
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
            const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
            T* dst = &out(y, x, 0);
            for (int t = 0; t < 4; ++t) {
                if (xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h || wts[t] == T(0))
                    continue;
                const T* sp = &src(ys[t], xs[t], 0);
                for (std::size_t c = 0; c < d; ++c)
                    dst[c] += wts[t] * sp[c];
            }
        }
    }
    return out;
}

/// Upsample `f_l` to `out` and sample it at L + S.
template < typename T >
Grid< T > warp(const Grid< T >& f_l, const FlowField< T >& s, Shape2D out)
{
    if (s.height() != out.height || s.width() != out.width)
        fail(ErrorKind::Shape, "warp: flow field does not match the output shape");
    return sample_at_flow(bilinear_resize(f_l, out), s);
}

/// Intermediate values of one registration pass, kept for backpropagation.
template < typename T >
struct L2gTrace {
    Grid< T > high;     // map_high(F_h)
    Grid< T > low;      // map_low(F_l)
    Grid< T > low_up;   // bilinear upsample of `low`
    Grid< T > cat;      // cat(low_up, high)
    FlowField< T > flow;
    Grid< T > registered; // sample(low_up, flow)
    Grid< T > out;        // registered + high
};

template < typename T >
L2gTrace< T > l2g_trace(const Grid< T >& f_h, const Grid< T >& f_l, const L2gParams< T >& p)
{
    require(f_h.rank() == 3 && f_l.rank() == 3, ErrorKind::Shape, "registration expects rank-3 features");
    if (f_h.dim(0) < f_l.dim(0) || f_h.dim(1) < f_l.dim(1))
        fail(ErrorKind::Shape, "registration: high-resolution feature " + to_string(f_h.shape()) +
                                   " is smaller than low-resolution feature " + to_string(f_l.shape()));
    require(p.map_high.kh() == 1 && p.map_low.kh() == 1, ErrorKind::Shape, "channel maps must be 1x1");
    L2gTrace< T > t;
    t.high = conv2d(f_h, p.map_high);
    t.low = conv2d(f_l, p.map_low);
    if (t.high.dim(2) != t.low.dim(2))
        fail(ErrorKind::Shape, "registration: mapped channel counts differ");
    t.low_up = bilinear_resize(t.low, spatial_shape(t.high));
    t.cat = concat_channels(t.low_up, t.high);
    t.flow.s = conv2d(t.cat, p.flow);
    if (t.flow.s.dim(2) != 2)
        fail(ErrorKind::Shape, "flow convolution must produce 2 channels");
    t.registered = sample_at_flow(t.low_up, t.flow);
    t.out = add(t.registered, t.high);
    return t;
}

template < typename T >
FlowField< T > gen_flow(const Grid< T >& f_h, const Grid< T >& f_l, const L2gParams< T >& p)
{
    return l2g_trace(f_h, f_l, p).flow;
}

/// Registration with element-wise addition as the aggregation.
template < typename T >
Grid< T > l2g_register(const Grid< T >& f_h, const Grid< T >& f_l, const L2gParams< T >& p)
{
    return l2g_trace(f_h, f_l, p).out;
}

// ---------------------------------------------------------------------------
// Loss

template < typename T >
struct BerHuThreshold {
    T c = 0;
    std::size_t n_valid = 0;
};

template < typename T >
BerHuThreshold< T > berhu_threshold(const Grid< T >& pred, const Grid< T >& gt, const BerHuConfig& cfg,
                                    const Grid< T >* valid = nullptr)
{
    if (pred.shape() != gt.shape())
        fail(ErrorKind::Shape, "berhu: prediction and ground truth shapes differ");
    if (valid && valid->size() != pred.size())
        fail(ErrorKind::Shape, "berhu: valid mask shape differs");
    BerHuThreshold< T > th;
    T max_abs = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        ++th.n_valid;
        max_abs = std::max(max_abs, std::abs(pred[i] - gt[i]));
    }
    if (th.n_valid == 0)
        fail(ErrorKind::Domain, "berhu: no valid pixels");
    th.c = T(cfg.c_fraction) * max_abs;
    return th;
}

/// Per-residual reverse Huber value for a fixed threshold c. c = 0 only
/// happens when every residual is zero and falls through to |x| = 0.
template < typename T >
T berhu_value(T x, T c)
{
    const T a = std::abs(x);
    if (a <= c || c == T(0))
        return a;
    return (x * x + c * c) / (T(2) * c);
}

/// Mean reverse Huber loss with c = c_fraction * max|pred - gt| over the valid set.
template < typename T >
T berhu_loss(const Grid< T >& pred, const Grid< T >& gt, const BerHuConfig& cfg = {},
             const Grid< T >* valid = nullptr)
{
    const auto th = berhu_threshold(pred, gt, cfg, valid);
    T sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        sum += berhu_value(pred[i] - gt[i], th.c);
    }
    return sum / T(th.n_valid);
}

// ---------------------------------------------------------------------------
// Full forward pass

template < typename T >
struct EncodedFeatures {
    Grid< T > high;       // F_h at /4
    Grid< T > low_global; // globalized F_l at /8, D channels
};

template < typename T >
std::pair< Grid< T >, Grid< T > > toy_encode(const Grid< T >& image, const ToyEncoderParams< T >& p)
{
    auto x = max_pool2(relu(conv2d(image, p.conv1)));
    auto high = max_pool2(relu(conv2d(x, p.conv2)));
    auto y = max_pool2(relu(conv2d(high, p.conv3)));
    auto low = relu(conv2d(y, p.conv4));
    return {std::move(high), std::move(low)};
}

template < typename T >
EncodedFeatures< T > encode_and_globalize(const Grid< T >& image, const SffdeParams< T >& p)
{
    require(image.rank() == 3, ErrorKind::Shape, "image must be H x W x C");
    if (image.dim(0) % 8 != 0 || image.dim(1) % 8 != 0 || image.dim(0) == 0 || image.dim(1) == 0)
        fail(ErrorKind::Shape, "image extents must be positive multiples of 8, got " + to_string(image.shape()));
    auto [high, low] = toy_encode(image, p.encoder);
    const std::size_t hl = low.dim(0), wl = low.dim(1);
    const auto tokens = flatten(low);
    const auto globalized = esg_project(multi_head_esg(tokens, p.esg), p.projection);
    return {std::move(high), unflatten(globalized, hl, wl)};
}

/// Prediction head on registered features: 3x3 conv to one channel, then
/// bilinear upsampling to the input resolution. Returns H x W.
template < typename T >
Grid< T > predict_head(const Grid< T >& registered, const KernelSpec< T >& head, std::size_t height,
                       std::size_t width)
{
    auto map = conv2d(registered, head);
    return bilinear_resize(map, {height, width, 1}).reshaped({height, width});
}

template < typename T >
Grid< T > sffde_forward(const Grid< T >& image, const SffdeParams< T >& p)
{
    const auto features = encode_and_globalize(image, p);
    const auto registered = l2g_register(features.high, features.low_global, p.l2g);
    return predict_head(registered, p.head, image.dim(0), image.dim(1));
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

template < typename T >
void fill_uniform(Grid< T >& g, Rng& rng, double bound)
{
    for (auto& v : g.flat())
        v = T(rng.uniform(-bound, bound));
}

template < typename T >
KernelSpec< T > he_kernel(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng)
{
    KernelSpec< T > spec(k, k, cin, cout);
    fill_uniform(spec.weights, rng, std::sqrt(6.0 / double(k * k * cin)));
    return spec;
}

template < typename T >
Grid< T > he_matrix(std::size_t rows, std::size_t cols, Rng& rng)
{
    Grid< T > g({rows, cols});
    fill_uniform(g, rng, std::sqrt(6.0 / double(rows)));
    return g;
}

} // namespace detail

/// Seeded He-uniform initialization. Biases start at zero, the layer norm at
/// the identity affine, and the flow convolution at zero so registration
/// starts as plain upsampling.
template < typename T >
SffdeParams< T > init_params(const SffdeConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    Rng rng(seed);
    SffdeParams< T > p;
    p.config = cfg;
    const std::size_t d = cfg.d_model;
    p.encoder.conv1 = detail::he_kernel< T >(3, 3, cfg.width_high, rng);
    p.encoder.conv2 = detail::he_kernel< T >(3, cfg.width_high, cfg.width_high, rng);
    p.encoder.conv3 = detail::he_kernel< T >(3, cfg.width_high, cfg.width_low, rng);
    p.encoder.conv4 = detail::he_kernel< T >(3, cfg.width_low, cfg.width_low, rng);
    p.esg.heads = cfg.heads;
    p.esg.w_q = detail::he_matrix< T >(cfg.width_low, d, rng);
    p.esg.w_k = detail::he_matrix< T >(cfg.width_low, d, rng);
    p.esg.w_v = detail::he_matrix< T >(cfg.width_low, d, rng);
    p.esg.w_out = detail::he_matrix< T >(d, d, rng);
    p.projection.fc = detail::he_matrix< T >(d, d, rng);
    p.projection.gamma = Grid< T >({d}, T(1));
    p.projection.beta = Grid< T >({d}, T(0));
    p.l2g.map_high = detail::he_kernel< T >(1, cfg.width_high, d, rng);
    p.l2g.map_low = detail::he_kernel< T >(1, d, d, rng);
    p.l2g.flow = KernelSpec< T >(3, 3, 2 * d, 2);
    p.head = detail::he_kernel< T >(3, d, 1, rng);
    return p;
}

} // namespace b3d

#endif // B3D_SFFDE_HPP
