#ifndef B3D_NDGRID_HPP
#define B3D_NDGRID_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "b3d/error.hpp"

namespace b3d {

using Extents = std::vector<std::size_t>;

inline std::string to_string(const Extents& e)
{
    std::string s = "[";
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (i)
            s += "x";
        s += std::to_string(e[i]);
    }
    return s + "]";
}

/// Dense row-major array of rank 1..4. Spatial grids are rank 3 (H x W x C),
/// token matrices rank 2 (N x D).
template < typename T >
class Grid {
public:
    using value_type = T;

    Grid() = default;

    explicit Grid(Extents shape) : shape_(std::move(shape))
    {
        data_.assign(count(shape_), T{});
    }

    Grid(Extents shape, T fill) : shape_(std::move(shape)) { data_.assign(count(shape_), fill); }

    Grid(Extents shape, std::vector< T > data) : shape_(std::move(shape)), data_(std::move(data))
    {
        if (count(shape_) != data_.size())
            fail(ErrorKind::Shape, "grid data length " + std::to_string(data_.size()) +
                                       " does not match shape " + b3d::to_string(shape_));
    }

    static std::size_t count(const Extents& shape)
    {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
    }

    const Extents& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span< T > flat() & noexcept { return data_; }
    std::span< const T > flat() const& noexcept { return data_; }
    // a temporary hands over its storage so range-for over it stays valid
    std::vector< T > flat() && noexcept { return std::move(data_); }
    std::vector< T >& data() noexcept { return data_; }
    const std::vector< T >& data() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& operator()(std::size_t y, std::size_t x, std::size_t c)
    {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }
    const T& operator()(std::size_t y, std::size_t x, std::size_t c) const
    {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }

    T& operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d)
    {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const T& operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const
    {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    Grid reshaped(Extents shape) const
    {
        if (count(shape) != data_.size())
            fail(ErrorKind::Shape, "cannot reshape " + b3d::to_string(shape_) + " to " +
                                       b3d::to_string(shape));
        return Grid(std::move(shape), data_);
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Grid& a, const Grid& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Extents shape_;
    std::vector< T > data_;
};

struct Shape2D {
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;
};

template < typename T >
Shape2D spatial_shape(const Grid< T >& g)
{
    require(g.rank() == 3, ErrorKind::Shape, "expected a rank-3 H x W x C grid");
    return {g.dim(0), g.dim(1), g.dim(2)};
}

template < typename T >
Grid< T > flatten(const Grid< T >& g)
{
    require(g.rank() == 3, ErrorKind::Shape, "flatten expects a rank-3 grid");
    return g.reshaped({g.dim(0) * g.dim(1), g.dim(2)});
}

template < typename T >
Grid< T > unflatten(const Grid< T >& g, std::size_t height, std::size_t width)
{
    require(g.rank() == 2, ErrorKind::Shape, "unflatten expects a rank-2 grid");
    require(g.dim(0) == height * width, ErrorKind::Shape, "unflatten row count != height*width");
    return g.reshaped({height, width, g.dim(1)});
}

template < typename T >
Grid< T > identity(std::size_t n)
{
    Grid< T > g({n, n});
    for (std::size_t i = 0; i < n; ++i)
        g(i, i) = T(1);
    return g;
}

template < typename T >
Grid< T > transpose(const Grid< T >& a)
{
    require(a.rank() == 2, ErrorKind::Shape, "transpose expects a rank-2 grid");
    Grid< T > t({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j)
            t(j, i) = a(i, j);
    return t;
}

/// Fixed i-k-j loop order; results do not depend on threading.
template < typename T >
Grid< T > matmul(const Grid< T >& a, const Grid< T >& b)
{
    require(a.rank() == 2 && b.rank() == 2, ErrorKind::Shape, "matmul expects rank-2 grids");
    if (a.dim(1) != b.dim(0))
        fail(ErrorKind::Shape,
             "matmul inner dimension mismatch: " + to_string(a.shape()) + " * " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Grid< T > c({m, p});
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* cd = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = cd + i * p;
        for (std::size_t l = 0; l < k; ++l) {
            const T av = ad[i * k + l];
            const T* brow = bd + l * p;
            for (std::size_t j = 0; j < p; ++j)
                crow[j] += av * brow[j];
        }
    }
    return c;
}

template < typename T >
Grid< T > softmax_rows(const Grid< T >& a)
{
    require(a.rank() == 2, ErrorKind::Shape, "softmax_rows expects a rank-2 grid");
    Grid< T > out(a.shape());
    const std::size_t m = a.dim(0), p = a.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        T mx = a(i, 0);
        for (std::size_t j = 1; j < p; ++j)
            mx = std::max(mx, a(i, j));
        T sum = 0;
        for (std::size_t j = 0; j < p; ++j) {
            out(i, j) = std::exp(a(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < p; ++j)
            out(i, j) /= sum;
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

template < typename T >
Grid< T > layernorm(const Grid< T >& a, const Grid< T >& gamma, const Grid< T >& beta,
                    T eps = T(kLayerNormEps))
{
    require(a.rank() == 2, ErrorKind::Shape, "layernorm expects a rank-2 grid");
    require(gamma.size() == a.dim(1) && beta.size() == a.dim(1), ErrorKind::Shape,
            "layernorm gamma/beta length must equal row width");
    require(eps > 0, ErrorKind::Domain, "layernorm eps must be positive");
    Grid< T > out(a.shape());
    const std::size_t n = a.dim(0), d = a.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j)
            mean += a(i, j);
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j)
            var += (a(i, j) - mean) * (a(i, j) - mean);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out(i, j) = (a(i, j) - mean) * inv * gamma[j] + beta[j];
    }
    return out;
}

template < typename T >
Grid< T > relu(Grid< T > a)
{
    for (auto& v : a.flat())
        v = std::max(v, T(0));
    return a;
}

template < typename T >
Grid< T > add(Grid< T > a, const Grid< T >& b)
{
    if (a.shape() != b.shape())
        fail(ErrorKind::Shape, "add shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    for (std::size_t i = 0; i < a.size(); ++i)
        a[i] += b[i];
    return a;
}

/// Convolution weights laid out [kh][kw][cin][cout] so the innermost loop
/// runs over contiguous output channels.
template < typename T >
struct KernelSpec {
    Grid< T > weights; // kh x kw x cin x cout
    Grid< T > bias;    // cout

    KernelSpec() = default;
    KernelSpec(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout)
        : weights({kh, kw, cin, cout}), bias({cout})
    {}

    std::size_t kh() const { return weights.dim(0); }
    std::size_t kw() const { return weights.dim(1); }
    std::size_t cin() const { return weights.dim(2); }
    std::size_t cout() const { return weights.dim(3); }

    static KernelSpec identity(std::size_t channels)
    {
        KernelSpec k(1, 1, channels, channels);
        for (std::size_t c = 0; c < channels; ++c)
            k.weights(0, 0, c, c) = T(1);
        return k;
    }
};

/// Zero-padded "same" cross-correlation with bias.
template < typename T >
Grid< T > conv2d(const Grid< T >& g, const KernelSpec< T >& k)
{
    require(g.rank() == 3, ErrorKind::Shape, "conv2d expects a rank-3 grid");
    require(k.weights.rank() == 4 && k.bias.size() == k.cout(), ErrorKind::Shape,
            "conv2d kernel must be kh x kw x cin x cout with cout biases");
    if (k.kh() % 2 == 0 || k.kw() % 2 == 0)
        fail(ErrorKind::Domain, "conv2d kernel extents must be odd");
    if (g.dim(2) != k.cin())
        fail(ErrorKind::Shape, "conv2d input has " + std::to_string(g.dim(2)) + " channels, kernel expects " +
                                   std::to_string(k.cin()));
    const std::ptrdiff_t h = g.dim(0), w = g.dim(1);
    const std::ptrdiff_t ry = k.kh() / 2, rx = k.kw() / 2;
    const std::size_t cin = k.cin(), cout = k.cout();
    Grid< T > out({g.dim(0), g.dim(1), cout});
    const T* in = g.data().data();
    const T* wt = k.weights.data().data();
    T* o = out.data().data();
    for (std::ptrdiff_t y = 0; y < h; ++y) {
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            T* op = o + (y * w + x) * cout;
            for (std::size_t co = 0; co < cout; ++co)
                op[co] = k.bias[co];
            for (std::ptrdiff_t dy = -ry; dy <= ry; ++dy) {
                const std::ptrdiff_t sy = y + dy;
                if (sy < 0 || sy >= h)
                    continue;
                for (std::ptrdiff_t dx = -rx; dx <= rx; ++dx) {
                    const std::ptrdiff_t sx = x + dx;
                    if (sx < 0 || sx >= w)
                        continue;
                    const T* ip = in + (sy * w + sx) * cin;
                    const T* wp = wt + ((dy + ry) * k.kw() + (dx + rx)) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T v = ip[ci];
                        const T* wr = wp + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co)
                            op[co] += v * wr[co];
                    }
                }
            }
        }
    }
    return out;
}

/// One output coordinate's pair of source taps for align-corners linear
/// interpolation: value = (1 - frac) * src[lo] + frac * src[hi].
struct LinearTap {
    std::size_t lo = 0;
    std::size_t hi = 0;
    double frac = 0.0;
};

inline std::vector< LinearTap > linear_taps(std::size_t in, std::size_t out)
{
    std::vector< LinearTap > taps(out);
    for (std::size_t o = 0; o < out; ++o) {
        if (in == 1 || out == 1) {
            taps[o] = {0, 0, 0.0};
            continue;
        }
        const double src = static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        lo = std::min(lo, in - 2);
        taps[o] = {lo, lo + 1, src - static_cast<double>(lo)};
    }
    return taps;
}

/// Align-corners bilinear resampling of an H x W x C (or H x W) grid.
template < typename T >
Grid< T > bilinear_resize(const Grid< T >& g, Shape2D out)
{
    require(g.rank() == 2 || g.rank() == 3, ErrorKind::Shape, "bilinear_resize expects rank 2 or 3");
    require(out.height >= 1 && out.width >= 1, ErrorKind::Domain, "bilinear_resize target extents must be >= 1");
    const std::size_t h = g.dim(0), w = g.dim(1), c = g.rank() == 3 ? g.dim(2) : 1;
    Extents shape = g.rank() == 3 ? Extents{out.height, out.width, c} : Extents{out.height, out.width};
    if (h == out.height && w == out.width)
        return g;
    Grid< T > r(shape);
    const auto ty = linear_taps(h, out.height);
    const auto tx = linear_taps(w, out.width);
    const T* src = g.data().data();
    for (std::size_t y = 0; y < out.height; ++y) {
        const T fy = T(ty[y].frac);
        for (std::size_t x = 0; x < out.width; ++x) {
            const T fx = T(tx[x].frac);
            const T* p00 = src + (ty[y].lo * w + tx[x].lo) * c;
            const T* p01 = src + (ty[y].lo * w + tx[x].hi) * c;
            const T* p10 = src + (ty[y].hi * w + tx[x].lo) * c;
            const T* p11 = src + (ty[y].hi * w + tx[x].hi) * c;
            T* dst = r.data().data() + (y * out.width + x) * c;
            for (std::size_t k = 0; k < c; ++k) {
                const T top = (T(1) - fx) * p00[k] + fx * p01[k];
                const T bot = (T(1) - fx) * p10[k] + fx * p11[k];
                dst[k] = (T(1) - fy) * top + fy * bot;
            }
        }
    }
    return r;
}

template < typename T >
Grid< T > concat_channels(const Grid< T >& a, const Grid< T >& b)
{
    require(a.rank() == 3 && b.rank() == 3, ErrorKind::Shape, "concat_channels expects rank-3 grids");
    if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1))
        fail(ErrorKind::Shape, "concat_channels spatial mismatch: " + to_string(a.shape()) + " vs " +
                                   to_string(b.shape()));
    const std::size_t n = a.dim(0) * a.dim(1), ca = a.dim(2), cb = b.dim(2);
    Grid< T > r({a.dim(0), a.dim(1), ca + cb});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().begin() + i * ca, ca, r.data().begin() + i * (ca + cb));
        std::copy_n(b.data().begin() + i * cb, cb, r.data().begin() + i * (ca + cb) + ca);
    }
    return r;
}

/// Channels [first, first + count) of a rank-3 grid.
template < typename T >
Grid< T > slice_channels(const Grid< T >& g, std::size_t first, std::size_t count)
{
    require(g.rank() == 3 && first + count <= g.dim(2), ErrorKind::Shape, "slice_channels out of range");
    const std::size_t n = g.dim(0) * g.dim(1), c = g.dim(2);
    Grid< T > r({g.dim(0), g.dim(1), count});
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(g.data().begin() + i * c + first, count, r.data().begin() + i * count);
    return r;
}

/// 2x2 max pooling, stride 2. Odd trailing rows/cols are dropped.
template < typename T >
Grid< T > max_pool2(const Grid< T >& g)
{
    require(g.rank() == 3, ErrorKind::Shape, "max_pool2 expects a rank-3 grid");
    const std::size_t h = g.dim(0) / 2, w = g.dim(1) / 2, c = g.dim(2);
    require(h >= 1 && w >= 1, ErrorKind::Shape, "max_pool2 input too small");
    Grid< T > r({h, w, c});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t k = 0; k < c; ++k)
                r(y, x, k) = std::max({g(2 * y, 2 * x, k), g(2 * y, 2 * x + 1, k), g(2 * y + 1, 2 * x, k),
                                       g(2 * y + 1, 2 * x + 1, k)});
    return r;
}

} // namespace b3d

#endif // B3D_NDGRID_HPP
