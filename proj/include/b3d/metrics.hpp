#ifndef B3D_METRICS_HPP
#define B3D_METRICS_HPP

// Elevation evaluation: Rel, RMSE, RMSE(log) and delta accuracies.
// Sums go through ExactSum so tiles can be accumulated in any order (or in
// parallel) and merged into the same bits as a single pass.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "b3d/error.hpp"
#include "b3d/ndgrid.hpp"
#include "b3d/raster.hpp"

namespace b3d {

/// Shewchuk-style exactly rounded summation (non-overlapping partials).
class ExactSum {
public:
    void add(double x)
    {
        std::size_t i = 0;
        for (double y : partials_) {
            if (std::abs(x) < std::abs(y))
                std::swap(x, y);
            const double hi = x + y;
            const double lo = y - (hi - x);
            if (lo != 0.0)
                partials_[i++] = lo;
            x = hi;
        }
        partials_.resize(i);
        partials_.push_back(x);
    }

    void merge(const ExactSum& other)
    {
        for (double p : other.partials_)
            add(p);
    }

    /// Correctly rounded value of the exact sum.
    double value() const
    {
        if (partials_.empty())
            return 0.0;
        std::size_t n = partials_.size();
        double hi = partials_[--n];
        double lo = 0.0;
        while (n > 0) {
            const double x = hi;
            const double y = partials_[--n];
            hi = x + y;
            const double yr = hi - x;
            lo = y - yr;
            if (lo != 0.0)
                break;
        }
        // half-way case: the remaining partials decide the rounding direction
        if (n > 0 && ((lo < 0 && partials_[n - 1] < 0) || (lo > 0 && partials_[n - 1] > 0))) {
            const double y = lo * 2;
            const double x = hi + y;
            if (y == x - hi)
                hi = x;
        }
        return hi;
    }

private:
    std::vector< double > partials_;
};

struct MetricsReport {
    double rel = 0;
    double rmse = 0;
    double rmse_log = 0;
    double delta1 = 0, delta2 = 0, delta3 = 0;
    std::size_t n_valid = 0;
    std::size_t n_excluded = 0;
};

inline nlohmann::ordered_json to_json(const MetricsReport& m)
{
    return {{"rel", m.rel},         {"rmse", m.rmse},       {"rmse_log", m.rmse_log},
            {"delta1", m.delta1},   {"delta2", m.delta2},   {"delta3", m.delta3},
            {"n_valid", m.n_valid}, {"n_excluded", m.n_excluded}};
}

struct EvalOptions {
    // RMSE over every in-mask finite pixel, including non-positive ones.
    bool rmse_all_pixels = false;
};

inline constexpr double kDeltaBase = 1.25;

/// Sufficient statistics. Merging accumulators is exact, so any tiling of
/// the raster yields the same report as one pass.
class MetricsAccumulator {
public:
    void add(double pred, double gt)
    {
        if (!std::isfinite(pred) || !std::isfinite(gt)) {
            ++n_excluded_;
            return;
        }
        const double d = pred - gt;
        if (!(gt > 0) || !(pred > 0)) {
            ++n_excluded_;
            sq_all_.add(d * d);
            ++n_all_;
            return;
        }
        ++n_valid_;
        ++n_all_;
        rel_.add(std::abs(d) / gt);
        sq_.add(d * d);
        sq_all_.add(d * d);
        const double dl = std::log(pred) - std::log(gt);
        sq_log_.add(dl * dl);
        const double ratio = std::max(pred / gt, gt / pred);
        if (ratio < kDeltaBase)
            ++hits_[0];
        if (ratio < kDeltaBase * kDeltaBase)
            ++hits_[1];
        if (ratio < kDeltaBase * kDeltaBase * kDeltaBase)
            ++hits_[2];
    }

    void exclude() { ++n_excluded_; }

    void merge(const MetricsAccumulator& o)
    {
        rel_.merge(o.rel_);
        sq_.merge(o.sq_);
        sq_all_.merge(o.sq_all_);
        sq_log_.merge(o.sq_log_);
        for (int i = 0; i < 3; ++i)
            hits_[i] += o.hits_[i];
        n_valid_ += o.n_valid_;
        n_all_ += o.n_all_;
        n_excluded_ += o.n_excluded_;
    }

    std::size_t n_valid() const { return n_valid_; }

    MetricsReport report(const EvalOptions& opt = {}) const
    {
        if (n_valid_ == 0)
            fail(ErrorKind::Domain, "evaluate: no valid pixels (need gt > 0 and pred > 0)");
        const double n = double(n_valid_);
        MetricsReport m;
        m.rel = rel_.value() / n;
        m.rmse = opt.rmse_all_pixels ? std::sqrt(sq_all_.value() / double(n_all_)) : std::sqrt(sq_.value() / n);
        m.rmse_log = std::sqrt(sq_log_.value() / n);
        m.delta1 = double(hits_[0]) / n;
        m.delta2 = double(hits_[1]) / n;
        m.delta3 = double(hits_[2]) / n;
        m.n_valid = n_valid_;
        m.n_excluded = n_excluded_;
        return m;
    }

private:
    ExactSum rel_, sq_, sq_all_, sq_log_;
    std::size_t hits_[3] = {0, 0, 0};
    std::size_t n_valid_ = 0, n_all_ = 0, n_excluded_ = 0;
};

/// Accumulates the flat index range [first, last). Pixels outside `valid`
/// (when given) are skipped without being counted.
inline void accumulate(MetricsAccumulator& acc, const Grid< double >& pred, const Grid< double >& gt,
                       const Grid< std::uint8_t >* valid, std::size_t first, std::size_t last)
{
    for (std::size_t i = first; i < last; ++i) {
        if (valid && (*valid)[i] == 0)
            continue;
        acc.add(pred[i], gt[i]);
    }
}

inline void check_eval_shapes(const Grid< double >& pred, const Grid< double >& gt,
                              const Grid< std::uint8_t >* valid)
{
    if (pred.shape() != gt.shape())
        fail(ErrorKind::Shape, "evaluate: pred " + to_string(pred.shape()) + " vs gt " + to_string(gt.shape()));
    if (valid && valid->shape() != gt.shape())
        fail(ErrorKind::Shape, "evaluate: mask " + to_string(valid->shape()) + " vs gt " + to_string(gt.shape()));
}

inline MetricsReport evaluate(const Grid< double >& pred, const Grid< double >& gt,
                              const Grid< std::uint8_t >* valid = nullptr, const EvalOptions& opt = {})
{
    check_eval_shapes(pred, gt, valid);
    MetricsAccumulator acc;
    accumulate(acc, pred, gt, valid, 0, gt.size());
    return acc.report(opt);
}

/// Raster variant: nodata pixels in either input are excluded and counted.
inline MetricsReport evaluate(const Raster& pred, const Raster& gt, const Grid< std::uint8_t >* valid = nullptr,
                              const EvalOptions& opt = {})
{
    check_eval_shapes(pred.grid, gt.grid, valid);
    MetricsAccumulator acc;
    for (std::size_t i = 0; i < gt.grid.size(); ++i) {
        if (valid && (*valid)[i] == 0)
            continue;
        if (pred.is_nodata(pred.grid[i]) || gt.is_nodata(gt.grid[i])) {
            acc.exclude();
            continue;
        }
        acc.add(pred.grid[i], gt.grid[i]);
    }
    return acc.report(opt);
}

} // namespace b3d

#endif // B3D_METRICS_HPP
