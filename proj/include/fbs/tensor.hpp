#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fbs/errors.hpp"

namespace fbs {

// Dense row-major container of 64-bit floats. Features use rank 4
// (batch, channel, height, width); convolution weights use rank 4
// (out-channel, in-channel, kernel row, kernel col); pooled features and
// saliency vectors use rank 2 (batch, channel). Arbitrary ranks >= 1 are
// allowed for generic vectors. Flat index of (n, c, h, w) is
// ((n*C + c)*H + h)*W + w.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
        int64_t total = 1;
        for (int64_t e : shape_) {
            if (e < 1) {
                throw ShapeError("tensor extent must be >= 1, got " + std::to_string(e));
            }
            total *= e;
        }
        data_.assign(static_cast<size_t>(total), 0.0);
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t extent(int64_t axis) const { return shape_.at(static_cast<size_t>(axis)); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* raw() { return data_.data(); }
    const double* raw() const { return data_.data(); }

    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

    // Feature-tensor accessors (rank 4).
    int64_t batch() const { return dim4(0); }
    int64_t channels() const { return rank() == 2 ? extent(1) : dim4(1); }
    int64_t height() const { return dim4(2); }
    int64_t width() const { return dim4(3); }

    int64_t flat(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        check4(n, c, h, w);
        return data_[static_cast<size_t>(flat(n, c, h, w))];
    }
    double& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        check4(n, c, h, w);
        return data_[static_cast<size_t>(flat(n, c, h, w))];
    }

    // Rank-2 accessors (batch, channel).
    double at(int64_t n, int64_t c) const {
        check2(n, c);
        return data_[static_cast<size_t>(n * shape_[1] + c)];
    }
    double& at(int64_t n, int64_t c) {
        check2(n, c);
        return data_[static_cast<size_t>(n * shape_[1] + c)];
    }

    // Pointer to the (n, c) spatial plane of a rank-4 tensor.
    double* plane(int64_t n, int64_t c) {
        check4(n, c, 0, 0);
        return raw() + flat(n, c, 0, 0);
    }
    const double* plane(int64_t n, int64_t c) const {
        check4(n, c, 0, 0);
        return raw() + flat(n, c, 0, 0);
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    double l1_norm() const {
        double s = 0.0;
        for (double v : data_) s += std::abs(v);
        return s;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

private:
    int64_t dim4(int64_t axis) const {
        if (rank() != 4) throw ShapeError("expected a rank-4 feature tensor");
        return shape_[static_cast<size_t>(axis)];
    }
    void check4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        if (rank() != 4) throw ShapeError("expected a rank-4 tensor");
        if (n < 0 || n >= shape_[0] || c < 0 || c >= shape_[1] || h < 0 || h >= shape_[2] ||
            w < 0 || w >= shape_[3]) {
            throw ShapeError("tensor index out of range");
        }
    }
    void check2(int64_t n, int64_t c) const {
        if (rank() != 2) throw ShapeError("expected a rank-2 tensor");
        if (n < 0 || n >= shape_[0] || c < 0 || c >= shape_[1]) {
            throw ShapeError("tensor index out of range");
        }
    }

    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

// Per-sample set of active channel indices attached to a feature tensor.
// Indices are sorted and unique, each in [0, channel_count). A mask listing
// every channel behaves exactly like "no mask".
struct ChannelMask {
    int64_t channel_count = 0;
    std::vector<std::vector<int64_t>> active;  // one sorted index list per sample

    ChannelMask() = default;
    ChannelMask(int64_t channels, std::vector<std::vector<int64_t>> per_sample)
        : channel_count(channels), active(std::move(per_sample)) {
        validate();
    }

    static ChannelMask full(int64_t samples, int64_t channels) {
        ChannelMask m;
        m.channel_count = channels;
        std::vector<int64_t> all(static_cast<size_t>(channels));
        std::iota(all.begin(), all.end(), int64_t{0});
        m.active.assign(static_cast<size_t>(samples), all);
        return m;
    }

    int64_t samples() const { return static_cast<int64_t>(active.size()); }

    bool sample_full(int64_t n) const {
        return static_cast<int64_t>(active[static_cast<size_t>(n)].size()) == channel_count;
    }

    bool is_full() const {
        for (int64_t n = 0; n < samples(); ++n) {
            if (!sample_full(n)) return false;
        }
        return true;
    }

    bool contains(int64_t n, int64_t c) const {
        const auto& a = active[static_cast<size_t>(n)];
        return std::binary_search(a.begin(), a.end(), c);
    }

    void validate() const {
        if (channel_count < 1) throw ShapeError("channel mask needs channel_count >= 1");
        for (const auto& a : active) {
            int64_t prev = -1;
            for (int64_t c : a) {
                if (c <= prev || c < 0 || c >= channel_count) {
                    throw ShapeError("mask indices must be strictly increasing in [0, C)");
                }
                prev = c;
            }
        }
    }
};

// Zeroes every channel not listed in the mask; active channels are copied
// bit-identically. Idempotent.
inline Tensor apply_mask(const Tensor& x, const ChannelMask& m) {
    if (x.rank() != 4 && x.rank() != 2) throw ShapeError("apply_mask expects rank-4 or rank-2");
    if (m.channel_count != x.channels()) {
        throw ShapeError("mask channel count does not match tensor");
    }
    if (m.samples() != x.extent(0)) throw ShapeError("mask sample count does not match tensor");
    Tensor out(x.shape());
    const int64_t n_samples = x.extent(0);
    if (x.rank() == 2) {
        for (int64_t n = 0; n < n_samples; ++n) {
            for (int64_t c : m.active[static_cast<size_t>(n)]) out.at(n, c) = x.at(n, c);
        }
        return out;
    }
    const int64_t plane_size = x.height() * x.width();
    for (int64_t n = 0; n < n_samples; ++n) {
        for (int64_t c : m.active[static_cast<size_t>(n)]) {
            const double* src = x.plane(n, c);
            double* dst = out.plane(n, c);
            std::copy(src, src + plane_size, dst);
        }
    }
    return out;
}

// Copy of the (n, c) spatial plane as an (H, W) tensor.
inline Tensor channel_slice(const Tensor& x, int64_t n, int64_t c) {
    if (x.rank() != 4) throw ShapeError("channel_slice expects a rank-4 tensor");
    if (n < 0 || n >= x.batch() || c < 0 || c >= x.channels()) {
        throw ShapeError("channel_slice index out of range");
    }
    Tensor out({x.height(), x.width()});
    const double* src = x.plane(n, c);
    std::copy(src, src + x.height() * x.width(), out.raw());
    return out;
}

}  // namespace fbs
