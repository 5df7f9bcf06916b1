#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fbs/parallel.hpp"
#include "fbs/tensor.hpp"

namespace fbs {

// Spatial reduction used by the channel saliency predictor.
enum class Reducer { L1, L2, Linf, Var };

// Whether gated convolutions skip suppressed channels (the production path)
// or compute everything densely and zero the losers afterwards (the oracle
// path used to verify that skipping is lossless).
enum class ConvRoute { Sparse, DenseMasked };

inline int64_t div_floor(int64_t a, int64_t b) {
    int64_t q = a / b;
    if (a % b != 0 && ((a < 0) != (b < 0))) --q;
    return q;
}
inline int64_t div_ceil(int64_t a, int64_t b) { return -div_floor(-a, b); }

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct ConvParams {
    Tensor theta;  // (C_out, C_in, k, k)
    int64_t stride = 1;
    int64_t padding = 0;

    int64_t out_channels() const { return theta.extent(0); }
    int64_t in_channels() const { return theta.extent(1); }
    int64_t kernel() const { return theta.extent(2); }

    int64_t out_size(int64_t in_size) const {
        return (in_size + 2 * padding - kernel()) / stride + 1;
    }

    void validate(const Tensor& x) const {
        if (theta.rank() != 4 || theta.extent(2) != theta.extent(3)) {
            throw ShapeError("conv weights must be (C_out, C_in, k, k)");
        }
        if (stride < 1 || padding < 0) throw ShapeError("conv needs stride >= 1, padding >= 0");
        if (x.rank() != 4) throw ShapeError("conv input must be rank 4");
        if (x.channels() != in_channels()) throw ShapeError("conv input channel mismatch");
        if (out_size(x.height()) < 1 || out_size(x.width()) < 1) {
            throw ShapeError("conv output spatial size must be >= 1");
        }
    }
};

struct BnParams {
    Tensor gamma;         // per-channel scale; ignored by gated layers
    Tensor beta;          // per-channel offset
    Tensor running_mean;  // per-channel EMA of batch means
    Tensor running_var;   // per-channel EMA of batch variances
    double eps = 1e-5;
    double momentum = 0.9;
    bool stats_ready = false;

    static BnParams make(int64_t channels) {
        BnParams p;
        p.gamma = Tensor::full({channels}, 1.0);
        p.beta = Tensor::zeros({channels});
        p.running_mean = Tensor::zeros({channels});
        p.running_var = Tensor::full({channels}, 1.0);
        return p;
    }

    int64_t channels() const { return beta.extent(0); }
};

struct SaliencyParams {
    Tensor phi;  // (C_out, C_in)
    Tensor rho;  // (C_out)
    Reducer reducer = Reducer::L1;

    int64_t out_channels() const { return phi.extent(0); }
    int64_t in_channels() const { return phi.extent(1); }
};

// One dynamically gated convolutional layer: conv weights, gamma-free batch
// norm, and the saliency predictor that decides which output channels to
// compute for each sample.
struct FbsConvLayer {
    ConvParams conv;
    BnParams bn;
    SaliencyParams sal;
};

// Per-layer, per-sample gating outcome: predicted saliencies, the surviving
// channel set, and the active input channel counts, consumed by cost
// accounting and skip-probability heatmaps.
struct GateRecord {
    Tensor saliency;   // (N, C_out), pre-selection
    ChannelMask active;
    int64_t k_kept = 0;
    std::vector<int64_t> in_active;  // |active input channels| per sample
};

// Survivor count for density d over C channels. The product d*C is snapped
// to the nearest integer before taking the ceiling so that densities written
// as short decimals (0.7, 0.9, ...) give the intended count.
inline int64_t k_from_density(double d, int64_t channels) {
    if (!(d > 0.0) || d > 1.0) throw ValueError("density must lie in (0, 1]");
    const double q = d * static_cast<double>(channels);
    const double qi = std::nearbyint(q);
    double k = (std::abs(q - qi) < 1e-9) ? qi : std::ceil(q);
    return std::max<int64_t>(1, std::min<int64_t>(channels, static_cast<int64_t>(k)));
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

// max(v, 0) with non-positive inputs mapped to +0.0.
inline Tensor relu(const Tensor& z) {
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.size(); ++i) out[i] = z[i] > 0.0 ? z[i] : 0.0;
    return out;
}

// Gradient gated on input > 0; the kink at exactly 0 propagates nothing.
inline Tensor relu_backward(const Tensor& z, const Tensor& gout) {
    if (!z.same_shape(gout)) throw ShapeError("relu backward shape mismatch");
    Tensor dz(z.shape());
    for (int64_t i = 0; i < z.size(); ++i) dz[i] = z[i] > 0.0 ? gout[i] : 0.0;
    return dz;
}

// ---------------------------------------------------------------------------
// k-winners-take-all
// ---------------------------------------------------------------------------

// Indices of the k largest-magnitude entries, ties broken by lower index.
// Returned sorted ascending.
inline std::vector<int64_t> wta_keep_indices(std::span<const double> z, int64_t k) {
    const int64_t n = static_cast<int64_t>(z.size());
    if (k < 1 || k > n) throw ValueError("wta k out of range");
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t{0});
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        const double ma = std::abs(z[static_cast<size_t>(a)]);
        const double mb = std::abs(z[static_cast<size_t>(b)]);
        if (ma != mb) return ma > mb;
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

// Zeroes all entries except the k largest in absolute magnitude; kept entries
// are copied bit-identically. Exactly k positions survive even if some of
// their values are zero.
inline std::vector<double> wta(std::span<const double> z, int64_t k) {
    std::vector<double> out(z.size(), 0.0);
    for (int64_t i : wta_keep_indices(z, k)) out[static_cast<size_t>(i)] = z[static_cast<size_t>(i)];
    return out;
}

// ---------------------------------------------------------------------------
// Direct convolution
// ---------------------------------------------------------------------------

namespace detail {

// In-bounds output row/col range for a given kernel offset: the set of o with
// 0 <= o*stride + k_off - padding < in_size.
inline void conv_span(int64_t in_size, int64_t out_size, int64_t stride, int64_t padding,
                      int64_t k_off, int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, div_ceil(padding - k_off, stride));
    hi = std::min<int64_t>(out_size - 1, div_floor(in_size - 1 + padding - k_off, stride));
}

}  // namespace detail

// Channel-sparse direct cross-correlation with zero padding. Only channel
// pairs (ci in in_mask, co in out_mask) are touched, so the arithmetic is
// proportional to |in_mask| * |out_mask|. Per output element, contributions
// accumulate in ascending (input channel, kernel row, kernel col) order;
// out-of-bounds (padded) positions are skipped rather than multiplied by
// zero. Suppressed output channels are left as exact 0.0.
//
// macs, when non-null, receives the number of multiply-accumulates executed.
inline Tensor conv2d_sparse(const Tensor& x, const ChannelMask& in_mask, const ConvParams& p,
                            const ChannelMask& out_mask, uint64_t* macs = nullptr) {
    p.validate(x);
    if (in_mask.channel_count != p.in_channels() || in_mask.samples() != x.batch()) {
        throw ShapeError("conv input mask mismatch");
    }
    if (out_mask.channel_count != p.out_channels() || out_mask.samples() != x.batch()) {
        throw ShapeError("conv output mask mismatch");
    }
    const int64_t n_batch = x.batch(), in_h = x.height(), in_w = x.width();
    const int64_t out_h = p.out_size(in_h), out_w = p.out_size(in_w);
    const int64_t k = p.kernel(), stride = p.stride, pad = p.padding;
    Tensor out({n_batch, p.out_channels(), out_h, out_w});

    std::vector<uint64_t> mac_per_sample(static_cast<size_t>(n_batch), 0);
    parallel_for_samples(n_batch, [&](int64_t n) {
        uint64_t local_macs = 0;
        for (int64_t co : out_mask.active[static_cast<size_t>(n)]) {
            double* oplane = out.plane(n, co);
            for (int64_t ci : in_mask.active[static_cast<size_t>(n)]) {
                const double* xplane = x.plane(n, ci);
                for (int64_t kh = 0; kh < k; ++kh) {
                    int64_t oy_lo, oy_hi;
                    detail::conv_span(in_h, out_h, stride, pad, kh, oy_lo, oy_hi);
                    for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t ox_lo, ox_hi;
                        detail::conv_span(in_w, out_w, stride, pad, kw, ox_lo, ox_hi);
                        const double w = p.theta.at(co, ci, kh, kw);
                        for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int64_t iy = oy * stride + kh - pad;
                            const double* xrow = xplane + iy * in_w + (ox_lo * stride + kw - pad);
                            double* orow = oplane + oy * out_w + ox_lo;
                            const int64_t span = ox_hi - ox_lo;
                            for (int64_t i = 0; i <= span; ++i) {
                                orow[i] += w * xrow[i * stride];
                            }
                            local_macs += static_cast<uint64_t>(span + 1);
                        }
                    }
                }
            }
        }
        mac_per_sample[static_cast<size_t>(n)] = local_macs;
    });
    if (macs) {
        for (uint64_t m : mac_per_sample) *macs += m;
    }
    return out;
}

inline Tensor conv2d_dense(const Tensor& x, const ConvParams& p, uint64_t* macs = nullptr) {
    p.validate(x);
    return conv2d_sparse(x, ChannelMask::full(x.batch(), p.in_channels()), p,
                         ChannelMask::full(x.batch(), p.out_channels()), macs);
}

struct ConvGrads {
    Tensor dx;
    Tensor dtheta;
};

// Reverse-mode gradients restricted to the channel pairs the forward pass
// computed. Gradients of suppressed channels stay exactly zero; the layer
// above zeroes them anyway through its own gate.
inline ConvGrads conv2d_backward(const Tensor& x, const ChannelMask& in_mask,
                                 const ConvParams& p, const ChannelMask& out_mask,
                                 const Tensor& gout) {
    p.validate(x);
    const int64_t n_batch = x.batch(), in_h = x.height(), in_w = x.width();
    const int64_t out_h = p.out_size(in_h), out_w = p.out_size(in_w);
    if (gout.rank() != 4 || gout.batch() != n_batch || gout.channels() != p.out_channels() ||
        gout.height() != out_h || gout.width() != out_w) {
        throw ShapeError("conv backward upstream shape mismatch");
    }
    const int64_t k = p.kernel(), stride = p.stride, pad = p.padding;
    ConvGrads grads{Tensor(x.shape()), Tensor(p.theta.shape())};

    parallel_for_samples(n_batch, [&](int64_t n) {
        for (int64_t co : out_mask.active[static_cast<size_t>(n)]) {
            const double* gplane = gout.plane(n, co);
            for (int64_t ci : in_mask.active[static_cast<size_t>(n)]) {
                double* dxplane = grads.dx.plane(n, ci);
                for (int64_t kh = 0; kh < k; ++kh) {
                    int64_t oy_lo, oy_hi;
                    detail::conv_span(in_h, out_h, stride, pad, kh, oy_lo, oy_hi);
                    for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t ox_lo, ox_hi;
                        detail::conv_span(in_w, out_w, stride, pad, kw, ox_lo, ox_hi);
                        const double w = p.theta.at(co, ci, kh, kw);
                        for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int64_t iy = oy * stride + kh - pad;
                            const double* grow = gplane + oy * out_w + ox_lo;
                            double* dxrow = dxplane + iy * in_w + (ox_lo * stride + kw - pad);
                            for (int64_t i = 0; i <= ox_hi - ox_lo; ++i) {
                                dxrow[i * stride] += w * grow[i];
                            }
                        }
                    }
                }
            }
        }
    });

    // Weight gradient accumulates over samples in batch order.
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t co : out_mask.active[static_cast<size_t>(n)]) {
            const double* gplane = gout.plane(n, co);
            for (int64_t ci : in_mask.active[static_cast<size_t>(n)]) {
                const double* xplane = x.plane(n, ci);
                for (int64_t kh = 0; kh < k; ++kh) {
                    int64_t oy_lo, oy_hi;
                    detail::conv_span(in_h, out_h, stride, pad, kh, oy_lo, oy_hi);
                    for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t ox_lo, ox_hi;
                        detail::conv_span(in_w, out_w, stride, pad, kw, ox_lo, ox_hi);
                        double acc = 0.0;
                        for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int64_t iy = oy * stride + kh - pad;
                            const double* grow = gplane + oy * out_w + ox_lo;
                            const double* xrow = xplane + iy * in_w + (ox_lo * stride + kw - pad);
                            for (int64_t i = 0; i <= ox_hi - ox_lo; ++i) {
                                acc += xrow[i * stride] * grow[i];
                            }
                        }
                        grads.dtheta.at(co, ci, kh, kw) += acc;
                    }
                }
            }
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BnCache {
    Tensor xhat;       // normalized values on the contributing population
    Tensor inv_std;    // per channel, from batch stats (training) or running
    Tensor batch_mean;
    Tensor batch_var;
    std::vector<int64_t> count;  // population size per channel
    std::optional<ChannelMask> mask;
    bool training = false;
    bool use_gamma = true;
};

// Normalizes each channel over its contributing population and applies the
// affine terms: gamma * xhat + beta when use_gamma, otherwise xhat + beta.
// In training mode the statistics come from the batch itself; with a mask,
// a channel's population is restricted to the samples that computed it, and
// a channel computed by no sample keeps zero output and records count 0.
// Inference mode uses the running statistics and requires them to have been
// updated at least once.
inline Tensor batch_norm(const Tensor& z, const BnParams& p, bool training, bool use_gamma,
                         const ChannelMask* mask = nullptr, BnCache* cache = nullptr) {
    if (z.rank() != 4 || z.channels() != p.channels()) {
        throw ShapeError("batch norm channel mismatch");
    }
    if (!training && !p.stats_ready) {
        throw ValueError("batch norm inference requires initialized running statistics");
    }
    const int64_t n_batch = z.batch(), n_ch = z.channels();
    const int64_t plane = z.height() * z.width();

    BnCache local;
    BnCache& c = cache ? *cache : local;
    c.xhat = Tensor(z.shape());
    c.inv_std = Tensor({n_ch});
    c.batch_mean = Tensor({n_ch});
    c.batch_var = Tensor({n_ch});
    c.count.assign(static_cast<size_t>(n_ch), 0);
    c.mask = mask ? std::optional<ChannelMask>(*mask) : std::nullopt;
    c.training = training;
    c.use_gamma = use_gamma;

    auto channel_active = [&](int64_t n, int64_t ch) {
        return mask == nullptr || mask->contains(n, ch);
    };

    Tensor out(z.shape());
    for (int64_t ch = 0; ch < n_ch; ++ch) {
        int64_t count = 0;
        double mean = 0.0, var = 0.0;
        if (training) {
            double sum = 0.0;
            for (int64_t n = 0; n < n_batch; ++n) {
                if (!channel_active(n, ch)) continue;
                const double* zp = z.plane(n, ch);
                for (int64_t i = 0; i < plane; ++i) sum += zp[i];
                count += plane;
            }
            if (count == 0) {
                c.count[static_cast<size_t>(ch)] = 0;
                continue;
            }
            mean = sum / static_cast<double>(count);
            double sq = 0.0;
            for (int64_t n = 0; n < n_batch; ++n) {
                if (!channel_active(n, ch)) continue;
                const double* zp = z.plane(n, ch);
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = zp[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(count);
        } else {
            mean = p.running_mean[ch];
            var = p.running_var[ch];
            for (int64_t n = 0; n < n_batch; ++n) {
                if (channel_active(n, ch)) count += plane;
            }
            if (count == 0) continue;
        }
        const double inv_std = 1.0 / std::sqrt(var + p.eps);
        const double scale = use_gamma ? p.gamma[ch] : 1.0;
        const double beta = p.beta[ch];
        c.batch_mean[ch] = mean;
        c.batch_var[ch] = var;
        c.inv_std[ch] = inv_std;
        c.count[static_cast<size_t>(ch)] = count;
        for (int64_t n = 0; n < n_batch; ++n) {
            if (!channel_active(n, ch)) continue;
            const double* zp = z.plane(n, ch);
            double* xp = c.xhat.plane(n, ch);
            double* op = out.plane(n, ch);
            for (int64_t i = 0; i < plane; ++i) {
                const double xhat = (zp[i] - mean) * inv_std;
                xp[i] = xhat;
                op[i] = scale * xhat + beta;
            }
        }
    }
    return out;
}

// Folds the batch statistics of a training-mode forward pass into the running
// statistics. Channels that contributed no data are left untouched.
inline void bn_update_running(BnParams& p, const BnCache& cache) {
    if (!cache.training) throw ValueError("running statistics update needs a training-mode pass");
    for (int64_t ch = 0; ch < p.channels(); ++ch) {
        if (cache.count[static_cast<size_t>(ch)] == 0) continue;
        p.running_mean[ch] =
            p.momentum * p.running_mean[ch] + (1.0 - p.momentum) * cache.batch_mean[ch];
        p.running_var[ch] =
            p.momentum * p.running_var[ch] + (1.0 - p.momentum) * cache.batch_var[ch];
    }
    p.stats_ready = true;
}

struct BnGrads {
    Tensor dz;
    Tensor dgamma;
    Tensor dbeta;
};

inline BnGrads batch_norm_backward(const BnParams& p, const BnCache& cache, const Tensor& gout) {
    if (!gout.same_shape(cache.xhat)) throw ShapeError("batch norm backward shape mismatch");
    const int64_t n_batch = gout.batch(), n_ch = gout.channels();
    const int64_t plane = gout.height() * gout.width();
    BnGrads g{Tensor(gout.shape()), Tensor({n_ch}), Tensor({n_ch})};

    auto channel_active = [&](int64_t n, int64_t ch) {
        return !cache.mask || cache.mask->contains(n, ch);
    };

    for (int64_t ch = 0; ch < n_ch; ++ch) {
        const int64_t count = cache.count[static_cast<size_t>(ch)];
        if (count == 0) continue;
        const double scale = cache.use_gamma ? p.gamma[ch] : 1.0;
        const double inv_std = cache.inv_std[ch];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t n = 0; n < n_batch; ++n) {
            if (!channel_active(n, ch)) continue;
            const double* gp = gout.plane(n, ch);
            const double* xp = cache.xhat.plane(n, ch);
            for (int64_t i = 0; i < plane; ++i) {
                sum_g += gp[i];
                sum_gx += gp[i] * xp[i];
            }
        }
        g.dbeta[ch] = sum_g;
        g.dgamma[ch] = cache.use_gamma ? sum_gx : 0.0;
        if (cache.training) {
            const double mean_g = scale * sum_g / static_cast<double>(count);
            const double mean_gx = scale * sum_gx / static_cast<double>(count);
            for (int64_t n = 0; n < n_batch; ++n) {
                if (!channel_active(n, ch)) continue;
                const double* gp = gout.plane(n, ch);
                const double* xp = cache.xhat.plane(n, ch);
                double* dp = g.dz.plane(n, ch);
                for (int64_t i = 0; i < plane; ++i) {
                    dp[i] = inv_std * (scale * gp[i] - mean_g - xp[i] * mean_gx);
                }
            }
        } else {
            for (int64_t n = 0; n < n_batch; ++n) {
                if (!channel_active(n, ch)) continue;
                const double* gp = gout.plane(n, ch);
                double* dp = g.dz.plane(n, ch);
                for (int64_t i = 0; i < plane; ++i) dp[i] = scale * inv_std * gp[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Subsampler: spatial reduction of each channel to one scalar
// ---------------------------------------------------------------------------

// Per sample and channel: s(plane) / (H*W) with s the chosen reduction. For
// non-negative inputs the L1 choice coincides with global average pooling.
inline Tensor subsample_ss(const Tensor& x, Reducer reducer) {
    if (x.rank() != 4) throw ShapeError("subsampler expects a rank-4 tensor");
    const int64_t n_batch = x.batch(), n_ch = x.channels();
    const int64_t plane = x.height() * x.width();
    const double inv_area = 1.0 / static_cast<double>(plane);
    Tensor out({n_batch, n_ch});
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch = 0; ch < n_ch; ++ch) {
            const double* p = x.plane(n, ch);
            double s = 0.0;
            switch (reducer) {
                case Reducer::L1:
                    for (int64_t i = 0; i < plane; ++i) s += std::abs(p[i]);
                    break;
                case Reducer::L2: {
                    double sq = 0.0;
                    for (int64_t i = 0; i < plane; ++i) sq += p[i] * p[i];
                    s = std::sqrt(sq);
                    break;
                }
                case Reducer::Linf:
                    for (int64_t i = 0; i < plane; ++i) s = std::max(s, std::abs(p[i]));
                    break;
                case Reducer::Var: {
                    double sum = 0.0;
                    for (int64_t i = 0; i < plane; ++i) sum += p[i];
                    const double mean = sum * inv_area;
                    double sq = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double d = p[i] - mean;
                        sq += d * d;
                    }
                    s = sq * inv_area;
                    break;
                }
            }
            out.at(n, ch) = s * inv_area;
        }
    }
    return out;
}

inline Tensor subsample_ss_backward(const Tensor& x, Reducer reducer, const Tensor& gss) {
    if (gss.rank() != 2 || gss.extent(0) != x.batch() || gss.extent(1) != x.channels()) {
        throw ShapeError("subsampler backward shape mismatch");
    }
    const int64_t n_batch = x.batch(), n_ch = x.channels();
    const int64_t plane = x.height() * x.width();
    const double inv_area = 1.0 / static_cast<double>(plane);
    Tensor dx(x.shape());
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch = 0; ch < n_ch; ++ch) {
            const double g = gss.at(n, ch) * inv_area;
            if (g == 0.0) continue;
            const double* p = x.plane(n, ch);
            double* d = dx.plane(n, ch);
            switch (reducer) {
                case Reducer::L1:
                    for (int64_t i = 0; i < plane; ++i) {
                        d[i] = g * (p[i] > 0.0 ? 1.0 : (p[i] < 0.0 ? -1.0 : 0.0));
                    }
                    break;
                case Reducer::L2: {
                    double sq = 0.0;
                    for (int64_t i = 0; i < plane; ++i) sq += p[i] * p[i];
                    const double norm = std::sqrt(sq);
                    if (norm == 0.0) break;  // subgradient 0 at the origin
                    for (int64_t i = 0; i < plane; ++i) d[i] = g * p[i] / norm;
                    break;
                }
                case Reducer::Linf: {
                    // Subgradient at the first position attaining the max.
                    int64_t arg = 0;
                    double best = std::abs(p[0]);
                    for (int64_t i = 1; i < plane; ++i) {
                        if (std::abs(p[i]) > best) {
                            best = std::abs(p[i]);
                            arg = i;
                        }
                    }
                    d[arg] = g * (p[arg] > 0.0 ? 1.0 : (p[arg] < 0.0 ? -1.0 : 0.0));
                    break;
                }
                case Reducer::Var: {
                    double sum = 0.0;
                    for (int64_t i = 0; i < plane; ++i) sum += p[i];
                    const double mean = sum * inv_area;
                    for (int64_t i = 0; i < plane; ++i) {
                        d[i] = g * 2.0 * inv_area * (p[i] - mean);
                    }
                    break;
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Saliency predictor: relu(ss(x) * phi^T + rho)
// ---------------------------------------------------------------------------

struct SaliencyCache {
    Tensor preact;  // (N, C_out) before the ReLU
};

inline Tensor saliency_g(const Tensor& ssx, const SaliencyParams& p,
                         SaliencyCache* cache = nullptr) {
    if (ssx.rank() != 2 || ssx.extent(1) != p.in_channels()) {
        throw ShapeError("saliency predictor input mismatch");
    }
    const int64_t n_batch = ssx.extent(0), c_out = p.out_channels(), c_in = p.in_channels();
    Tensor pre({n_batch, c_out});
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t o = 0; o < c_out; ++o) {
            double acc = 0.0;
            for (int64_t i = 0; i < c_in; ++i) acc += ssx.at(n, i) * p.phi.at(o, i);
            pre.at(n, o) = acc + p.rho[o];
        }
    }
    if (cache) cache->preact = pre;
    return relu(pre);
}

struct SaliencyGrads {
    Tensor dssx;
    Tensor dphi;
    Tensor drho;
};

inline SaliencyGrads saliency_g_backward(const Tensor& ssx, const SaliencyParams& p,
                                         const SaliencyCache& cache, const Tensor& gg) {
    const int64_t n_batch = ssx.extent(0), c_out = p.out_channels(), c_in = p.in_channels();
    if (!gg.same_shape(cache.preact)) throw ShapeError("saliency backward shape mismatch");
    const Tensor dpre = relu_backward(cache.preact, gg);
    SaliencyGrads g{Tensor({n_batch, c_in}), Tensor(p.phi.shape()), Tensor({c_out})};
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t o = 0; o < c_out; ++o) {
            const double d = dpre.at(n, o);
            if (d == 0.0) continue;
            g.drho[o] += d;
            for (int64_t i = 0; i < c_in; ++i) {
                g.dphi.at(o, i) += d * ssx.at(n, i);
                g.dssx.at(n, i) += d * p.phi.at(o, i);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Composite gated layer: relu(pi . (norm(conv(x)) + beta))
// ---------------------------------------------------------------------------

struct FbsCache {
    Tensor input;
    ChannelMask in_mask;
    Tensor ssx;
    SaliencyCache sal;
    Tensor saliency;  // g, post-ReLU
    Tensor pi;        // (N, C_out) gate values after winner selection
    ChannelMask out_mask;
    Tensor conv_out;
    BnCache bn;
    Tensor bn_out;
    Tensor pre_relu;
};

struct FbsResult {
    Tensor y;
    GateRecord record;
};

// Forward pass of one gated layer. The saliency predictor scores every
// output channel from the spatially reduced input; the k most salient
// survive, and only those channels are convolved and normalized. Survivor
// gate values amplify or damp their channels before the ReLU.
inline FbsResult fbs_forward(const Tensor& x, const ChannelMask& in_mask,
                             const FbsConvLayer& layer, double density, bool training,
                             ConvRoute route = ConvRoute::Sparse, FbsCache* cache = nullptr,
                             uint64_t* macs = nullptr, int64_t k_override = 0) {
    layer.conv.validate(x);
    if (layer.sal.in_channels() != x.channels() ||
        layer.sal.out_channels() != layer.conv.out_channels()) {
        throw ShapeError("saliency predictor shape mismatch");
    }
    const int64_t n_batch = x.batch(), c_out = layer.conv.out_channels();
    const int64_t k_kept = k_override > 0 ? k_override : k_from_density(density, c_out);
    if (k_kept > c_out) throw ValueError("survivor count exceeds layer width");

    FbsCache local;
    FbsCache& c = cache ? *cache : local;
    c.input = x;
    c.in_mask = in_mask;
    c.ssx = subsample_ss(x, layer.sal.reducer);
    c.saliency = saliency_g(c.ssx, layer.sal, &c.sal);

    c.pi = Tensor({n_batch, c_out});
    std::vector<std::vector<int64_t>> kept(static_cast<size_t>(n_batch));
    for (int64_t n = 0; n < n_batch; ++n) {
        std::span<const double> row(c.saliency.raw() + n * c_out, static_cast<size_t>(c_out));
        kept[static_cast<size_t>(n)] = wta_keep_indices(row, k_kept);
        for (int64_t ch : kept[static_cast<size_t>(n)]) c.pi.at(n, ch) = c.saliency.at(n, ch);
    }
    c.out_mask = ChannelMask(c_out, std::move(kept));

    if (route == ConvRoute::Sparse) {
        c.conv_out = conv2d_sparse(x, in_mask, layer.conv, c.out_mask, macs);
    } else {
        c.conv_out = apply_mask(conv2d_dense(apply_mask(x, in_mask), layer.conv, macs), c.out_mask);
    }
    c.bn_out = batch_norm(c.conv_out, layer.bn, training, /*use_gamma=*/false, &c.out_mask, &c.bn);

    c.pre_relu = Tensor(c.bn_out.shape());
    const int64_t plane = c.bn_out.height() * c.bn_out.width();
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch : c.out_mask.active[static_cast<size_t>(n)]) {
            const double gate = c.pi.at(n, ch);
            const double* bp = c.bn_out.plane(n, ch);
            double* pp = c.pre_relu.plane(n, ch);
            for (int64_t i = 0; i < plane; ++i) pp[i] = gate * bp[i];
        }
    }

    FbsResult result;
    result.y = relu(c.pre_relu);
    result.record.saliency = c.saliency;
    result.record.active = c.out_mask;
    result.record.k_kept = k_kept;
    result.record.in_active.reserve(static_cast<size_t>(n_batch));
    for (int64_t n = 0; n < n_batch; ++n) {
        result.record.in_active.push_back(
            static_cast<int64_t>(in_mask.active[static_cast<size_t>(n)].size()));
    }
    return result;
}

struct FbsGrads {
    Tensor dx;
    Tensor dtheta;
    Tensor dbeta;
    Tensor dphi;
    Tensor drho;
};

// Reverse pass. lasso_per_g, when nonzero, is added to the saliency gradient
// on every strictly positive entry of g (the L1 penalty applies before the
// winner selection, so suppressed channels still feel it).
inline FbsGrads fbs_backward(const FbsConvLayer& layer, const FbsCache& cache, const Tensor& gout,
                             double lasso_per_g = 0.0) {
    const int64_t n_batch = cache.input.batch();
    const int64_t plane = cache.bn_out.height() * cache.bn_out.width();

    const Tensor dpre = relu_backward(cache.pre_relu, gout);

    // Split the product pi * bn_out.
    Tensor dpi({n_batch, layer.conv.out_channels()});
    Tensor dbn(cache.bn_out.shape());
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch : cache.out_mask.active[static_cast<size_t>(n)]) {
            const double gate = cache.pi.at(n, ch);
            const double* dp = dpre.plane(n, ch);
            const double* bp = cache.bn_out.plane(n, ch);
            double* dbp = dbn.plane(n, ch);
            double acc = 0.0;
            for (int64_t i = 0; i < plane; ++i) {
                acc += dp[i] * bp[i];
                dbp[i] = gate * dp[i];
            }
            dpi.at(n, ch) = acc;
        }
    }

    // Winner selection passes gradients through kept positions only; the
    // Lasso pressure applies to every positive saliency.
    Tensor dg(cache.saliency.shape());
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch : cache.out_mask.active[static_cast<size_t>(n)]) {
            dg.at(n, ch) = dpi.at(n, ch);
        }
    }
    if (lasso_per_g != 0.0) {
        for (int64_t i = 0; i < dg.size(); ++i) {
            if (cache.saliency[i] > 0.0) dg[i] += lasso_per_g;
        }
    }

    const SaliencyGrads sal = saliency_g_backward(cache.ssx, layer.sal, cache.sal, dg);
    const Tensor dx_ss = subsample_ss_backward(cache.input, layer.sal.reducer, sal.dssx);

    const BnGrads bn = batch_norm_backward(layer.bn, cache.bn, dbn);
    ConvGrads conv =
        conv2d_backward(cache.input, cache.in_mask, layer.conv, cache.out_mask, bn.dz);

    FbsGrads g;
    g.dtheta = std::move(conv.dtheta);
    g.dbeta = bn.dbeta;
    g.dphi = sal.dphi;
    g.drho = sal.drho;
    g.dx = std::move(conv.dx);
    for (int64_t i = 0; i < g.dx.size(); ++i) g.dx[i] += dx_ss[i];
    return g;
}

// ---------------------------------------------------------------------------
// Plain batch-normalized layer: relu(gamma * norm(conv(x)) + beta)
// ---------------------------------------------------------------------------

struct PlainConvCache {
    Tensor input;
    ChannelMask in_mask;
    Tensor conv_out;
    BnCache bn;
    Tensor pre_relu;
};

// Ungated reference layer. Input-side sparsity is still exploited: all-zero
// input channels contribute nothing and are skipped.
inline Tensor plain_conv_forward(const Tensor& x, const ChannelMask& in_mask,
                                 const ConvParams& conv, const BnParams& bn, bool training,
                                 ConvRoute route = ConvRoute::Sparse,
                                 PlainConvCache* cache = nullptr, uint64_t* macs = nullptr) {
    PlainConvCache local;
    PlainConvCache& c = cache ? *cache : local;
    c.input = x;
    c.in_mask = in_mask;
    const ChannelMask out_full = ChannelMask::full(x.batch(), conv.out_channels());
    if (route == ConvRoute::Sparse) {
        c.conv_out = conv2d_sparse(x, in_mask, conv, out_full, macs);
    } else {
        c.conv_out = conv2d_dense(apply_mask(x, in_mask), conv, macs);
    }
    c.pre_relu = batch_norm(c.conv_out, bn, training, /*use_gamma=*/true, nullptr, &c.bn);
    return relu(c.pre_relu);
}

struct PlainConvGrads {
    Tensor dx;
    Tensor dtheta;
    Tensor dgamma;
    Tensor dbeta;
};

inline PlainConvGrads plain_conv_backward(const ConvParams& conv, const BnParams& bn,
                                          const PlainConvCache& cache, const Tensor& gout) {
    const Tensor dpre = relu_backward(cache.pre_relu, gout);
    const BnGrads bng = batch_norm_backward(bn, cache.bn, dpre);
    ConvGrads cg = conv2d_backward(cache.input, cache.in_mask, conv,
                                   ChannelMask::full(cache.input.batch(), conv.out_channels()),
                                   bng.dz);
    return PlainConvGrads{std::move(cg.dx), std::move(cg.dtheta), bng.dgamma, bng.dbeta};
}

// ---------------------------------------------------------------------------
// Fully connected layer and global average pooling
// ---------------------------------------------------------------------------

inline Tensor fc_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.extent(1) != weight.extent(1)) {
        throw ShapeError("fc shape mismatch");
    }
    const int64_t n_batch = x.extent(0), c_out = weight.extent(0), c_in = weight.extent(1);
    Tensor out({n_batch, c_out});
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t o = 0; o < c_out; ++o) {
            double acc = 0.0;
            for (int64_t i = 0; i < c_in; ++i) acc += x.at(n, i) * weight.at(o, i);
            out.at(n, o) = acc + bias[o];
        }
    }
    return out;
}

struct FcGrads {
    Tensor dx;
    Tensor dweight;
    Tensor dbias;
};

inline FcGrads fc_backward(const Tensor& x, const Tensor& weight, const Tensor& gout) {
    const int64_t n_batch = x.extent(0), c_out = weight.extent(0), c_in = weight.extent(1);
    FcGrads g{Tensor(x.shape()), Tensor(weight.shape()), Tensor({c_out})};
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t o = 0; o < c_out; ++o) {
            const double d = gout.at(n, o);
            g.dbias[o] += d;
            for (int64_t i = 0; i < c_in; ++i) {
                g.dweight.at(o, i) += d * x.at(n, i);
                g.dx.at(n, i) += d * weight.at(o, i);
            }
        }
    }
    return g;
}

inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global average pool expects rank 4");
    const int64_t n_batch = x.batch(), n_ch = x.channels();
    const int64_t plane = x.height() * x.width();
    const double inv_area = 1.0 / static_cast<double>(plane);
    Tensor out({n_batch, n_ch});
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch = 0; ch < n_ch; ++ch) {
            const double* p = x.plane(n, ch);
            double s = 0.0;
            for (int64_t i = 0; i < plane; ++i) s += p[i];
            out.at(n, ch) = s * inv_area;
        }
    }
    return out;
}

inline Tensor global_avg_pool_backward(const Tensor& x, const Tensor& gout) {
    const int64_t n_batch = x.batch(), n_ch = x.channels();
    const int64_t plane = x.height() * x.width();
    const double inv_area = 1.0 / static_cast<double>(plane);
    Tensor dx(x.shape());
    for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ch = 0; ch < n_ch; ++ch) {
            const double d = gout.at(n, ch) * inv_area;
            double* p = dx.plane(n, ch);
            for (int64_t i = 0; i < plane; ++i) p[i] = d;
        }
    }
    return dx;
}

}  // namespace fbs
