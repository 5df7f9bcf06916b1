#pragma once

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fbs/layers.hpp"
#include "fbs/rng.hpp"

namespace fbs {

// ---------------------------------------------------------------------------
// Network specification
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, FbsConv, Fc, GlobalAvgPool, ResidualBlock };

struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    int64_t channels_out = 0;
    int64_t kernel = 0;
    int64_t stride = 1;
    int64_t padding = 0;
    Reducer reducer = Reducer::L1;
    // Channel count the survivor rule was trained with. Stays at the original
    // width when channels are compacted away, so gating is unchanged.
    int64_t gate_channels = 0;  // 0 means channels_out

    int64_t effective_gate_channels() const {
        return gate_channels > 0 ? gate_channels : channels_out;
    }
};

struct ShapeState {
    int64_t channels = 0, height = 0, width = 0;
    bool pooled = false;  // true once spatial dims are reduced away
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    int64_t in_channels = 3;
    int64_t in_height = 32;
    int64_t in_width = 32;
    int64_t class_count = 10;

    // Walks the layer chain and checks that shapes compose; returns the
    // per-layer output shapes.
    std::vector<ShapeState> shape_chain() const {
        std::vector<ShapeState> out;
        ShapeState s{in_channels, in_height, in_width, false};
        if (in_channels < 1 || in_height < 1 || in_width < 1 || class_count < 2) {
            throw ValueError("network spec needs a valid input shape and >= 2 classes");
        }
        for (const LayerSpec& l : layers) {
            switch (l.kind) {
                case LayerKind::Conv:
                case LayerKind::FbsConv: {
                    if (s.pooled) throw ValueError("conv after pooling is not supported");
                    if (l.kind == LayerKind::FbsConv && l.channels_out < 2) {
                        throw ValueError("gated conv needs at least 2 output channels");
                    }
                    if (l.kernel < 1 || l.stride < 1 || l.padding < 0) {
                        throw ValueError("bad conv geometry");
                    }
                    const int64_t h = (s.height + 2 * l.padding - l.kernel) / l.stride + 1;
                    const int64_t w = (s.width + 2 * l.padding - l.kernel) / l.stride + 1;
                    if (h < 1 || w < 1) throw ValueError("conv output collapses to nothing");
                    s = ShapeState{l.channels_out, h, w, false};
                    break;
                }
                case LayerKind::ResidualBlock: {
                    if (s.pooled) throw ValueError("residual block after pooling");
                    if (l.channels_out < 2) throw ValueError("residual block needs >= 2 channels");
                    if (l.kernel % 2 == 0 || l.padding != (l.kernel - 1) / 2) {
                        throw ValueError(
                            "residual block needs an odd kernel with padding (k-1)/2");
                    }
                    const int64_t h = (s.height + 2 * l.padding - l.kernel) / l.stride + 1;
                    const int64_t w = (s.width + 2 * l.padding - l.kernel) / l.stride + 1;
                    if (h < 1 || w < 1) throw ValueError("residual output collapses to nothing");
                    s = ShapeState{l.channels_out, h, w, false};
                    break;
                }
                case LayerKind::GlobalAvgPool:
                    if (s.pooled) throw ValueError("duplicate pooling");
                    s.pooled = true;
                    s.height = 1;
                    s.width = 1;
                    break;
                case LayerKind::Fc:
                    if (!s.pooled) throw ValueError("fc requires pooled features");
                    s = ShapeState{l.channels_out, 1, 1, true};
                    break;
            }
            out.push_back(s);
        }
        if (layers.empty() || layers.back().kind != LayerKind::Fc ||
            layers.back().channels_out != class_count) {
            throw ValueError("network must end in an fc layer over the classes");
        }
        return out;
    }

    void validate() const { (void)shape_chain(); }
};

inline std::string reducer_name(Reducer r) {
    switch (r) {
        case Reducer::L1: return "l1";
        case Reducer::L2: return "l2";
        case Reducer::Linf: return "linf";
        case Reducer::Var: return "var";
    }
    return "l1";
}

inline Reducer reducer_from_name(const std::string& s) {
    if (s == "l1") return Reducer::L1;
    if (s == "l2") return Reducer::L2;
    if (s == "linf") return Reducer::Linf;
    if (s == "var") return Reducer::Var;
    throw FormatError("unknown reducer '" + s + "'");
}

// One layer per line: kind, then its parameters. Round-trips losslessly.
inline std::string spec_to_text(const NetworkSpec& spec) {
    std::ostringstream out;
    out << "input " << spec.in_channels << ' ' << spec.in_height << ' ' << spec.in_width << '\n';
    out << "classes " << spec.class_count << '\n';
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                out << "conv " << l.channels_out << ' ' << l.kernel << ' ' << l.stride << ' '
                    << l.padding << '\n';
                break;
            case LayerKind::FbsConv:
                out << "fbs_conv " << l.channels_out << ' ' << l.kernel << ' ' << l.stride << ' '
                    << l.padding << ' ' << reducer_name(l.reducer);
                if (l.gate_channels > 0 && l.gate_channels != l.channels_out) {
                    out << ' ' << l.gate_channels;
                }
                out << '\n';
                break;
            case LayerKind::ResidualBlock:
                out << "residual_block " << l.channels_out << ' ' << l.kernel << ' ' << l.stride
                    << ' ' << l.padding << ' ' << reducer_name(l.reducer) << '\n';
                break;
            case LayerKind::GlobalAvgPool:
                out << "global_avg_pool\n";
                break;
            case LayerKind::Fc:
                out << "fc " << l.channels_out << '\n';
                break;
        }
    }
    return out.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
    NetworkSpec spec;
    std::istringstream in(text);
    std::string line;
    bool saw_input = false, saw_classes = false;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind) || kind.empty() || kind[0] == '#') continue;
        auto need = [&](int64_t& v) {
            if (!(ls >> v)) {
                throw FormatError("spec line " + std::to_string(line_no) + ": missing field");
            }
        };
        auto reject_extra = [&] {
            std::string extra;
            if (ls >> extra) {
                throw FormatError("spec line " + std::to_string(line_no) + ": unexpected '" +
                                  extra + "'");
            }
        };
        if (kind == "input") {
            need(spec.in_channels);
            need(spec.in_height);
            need(spec.in_width);
            reject_extra();
            saw_input = true;
        } else if (kind == "classes") {
            need(spec.class_count);
            reject_extra();
            saw_classes = true;
        } else if (kind == "conv" || kind == "fbs_conv" || kind == "residual_block") {
            LayerSpec l;
            l.kind = kind == "conv" ? LayerKind::Conv
                                    : (kind == "fbs_conv" ? LayerKind::FbsConv
                                                          : LayerKind::ResidualBlock);
            need(l.channels_out);
            need(l.kernel);
            need(l.stride);
            need(l.padding);
            if (l.kind != LayerKind::Conv) {
                std::string red;
                if (!(ls >> red)) {
                    throw FormatError("spec line " + std::to_string(line_no) +
                                      ": missing reducer");
                }
                l.reducer = reducer_from_name(red);
                if (l.kind == LayerKind::FbsConv && (ls >> l.gate_channels)) {
                    if (l.gate_channels < l.channels_out) {
                        throw FormatError("spec line " + std::to_string(line_no) +
                                          ": gate channel count below layer width");
                    }
                }
            }
            reject_extra();
            spec.layers.push_back(l);
        } else if (kind == "global_avg_pool") {
            reject_extra();
            spec.layers.push_back(LayerSpec{LayerKind::GlobalAvgPool});
        } else if (kind == "fc") {
            LayerSpec l;
            l.kind = LayerKind::Fc;
            need(l.channels_out);
            reject_extra();
            spec.layers.push_back(l);
        } else {
            throw FormatError("spec line " + std::to_string(line_no) + ": unknown layer kind '" +
                              kind + "'");
        }
    }
    if (!saw_input || !saw_classes) throw FormatError("spec needs 'input' and 'classes' lines");
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Runtime network
// ---------------------------------------------------------------------------

// One convolution with its normalization, and, when gated, the saliency
// predictor driving dynamic channel selection.
struct ConvUnit {
    ConvParams conv;
    BnParams bn;
    SaliencyParams sal;
    bool gated = false;
};

struct FcUnit {
    Tensor weight;  // (K, C_in)
    Tensor bias;    // (K)
};

struct PoolUnit {};

// Toy residual block: two gated convs on the main branch and an identity or
// gated 1x1 downsample shortcut; the branch sum carries the union of the two
// branch masks.
struct ResidualUnit {
    ConvUnit conv_a;
    ConvUnit conv_b;
    std::optional<ConvUnit> shortcut;
};

using LayerParams = std::variant<ConvUnit, FcUnit, PoolUnit, ResidualUnit>;

struct Network {
    NetworkSpec spec;
    std::vector<LayerParams> layers;
    double density = 1.0;  // density the parameters were last trained at
    uint64_t step = 0;
    std::array<uint64_t, 4> rng_state{};
};

namespace detail {

inline Tensor he_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

inline ConvUnit make_conv_unit(int64_t c_in, const LayerSpec& l, bool gated, Rng& rng,
                               int64_t kernel, int64_t stride, int64_t padding) {
    ConvUnit u;
    u.gated = gated;
    u.conv.theta = he_normal({l.channels_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng);
    u.conv.stride = stride;
    u.conv.padding = padding;
    u.bn = BnParams::make(l.channels_out);
    if (gated) {
        u.sal.phi = he_normal({l.channels_out, c_in}, c_in, rng);
        u.sal.rho = Tensor::full({l.channels_out}, 1.0);
        u.sal.reducer = l.reducer;
    }
    return u;
}

}  // namespace detail

inline Network init_network(const NetworkSpec& spec, uint64_t seed) {
    spec.validate();
    Network net;
    net.spec = spec;
    Rng rng(seed);
    int64_t c_in = spec.in_channels;
    for (const LayerSpec& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::FbsConv:
                net.layers.emplace_back(detail::make_conv_unit(
                    c_in, l, l.kind == LayerKind::FbsConv, rng, l.kernel, l.stride, l.padding));
                c_in = l.channels_out;
                break;
            case LayerKind::ResidualBlock: {
                ResidualUnit u;
                u.conv_a = detail::make_conv_unit(c_in, l, true, rng, l.kernel, l.stride,
                                                  l.padding);
                u.conv_b = detail::make_conv_unit(l.channels_out, l, true, rng, l.kernel, 1,
                                                  l.padding);
                if (l.stride != 1 || c_in != l.channels_out) {
                    u.shortcut = detail::make_conv_unit(c_in, l, true, rng, 1, l.stride, 0);
                }
                net.layers.emplace_back(std::move(u));
                c_in = l.channels_out;
                break;
            }
            case LayerKind::GlobalAvgPool:
                net.layers.emplace_back(PoolUnit{});
                break;
            case LayerKind::Fc: {
                FcUnit u;
                u.weight = detail::he_normal({l.channels_out, c_in}, c_in, rng);
                u.bias = Tensor::zeros({l.channels_out});
                net.layers.emplace_back(std::move(u));
                c_in = l.channels_out;
                break;
            }
        }
    }
    net.rng_state = rng.state();
    return net;
}

// ---------------------------------------------------------------------------
// Forward / backward over the whole chain
// ---------------------------------------------------------------------------

struct FcCache {
    Tensor input;
};
struct PoolCache {
    Tensor input;
};
struct ResidualCache {
    FbsCache a;
    FbsCache b;
    std::optional<FbsCache> shortcut;
};

using LayerCache = std::variant<FbsCache, PlainConvCache, FcCache, PoolCache, ResidualCache>;

struct ForwardContext {
    std::vector<LayerCache> caches;
};

struct ForwardResult {
    Tensor logits;
    std::vector<GateRecord> gates;  // one per gated conv, in execution order
    uint64_t conv_macs = 0;         // multiply-accumulates actually executed
};

// Merge rule for branch sums: a channel of the sum is sparse only when it is
// sparse in both inputs, so the active set is the union.
inline ChannelMask residual_merge(const ChannelMask& a, const ChannelMask& b) {
    if (a.channel_count != b.channel_count || a.samples() != b.samples()) {
        throw ShapeError("residual merge needs matching masks");
    }
    ChannelMask out;
    out.channel_count = a.channel_count;
    out.active.resize(a.active.size());
    for (size_t n = 0; n < a.active.size(); ++n) {
        std::set_union(a.active[n].begin(), a.active[n].end(), b.active[n].begin(),
                       b.active[n].end(), std::back_inserter(out.active[n]));
    }
    return out;
}

inline ForwardResult network_forward(const Network& net, const Tensor& x, double density,
                                     bool training, ConvRoute route = ConvRoute::Sparse,
                                     ForwardContext* ctx = nullptr) {
    if (x.rank() != 4 || x.channels() != net.spec.in_channels ||
        x.height() != net.spec.in_height || x.width() != net.spec.in_width) {
        throw ShapeError("input does not match the network spec");
    }
    const int64_t n_batch = x.batch();
    ForwardResult result;
    if (ctx) ctx->caches.clear();

    Tensor cur = x;
    ChannelMask cur_mask = ChannelMask::full(n_batch, net.spec.in_channels);

    auto run_gated = [&](const ConvUnit& u, const Tensor& in, const ChannelMask& in_mask,
                         int64_t gate_channels, FbsCache* cache) {
        FbsConvLayer layer{u.conv, u.bn, u.sal};
        const int64_t k = k_from_density(density, gate_channels);
        FbsResult r = fbs_forward(in, in_mask, layer, density, training, route, cache,
                                  &result.conv_macs, k);
        result.gates.push_back(r.record);
        return r;
    };

    for (size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& ls = net.spec.layers[li];
        const LayerParams& lp = net.layers[li];
        switch (ls.kind) {
            case LayerKind::FbsConv: {
                const auto& u = std::get<ConvUnit>(lp);
                FbsCache cache;
                FbsResult r = run_gated(u, cur, cur_mask, ls.effective_gate_channels(),
                                        ctx ? &cache : nullptr);
                cur = std::move(r.y);
                cur_mask = result.gates.back().active;
                if (ctx) ctx->caches.emplace_back(std::move(cache));
                break;
            }
            case LayerKind::Conv: {
                const auto& u = std::get<ConvUnit>(lp);
                PlainConvCache cache;
                cur = plain_conv_forward(cur, cur_mask, u.conv, u.bn, training, route,
                                         ctx ? &cache : nullptr, &result.conv_macs);
                cur_mask = ChannelMask::full(n_batch, ls.channels_out);
                if (ctx) ctx->caches.emplace_back(std::move(cache));
                break;
            }
            case LayerKind::ResidualBlock: {
                const auto& u = std::get<ResidualUnit>(lp);
                ResidualCache cache;
                FbsResult a = run_gated(u.conv_a, cur, cur_mask, u.conv_a.conv.out_channels(),
                                        ctx ? &cache.a : nullptr);
                FbsResult b = run_gated(u.conv_b, a.y, a.record.active,
                                        u.conv_b.conv.out_channels(), ctx ? &cache.b : nullptr);
                Tensor sum;
                ChannelMask merged;
                if (u.shortcut) {
                    cache.shortcut.emplace();
                    FbsResult sc =
                        run_gated(*u.shortcut, cur, cur_mask, u.shortcut->conv.out_channels(),
                                  ctx ? &*cache.shortcut : nullptr);
                    sum = std::move(b.y);
                    for (int64_t i = 0; i < sum.size(); ++i) sum[i] += sc.y[i];
                    merged = residual_merge(result.gates.back().active,
                                            result.gates[result.gates.size() - 2].active);
                } else {
                    sum = std::move(b.y);
                    for (int64_t i = 0; i < sum.size(); ++i) sum[i] += cur[i];
                    merged = residual_merge(b.record.active, cur_mask);
                }
                cur = std::move(sum);
                cur_mask = std::move(merged);
                if (ctx) ctx->caches.emplace_back(std::move(cache));
                break;
            }
            case LayerKind::GlobalAvgPool: {
                PoolCache cache{cur};
                Tensor pooled = global_avg_pool(cur);
                cur = std::move(pooled);
                if (ctx) ctx->caches.emplace_back(std::move(cache));
                break;
            }
            case LayerKind::Fc: {
                const auto& u = std::get<FcUnit>(lp);
                FcCache cache{cur};
                cur = fc_forward(cur, u.weight, u.bias);
                if (ctx) ctx->caches.emplace_back(std::move(cache));
                break;
            }
        }
    }
    result.logits = std::move(cur);
    return result;
}

struct ConvUnitGrads {
    Tensor dtheta;
    Tensor dgamma;
    Tensor dbeta;
    Tensor dphi;
    Tensor drho;
};
struct FcUnitGrads {
    Tensor dweight;
    Tensor dbias;
};
struct ResidualUnitGrads {
    ConvUnitGrads a;
    ConvUnitGrads b;
    std::optional<ConvUnitGrads> shortcut;
};

using LayerGrads = std::variant<std::monostate, ConvUnitGrads, FcUnitGrads, ResidualUnitGrads>;

struct NetGradients {
    std::vector<LayerGrads> layers;
};

namespace detail {

inline ConvUnitGrads gated_backward(const ConvUnit& u, const FbsCache& cache, const Tensor& gout,
                                    double lasso_coeff, Tensor& dx_out) {
    FbsConvLayer layer{u.conv, u.bn, u.sal};
    FbsGrads g = fbs_backward(layer, cache, gout, lasso_coeff);
    ConvUnitGrads out;
    out.dtheta = std::move(g.dtheta);
    out.dbeta = std::move(g.dbeta);
    out.dphi = std::move(g.dphi);
    out.drho = std::move(g.drho);
    dx_out = std::move(g.dx);
    return out;
}

}  // namespace detail

// Reverse pass over the cached forward. lasso_coeff is the per-entry weight
// added to every positive saliency (lambda / batch for the mean L1 penalty).
inline NetGradients network_backward(const Network& net, const ForwardContext& ctx,
                                     const Tensor& dlogits, double lasso_coeff = 0.0) {
    if (ctx.caches.size() != net.layers.size()) {
        throw ValueError("forward context does not match the network");
    }
    NetGradients grads;
    grads.layers.resize(net.layers.size());
    Tensor dcur = dlogits;
    for (int64_t li = static_cast<int64_t>(net.layers.size()) - 1; li >= 0; --li) {
        const LayerSpec& ls = net.spec.layers[static_cast<size_t>(li)];
        const LayerParams& lp = net.layers[static_cast<size_t>(li)];
        const LayerCache& lc = ctx.caches[static_cast<size_t>(li)];
        switch (ls.kind) {
            case LayerKind::Fc: {
                const auto& u = std::get<FcUnit>(lp);
                const auto& cache = std::get<FcCache>(lc);
                FcGrads g = fc_backward(cache.input, u.weight, dcur);
                grads.layers[static_cast<size_t>(li)] =
                    FcUnitGrads{std::move(g.dweight), std::move(g.dbias)};
                dcur = std::move(g.dx);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const auto& cache = std::get<PoolCache>(lc);
                dcur = global_avg_pool_backward(cache.input, dcur);
                break;
            }
            case LayerKind::FbsConv: {
                const auto& u = std::get<ConvUnit>(lp);
                const auto& cache = std::get<FbsCache>(lc);
                Tensor dx;
                grads.layers[static_cast<size_t>(li)] =
                    detail::gated_backward(u, cache, dcur, lasso_coeff, dx);
                dcur = std::move(dx);
                break;
            }
            case LayerKind::Conv: {
                const auto& u = std::get<ConvUnit>(lp);
                const auto& cache = std::get<PlainConvCache>(lc);
                PlainConvGrads g = plain_conv_backward(u.conv, u.bn, cache, dcur);
                ConvUnitGrads cg;
                cg.dtheta = std::move(g.dtheta);
                cg.dgamma = std::move(g.dgamma);
                cg.dbeta = std::move(g.dbeta);
                grads.layers[static_cast<size_t>(li)] = std::move(cg);
                dcur = std::move(g.dx);
                break;
            }
            case LayerKind::ResidualBlock: {
                const auto& u = std::get<ResidualUnit>(lp);
                const auto& cache = std::get<ResidualCache>(lc);
                ResidualUnitGrads rg;
                Tensor d_b_in;
                rg.b = detail::gated_backward(u.conv_b, cache.b, dcur, lasso_coeff, d_b_in);
                Tensor d_a_in;
                rg.a = detail::gated_backward(u.conv_a, cache.a, d_b_in, lasso_coeff, d_a_in);
                if (u.shortcut) {
                    Tensor d_sc_in;
                    rg.shortcut = detail::gated_backward(*u.shortcut, *cache.shortcut, dcur,
                                                         lasso_coeff, d_sc_in);
                    for (int64_t i = 0; i < d_a_in.size(); ++i) d_a_in[i] += d_sc_in[i];
                } else {
                    for (int64_t i = 0; i < d_a_in.size(); ++i) d_a_in[i] += dcur[i];
                }
                grads.layers[static_cast<size_t>(li)] = std::move(rg);
                dcur = std::move(d_a_in);
                break;
            }
        }
    }
    return grads;
}

// Folds this step's batch statistics into every normalization layer.
inline void apply_bn_updates(Network& net, const ForwardContext& ctx) {
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const LayerCache& lc = ctx.caches[li];
        if (std::holds_alternative<FbsCache>(lc)) {
            bn_update_running(std::get<ConvUnit>(net.layers[li]).bn, std::get<FbsCache>(lc).bn);
        } else if (std::holds_alternative<PlainConvCache>(lc)) {
            bn_update_running(std::get<ConvUnit>(net.layers[li]).bn,
                              std::get<PlainConvCache>(lc).bn);
        } else if (std::holds_alternative<ResidualCache>(lc)) {
            auto& u = std::get<ResidualUnit>(net.layers[li]);
            const auto& cache = std::get<ResidualCache>(lc);
            bn_update_running(u.conv_a.bn, cache.a.bn);
            bn_update_running(u.conv_b.bn, cache.b.bn);
            if (u.shortcut) bn_update_running(u.shortcut->bn, cache.shortcut->bn);
        }
    }
}

// ---------------------------------------------------------------------------
// Trainable parameter traversal
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
void visit_conv_unit(ConvUnit& u, Fn&& fn) {
    fn(u.conv.theta);
    if (!u.gated) fn(u.bn.gamma);
    fn(u.bn.beta);
    if (u.gated) {
        fn(u.sal.phi);
        fn(u.sal.rho);
    }
}

template <typename Fn>
void visit_conv_unit_pair(ConvUnit& u, ConvUnitGrads& g, Fn&& fn) {
    fn(u.conv.theta, g.dtheta);
    if (!u.gated) fn(u.bn.gamma, g.dgamma);
    fn(u.bn.beta, g.dbeta);
    if (u.gated) {
        fn(u.sal.phi, g.dphi);
        fn(u.sal.rho, g.drho);
    }
}

}  // namespace detail

template <typename Fn>
void visit_trainable(Network& net, Fn&& fn) {
    for (auto& lp : net.layers) {
        if (auto* cu = std::get_if<ConvUnit>(&lp)) {
            detail::visit_conv_unit(*cu, fn);
        } else if (auto* fc = std::get_if<FcUnit>(&lp)) {
            fn(fc->weight);
            fn(fc->bias);
        } else if (auto* ru = std::get_if<ResidualUnit>(&lp)) {
            detail::visit_conv_unit(ru->conv_a, fn);
            detail::visit_conv_unit(ru->conv_b, fn);
            if (ru->shortcut) detail::visit_conv_unit(*ru->shortcut, fn);
        }
    }
}

template <typename Fn>
void visit_trainable_pair(Network& net, NetGradients& grads, Fn&& fn) {
    for (size_t li = 0; li < net.layers.size(); ++li) {
        auto& lp = net.layers[li];
        auto& lg = grads.layers[li];
        if (auto* cu = std::get_if<ConvUnit>(&lp)) {
            detail::visit_conv_unit_pair(*cu, std::get<ConvUnitGrads>(lg), fn);
        } else if (auto* fc = std::get_if<FcUnit>(&lp)) {
            auto& g = std::get<FcUnitGrads>(lg);
            fn(fc->weight, g.dweight);
            fn(fc->bias, g.dbias);
        } else if (auto* ru = std::get_if<ResidualUnit>(&lp)) {
            auto& g = std::get<ResidualUnitGrads>(lg);
            detail::visit_conv_unit_pair(ru->conv_a, g.a, fn);
            detail::visit_conv_unit_pair(ru->conv_b, g.b, fn);
            if (ru->shortcut) detail::visit_conv_unit_pair(*ru->shortcut, *g.shortcut, fn);
        }
    }
}

// Trainable parameter count (normalization running statistics excluded).
inline int64_t param_count(const Network& net) {
    int64_t total = 0;
    visit_trainable(const_cast<Network&>(net), [&](const Tensor& t) { total += t.size(); });
    return total;
}

// ---------------------------------------------------------------------------
// Reference architecture builders
// ---------------------------------------------------------------------------

// Eight 3x3 conv layers (64,64,128,128,128,192,192,192 channels divided by
// channel_div), global average pooling and a 10-way classifier for 32x32 RGB
// inputs. Strides and paddings produce the spatial chain
// 30,30,15,15,15,8,8,8. channel_div scales the network down for fast
// deterministic experiments.
inline NetworkSpec mcifarnet_spec(bool gated = true, int64_t channel_div = 1,
                                  Reducer reducer = Reducer::L1) {
    if (channel_div < 1) throw ValueError("channel divisor must be >= 1");
    NetworkSpec spec;
    spec.in_channels = 3;
    spec.in_height = 32;
    spec.in_width = 32;
    spec.class_count = 10;
    const int64_t widths[8] = {64, 64, 128, 128, 128, 192, 192, 192};
    const int64_t strides[8] = {1, 1, 2, 1, 1, 2, 1, 1};
    const int64_t paddings[8] = {0, 1, 1, 1, 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) {
        LayerSpec l;
        l.kind = gated ? LayerKind::FbsConv : LayerKind::Conv;
        l.channels_out = widths[i] / channel_div;
        l.kernel = 3;
        l.stride = strides[i];
        l.padding = paddings[i];
        l.reducer = reducer;
        spec.layers.push_back(l);
    }
    spec.layers.push_back(LayerSpec{LayerKind::GlobalAvgPool});
    LayerSpec fc;
    fc.kind = LayerKind::Fc;
    fc.channels_out = 10;
    spec.layers.push_back(fc);
    spec.validate();
    return spec;
}

inline NetworkSpec build_mcifarnet() { return mcifarnet_spec(); }

}  // namespace fbs
