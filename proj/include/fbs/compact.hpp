#pragma once

#include <string>
#include <vector>

#include "fbs/network.hpp"

namespace fbs {

// Gate statistics for one gated layer over an evaluation set: how often each
// channel was selected, and the per-class skip probabilities behind the
// heatmaps.
struct LayerUsage {
    std::vector<int64_t> selection_count;  // per channel
    int64_t sample_count = 0;
    Tensor skip_prob;  // (class_count, channels): fraction of class samples
                       // that suppressed the channel
};

struct UsageStats {
    std::vector<LayerUsage> layers;  // one per gated conv, execution order
    double density = 1.0;
};

// Runs the network over a labeled set in inference mode and tallies, per
// gated layer, channel selections overall and per class.
inline UsageStats collect_usage(const Network& net, const Tensor& images,
                                const std::vector<int64_t>& labels, int64_t class_count,
                                double density, int64_t batch_size = 64) {
    const int64_t n = images.batch();
    if (n == 0 || static_cast<int64_t>(labels.size()) != n) {
        throw ValueError("usage collection needs a non-empty labeled set");
    }
    UsageStats stats;
    stats.density = density;

    std::vector<std::vector<std::vector<int64_t>>> skip_counts;  // layer -> class -> channel
    std::vector<int64_t> class_totals(static_cast<size_t>(class_count), 0);

    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t count = std::min(batch_size, n - start);
        Tensor batch({count, images.channels(), images.height(), images.width()});
        std::copy(images.raw() + start * images.channels() * images.height() * images.width(),
                  images.raw() + (start + count) * images.channels() * images.height() *
                      images.width(),
                  batch.raw());
        const ForwardResult fr = network_forward(net, batch, density, /*training=*/false);
        if (stats.layers.empty()) {
            stats.layers.resize(fr.gates.size());
            skip_counts.resize(fr.gates.size());
            for (size_t g = 0; g < fr.gates.size(); ++g) {
                const int64_t channels = fr.gates[g].active.channel_count;
                stats.layers[g].selection_count.assign(static_cast<size_t>(channels), 0);
                skip_counts[g].assign(static_cast<size_t>(class_count),
                                      std::vector<int64_t>(static_cast<size_t>(channels), 0));
            }
        }
        for (int64_t i = 0; i < count; ++i) {
            const int64_t label = labels[static_cast<size_t>(start + i)];
            if (label < 0 || label >= class_count) throw ValueError("label out of range");
            ++class_totals[static_cast<size_t>(label)];
            for (size_t g = 0; g < fr.gates.size(); ++g) {
                const auto& active = fr.gates[g].active.active[static_cast<size_t>(i)];
                const int64_t channels = fr.gates[g].active.channel_count;
                size_t ai = 0;
                for (int64_t c = 0; c < channels; ++c) {
                    const bool selected =
                        ai < active.size() && active[ai] == c ? (++ai, true) : false;
                    if (selected) {
                        ++stats.layers[g].selection_count[static_cast<size_t>(c)];
                    } else {
                        ++skip_counts[g][static_cast<size_t>(label)][static_cast<size_t>(c)];
                    }
                }
            }
        }
    }

    for (size_t g = 0; g < stats.layers.size(); ++g) {
        LayerUsage& u = stats.layers[g];
        u.sample_count = n;
        const int64_t channels = static_cast<int64_t>(u.selection_count.size());
        u.skip_prob = Tensor({class_count, channels});
        for (int64_t y = 0; y < class_count; ++y) {
            const int64_t total = class_totals[static_cast<size_t>(y)];
            for (int64_t c = 0; c < channels; ++c) {
                u.skip_prob.at(y, c) =
                    total == 0 ? 0.0
                               : static_cast<double>(
                                     skip_counts[g][static_cast<size_t>(y)][static_cast<size_t>(c)]) /
                                     static_cast<double>(total);
            }
        }
    }
    return stats;
}

// Permanently removes channels the gate never selected over the usage set.
// The removed channels' weights disappear from the layer itself and from the
// consumer side of the next layer; survivor counts keep using the original
// width, so forward outputs on the usage set are unchanged bitwise.
// Sequential networks only; residual blocks are rejected.
inline Network compact(const Network& net, const UsageStats& usage) {
    for (const LayerSpec& l : net.spec.layers) {
        if (l.kind == LayerKind::ResidualBlock) {
            throw ValueError("compaction supports sequential networks only");
        }
    }
    // Gated conv indices in execution order.
    std::vector<size_t> gated_layers;
    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        if (net.spec.layers[li].kind == LayerKind::FbsConv) gated_layers.push_back(li);
    }
    if (gated_layers.size() != usage.layers.size()) {
        throw ValueError("usage statistics do not cover every gated layer");
    }

    Network out = net;

    // Per gated layer, the channels to keep (selected at least once).
    std::vector<std::vector<int64_t>> keep(gated_layers.size());
    for (size_t g = 0; g < gated_layers.size(); ++g) {
        const auto& counts = usage.layers[g].selection_count;
        const LayerSpec& ls = net.spec.layers[gated_layers[g]];
        if (static_cast<int64_t>(counts.size()) != ls.channels_out) {
            throw ValueError("usage channel count mismatch");
        }
        for (int64_t c = 0; c < ls.channels_out; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) keep[g].push_back(c);
        }
        const int64_t k = k_from_density(usage.density, ls.effective_gate_channels());
        if (static_cast<int64_t>(keep[g].size()) < k) {
            throw ValueError("compaction would drop below the survivor count");
        }
    }

    auto select_rows = [](const Tensor& t, const std::vector<int64_t>& rows) {
        std::vector<int64_t> shape = t.shape();
        shape[0] = static_cast<int64_t>(rows.size());
        Tensor r(shape);
        const int64_t row_size = t.size() / t.extent(0);
        for (size_t i = 0; i < rows.size(); ++i) {
            std::copy(t.raw() + rows[i] * row_size, t.raw() + (rows[i] + 1) * row_size,
                      r.raw() + static_cast<int64_t>(i) * row_size);
        }
        return r;
    };
    auto select_cols = [](const Tensor& t, const std::vector<int64_t>& cols) {
        // Drops entries along axis 1 (input channels of conv weights, columns
        // of predictor or fc weights).
        std::vector<int64_t> shape = t.shape();
        shape[1] = static_cast<int64_t>(cols.size());
        Tensor r(shape);
        const int64_t inner = t.size() / (t.extent(0) * t.extent(1));
        for (int64_t row = 0; row < t.extent(0); ++row) {
            for (size_t j = 0; j < cols.size(); ++j) {
                const double* src = t.raw() + (row * t.extent(1) + cols[j]) * inner;
                double* dst =
                    r.raw() + (row * static_cast<int64_t>(cols.size()) + static_cast<int64_t>(j)) *
                                  inner;
                std::copy(src, src + inner, dst);
            }
        }
        return r;
    };

    for (size_t g = 0; g < gated_layers.size(); ++g) {
        const size_t li = gated_layers[g];
        const std::vector<int64_t>& rows = keep[g];
        auto& unit = std::get<ConvUnit>(out.layers[li]);
        LayerSpec& ls = out.spec.layers[li];
        if (static_cast<int64_t>(rows.size()) == ls.channels_out) continue;

        ls.gate_channels = ls.effective_gate_channels();
        ls.channels_out = static_cast<int64_t>(rows.size());
        unit.conv.theta = select_rows(unit.conv.theta, rows);
        unit.bn.gamma = select_rows(unit.bn.gamma, rows);
        unit.bn.beta = select_rows(unit.bn.beta, rows);
        unit.bn.running_mean = select_rows(unit.bn.running_mean, rows);
        unit.bn.running_var = select_rows(unit.bn.running_var, rows);
        unit.sal.phi = select_rows(unit.sal.phi, rows);
        unit.sal.rho = select_rows(unit.sal.rho, rows);

        // Consumer side: the next parameterized layer reads fewer channels.
        for (size_t lj = li + 1; lj < out.layers.size(); ++lj) {
            if (auto* next = std::get_if<ConvUnit>(&out.layers[lj])) {
                next->conv.theta = select_cols(next->conv.theta, rows);
                if (next->gated) next->sal.phi = select_cols(next->sal.phi, rows);
                break;
            }
            if (auto* fc = std::get_if<FcUnit>(&out.layers[lj])) {
                fc->weight = select_cols(fc->weight, rows);
                break;
            }
        }
    }
    out.spec.validate();
    return out;
}

}  // namespace fbs
