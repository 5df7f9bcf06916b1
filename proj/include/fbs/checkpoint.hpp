#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fbs/network.hpp"

namespace fbs {

// Checkpoint layout, all integers and floats little-endian:
//   "FBSCKPT1"  8-byte magic
//   u32 major, u32 minor         (major must match; older minors load)
//   u64 spec length, spec text   (the textual network form)
//   f64 density, u64 step, 4xu64 generator state
//   per layer, a kind tag followed by its tensors (rank, extents, values)
//   "FBSCKEND"  8-byte trailer
inline constexpr char kCheckpointMagic[8] = {'F', 'B', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr char kCheckpointEnd[8] = {'F', 'B', 'S', 'C', 'K', 'E', 'N', 'D'};
inline constexpr uint32_t kCheckpointMajor = 1;
inline constexpr uint32_t kCheckpointMinor = 1;

namespace detail {

class ByteWriter {
public:
    void u8(uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void raw(const char* p, size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    void tensor(const Tensor& t) {
        u32(static_cast<uint32_t>(t.rank()));
        for (int64_t a = 0; a < t.rank(); ++a) i64(t.extent(a));
        for (int64_t i = 0; i < t.size(); ++i) f64(t[i]);
    }
    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(bytes_[pos_++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes_[pos_++])) << (8 * i);
        return v;
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(size_t n) {
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    Tensor tensor() {
        const uint32_t rank = u32();
        if (rank < 1 || rank > 8) throw FormatError("checkpoint tensor has invalid rank");
        std::vector<int64_t> shape(rank);
        for (auto& e : shape) e = i64();
        Tensor t(shape);
        for (int64_t i = 0; i < t.size(); ++i) t[i] = f64();
        return t;
    }
    size_t pos() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError("checkpoint truncated at offset " + std::to_string(pos_));
        }
    }
    std::vector<char> bytes_;
    size_t pos_ = 0;
};

inline void write_conv_unit(ByteWriter& w, const ConvUnit& u) {
    w.tensor(u.conv.theta);
    w.tensor(u.bn.gamma);
    w.tensor(u.bn.beta);
    w.tensor(u.bn.running_mean);
    w.tensor(u.bn.running_var);
    w.f64(u.bn.eps);
    w.f64(u.bn.momentum);
    w.u8(u.bn.stats_ready ? 1 : 0);
    if (u.gated) {
        w.tensor(u.sal.phi);
        w.tensor(u.sal.rho);
    }
}

inline void read_conv_unit(ByteReader& r, ConvUnit& u) {
    u.conv.theta = r.tensor();
    u.bn.gamma = r.tensor();
    u.bn.beta = r.tensor();
    u.bn.running_mean = r.tensor();
    u.bn.running_var = r.tensor();
    u.bn.eps = r.f64();
    u.bn.momentum = r.f64();
    u.bn.stats_ready = r.u8() != 0;
    if (u.gated) {
        u.sal.phi = r.tensor();
        u.sal.rho = r.tensor();
    }
}

}  // namespace detail

inline std::vector<char> checkpoint_bytes(const Network& net) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointMajor);
    w.u32(kCheckpointMinor);
    const std::string spec = spec_to_text(net.spec);
    w.u64(spec.size());
    w.raw(spec.data(), spec.size());
    w.f64(net.density);
    w.u64(net.step);
    for (uint64_t s : net.rng_state) w.u64(s);
    for (size_t li = 0; li < net.layers.size(); ++li) {
        w.u8(static_cast<uint8_t>(net.spec.layers[li].kind));
        const LayerParams& lp = net.layers[li];
        if (const auto* cu = std::get_if<ConvUnit>(&lp)) {
            detail::write_conv_unit(w, *cu);
        } else if (const auto* fc = std::get_if<FcUnit>(&lp)) {
            w.tensor(fc->weight);
            w.tensor(fc->bias);
        } else if (const auto* ru = std::get_if<ResidualUnit>(&lp)) {
            detail::write_conv_unit(w, ru->conv_a);
            detail::write_conv_unit(w, ru->conv_b);
            w.u8(ru->shortcut ? 1 : 0);
            if (ru->shortcut) detail::write_conv_unit(w, *ru->shortcut);
        }
    }
    w.raw(kCheckpointEnd, 8);
    return w.bytes();
}

inline void save_checkpoint(const Network& net, const std::string& path) {
    const std::vector<char> bytes = checkpoint_bytes(net);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline Network load_checkpoint_bytes(std::vector<char> bytes) {
    detail::ByteReader r(std::move(bytes));
    if (std::memcmp(r.str(8).data(), kCheckpointMagic, 8) != 0) {
        throw FormatError("not a checkpoint: bad magic");
    }
    const uint32_t major = r.u32();
    const uint32_t minor = r.u32();
    if (major != kCheckpointMajor) {
        throw FormatError("unsupported checkpoint major version " + std::to_string(major));
    }
    if (minor > kCheckpointMinor) {
        throw FormatError("checkpoint minor version " + std::to_string(minor) +
                          " is newer than this build");
    }
    const uint64_t spec_len = r.u64();
    const NetworkSpec spec = spec_from_text(r.str(spec_len));

    // Build the parameter structure from the spec, then fill it in.
    Network net = init_network(spec, 0);
    net.density = r.f64();
    net.step = r.u64();
    for (auto& s : net.rng_state) s = r.u64();
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const auto kind = static_cast<LayerKind>(r.u8());
        if (kind != spec.layers[li].kind) {
            throw FormatError("checkpoint layer kind does not match its spec");
        }
        LayerParams& lp = net.layers[li];
        auto check_unit = [&](ConvUnit& u) {
            const ConvUnit before = u;
            detail::read_conv_unit(r, u);
            if (!u.conv.theta.same_shape(before.conv.theta) ||
                !u.bn.beta.same_shape(before.bn.beta) ||
                (u.gated && !u.sal.phi.same_shape(before.sal.phi))) {
                throw FormatError("checkpoint tensor shapes do not match the spec");
            }
        };
        if (auto* cu = std::get_if<ConvUnit>(&lp)) {
            check_unit(*cu);
        } else if (auto* fc = std::get_if<FcUnit>(&lp)) {
            const Tensor w_before = fc->weight;
            fc->weight = r.tensor();
            fc->bias = r.tensor();
            if (!fc->weight.same_shape(w_before)) {
                throw FormatError("checkpoint fc shape does not match the spec");
            }
        } else if (auto* ru = std::get_if<ResidualUnit>(&lp)) {
            check_unit(ru->conv_a);
            check_unit(ru->conv_b);
            const bool has_shortcut = r.u8() != 0;
            if (has_shortcut != ru->shortcut.has_value()) {
                throw FormatError("checkpoint residual shortcut does not match the spec");
            }
            if (ru->shortcut) check_unit(*ru->shortcut);
        }
    }
    if (std::memcmp(r.str(8).data(), kCheckpointEnd, 8) != 0) {
        throw FormatError("checkpoint trailer missing");
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint end");
    return net;
}

inline Network load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    return load_checkpoint_bytes(std::move(bytes));
}

}  // namespace fbs
