#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "jamt/error.hpp"
#include "jamt/tensor.hpp"

namespace jamt {

// Snapshot entry: tensor name plus float32 values.
using NamedTensor = std::pair<std::string, Tensor>;
using Snapshot = std::vector<NamedTensor>;

namespace detail {

inline void write_u16(std::ostream& out, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

inline std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (!in) throw IoError("checkpoint truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("checkpoint truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline float read_f32(std::istream& in) {
    std::uint32_t bits = read_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Snapshot& snapshot) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write("JAMT", 4);
    detail::write_u16(out, 1);
    detail::write_u32(out, static_cast<std::uint32_t>(snapshot.size()));
    for (const auto& [name, tensor] : snapshot) {
        if (!tensor.defined()) throw ValueError("cannot save undefined tensor: " + name);
        if (name.size() > 0xffff) throw ValueError("tensor name too long: " + name);
        detail::write_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const auto& shape = tensor.shape();
        out.put(static_cast<char>(shape.size()));
        for (int d : shape) detail::write_u32(out, static_cast<std::uint32_t>(d));
        for (float v : tensor.values()) detail::write_f32(out, v);
    }
    if (!out) throw IoError("write failed for checkpoint: " + path);
}

inline Snapshot load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "JAMT", 4) != 0) throw IoError("bad checkpoint magic in " + path);
    std::uint16_t version = detail::read_u16(in);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t count = detail::read_u32(in);
    Snapshot snapshot;
    snapshot.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        std::uint16_t name_len = detail::read_u16(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw IoError("checkpoint truncated");
        int rank = in.get();
        if (rank == EOF) throw IoError("checkpoint truncated");
        if (rank < 1 || rank > 3) throw IoError("bad tensor rank in checkpoint: " + std::to_string(rank));
        std::vector<int> shape(static_cast<std::size_t>(rank));
        for (auto& d : shape) {
            std::uint32_t raw = detail::read_u32(in);
            if (raw == 0) throw IoError("zero dimension in checkpoint tensor " + name);
            d = static_cast<int>(raw);
        }
        Tensor tensor = Tensor::zeros(shape);
        for (auto& v : tensor.values()) v = detail::read_f32(in);
        snapshot.emplace_back(std::move(name), std::move(tensor));
    }
    return snapshot;
}

// Element-wise mean of parameter snapshots, accumulated in double.
// All snapshots must agree on tensor names, order, and shapes.
inline Snapshot average_checkpoints(const std::vector<Snapshot>& snapshots) {
    if (snapshots.empty()) throw ValueError("average_checkpoints needs at least one snapshot");
    const Snapshot& first = snapshots.front();
    for (const auto& snap : snapshots) {
        if (snap.size() != first.size()) throw ValueError("snapshot tensor counts differ");
        for (std::size_t i = 0; i < snap.size(); ++i) {
            if (snap[i].first != first[i].first)
                throw ValueError("snapshot tensor names differ: " + snap[i].first + " vs " + first[i].first);
            if (snap[i].second.shape() != first[i].second.shape())
                throw ValueError("snapshot shapes differ for tensor " + snap[i].first);
        }
    }
    Snapshot result;
    result.reserve(first.size());
    const double k = static_cast<double>(snapshots.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        Tensor mean = Tensor::zeros(first[i].second.shape());
        for (std::size_t j = 0; j < mean.values().size(); ++j) {
            double acc = 0.0;
            for (const auto& snap : snapshots) acc += static_cast<double>(snap[i].second.values()[j]);
            mean.values()[j] = static_cast<float>(acc / k);
        }
        result.emplace_back(first[i].first, std::move(mean));
    }
    return result;
}

// Indices of the k lowest scores; ties broken toward the earliest index.
inline std::vector<std::size_t> select_best(const std::vector<double>& scores, std::size_t k) {
    if (k > scores.size()) throw ValueError("select_best: k exceeds number of scores");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

// True when the running best value has not improved within the last
// `patience` entries of the history.
inline bool early_stop(const std::vector<double>& history, std::size_t patience = 5) {
    if (history.empty()) throw ValueError("early_stop: empty history");
    if (patience == 0) throw ValueError("early_stop: patience must be positive");
    std::size_t best = 0;
    for (std::size_t i = 1; i < history.size(); ++i)
        if (history[i] < history[best]) best = i;
    return best + patience < history.size();
}

}  // namespace jamt
