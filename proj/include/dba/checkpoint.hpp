#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dba/tensor.hpp"

namespace dba {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Checkpoint layout: magic "DBA1", u32 tensor count, then per tensor
/// u16 name length, name bytes, u8 rank, u32 extents, f64 payload.
/// All integers and floats little-endian.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(out, bits);
}

class Reader {
public:
    Reader(const std::string& buf) : buf_(buf) {}

    template <class T>
    T get_le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }

    double get_f64() {
        const std::uint64_t bits = get_le<std::uint64_t>();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
    }
    const std::string& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const NamedTensors& tensors) {
    std::string out = "DBA1";
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        if (t.rank() > 0xff) throw CheckpointError("tensor rank too large");
        out.push_back(static_cast<char>(t.rank()));
        for (std::size_t e : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
        for (double v : t.flat()) detail::put_f64(out, v);
    }
    return out;
}

/// Parses a whole checkpoint buffer; any defect throws before anything is
/// returned, so a caller never sees a partial load.
inline NamedTensors deserialize_checkpoint(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "DBA1") != 0)
        throw CheckpointError("checkpoint magic mismatch (want DBA1)");
    detail::Reader r(buf);
    r.get_bytes(4);
    const std::uint32_t count = r.get_le<std::uint32_t>();
    NamedTensors tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.get_le<std::uint16_t>();
        std::string name = r.get_bytes(name_len);
        const std::uint8_t rank = r.get_le<std::uint8_t>();
        std::vector<std::size_t> shape;
        shape.reserve(rank);
        for (std::uint8_t k = 0; k < rank; ++k) shape.push_back(r.get_le<std::uint32_t>());
        Tensor t(shape);
        for (std::size_t k = 0; k < t.numel(); ++k) t.flat()[k] = r.get_f64();
        tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.exhausted()) throw CheckpointError("checkpoint has trailing bytes");
    return tensors;
}

inline void save_checkpoint(const NamedTensors& tensors, const std::string& path) {
    const std::string buf = serialize_checkpoint(tensors);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw CheckpointError("short write to checkpoint: " + path);
}

inline NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

}  // namespace dba
