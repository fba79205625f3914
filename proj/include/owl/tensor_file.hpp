// Shared little-endian weight container.
//
// Layout: magic (4 bytes), format version u32, five u32 header fields whose
// meaning depends on the magic, then named tensor records:
//   name length u16, name bytes, rank u8, dims u32 each, f32 payload.
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "owl/numerics.hpp"

namespace owl {

constexpr uint32_t kTensorFileVersion = 1;

struct NamedTensor {
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

struct TensorFile {
    std::array<uint32_t, 5> fields{};
    std::map<std::string, NamedTensor> tensors;
};

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
public:
    explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint8_t>(buf_[pos_]) | (static_cast<uint16_t>(static_cast<uint8_t>(buf_[pos_ + 1])) << 8);
        pos_ += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf_[pos_++]);
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void f32_block(float* dst, size_t count) {
        need(count * 4);
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i * 4 + b])) << (8 * b);
            std::memcpy(&dst[i], &bits, 4);
        }
        pos_ += count * 4;
    }
    bool eof() const { return pos_ >= buf_.size(); }

private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw std::runtime_error("truncated file");
    }
    std::string buf_;
    size_t pos_ = 0;
};

} // namespace detail

inline void write_tensor_file(const std::string& path, const char magic[4],
                              const std::array<uint32_t, 5>& fields,
                              const std::map<std::string, NamedTensor>& tensors) {
    std::string out;
    out.append(magic, 4);
    detail::put_u32(out, kTensorFileVersion);
    for (uint32_t f : fields) detail::put_u32(out, f);
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long");
        detail::put_u16(out, static_cast<uint16_t>(name.size()));
        out.append(name);
        out.push_back(static_cast<char>(t.dims.size()));
        size_t n = 1;
        for (uint32_t d : t.dims) {
            detail::put_u32(out, d);
            n *= d;
        }
        if (n != t.data.size()) throw std::invalid_argument("tensor dims disagree with payload: " + name);
        for (float v : t.data) detail::put_f32(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline TensorFile read_tensor_file(const std::string& path, const char magic[4]) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(std::move(bytes));
    std::string got = r.bytes(4);
    if (std::memcmp(got.data(), magic, 4) != 0) throw std::runtime_error("malformed header: bad magic");
    uint32_t version = r.u32();
    if (version != kTensorFileVersion) throw std::runtime_error("malformed header: unsupported version");
    TensorFile tf;
    for (auto& field : tf.fields) field = r.u32();
    while (!r.eof()) {
        uint16_t nlen = r.u16();
        std::string name = r.bytes(nlen);
        uint8_t rank = r.u8();
        NamedTensor t;
        size_t n = 1;
        for (int i = 0; i < rank; ++i) {
            t.dims.push_back(r.u32());
            n *= t.dims.back();
        }
        t.data.resize(n);
        r.f32_block(t.data.data(), n);
        tf.tensors.emplace(std::move(name), std::move(t));
    }
    return tf;
}

// Helpers for the common 1-D / 2-D cases.
inline NamedTensor tensor_of(const Vec& v) {
    return NamedTensor{{static_cast<uint32_t>(v.size())}, v};
}
inline NamedTensor tensor_of(const Mat& m) {
    return NamedTensor{{static_cast<uint32_t>(m.rows), static_cast<uint32_t>(m.cols)}, m.data};
}

inline Vec take_vec(const TensorFile& tf, const std::string& name, size_t expect) {
    auto it = tf.tensors.find(name);
    if (it == tf.tensors.end()) throw std::runtime_error("missing tensor: " + name);
    if (it->second.dims.size() != 1 || it->second.data.size() != expect)
        throw std::runtime_error("dimension mismatch: " + name);
    return it->second.data;
}

inline Mat take_mat(const TensorFile& tf, const std::string& name, int rows, int cols) {
    auto it = tf.tensors.find(name);
    if (it == tf.tensors.end()) throw std::runtime_error("missing tensor: " + name);
    const auto& t = it->second;
    if (t.dims.size() != 2 || t.dims[0] != static_cast<uint32_t>(rows) || t.dims[1] != static_cast<uint32_t>(cols))
        throw std::runtime_error("dimension mismatch: " + name);
    Mat m(rows, cols);
    m.data = t.data;
    return m;
}

} // namespace owl
