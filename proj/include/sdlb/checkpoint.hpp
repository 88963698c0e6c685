#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sdlb/tensor.hpp"

namespace sdlb {

// Checkpoint container: magic "SDLB", version u32, meta section (u64 length +
// UTF-8 JSON, may be empty), then one record per tensor: name length u64,
// name bytes, rank u64, extents u64 each, payload little-endian f64.
// Round-trips must be bit-exact.

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
    put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool eof() const { return pos_ >= bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw std::runtime_error("truncated file: " + path_);
        }
    }

    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open file for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace io

struct Checkpoint {
    std::string meta;  // JSON text; empty when absent
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    const Tensor& require(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) throw std::runtime_error("checkpoint missing tensor '" + name + "'");
        return *t;
    }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out;
    out += "SDLB";
    io::put_u32(out, kCheckpointVersion);
    io::put_u64(out, ck.meta.size());
    out += ck.meta;
    for (const auto& [name, t] : ck.tensors) {
        io::put_u64(out, name.size());
        out += name;
        io::put_u64(out, t.rank());
        for (std::size_t e : t.shape) io::put_u64(out, e);
        for (double d : t.data) io::put_f64(out, d);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& path) {
    io::Reader r(bytes, path);
    if (r.str(4) != "SDLB") throw std::runtime_error("bad magic in checkpoint: " + path);
    const std::uint32_t ver = r.u32();
    if (ver != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(ver) + ": " + path);
    }
    Checkpoint ck;
    ck.meta = r.str(r.u64());
    while (!r.eof()) {
        const std::uint64_t name_len = r.u64();
        std::string name = r.str(name_len);
        const std::uint64_t rank = r.u64();
        Shape shape(rank);
        for (std::uint64_t i = 0; i < rank; ++i) shape[i] = r.u64();
        Tensor t(shape);
        for (double& d : t.data) d = r.f64();
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(io::read_file(path), path);
}

}  // namespace sdlb
