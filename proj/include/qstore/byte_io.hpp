#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qstore/error.hpp"

namespace qstore {

static_assert(std::endian::native == std::endian::little,
              "qstore serializes little-endian data with memcpy; big-endian hosts need byte swaps");

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// Little-endian append-only writer.
class ByteWriter {
public:
    explicit ByteWriter(Bytes& out) : out_(out) {}

    template <typename T>
    void put(T v)
    {
        static_assert(std::is_trivially_copyable_v<T>);
        auto pos = out_.size();
        out_.resize(pos + sizeof(T));
        std::memcpy(out_.data() + pos, &v, sizeof(T));
    }

    void put_u8(std::uint8_t v) { put(v); }
    void put_u16(std::uint16_t v) { put(v); }
    void put_u32(std::uint32_t v) { put(v); }
    void put_u64(std::uint64_t v) { put(v); }
    void put_i16(std::int16_t v) { put(v); }
    void put_f32(float v) { put(v); }

    void put_bytes(ByteView bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }
    void put_string(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }

    std::size_t size() const { return out_.size(); }

private:
    Bytes& out_;
};

// Bounds-checked little-endian reader over a byte span. Truncation is
// reported as ErrorKind::Corrupt.
class ByteReader {
public:
    explicit ByteReader(ByteView data) : data_(data) {}

    template <typename T>
    T get()
    {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::int16_t i16() { return get<std::int16_t>(); }
    float f32() { return get<float>(); }

    ByteView bytes(std::size_t n)
    {
        need(n);
        auto view = data_.subspan(pos_, n);
        pos_ += n;
        return view;
    }

    std::string string(std::size_t n)
    {
        auto v = bytes(n);
        return std::string(v.begin(), v.end());
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    bool at_end() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const
    {
        if (n > data_.size() - pos_)
            fail(ErrorKind::Corrupt, "truncated record: need " + std::to_string(n) + " bytes, have " +
                                         std::to_string(data_.size() - pos_));
    }

    ByteView data_;
    std::size_t pos_ = 0;
};

}  // namespace qstore
