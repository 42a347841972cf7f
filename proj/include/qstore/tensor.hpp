#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <zlib.h>

#include "qstore/byte_io.hpp"
#include "qstore/error.hpp"

namespace qstore {

enum class DType : std::uint8_t { FP16 = 0, BF16 = 1, INT8 = 2, INT4_PACKED = 3 };

constexpr unsigned element_bits(DType d)
{
    switch (d) {
    case DType::FP16:
    case DType::BF16: return 16;
    case DType::INT8: return 8;
    case DType::INT4_PACKED: return 4;
    }
    return 0;
}

constexpr bool is_float(DType d) { return d == DType::FP16 || d == DType::BF16; }
constexpr bool is_integer(DType d) { return d == DType::INT8 || d == DType::INT4_PACKED; }

// Names used in manifests and tensor-container headers.
inline std::string_view dtype_name(DType d)
{
    switch (d) {
    case DType::FP16: return "F16";
    case DType::BF16: return "BF16";
    case DType::INT8: return "I8";
    case DType::INT4_PACKED: return "I4";
    }
    return "?";
}

inline DType parse_dtype(std::string_view s)
{
    if (s == "F16" || s == "FP16") return DType::FP16;
    if (s == "BF16") return DType::BF16;
    if (s == "I8" || s == "INT8") return DType::INT8;
    if (s == "I4" || s == "INT4_PACKED") return DType::INT4_PACKED;
    fail(ErrorKind::Validation, "unsupported dtype '" + std::string(s) + "'");
}

inline DType dtype_from_code(std::uint8_t code)
{
    if (code > 3)
        fail(ErrorKind::Corrupt, "invalid dtype code " + std::to_string(code));
    return static_cast<DType>(code);
}

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
}

inline std::uint64_t byte_length(DType d, std::uint64_t elements)
{
    return (elements * element_bits(d) + 7) / 8;
}

inline std::string shape_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// A named, row-major, little-endian tensor. `data` is the on-disk byte image.
struct Tensor {
    std::string name;
    DType dtype = DType::FP16;
    Shape shape;
    Bytes data;

    std::uint64_t numel() const { return element_count(shape); }

    // Throws Validation if the buffer does not match shape × width.
    void validate() const
    {
        require(!name.empty(), ErrorKind::Validation, "tensor with empty name");
        for (auto d : shape)
            require(d > 0, ErrorKind::Validation, "tensor '" + name + "' has a zero dimension");
        auto expect = byte_length(dtype, numel());
        require(data.size() == expect, ErrorKind::Validation,
                "tensor '" + name + "': byte length " + std::to_string(data.size()) + " does not match shape " +
                    shape_string(shape) + " (" + std::to_string(expect) + " bytes expected)");
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

// INT4_PACKED: low nibble holds the earlier element; stored nibble = value + 8.
inline int int4_get(ByteView data, std::uint64_t i)
{
    std::uint8_t b = data[i >> 1];
    std::uint8_t nib = (i & 1) ? (b >> 4) : (b & 0x0F);
    return static_cast<int>(nib) - 8;
}

inline void int4_set(std::span<std::uint8_t> data, std::uint64_t i, int v)
{
    auto nib = static_cast<std::uint8_t>((v + 8) & 0x0F);
    auto& b = data[i >> 1];
    if (i & 1)
        b = static_cast<std::uint8_t>((b & 0x0F) | (nib << 4));
    else
        b = static_cast<std::uint8_t>((b & 0xF0) | nib);
}

/// Quantized integer value of element `i` of an INT8 or INT4_PACKED buffer.
inline int quantized_value(DType d, ByteView data, std::uint64_t i)
{
    if (d == DType::INT8)
        return static_cast<std::int8_t>(data[i]);
    return int4_get(data, i);
}

inline std::uint16_t load_u16(ByteView data, std::uint64_t i)
{
    return static_cast<std::uint16_t>(data[2 * i] | (data[2 * i + 1] << 8));
}

/// Exact float32 value of a 16-bit float element.
inline float half_to_float(DType d, std::uint16_t bits)
{
    if (d == DType::BF16)
        return static_cast<float>(Eigen::numext::bit_cast<Eigen::bfloat16>(bits));
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

/// Round-to-nearest-even narrowing to FP16/BF16 bits.
inline std::uint16_t float_to_half(DType d, float v)
{
    if (d == DType::BF16)
        return Eigen::numext::bit_cast<std::uint16_t>(Eigen::bfloat16(v));
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(v));
}

inline std::uint32_t crc32_of(ByteView data)
{
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const std::uint8_t* p = data.data();
    std::size_t n = data.size();
    while (n > 0) {
        auto step = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, p, step);
        p += step;
        n -= step;
    }
    return static_cast<std::uint32_t>(crc);
}

/// Tensors of one model, kept sorted by name so iteration order is stable.
class ModelTensors {
public:
    ModelTensors() = default;

    explicit ModelTensors(std::vector<Tensor> tensors) : tensors_(std::move(tensors))
    {
        std::sort(tensors_.begin(), tensors_.end(), [](const Tensor& a, const Tensor& b) { return a.name < b.name; });
        for (std::size_t i = 1; i < tensors_.size(); ++i)
            require(tensors_[i - 1].name != tensors_[i].name, ErrorKind::Validation,
                    "duplicate tensor name '" + tensors_[i].name + "'");
    }

    void insert(Tensor t)
    {
        auto it = std::lower_bound(tensors_.begin(), tensors_.end(), t.name,
                                   [](const Tensor& a, const std::string& n) { return a.name < n; });
        require(it == tensors_.end() || it->name != t.name, ErrorKind::Validation,
                "duplicate tensor name '" + t.name + "'");
        tensors_.insert(it, std::move(t));
    }

    const Tensor* find(std::string_view name) const
    {
        auto it = std::lower_bound(tensors_.begin(), tensors_.end(), name,
                                   [](const Tensor& a, std::string_view n) { return a.name < n; });
        return (it != tensors_.end() && it->name == name) ? &*it : nullptr;
    }

    const Tensor& at(std::string_view name) const
    {
        auto* t = find(name);
        require(t != nullptr, ErrorKind::Validation, "no tensor named '" + std::string(name) + "'");
        return *t;
    }

    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }
    const std::vector<Tensor>& tensors() const { return tensors_; }

    std::uint64_t total_elements() const
    {
        std::uint64_t n = 0;
        for (auto& t : tensors_) n += t.numel();
        return n;
    }

    std::uint64_t total_bytes() const
    {
        std::uint64_t n = 0;
        for (auto& t : tensors_) n += t.data.size();
        return n;
    }

    friend bool operator==(const ModelTensors&, const ModelTensors&) = default;

private:
    std::vector<Tensor> tensors_;
};

}  // namespace qstore
