#pragma once

// Block-wise absmax round-to-nearest quantization and the QuantSpec that
// describes any block quantizer's geometry and scales.

#include <cmath>
#include <map>

#include "qstore/bundle.hpp"

namespace qstore {

enum class BlockAxis : std::uint8_t { PerRow = 0, FlatGroups = 1 };

inline std::string_view block_axis_name(BlockAxis a) { return a == BlockAxis::PerRow ? "per_row" : "flat_groups"; }

inline BlockAxis parse_block_axis(std::string_view s)
{
    if (s == "per_row") return BlockAxis::PerRow;
    if (s == "flat_groups") return BlockAxis::FlatGroups;
    fail(ErrorKind::Validation, "unknown block_axis '" + std::string(s) + "'");
}

/// Row length used by per-row blocking: the innermost dimension.
inline std::uint64_t row_length(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

/// Geometry shared by every block quantizer: contiguous spans of the
/// flattened tensor, all `block_size` long except possibly the last.
struct BlockGeometry {
    BlockAxis axis = BlockAxis::PerRow;
    std::uint64_t block_size = 0;
    std::uint64_t numel = 0;

    std::uint64_t block_count() const { return block_size == 0 ? 0 : (numel + block_size - 1) / block_size; }
    std::uint64_t begin(std::uint64_t block) const { return block * block_size; }
    std::uint64_t end(std::uint64_t block) const { return std::min(numel, (block + 1) * block_size); }

    friend bool operator==(const BlockGeometry&, const BlockGeometry&) = default;
};

struct QuantSpec {
    std::string method = "rtn_absmax";
    unsigned bit_width = 8;
    BlockAxis block_axis = BlockAxis::PerRow;
    std::uint32_t block_size = 0;
    std::vector<float> scales;
    std::string rounding = "half_away_from_zero";

    int clamp_max() const { return (1 << (bit_width - 1)) - 1; }
    int clamp_min() const { return -clamp_max(); }

    BlockGeometry geometry(std::uint64_t numel) const { return {block_axis, block_size, numel}; }

    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

inline DType dtype_for_bits(unsigned bits)
{
    if (bits == 8) return DType::INT8;
    if (bits == 4) return DType::INT4_PACKED;
    fail(ErrorKind::Validation, "bit_width must be 4 or 8, got " + std::to_string(bits));
}

/// Checks that `spec` covers a tensor of `shape` and that its scales are usable.
inline void validate_spec(const QuantSpec& spec, const Shape& shape, const std::string& name)
{
    auto where = "quant spec for '" + name + "': ";
    require(spec.bit_width == 4 || spec.bit_width == 8, ErrorKind::Validation, where + "bit_width must be 4 or 8");
    require(spec.block_size >= 1, ErrorKind::Validation, where + "block_size must be >= 1");
    if (spec.block_axis == BlockAxis::PerRow)
        require(spec.block_size == row_length(shape), ErrorKind::Validation,
                where + "per_row block_size " + std::to_string(spec.block_size) + " differs from row length " +
                    std::to_string(row_length(shape)));
    auto blocks = spec.geometry(element_count(shape)).block_count();
    require(spec.scales.size() == blocks, ErrorKind::Validation,
            where + std::to_string(spec.scales.size()) + " scales for " + std::to_string(blocks) + " blocks");
    for (float s : spec.scales)
        if (!(std::isfinite(s) && s > 0.0f)) fail(ErrorKind::Validation, where + "scales must be finite and positive");
}

struct QuantizedPair {
    Tensor high;
    Tensor low;
    QuantSpec spec;
};

/// Quantizes one float value against a block scale. NaN maps to 0 and ±Inf
/// saturates to the clamp range.
inline int quantize_value(float w, float scale, int k)
{
    if (std::isnan(w))
        return 0;
    float scaled = static_cast<float>(k) * w / scale;
    float r = std::round(scaled);
    if (r > static_cast<float>(k)) return k;
    if (r < static_cast<float>(-k)) return -k;
    return static_cast<int>(r);
}

/// Block absmax over finite values; an all-zero (or all non-finite) block
/// gets scale 1.
inline float block_absmax(DType dtype, ByteView data, std::uint64_t begin, std::uint64_t end)
{
    float m = 0.0f;
    for (auto i = begin; i < end; ++i) {
        float v = std::fabs(half_to_float(dtype, load_u16(data, i)));
        if (std::isfinite(v) && v > m)
            m = v;
    }
    return m > 0.0f ? m : 1.0f;
}

/// Absmax RTN quantization of an FP16/BF16 tensor. `block_size` is ignored
/// for per-row blocking (block = one row).
inline QuantizedPair quantize_rtn(const Tensor& high, unsigned bit_width, BlockAxis axis, std::uint64_t block_size)
{
    require(is_float(high.dtype), ErrorKind::Validation, "quantize_rtn: '" + high.name + "' is not FP16/BF16");
    high.validate();
    QuantSpec spec;
    spec.bit_width = bit_width;
    spec.block_axis = axis;
    auto bs = axis == BlockAxis::PerRow ? row_length(high.shape) : block_size;
    require(bs >= 1, ErrorKind::Validation, "quantize_rtn: block width must be >= 1");
    require(bs <= UINT32_MAX, ErrorKind::Validation, "quantize_rtn: block width exceeds 32 bits");
    spec.block_size = static_cast<std::uint32_t>(bs);

    Tensor low;
    low.name = high.name;
    low.dtype = dtype_for_bits(bit_width);
    low.shape = high.shape;
    low.data.assign(byte_length(low.dtype, high.numel()), 0);

    auto geom = spec.geometry(high.numel());
    const int k = spec.clamp_max();
    spec.scales.resize(geom.block_count());
    for (std::uint64_t b = 0; b < geom.block_count(); ++b) {
        float s = block_absmax(high.dtype, high.data, geom.begin(b), geom.end(b));
        spec.scales[b] = s;
        for (auto i = geom.begin(b); i < geom.end(b); ++i) {
            int q = quantize_value(half_to_float(high.dtype, load_u16(high.data, i)), s, k);
            if (low.dtype == DType::INT8)
                low.data[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(q));
            else
                int4_set(low.data, i, q);
        }
    }
    return {high, std::move(low), std::move(spec)};
}

/// Lossy inverse: s·q/K rounded to the nearest `out` value.
inline Tensor dequantize(const Tensor& low, const QuantSpec& spec, DType out = DType::BF16)
{
    require(is_integer(low.dtype), ErrorKind::Validation, "dequantize: '" + low.name + "' is not INT8/INT4");
    require(is_float(out), ErrorKind::Validation, "dequantize: output must be FP16/BF16");
    require(dtype_for_bits(spec.bit_width) == low.dtype, ErrorKind::Validation,
            "dequantize: spec bit_width does not match dtype of '" + low.name + "'");
    validate_spec(spec, low.shape, low.name);

    Tensor high;
    high.name = low.name;
    high.dtype = out;
    high.shape = low.shape;
    high.data.resize(2 * low.numel());
    auto geom = spec.geometry(low.numel());
    const float k = static_cast<float>(spec.clamp_max());
    for (std::uint64_t b = 0; b < geom.block_count(); ++b) {
        for (auto i = geom.begin(b); i < geom.end(b); ++i) {
            float v = spec.scales[b] * static_cast<float>(quantized_value(low.dtype, low.data, i)) / k;
            auto bits = float_to_half(out, v);
            high.data[2 * i] = static_cast<std::uint8_t>(bits & 0xFF);
            high.data[2 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
        }
    }
    return high;
}

// Quant specs for a whole model, keyed by tensor name.
using ModelQuantSpec = std::map<std::string, QuantSpec, std::less<>>;

struct QuantizedModel {
    ModelTensors low;
    ModelQuantSpec specs;
};

/// Quantizes every FP16/BF16 tensor of `high`; other tensors are carried
/// over unchanged without a spec.
inline QuantizedModel quantize_model(const ModelTensors& high, unsigned bit_width, BlockAxis axis,
                                     std::uint64_t block_size)
{
    QuantizedModel out;
    std::vector<Tensor> low;
    for (auto& t : high) {
        if (!is_float(t.dtype)) {
            low.push_back(t);
            continue;
        }
        auto pair = quantize_rtn(t, bit_width, axis, block_size);
        out.specs.emplace(t.name, std::move(pair.spec));
        low.push_back(std::move(pair.low));
    }
    out.low = ModelTensors(std::move(low));
    return out;
}

// Sidecar: {"tensors": {name: {method, bit_width, block_axis, block_size,
// rounding, scales_file}}}, scales as raw little-endian float32 files next to
// the JSON.
inline void store_quant_spec(const ModelQuantSpec& specs, const fs::path& json_path)
{
    auto dir = json_path.has_parent_path() ? json_path.parent_path() : fs::path(".");
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json entries = nlohmann::json::object();
    std::size_t index = 0;
    auto stem = json_path.stem().string();
    for (auto& [name, spec] : specs) {
        char file[64];
        std::snprintf(file, sizeof file, "%s.s%05zu.f32", stem.c_str(), index++);
        Bytes raw;
        ByteWriter w(raw);
        for (float s : spec.scales) w.put_f32(s);
        write_file(dir / file, raw);
        entries[name] = {{"method", spec.method},
                         {"bit_width", spec.bit_width},
                         {"block_axis", block_axis_name(spec.block_axis)},
                         {"block_size", spec.block_size},
                         {"rounding", spec.rounding},
                         {"scales_file", file}};
    }
    write_text_file(json_path, nlohmann::json{{"tensors", entries}}.dump(2) + "\n");
}

inline ModelQuantSpec load_quant_spec(const fs::path& json_path)
{
    auto text = read_file(json_path);
    auto j = detail::parse_json(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()),
                                "quant spec");
    require(j.is_object() && j.contains("tensors") && j["tensors"].is_object(), ErrorKind::Validation,
            "quant spec needs a 'tensors' object");
    auto dir = json_path.has_parent_path() ? json_path.parent_path() : fs::path(".");
    ModelQuantSpec specs;
    for (auto& [name, e] : j["tensors"].items()) {
        QuantSpec spec;
        try {
            spec.method = e.value("method", std::string("unknown"));
            spec.bit_width = e.at("bit_width").get<unsigned>();
            spec.block_axis = parse_block_axis(e.at("block_axis").get<std::string>());
            spec.block_size = e.at("block_size").get<std::uint32_t>();
            spec.rounding = e.value("rounding", std::string("half_away_from_zero"));
            auto raw = read_file(dir / e.at("scales_file").get<std::string>());
            require(raw.size() % 4 == 0, ErrorKind::Validation, "scales file for '" + name + "' is not float32");
            ByteReader r(raw);
            spec.scales.resize(raw.size() / 4);
            for (auto& s : spec.scales) s = r.f32();
        } catch (const nlohmann::json::exception& ex) {
            fail(ErrorKind::Validation, "quant spec entry '" + name + "': " + ex.what());
        }
        specs.emplace(name, std::move(spec));
    }
    return specs;
}

}  // namespace qstore
