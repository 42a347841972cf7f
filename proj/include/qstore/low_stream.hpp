#pragma once

// Low-precision weights as sequential fixed-size byte chunks, each entropy
// coded independently. The quantization spec travels with the stream.

#include <optional>

#include "qstore/entropy_codec.hpp"
#include "qstore/parallel.hpp"
#include "qstore/quantizer.hpp"

namespace qstore {

inline constexpr std::uint8_t kNoBlockAxis = 0xFF;

struct LowStream {
    std::string tensor_name;
    DType dtype = DType::INT8;
    Shape shape;
    std::uint32_t chunk_size = kDefaultChunkSize;
    std::vector<EncodedChunk> chunks;
    std::optional<QuantSpec> spec;  // absent for tensors stored without quantization

    std::uint64_t raw_bytes() const
    {
        std::uint64_t n = 0;
        for (auto& c : chunks) n += c.raw_size;
        return n;
    }
};

/// Chunks `data` and codes the chunks through `ctx`.
inline std::vector<EncodedChunk> encode_bytes(ByteView data, std::size_t chunk_size, const CodecContext& ctx)
{
    require(chunk_size > 0, ErrorKind::Validation, "chunk_size must be positive");
    std::size_t count = (data.size() + chunk_size - 1) / chunk_size;
    std::vector<EncodedChunk> chunks(count);
    ctx.for_each(count, [&](std::size_t i) {
        auto off = i * chunk_size;
        chunks[i] = encode_chunk(data.subspan(off, std::min(chunk_size, data.size() - off)));
    });
    return chunks;
}

inline Bytes decode_bytes(const std::vector<EncodedChunk>& chunks, const CodecContext& ctx)
{
    std::vector<std::size_t> offsets(chunks.size() + 1, 0);
    for (std::size_t i = 0; i < chunks.size(); ++i) offsets[i + 1] = offsets[i] + chunks[i].raw_size;
    Bytes out(offsets.back());
    ctx.for_each(chunks.size(), [&](std::size_t i) {
        auto bytes = decode_chunk(chunks[i]);
        require(bytes.size() == chunks[i].raw_size, ErrorKind::Corrupt, "chunk decoded to the wrong size");
        std::memcpy(out.data() + offsets[i], bytes.data(), bytes.size());
    });
    return out;
}

/// Encodes a tensor's bytes. With a spec the tensor must be INT8/INT4 and
/// the spec must cover its geometry; without one any dtype is accepted and
/// stored as plain chunked bytes.
inline LowStream encode_low(const Tensor& low, const std::optional<QuantSpec>& spec,
                            std::size_t chunk_size = kDefaultChunkSize, const CodecContext& ctx = CodecContext())
{
    require(chunk_size > 0 && chunk_size <= UINT32_MAX, ErrorKind::Validation, "chunk_size must be in 1..2^32-1");
    low.validate();
    if (spec) {
        require(is_integer(low.dtype), ErrorKind::Validation, "encode_low: '" + low.name + "' is not INT8/INT4");
        require(dtype_for_bits(spec->bit_width) == low.dtype, ErrorKind::Validation,
                "encode_low: spec bit_width does not match dtype of '" + low.name + "'");
        validate_spec(*spec, low.shape, low.name);
    }
    LowStream s;
    s.tensor_name = low.name;
    s.dtype = low.dtype;
    s.shape = low.shape;
    s.chunk_size = static_cast<std::uint32_t>(chunk_size);
    s.spec = spec;
    s.chunks = encode_bytes(low.data, chunk_size, ctx);
    return s;
}

inline std::pair<Tensor, std::optional<QuantSpec>> decode_low(const LowStream& stream,
                                                              const CodecContext& ctx = CodecContext())
{
    Tensor t;
    t.name = stream.tensor_name;
    t.dtype = stream.dtype;
    t.shape = stream.shape;
    auto expect = byte_length(t.dtype, t.numel());
    require(stream.raw_bytes() == expect, ErrorKind::Corrupt,
            "low stream '" + t.name + "': chunk sizes sum to " + std::to_string(stream.raw_bytes()) + " but shape " +
                shape_string(t.shape) + " needs " + std::to_string(expect));
    for (std::size_t i = 0; i < stream.chunks.size(); ++i) {
        auto raw = stream.chunks[i].raw_size;
        bool last = i + 1 == stream.chunks.size();
        require(last ? raw <= stream.chunk_size : raw == stream.chunk_size, ErrorKind::Corrupt,
                "low stream '" + t.name + "': chunk " + std::to_string(i) + " has raw size " + std::to_string(raw) +
                    " for chunk size " + std::to_string(stream.chunk_size));
    }
    if (stream.spec) {
        try {
            validate_spec(*stream.spec, t.shape, t.name);
        } catch (const Error& e) {
            fail(ErrorKind::Corrupt, std::string("stored ") + e.what());
        }
    }
    t.data = decode_bytes(stream.chunks, ctx);
    return {std::move(t), stream.spec};
}

// .qslo record: name_len u16, name, dtype u8, ndim u8, dims u64[ndim],
// block_axis u8 (0xFF = unquantized), block_size u32, scale_count u32,
// scales f32[], chunk_size u32, chunk_count u32, chunk table, payloads.
inline void write_low_record(ByteWriter& w, const LowStream& s)
{
    require(s.tensor_name.size() <= UINT16_MAX, ErrorKind::Validation, "tensor name too long");
    require(s.shape.size() <= UINT8_MAX, ErrorKind::Validation, "too many dimensions");
    require(s.chunks.size() <= UINT32_MAX, ErrorKind::Validation, "too many chunks");
    w.put_u16(static_cast<std::uint16_t>(s.tensor_name.size()));
    w.put_string(s.tensor_name);
    w.put_u8(static_cast<std::uint8_t>(s.dtype));
    w.put_u8(static_cast<std::uint8_t>(s.shape.size()));
    for (auto d : s.shape) w.put_u64(d);
    if (s.spec) {
        require(s.spec->scales.size() <= UINT32_MAX, ErrorKind::Validation, "too many blocks");
        w.put_u8(static_cast<std::uint8_t>(s.spec->block_axis));
        w.put_u32(s.spec->block_size);
        w.put_u32(static_cast<std::uint32_t>(s.spec->scales.size()));
        for (float f : s.spec->scales) w.put_f32(f);
    } else {
        w.put_u8(kNoBlockAxis);
        w.put_u32(0);
        w.put_u32(0);
    }
    w.put_u32(s.chunk_size);
    w.put_u32(static_cast<std::uint32_t>(s.chunks.size()));
    write_chunks(w, s.chunks);
}

inline LowStream read_low_record(ByteReader& r)
{
    LowStream s;
    s.tensor_name = r.string(r.u16());
    s.dtype = dtype_from_code(r.u8());
    auto ndim = r.u8();
    for (unsigned i = 0; i < ndim; ++i) s.shape.push_back(r.u64());
    auto axis = r.u8();
    auto block_size = r.u32();
    auto scale_count = r.u32();
    if (axis != kNoBlockAxis) {
        require(axis <= 1, ErrorKind::Corrupt, "invalid block_axis code");
        require(is_integer(s.dtype), ErrorKind::Corrupt, "quantized record with a float dtype");
        QuantSpec spec;
        spec.bit_width = element_bits(s.dtype);
        spec.block_axis = static_cast<BlockAxis>(axis);
        spec.block_size = block_size;
        require(scale_count <= r.remaining() / 4, ErrorKind::Corrupt, "truncated scale table");
        spec.scales.resize(scale_count);
        for (auto& f : spec.scales) f = r.f32();
        s.spec = std::move(spec);
    }
    s.chunk_size = r.u32();
    auto count = r.u32();
    require(count <= r.remaining() / kChunkHeaderBytes, ErrorKind::Corrupt, "truncated chunk table");
    s.chunks = read_chunks(r, count);
    return s;
}

}  // namespace qstore
