#pragma once

// Chunk-oriented byte entropy coder: length-limited canonical Huffman with
// RLE and raw fallbacks, plus Shannon-entropy helpers.
//
// HUFFMAN payload layout: 128 bytes of 4-bit code lengths (symbol 2k in the
// low nibble of byte k, symbol 2k+1 in the high nibble), then the code
// bitstream packed LSB-first with the final byte zero-padded.

#include <array>
#include <cmath>
#include <unordered_map>

#include "qstore/byte_io.hpp"

namespace qstore {

inline constexpr std::size_t kDefaultChunkSize = 64 * 1024;
inline constexpr unsigned kMaxCodeLength = 12;
inline constexpr std::size_t kHuffmanTableBytes = 128;
inline constexpr std::size_t kChunkHeaderBytes = 9;

enum class ChunkMode : std::uint8_t { Raw = 0, Huffman = 1, Rle = 2 };

struct EncodedChunk {
    ChunkMode mode = ChunkMode::Raw;
    std::uint32_t raw_size = 0;
    Bytes payload;

    std::uint32_t comp_size() const { return static_cast<std::uint32_t>(payload.size()); }

    friend bool operator==(const EncodedChunk&, const EncodedChunk&) = default;
};

using Histogram = std::array<std::uint64_t, 256>;
using CodeLengths = std::array<std::uint8_t, 256>;

inline Histogram byte_histogram(ByteView data)
{
    Histogram h{};
    for (auto b : data) ++h[b];
    return h;
}

/// Optimal prefix-code lengths limited to `max_len` bits (package-merge).
/// Symbols with zero count get length 0. Requires at least two present
/// symbols. Equal weights are ordered by ascending symbol value.
inline CodeLengths package_merge_lengths(const Histogram& hist, unsigned max_len = kMaxCodeLength)
{
    struct Node {
        std::uint64_t weight;
        std::int32_t left;
        std::int32_t right;  // -1 for leaves; left then holds the symbol
    };

    std::vector<Node> nodes;
    std::vector<std::int32_t> leaves;
    for (int s = 0; s < 256; ++s)
        if (hist[s] > 0) {
            leaves.push_back(static_cast<std::int32_t>(nodes.size()));
            nodes.push_back({hist[s], s, -1});
        }
    const std::size_t n = leaves.size();
    require(n >= 2, ErrorKind::Validation, "package-merge needs at least two symbols");
    require((std::size_t{1} << max_len) >= n, ErrorKind::Validation, "max code length too small for alphabet");
    std::stable_sort(leaves.begin(), leaves.end(),
                     [&](std::int32_t a, std::int32_t b) { return nodes[a].weight < nodes[b].weight; });

    std::vector<std::int32_t> list = leaves;
    std::vector<std::int32_t> packages, merged;
    for (unsigned level = 1; level < max_len; ++level) {
        packages.clear();
        for (std::size_t i = 0; i + 1 < list.size(); i += 2) {
            packages.push_back(static_cast<std::int32_t>(nodes.size()));
            nodes.push_back({nodes[list[i]].weight + nodes[list[i + 1]].weight, list[i], list[i + 1]});
        }
        merged.clear();
        std::size_t a = 0, b = 0;
        while (a < leaves.size() || b < packages.size()) {
            if (b == packages.size() || (a < leaves.size() && nodes[leaves[a]].weight <= nodes[packages[b]].weight))
                merged.push_back(leaves[a++]);
            else
                merged.push_back(packages[b++]);
        }
        list.swap(merged);
    }

    CodeLengths lengths{};
    std::vector<std::int32_t> stack;
    for (std::size_t i = 0; i < 2 * n - 2; ++i) {
        stack.push_back(list[i]);
        while (!stack.empty()) {
            auto& node = nodes[stack.back()];
            stack.pop_back();
            if (node.right < 0) {
                ++lengths[node.left];
            } else {
                stack.push_back(node.left);
                stack.push_back(node.right);
            }
        }
    }
    return lengths;
}

struct CanonicalCode {
    std::array<std::uint16_t, 256> code{};  // bit-reversed, ready for LSB-first emission
    CodeLengths length{};
};

inline std::uint32_t reverse_bits(std::uint32_t v, unsigned n)
{
    std::uint32_t r = 0;
    for (unsigned i = 0; i < n; ++i) {
        r = (r << 1) | (v & 1);
        v >>= 1;
    }
    return r;
}

/// Canonical code assignment: ascending (length, symbol).
inline CanonicalCode canonical_code(const CodeLengths& lengths)
{
    CanonicalCode c;
    c.length = lengths;
    std::array<unsigned, kMaxCodeLength + 2> count{};
    for (auto l : lengths) ++count[l];
    count[0] = 0;
    std::array<std::uint32_t, kMaxCodeLength + 2> next{};
    std::uint32_t code = 0;
    for (unsigned len = 1; len <= kMaxCodeLength; ++len) {
        code = (code + count[len - 1]) << 1;
        next[len] = code;
    }
    for (int s = 0; s < 256; ++s) {
        auto len = lengths[s];
        if (len == 0) continue;
        c.code[s] = static_cast<std::uint16_t>(reverse_bits(next[len]++, len));
    }
    return c;
}

/// Encodes one chunk: RLE for a single distinct byte, else Huffman unless the
/// coded form would not be smaller than the input, in which case RAW.
inline EncodedChunk encode_chunk(ByteView data, unsigned max_len = kMaxCodeLength)
{
    require(!data.empty(), ErrorKind::Validation, "encode_chunk: empty input");
    require(data.size() <= UINT32_MAX, ErrorKind::Validation, "encode_chunk: chunk larger than 4 GiB");
    require(max_len >= 8 && max_len <= kMaxCodeLength, ErrorKind::Validation, "encode_chunk: max_len must be 8..12");
    EncodedChunk out;
    out.raw_size = static_cast<std::uint32_t>(data.size());

    auto hist = byte_histogram(data);
    int distinct = 0;
    for (auto c : hist) distinct += c > 0;
    if (distinct == 1) {
        out.mode = ChunkMode::Rle;
        out.payload = {data[0]};
        return out;
    }

    auto lengths = package_merge_lengths(hist, max_len);
    std::uint64_t bits = 0;
    for (int s = 0; s < 256; ++s) bits += hist[s] * lengths[s];
    std::uint64_t coded = kHuffmanTableBytes + (bits + 7) / 8;
    if (coded >= data.size()) {
        out.mode = ChunkMode::Raw;
        out.payload.assign(data.begin(), data.end());
        return out;
    }

    out.mode = ChunkMode::Huffman;
    out.payload.resize(coded);
    for (int k = 0; k < 128; ++k)
        out.payload[k] = static_cast<std::uint8_t>(lengths[2 * k] | (lengths[2 * k + 1] << 4));

    auto code = canonical_code(lengths);
    std::uint8_t* dst = out.payload.data() + kHuffmanTableBytes;
    std::uint64_t acc = 0;
    unsigned nbits = 0;
    for (auto b : data) {
        acc |= static_cast<std::uint64_t>(code.code[b]) << nbits;
        nbits += code.length[b];
        if (nbits >= 32) {
            std::uint32_t word = static_cast<std::uint32_t>(acc);
            std::memcpy(dst, &word, 4);
            dst += 4;
            acc >>= 32;
            nbits -= 32;
        }
    }
    while (nbits > 0) {
        *dst++ = static_cast<std::uint8_t>(acc);
        acc >>= 8;
        nbits = nbits > 8 ? nbits - 8 : 0;
    }
    return out;
}

inline CodeLengths read_code_lengths(ByteView table)
{
    CodeLengths lengths{};
    for (int k = 0; k < 128; ++k) {
        lengths[2 * k] = table[k] & 0x0F;
        lengths[2 * k + 1] = table[k] >> 4;
    }
    return lengths;
}

inline Bytes decode_chunk(const EncodedChunk& chunk)
{
    switch (chunk.mode) {
    case ChunkMode::Raw:
        require(chunk.payload.size() == chunk.raw_size, ErrorKind::Corrupt, "raw chunk size mismatch");
        return chunk.payload;
    case ChunkMode::Rle:
        require(chunk.payload.size() == 1, ErrorKind::Corrupt, "rle chunk payload must be one byte");
        return Bytes(chunk.raw_size, chunk.payload[0]);
    case ChunkMode::Huffman: break;
    default: fail(ErrorKind::Corrupt, "unknown chunk mode");
    }

    require(chunk.payload.size() >= kHuffmanTableBytes, ErrorKind::Corrupt, "truncated huffman table");
    auto lengths = read_code_lengths(ByteView(chunk.payload).first(kHuffmanTableBytes));
    std::uint32_t kraft = 0;
    int present = 0;
    for (auto l : lengths) {
        require(l <= kMaxCodeLength, ErrorKind::Corrupt, "code length exceeds 12 bits");
        if (l) {
            kraft += 1u << (kMaxCodeLength - l);
            ++present;
        }
    }
    require(present >= 2 && kraft == (1u << kMaxCodeLength), ErrorKind::Corrupt,
            "huffman table violates the Kraft equality");

    // 12-bit lookup: entry = symbol | length << 8
    std::vector<std::uint16_t> lut(1u << kMaxCodeLength);
    auto code = canonical_code(lengths);
    for (int s = 0; s < 256; ++s) {
        unsigned len = lengths[s];
        if (!len) continue;
        auto entry = static_cast<std::uint16_t>(s | (len << 8));
        for (std::uint32_t j = code.code[s]; j < lut.size(); j += 1u << len) lut[j] = entry;
    }

    const std::uint8_t* src = chunk.payload.data() + kHuffmanTableBytes;
    const std::size_t src_len = chunk.payload.size() - kHuffmanTableBytes;
    const std::uint64_t total_bits = static_cast<std::uint64_t>(src_len) * 8;
    Bytes out(chunk.raw_size);

    std::uint64_t acc = 0;
    unsigned nbits = 0;
    std::size_t pos = 0;
    std::uint64_t consumed = 0;
    constexpr std::uint32_t mask = (1u << kMaxCodeLength) - 1;
    for (std::uint32_t i = 0; i < chunk.raw_size; ++i) {
        if (nbits < kMaxCodeLength) {
            if (pos + 8 <= src_len) {
                std::uint64_t word;
                std::memcpy(&word, src + pos, 8);
                acc |= word << nbits;
                unsigned take = (63 - nbits) >> 3;
                pos += take;
                nbits += take * 8;
            } else {
                while (nbits <= 56 && pos < src_len) {
                    acc |= static_cast<std::uint64_t>(src[pos++]) << nbits;
                    nbits += 8;
                }
                if (nbits < kMaxCodeLength)
                    nbits = kMaxCodeLength;  // zero fill past the end; caught by the overrun check
            }
        }
        auto entry = lut[acc & mask];
        unsigned len = entry >> 8;
        out[i] = static_cast<std::uint8_t>(entry);
        acc >>= len;
        nbits -= len;
        consumed += len;
    }
    require(consumed <= total_bits, ErrorKind::Corrupt, "huffman bitstream overrun");
    return out;
}

/// Splits `data` into chunks of at most `chunk_size` bytes and encodes each.
inline std::vector<EncodedChunk> encode_chunked(ByteView data, std::size_t chunk_size)
{
    require(chunk_size > 0, ErrorKind::Validation, "chunk_size must be positive");
    std::vector<EncodedChunk> chunks;
    for (std::size_t off = 0; off < data.size(); off += chunk_size)
        chunks.push_back(encode_chunk(data.subspan(off, std::min(chunk_size, data.size() - off))));
    return chunks;
}

// Wire form: chunk table (mode u8, raw_size u32, comp_size u32 per chunk)
// followed by the payloads in the same order.
inline void write_chunks(ByteWriter& w, const std::vector<EncodedChunk>& chunks)
{
    for (auto& c : chunks) {
        w.put_u8(static_cast<std::uint8_t>(c.mode));
        w.put_u32(c.raw_size);
        w.put_u32(c.comp_size());
    }
    for (auto& c : chunks) w.put_bytes(c.payload);
}

struct ChunkHeader {
    ChunkMode mode;
    std::uint32_t raw_size;
    std::uint32_t comp_size;
};

inline ChunkHeader read_chunk_header(ByteReader& r)
{
    ChunkHeader h;
    auto mode = r.u8();
    require(mode <= 2, ErrorKind::Corrupt, "invalid chunk mode " + std::to_string(mode));
    h.mode = static_cast<ChunkMode>(mode);
    h.raw_size = r.u32();
    h.comp_size = r.u32();
    require(h.raw_size > 0, ErrorKind::Corrupt, "chunk with zero raw size");
    return h;
}

/// Reads `count` chunk headers followed by their payloads.
inline std::vector<EncodedChunk> read_chunks(ByteReader& r, std::size_t count)
{
    std::vector<ChunkHeader> headers;
    headers.reserve(count);
    for (std::size_t i = 0; i < count; ++i) headers.push_back(read_chunk_header(r));
    std::vector<EncodedChunk> chunks;
    chunks.reserve(count);
    for (auto& h : headers) {
        EncodedChunk c;
        c.mode = h.mode;
        c.raw_size = h.raw_size;
        auto p = r.bytes(h.comp_size);
        c.payload.assign(p.begin(), p.end());
        chunks.push_back(std::move(c));
    }
    return chunks;
}

/// Reads chunk headers until their raw sizes add up to `total_raw`, then the
/// payloads.
inline std::vector<EncodedChunk> read_chunks_totaling(ByteReader& r, std::uint64_t total_raw)
{
    std::vector<ChunkHeader> headers;
    std::uint64_t sum = 0;
    while (sum < total_raw) {
        headers.push_back(read_chunk_header(r));
        sum += headers.back().raw_size;
    }
    require(sum == total_raw, ErrorKind::Corrupt, "chunk raw sizes overshoot the element count");
    std::vector<EncodedChunk> chunks;
    chunks.reserve(headers.size());
    for (auto& h : headers) {
        EncodedChunk c;
        c.mode = h.mode;
        c.raw_size = h.raw_size;
        auto p = r.bytes(h.comp_size);
        c.payload.assign(p.begin(), p.end());
        chunks.push_back(std::move(c));
    }
    return chunks;
}

inline double entropy_from_counts(const auto& counts, std::uint64_t total)
{
    if (total == 0) return 0.0;
    double h = 0.0;
    const double inv = 1.0 / static_cast<double>(total);
    for (auto c : counts) {
        if (c == 0) continue;
        double p = static_cast<double>(c) * inv;
        h -= p * std::log2(p);
    }
    return h;
}

/// Shannon entropy in bits per byte.
inline double byte_entropy(ByteView data)
{
    require(!data.empty(), ErrorKind::Validation, "byte_entropy: empty input");
    return entropy_from_counts(byte_histogram(data), data.size());
}

/// Shannon entropy over 16-bit symbols, in bits per symbol.
inline double symbol16_entropy(std::span<const std::uint16_t> symbols)
{
    require(!symbols.empty(), ErrorKind::Validation, "symbol16_entropy: empty input");
    std::vector<std::uint32_t> counts(65536, 0);
    for (auto s : symbols) ++counts[s];
    return entropy_from_counts(counts, symbols.size());
}

/// Σ (len_g / total) · H(g); empty groups carry no weight.
inline double weighted_group_entropy(std::span<const ByteView> groups)
{
    std::uint64_t total = 0;
    for (auto& g : groups) total += g.size();
    require(total > 0, ErrorKind::Validation, "weighted_group_entropy: all groups are empty");
    double acc = 0.0;
    for (auto& g : groups)
        if (!g.empty())
            acc += static_cast<double>(g.size()) * byte_entropy(g);
    return acc / static_cast<double>(total);
}

/// Same weighting over 16-bit-symbol groups.
inline double weighted_group_entropy16(std::span<const std::span<const std::uint16_t>> groups)
{
    std::uint64_t total = 0;
    for (auto& g : groups) total += g.size();
    require(total > 0, ErrorKind::Validation, "weighted_group_entropy: all groups are empty");
    double acc = 0.0;
    std::unordered_map<std::uint16_t, std::uint32_t> counts;
    for (auto& g : groups) {
        if (g.empty()) continue;
        counts.clear();
        for (auto s : g) ++counts[s];
        std::vector<std::uint32_t> c;
        c.reserve(counts.size());
        for (auto& [sym, n] : counts) c.push_back(n);
        acc += static_cast<double>(g.size()) * entropy_from_counts(c, g.size());
    }
    return acc / static_cast<double>(total);
}

}  // namespace qstore
