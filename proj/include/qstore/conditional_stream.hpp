#pragma once

// Conditional information W|Q(W): high-precision element bytes grouped by
// quantization block scale, subgrouped by quantized value, and split into
// byte planes before entropy coding. Element positions are not stored; the
// decoder recovers them by replaying the scan over the quantized tensor.
//
// Canonical scan: groups in plan order, member blocks ascending, elements in
// flat order within a block. Each subgroup is a FIFO filled and drained in
// that order by both sides.

#include <bit>
#include <unordered_map>

#include "qstore/low_stream.hpp"

namespace qstore {

struct GroupingPlan {
    struct Group {
        std::uint32_t key = 0;  // bit pattern of the shared scale
        std::vector<std::uint32_t> members;

        friend bool operator==(const Group&, const Group&) = default;
    };

    std::vector<Group> groups;
    int value_min = 0;
    std::uint32_t value_count = 0;

    friend bool operator==(const GroupingPlan&, const GroupingPlan&) = default;
};

inline std::uint32_t scale_key(float s) { return std::bit_cast<std::uint32_t>(s); }

/// Groups the blocks of `low` by bit-identical scale, ordered by each
/// group's first block. Reads only the spec and the tensor geometry.
inline GroupingPlan build_grouping(const QuantSpec& spec, const Tensor& low)
{
    require(is_integer(low.dtype), ErrorKind::Validation, "build_grouping: '" + low.name + "' is not INT8/INT4");
    require(dtype_for_bits(spec.bit_width) == low.dtype, ErrorKind::Validation,
            "build_grouping: spec bit_width does not match dtype of '" + low.name + "'");
    validate_spec(spec, low.shape, low.name);
    require(spec.scales.size() <= UINT32_MAX, ErrorKind::Validation,
            "tensor '" + low.name + "' has more than 2^32 blocks");

    GroupingPlan plan;
    plan.value_min = spec.clamp_min();
    plan.value_count = static_cast<std::uint32_t>(spec.clamp_max() - spec.clamp_min() + 1);
    std::unordered_map<std::uint32_t, std::size_t> index;
    for (std::uint32_t b = 0; b < spec.scales.size(); ++b) {
        auto key = scale_key(spec.scales[b]);
        auto [it, inserted] = index.try_emplace(key, plan.groups.size());
        if (inserted)
            plan.groups.push_back({key, {}});
        plan.groups[it->second].members.push_back(b);
    }
    return plan;
}

/// Bytes per element routed into the conditional stream.
inline unsigned plane_count_for(DType d) { return is_float(d) ? 2 : 1; }

namespace detail {

// Element `i` of `t` as plane bytes (INT4 elements occupy one byte holding the
// stored nibble).
inline void element_bytes(const Tensor& t, std::uint64_t i, std::uint8_t* out)
{
    switch (t.dtype) {
    case DType::FP16:
    case DType::BF16:
        out[0] = t.data[2 * i];
        out[1] = t.data[2 * i + 1];
        break;
    case DType::INT8: out[0] = t.data[i]; break;
    case DType::INT4_PACKED: out[0] = static_cast<std::uint8_t>(int4_get(t.data, i) + 8); break;
    }
}

inline void store_element(Tensor& t, std::uint64_t i, const std::uint8_t* in)
{
    switch (t.dtype) {
    case DType::FP16:
    case DType::BF16:
        t.data[2 * i] = in[0];
        t.data[2 * i + 1] = in[1];
        break;
    case DType::INT8: t.data[i] = in[0]; break;
    case DType::INT4_PACKED: int4_set(t.data, i, static_cast<int>(in[0] & 0x0F) - 8); break;
    }
}

}  // namespace detail

struct ConditionalStream {
    struct Subgroup {
        std::uint32_t element_count = 0;
        std::vector<std::vector<EncodedChunk>> planes;  // empty when element_count == 0
    };
    struct GroupData {
        GroupingPlan::Group directory;
        std::vector<Subgroup> subgroups;  // ascending quantized value
    };

    std::string tensor_name;
    DType high_dtype = DType::BF16;
    unsigned plane_count = 2;
    int value_min = 0;
    std::uint32_t value_count = 0;
    std::vector<GroupData> groups;

    std::uint64_t element_count() const
    {
        std::uint64_t n = 0;
        for (auto& g : groups)
            for (auto& s : g.subgroups) n += s.element_count;
        return n;
    }
};

namespace detail {

// Per-group layout of subgroup segments inside the group's plane buffers.
struct GroupLayout {
    std::uint64_t size = 0;
    std::vector<std::uint64_t> start;  // value_count + 1 entries
};

struct PlaneJob {
    std::size_t group;
    std::size_t value;
    unsigned plane;
    std::uint64_t offset;  // within the group's plane buffer
    std::uint64_t length;
};

}  // namespace detail

/// Encodes `high` conditioned on (`low`, `spec`). `plan` must be
/// build_grouping(spec, low).
inline ConditionalStream encode_conditional(const Tensor& high, const Tensor& low, const QuantSpec& spec,
                                            const GroupingPlan& plan, std::size_t chunk_size = kDefaultChunkSize,
                                            const CodecContext& ctx = CodecContext())
{
    require(chunk_size > 0, ErrorKind::Validation, "chunk_size must be positive");
    high.validate();
    low.validate();
    require(high.shape == low.shape, ErrorKind::Validation,
            "encode_conditional: '" + high.name + "' shape " + shape_string(high.shape) + " vs low " +
                shape_string(low.shape));
    require(plan == build_grouping(spec, low), ErrorKind::Validation,
            "encode_conditional: plan does not match the quantization spec of '" + low.name + "'");

    ConditionalStream cs;
    cs.tensor_name = high.name;
    cs.high_dtype = high.dtype;
    cs.plane_count = plane_count_for(high.dtype);
    cs.value_min = plan.value_min;
    cs.value_count = plan.value_count;

    const auto geom = spec.geometry(low.numel());
    const unsigned planes = cs.plane_count;
    const int vmin = plan.value_min;
    const auto vcount = plan.value_count;

    std::vector<detail::GroupLayout> layouts(plan.groups.size());
    std::vector<Bytes> buffers(plan.groups.size());
    std::vector<detail::PlaneJob> jobs;
    std::vector<std::uint64_t> cursor(vcount);

    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        auto& group = plan.groups[g];
        auto& layout = layouts[g];
        std::vector<std::uint64_t> counts(vcount, 0);
        for (auto b : group.members)
            for (auto i = geom.begin(b); i < geom.end(b); ++i) {
                int v = quantized_value(low.dtype, low.data, i) - vmin;
                if (v < 0 || static_cast<std::uint32_t>(v) >= vcount) [[unlikely]]
                    fail(ErrorKind::Validation, "tensor '" + low.name + "': quantized value outside [" +
                                                    std::to_string(vmin) + ", " +
                                                    std::to_string(vmin + static_cast<int>(vcount) - 1) + "]");
                ++counts[v];
            }
        layout.start.assign(vcount + 1, 0);
        for (std::uint32_t v = 0; v < vcount; ++v) {
            require(counts[v] <= UINT32_MAX, ErrorKind::Validation, "subgroup larger than 2^32 elements");
            layout.start[v + 1] = layout.start[v] + counts[v];
        }
        layout.size = layout.start[vcount];

        // Scatter into plane-major buffer: plane p occupies [p·size, (p+1)·size).
        auto& buf = buffers[g];
        buf.resize(layout.size * planes);
        std::copy(layout.start.begin(), layout.start.end() - 1, cursor.begin());
        std::uint8_t elem[2];
        for (auto b : group.members)
            for (auto i = geom.begin(b); i < geom.end(b); ++i) {
                auto v = quantized_value(low.dtype, low.data, i) - vmin;
                auto pos = cursor[v]++;
                detail::element_bytes(high, i, elem);
                for (unsigned p = 0; p < planes; ++p) buf[p * layout.size + pos] = elem[p];
            }

        for (std::uint32_t v = 0; v < vcount; ++v) {
            auto n = layout.start[v + 1] - layout.start[v];
            if (n == 0) continue;
            for (unsigned p = 0; p < planes; ++p)
                for (std::uint64_t off = 0; off < n; off += chunk_size)
                    jobs.push_back({g, v, p, p * layout.size + layout.start[v] + off,
                                    std::min<std::uint64_t>(chunk_size, n - off)});
        }
    }

    std::vector<EncodedChunk> coded(jobs.size());
    ctx.for_each(jobs.size(), [&](std::size_t j) {
        auto& job = jobs[j];
        coded[j] = encode_chunk(ByteView(buffers[job.group]).subspan(job.offset, job.length));
    });

    cs.groups.resize(plan.groups.size());
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        cs.groups[g].directory = plan.groups[g];
        cs.groups[g].subgroups.resize(vcount);
        for (std::uint32_t v = 0; v < vcount; ++v) {
            auto& sg = cs.groups[g].subgroups[v];
            sg.element_count = static_cast<std::uint32_t>(layouts[g].start[v + 1] - layouts[g].start[v]);
            if (sg.element_count) sg.planes.resize(planes);
        }
    }
    for (std::size_t j = 0; j < jobs.size(); ++j)
        cs.groups[jobs[j].group].subgroups[jobs[j].value].planes[jobs[j].plane].push_back(std::move(coded[j]));
    return cs;
}

/// Decoded subgroup contents: per group, per value, the plane-major buffer
/// and subgroup offsets. Exposed so callers can inspect stored order.
struct DecodedGroups {
    std::vector<Bytes> buffers;
    std::vector<detail::GroupLayout> layouts;
};

inline DecodedGroups decode_groups(const ConditionalStream& cond, const CodecContext& ctx = CodecContext())
{
    require(cond.plane_count == plane_count_for(cond.high_dtype), ErrorKind::Corrupt,
            "conditional stream '" + cond.tensor_name + "': plane count does not match dtype");
    DecodedGroups out;
    out.buffers.resize(cond.groups.size());
    out.layouts.resize(cond.groups.size());

    struct Job {
        std::size_t group;
        const EncodedChunk* chunk;
        std::uint64_t offset;
    };
    std::vector<Job> jobs;
    for (std::size_t g = 0; g < cond.groups.size(); ++g) {
        auto& gd = cond.groups[g];
        require(gd.subgroups.size() == cond.value_count, ErrorKind::Corrupt, "subgroup count mismatch");
        auto& layout = out.layouts[g];
        layout.start.assign(cond.value_count + 1, 0);
        for (std::uint32_t v = 0; v < cond.value_count; ++v)
            layout.start[v + 1] = layout.start[v] + gd.subgroups[v].element_count;
        layout.size = layout.start[cond.value_count];
        out.buffers[g].resize(layout.size * cond.plane_count);
        for (std::uint32_t v = 0; v < cond.value_count; ++v) {
            auto& sg = gd.subgroups[v];
            if (sg.element_count == 0) continue;
            require(sg.planes.size() == cond.plane_count, ErrorKind::Corrupt, "missing byte plane");
            for (unsigned p = 0; p < cond.plane_count; ++p) {
                std::uint64_t off = p * layout.size + layout.start[v];
                std::uint64_t total = 0;
                for (auto& c : sg.planes[p]) {
                    jobs.push_back({g, &c, off + total});
                    total += c.raw_size;
                }
                require(total == sg.element_count, ErrorKind::Corrupt,
                        "plane byte count differs from subgroup element count");
            }
        }
    }
    ctx.for_each(jobs.size(), [&](std::size_t j) {
        auto bytes = decode_chunk(*jobs[j].chunk);
        std::memcpy(out.buffers[jobs[j].group].data() + jobs[j].offset, bytes.data(), bytes.size());
    });
    return out;
}

/// Rebuilds the high-precision tensor from its quantized counterpart and the
/// conditional stream. Any disagreement between the stored subgroup counts
/// and the quantized values raises ErrorKind::Corrupt.
inline Tensor reconstruct_high(const Tensor& low, const QuantSpec& spec, const ConditionalStream& cond,
                               const CodecContext& ctx = CodecContext())
{
    low.validate();
    auto plan = build_grouping(spec, low);
    const auto& name = cond.tensor_name;
    require(cond.value_min == plan.value_min && cond.value_count == plan.value_count, ErrorKind::Corrupt,
            "conditional stream '" + name + "': value domain differs from the quantization spec");
    require(cond.groups.size() == plan.groups.size(), ErrorKind::Corrupt,
            "conditional stream '" + name + "': group count differs from the rebuilt plan");
    for (std::size_t g = 0; g < plan.groups.size(); ++g)
        require(cond.groups[g].directory == plan.groups[g], ErrorKind::Corrupt,
                "conditional stream '" + name + "': group directory differs from the rebuilt plan");

    auto decoded = decode_groups(cond, ctx);
    const auto geom = spec.geometry(low.numel());
    const unsigned planes = cond.plane_count;

    Tensor high;
    high.name = name;
    high.dtype = cond.high_dtype;
    high.shape = low.shape;
    high.data.assign(byte_length(high.dtype, high.numel()), 0);

    std::vector<std::uint64_t> cursor(plan.value_count);
    std::uint8_t elem[2] = {0, 0};
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        auto& layout = decoded.layouts[g];
        auto& buf = decoded.buffers[g];
        std::copy(layout.start.begin(), layout.start.end() - 1, cursor.begin());
        for (auto b : plan.groups[g].members)
            for (auto i = geom.begin(b); i < geom.end(b); ++i) {
                int v = quantized_value(low.dtype, low.data, i) - plan.value_min;
                if (v < 0 || static_cast<std::uint32_t>(v) >= plan.value_count) [[unlikely]]
                    fail(ErrorKind::Corrupt, "quantized value outside the subgroup domain");
                auto pos = cursor[v]++;
                if (pos >= layout.start[v + 1]) [[unlikely]]
                    fail(ErrorKind::Corrupt, "conditional stream '" + name + "': subgroup " +
                                                 std::to_string(v + plan.value_min) + " of group " +
                                                 std::to_string(g) + " underflows (count mismatch)");
                for (unsigned p = 0; p < planes; ++p) elem[p] = buf[p * layout.size + pos];
                detail::store_element(high, i, elem);
            }
        for (std::uint32_t v = 0; v < plan.value_count; ++v)
            if (cursor[v] != layout.start[v + 1])
                fail(ErrorKind::Corrupt, "conditional stream '" + name + "': subgroup " +
                                             std::to_string(static_cast<int>(v) + plan.value_min) + " of group " +
                                             std::to_string(g) + " has unconsumed elements (count mismatch)");
    }
    return high;
}

/// Recovers per-block scales from a stream's group directory, for chains
/// where the conditioning level's spec is not stored elsewhere.
inline QuantSpec spec_from_directory(const ConditionalStream& cond, BlockAxis axis, std::uint32_t block_size,
                                     unsigned bit_width, std::uint64_t numel)
{
    QuantSpec spec;
    spec.bit_width = bit_width;
    spec.block_axis = axis;
    spec.block_size = block_size;
    auto blocks = spec.geometry(numel).block_count();
    spec.scales.assign(blocks, 0.0f);
    std::vector<bool> seen(blocks, false);
    for (auto& g : cond.groups)
        for (auto b : g.directory.members) {
            require(b < blocks && !seen[b], ErrorKind::Corrupt, "group directory covers a block twice or out of range");
            seen[b] = true;
            spec.scales[b] = std::bit_cast<float>(g.directory.key);
        }
    for (bool s : seen) require(s, ErrorKind::Corrupt, "group directory leaves a block uncovered");
    return spec;
}

// .qshi record: name_len u16, name, high dtype u8, plane_count u8,
// value_min i16, value_count u16, group_count u32; per group: group_key u32,
// member_count u32, member blocks u32[], then per subgroup (ascending value):
// element_count u32 and, when non-zero, per plane a chunk table + payloads
// whose raw sizes sum to element_count.
inline void write_conditional_record(ByteWriter& w, const ConditionalStream& cs)
{
    require(cs.tensor_name.size() <= UINT16_MAX, ErrorKind::Validation, "tensor name too long");
    require(cs.value_count <= UINT16_MAX, ErrorKind::Validation, "value domain too large");
    w.put_u16(static_cast<std::uint16_t>(cs.tensor_name.size()));
    w.put_string(cs.tensor_name);
    w.put_u8(static_cast<std::uint8_t>(cs.high_dtype));
    w.put_u8(static_cast<std::uint8_t>(cs.plane_count));
    w.put_i16(static_cast<std::int16_t>(cs.value_min));
    w.put_u16(static_cast<std::uint16_t>(cs.value_count));
    w.put_u32(static_cast<std::uint32_t>(cs.groups.size()));
    for (auto& g : cs.groups) {
        w.put_u32(g.directory.key);
        w.put_u32(static_cast<std::uint32_t>(g.directory.members.size()));
        for (auto b : g.directory.members) w.put_u32(b);
        for (auto& sg : g.subgroups) {
            w.put_u32(sg.element_count);
            for (auto& plane : sg.planes) write_chunks(w, plane);
        }
    }
}

/// Passthrough record: same prefix with plane_count 0 and an empty domain,
/// then chunk_count u32, chunk table, payloads.
inline void write_passthrough_record(ByteWriter& w, const std::string& name, DType dtype,
                                     const std::vector<EncodedChunk>& chunks)
{
    w.put_u16(static_cast<std::uint16_t>(name.size()));
    w.put_string(name);
    w.put_u8(static_cast<std::uint8_t>(dtype));
    w.put_u8(0);
    w.put_i16(0);
    w.put_u16(0);
    w.put_u32(0);
    w.put_u32(static_cast<std::uint32_t>(chunks.size()));
    write_chunks(w, chunks);
}

struct QshiRecord {
    bool passthrough = false;
    ConditionalStream cond;                     // when !passthrough
    std::vector<EncodedChunk> passthrough_data;  // when passthrough
};

inline QshiRecord read_qshi_record(ByteReader& r)
{
    QshiRecord rec;
    auto& cs = rec.cond;
    cs.tensor_name = r.string(r.u16());
    cs.high_dtype = dtype_from_code(r.u8());
    cs.plane_count = r.u8();
    cs.value_min = r.i16();
    cs.value_count = r.u16();
    auto group_count = r.u32();
    if (cs.plane_count == 0) {
        require(group_count == 0 && cs.value_count == 0, ErrorKind::Corrupt, "malformed passthrough record");
        rec.passthrough = true;
        auto count = r.u32();
        require(count <= r.remaining() / kChunkHeaderBytes, ErrorKind::Corrupt, "truncated chunk table");
        rec.passthrough_data = read_chunks(r, count);
        return rec;
    }
    require(cs.plane_count <= 2, ErrorKind::Corrupt, "invalid plane count");
    require(group_count <= r.remaining() / 8, ErrorKind::Corrupt, "truncated group directory");
    cs.groups.resize(group_count);
    for (auto& g : cs.groups) {
        g.directory.key = r.u32();
        auto members = r.u32();
        require(members <= r.remaining() / 4, ErrorKind::Corrupt, "truncated group directory");
        g.directory.members.resize(members);
        for (auto& b : g.directory.members) b = r.u32();
        g.subgroups.resize(cs.value_count);
        for (auto& sg : g.subgroups) {
            sg.element_count = r.u32();
            if (sg.element_count == 0) continue;
            sg.planes.resize(cs.plane_count);
            for (auto& plane : sg.planes) plane = read_chunks_totaling(r, sg.element_count);
        }
    }
    return rec;
}

}  // namespace qstore
