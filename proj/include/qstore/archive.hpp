#pragma once

// On-disk archive: manifest.json, model.qslo (base level) and one .qshi
// file per higher-precision level, each conditional on the level directly
// below it.
//
// Data files start with magic (4 bytes), version u16 and tensor_count u32,
// followed by per-tensor records. All integers are little-endian.

#include <regex>

#include "qstore/conditional_stream.hpp"
#include "qstore/throttle.hpp"

namespace qstore {

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::string_view kLowMagic = "QSLO";
inline constexpr std::string_view kCondMagic = "QSHI";
inline constexpr std::size_t kFileHeaderBytes = 10;
inline constexpr std::string_view kBaseFileName = "model.qslo";
inline constexpr std::string_view kPairCondFileName = "model.qshi";

enum class LevelRole { Base, Conditional };

// How a tensor is stored at one level:
//   Quantized   - base level, chunk-coded with its quant spec
//   Raw         - base level, chunk-coded without a spec
//   Conditional - conditional on the same tensor one level down
//   Passthrough - chunk-coded bytes in this level's .qshi file
//   Inherited   - byte-identical to the level below; nothing stored
enum class EntryKind { Quantized, Raw, Conditional, Passthrough, Inherited };

inline std::string_view entry_kind_name(EntryKind k)
{
    switch (k) {
    case EntryKind::Quantized: return "quantized";
    case EntryKind::Raw: return "raw";
    case EntryKind::Conditional: return "conditional";
    case EntryKind::Passthrough: return "passthrough";
    case EntryKind::Inherited: return "inherited";
    }
    return "?";
}

inline EntryKind parse_entry_kind(std::string_view s)
{
    for (auto k : {EntryKind::Quantized, EntryKind::Raw, EntryKind::Conditional, EntryKind::Passthrough,
                   EntryKind::Inherited})
        if (entry_kind_name(k) == s) return k;
    fail(ErrorKind::Validation, "unknown tensor entry kind '" + std::string(s) + "'");
}

inline bool has_record(EntryKind k) { return k != EntryKind::Inherited; }

struct LevelInfo {
    std::string name;
    DType dtype = DType::BF16;
    LevelRole role = LevelRole::Base;
    std::string file;
    std::string depends_on;  // empty for the base level
    std::string quant_method;
    std::uint64_t file_bytes = 0;
};

struct TensorEntry {
    std::size_t level = 0;
    DType dtype = DType::BF16;
    EntryKind kind = EntryKind::Raw;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::uint32_t crc32 = 0;
};

struct TensorIndex {
    std::string name;
    Shape shape;
    std::vector<TensorEntry> entries;  // ascending level

    const TensorEntry* at(std::size_t level) const
    {
        for (auto& e : entries)
            if (e.level == level) return &e;
        return nullptr;
    }
};

struct ArchiveManifest {
    std::uint32_t format_version = kFormatVersion;
    std::uint32_t chunk_size = kDefaultChunkSize;
    std::vector<LevelInfo> levels;
    std::vector<TensorIndex> tensors;

    std::size_t level_index(std::string_view name) const
    {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i].name == name) return i;
        fail(ErrorKind::Validation, "archive has no level named '" + std::string(name) + "'");
    }

    std::vector<std::pair<std::string, std::string>> passthrough() const
    {
        std::vector<std::pair<std::string, std::string>> out;
        for (auto& t : tensors)
            for (auto& e : t.entries)
                if (e.kind == EntryKind::Passthrough) out.emplace_back(t.name, levels[e.level].name);
        return out;
    }

    std::uint64_t level_elements(std::size_t level) const
    {
        std::uint64_t n = 0;
        for (auto& t : tensors)
            if (t.at(level)) n += element_count(t.shape);
        return n;
    }

    std::uint64_t level_raw_bytes(std::size_t level) const
    {
        std::uint64_t n = 0;
        for (auto& t : tensors)
            if (auto* e = t.at(level)) n += byte_length(e->dtype, element_count(t.shape));
        return n;
    }
};

inline nlohmann::json manifest_to_json(const ArchiveManifest& m)
{
    nlohmann::json levels = nlohmann::json::array();
    for (auto& l : m.levels)
        levels.push_back({{"name", l.name},
                          {"dtype", dtype_name(l.dtype)},
                          {"role", l.role == LevelRole::Base ? "base" : "conditional"},
                          {"file", l.file},
                          {"depends_on", l.depends_on.empty() ? nlohmann::json(nullptr) : nlohmann::json(l.depends_on)},
                          {"quant_method", l.quant_method},
                          {"file_bytes", l.file_bytes}});
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& t : m.tensors) {
        nlohmann::json entries = nlohmann::json::array();
        for (auto& e : t.entries)
            entries.push_back({{"level", m.levels[e.level].name},
                               {"dtype", dtype_name(e.dtype)},
                               {"kind", entry_kind_name(e.kind)},
                               {"offset", e.offset},
                               {"length", e.length},
                               {"crc32", e.crc32}});
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"entries", entries}});
    }
    nlohmann::json passthrough = nlohmann::json::array();
    for (auto& [name, level] : m.passthrough()) passthrough.push_back({{"name", name}, {"level", level}});
    return {{"format", "qstore"},
            {"format_version", m.format_version},
            {"chunk_size", m.chunk_size},
            {"levels", levels},
            {"tensors", tensors},
            {"passthrough", passthrough}};
}

/// Structural checks: one base level first, each conditional level depends
/// on the level directly below, entry kinds fit their level, and record
/// offsets ascend without overlap inside each file.
inline void validate_manifest(const ArchiveManifest& m)
{
    require(m.format_version == kFormatVersion, ErrorKind::Corrupt,
            "archive format version " + std::to_string(m.format_version) + " is not supported");
    require(!m.levels.empty(), ErrorKind::Validation, "manifest lists no levels");
    int bases = 0;
    for (auto& l : m.levels) bases += l.role == LevelRole::Base;
    require(bases == 1, ErrorKind::Validation, "manifest must have exactly one base level, found " + std::to_string(bases));
    require(m.levels[0].role == LevelRole::Base && m.levels[0].depends_on.empty(), ErrorKind::Validation,
            "the first level must be the base level");
    for (std::size_t i = 1; i < m.levels.size(); ++i) {
        auto& l = m.levels[i];
        bool known = false;
        for (auto& other : m.levels) known |= other.name == l.depends_on;
        require(known, ErrorKind::Validation, "level '" + l.name + "' depends on unknown level '" + l.depends_on + "'");
        require(l.depends_on == m.levels[i - 1].name, ErrorKind::Validation,
                "level '" + l.name + "' must depend on the adjacent lower level '" + m.levels[i - 1].name + "'");
    }
    for (std::size_t i = 0; i < m.levels.size(); ++i)
        for (std::size_t j = i + 1; j < m.levels.size(); ++j)
            require(m.levels[i].name != m.levels[j].name && m.levels[i].file != m.levels[j].file,
                    ErrorKind::Validation, "duplicate level name or file");

    std::vector<std::uint64_t> cursor(m.levels.size(), kFileHeaderBytes);
    for (std::size_t ti = 0; ti < m.tensors.size(); ++ti) {
        auto& t = m.tensors[ti];
        require(ti == 0 || m.tensors[ti - 1].name < t.name, ErrorKind::Validation,
                "manifest tensors must be sorted by unique name");
        for (std::size_t k = 0; k < t.entries.size(); ++k) {
            auto& e = t.entries[k];
            require(e.level < m.levels.size(), ErrorKind::Validation, "tensor entry with an unknown level");
            require(k == 0 || t.entries[k - 1].level < e.level, ErrorKind::Validation,
                    "tensor '" + t.name + "': entries must ascend by level");
            bool base_kind = e.kind == EntryKind::Quantized || e.kind == EntryKind::Raw;
            require(base_kind == (e.level == 0), ErrorKind::Validation,
                    "tensor '" + t.name + "': entry kind '" + std::string(entry_kind_name(e.kind)) +
                        "' is not valid at level '" + m.levels[e.level].name + "'");
            if (e.kind == EntryKind::Conditional || e.kind == EntryKind::Inherited)
                require(t.at(e.level - 1) != nullptr, ErrorKind::Validation,
                        "tensor '" + t.name + "': entry at '" + m.levels[e.level].name +
                            "' needs the tensor at the level below");
            if (has_record(e.kind)) {
                require(e.offset >= cursor[e.level] && e.length > 0, ErrorKind::Validation,
                        "tensor '" + t.name + "': record offsets overlap or are not ascending");
                cursor[e.level] = e.offset + e.length;
            }
        }
    }
    for (std::size_t i = 0; i < m.levels.size(); ++i)
        require(cursor[i] <= m.levels[i].file_bytes, ErrorKind::Validation,
                "level '" + m.levels[i].name + "': records extend past the recorded file size");
}

inline ArchiveManifest manifest_from_json(const nlohmann::json& j)
{
    ArchiveManifest m;
    try {
        require(j.is_object() && j.value("format", "") == "qstore", ErrorKind::Validation, "not a qstore manifest");
        m.format_version = j.at("format_version").get<std::uint32_t>();
        m.chunk_size = j.at("chunk_size").get<std::uint32_t>();
        for (auto& l : j.at("levels")) {
            LevelInfo info;
            info.name = l.at("name").get<std::string>();
            info.dtype = parse_dtype(l.at("dtype").get<std::string>());
            auto role = l.at("role").get<std::string>();
            require(role == "base" || role == "conditional", ErrorKind::Validation, "unknown level role '" + role + "'");
            info.role = role == "base" ? LevelRole::Base : LevelRole::Conditional;
            info.file = l.at("file").get<std::string>();
            if (!l.at("depends_on").is_null()) info.depends_on = l.at("depends_on").get<std::string>();
            info.quant_method = l.value("quant_method", "");
            info.file_bytes = l.at("file_bytes").get<std::uint64_t>();
            m.levels.push_back(std::move(info));
        }
        for (auto& t : j.at("tensors")) {
            TensorIndex idx;
            idx.name = t.at("name").get<std::string>();
            idx.shape = detail::parse_shape(t.at("shape"), idx.name);
            for (auto& e : t.at("entries")) {
                TensorEntry entry;
                auto level = e.at("level").get<std::string>();
                entry.level = m.levels.size();
                for (std::size_t i = 0; i < m.levels.size(); ++i)
                    if (m.levels[i].name == level) entry.level = i;
                require(entry.level < m.levels.size(), ErrorKind::Validation,
                        "tensor '" + idx.name + "' references unknown level '" + level + "'");
                entry.dtype = parse_dtype(e.at("dtype").get<std::string>());
                entry.kind = parse_entry_kind(e.at("kind").get<std::string>());
                entry.offset = e.at("offset").get<std::uint64_t>();
                entry.length = e.at("length").get<std::uint64_t>();
                entry.crc32 = e.at("crc32").get<std::uint32_t>();
                idx.entries.push_back(entry);
            }
            m.tensors.push_back(std::move(idx));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Validation, std::string("manifest schema violation: ") + e.what());
    }
    validate_manifest(m);
    return m;
}

/// Parses and validates manifest.json and checks that every level file exists
/// with its recorded size.
inline ArchiveManifest read_manifest(const fs::path& archive_dir)
{
    auto path = archive_dir / "manifest.json";
    require(fs::exists(path), ErrorKind::Io, "missing '" + path.string() + "'");
    auto text = read_file(path);
    auto m = manifest_from_json(
        detail::parse_json(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()), "archive manifest"));
    for (auto& l : m.levels) {
        auto file = archive_dir / l.file;
        require(fs::exists(file), ErrorKind::Io, "missing archive file '" + file.string() + "'");
        require(fs::file_size(file) == l.file_bytes, ErrorKind::Corrupt,
                "archive file '" + file.string() + "' has size " + std::to_string(fs::file_size(file)) + ", manifest says " +
                    std::to_string(l.file_bytes));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Writing

struct LevelInput {
    ModelTensors model;
    ModelQuantSpec specs;  // empty for unquantized levels
    std::string name;      // defaults to the level's dominant dtype
    std::string quant_method = "rtn_absmax";
};

struct WriteOptions {
    std::size_t chunk_size = kDefaultChunkSize;
};

namespace detail {

inline std::string default_level_name(DType d)
{
    switch (d) {
    case DType::FP16: return "fp16";
    case DType::BF16: return "bf16";
    case DType::INT8: return "int8";
    case DType::INT4_PACKED: return "int4";
    }
    return "level";
}

inline DType dominant_dtype(const ModelTensors& model)
{
    std::array<std::uint64_t, 4> weight{};
    for (auto& t : model) weight[static_cast<int>(t.dtype)] += t.numel();
    auto best = std::max_element(weight.begin(), weight.end()) - weight.begin();
    return model.empty() ? DType::BF16 : static_cast<DType>(best);
}

}  // namespace detail

/// Classifies every tensor at every level and fills in CRCs. Offsets and file
/// sizes are left for the writer.
inline ArchiveManifest plan_archive(const std::vector<LevelInput>& levels, const WriteOptions& opts)
{
    require(!levels.empty(), ErrorKind::Validation, "an archive needs at least one level");
    require(opts.chunk_size > 0 && opts.chunk_size <= UINT32_MAX, ErrorKind::Validation,
            "chunk_size must be in 1..2^32-1");
    static const std::regex safe_name("[A-Za-z0-9_.-]+");

    ArchiveManifest m;
    m.chunk_size = static_cast<std::uint32_t>(opts.chunk_size);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        LevelInfo info;
        info.dtype = detail::dominant_dtype(levels[i].model);
        info.name = levels[i].name.empty() ? detail::default_level_name(info.dtype) : levels[i].name;
        for (auto& prev : m.levels)
            if (prev.name == info.name) info.name += "_" + std::to_string(i);
        require(std::regex_match(info.name, safe_name), ErrorKind::Validation,
                "level name '" + info.name + "' must match [A-Za-z0-9_.-]+");
        info.role = i == 0 ? LevelRole::Base : LevelRole::Conditional;
        // A plain pair is model.qslo + model.qshi; longer chains name each
        // conditional file after its level.
        if (i == 0)
            info.file = std::string(kBaseFileName);
        else
            info.file = levels.size() == 2 ? std::string(kPairCondFileName) : info.name + ".qshi";
        info.depends_on = i == 0 ? "" : m.levels[i - 1].name;
        info.quant_method = levels[i].specs.empty() ? "" : levels[i].quant_method;
        m.levels.push_back(std::move(info));

        for (auto& [name, spec] : levels[i].specs) {
            auto* t = levels[i].model.find(name);
            require(t != nullptr, ErrorKind::Validation,
                    "quant spec names tensor '" + name + "' missing from level '" + m.levels[i].name + "'");
            require(is_integer(t->dtype) && dtype_for_bits(spec.bit_width) == t->dtype, ErrorKind::Validation,
                    "quant spec for '" + name + "' does not match its dtype");
            validate_spec(spec, t->shape, name);
        }
    }

    std::vector<std::string> names;
    for (auto& l : levels)
        for (auto& t : l.model) names.push_back(t.name);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());

    for (auto& name : names) {
        TensorIndex idx;
        idx.name = name;
        const QuantSpec* base_spec = nullptr;
        for (std::size_t l = 0; l < levels.size(); ++l) {
            auto* t = levels[l].model.find(name);
            if (!t) continue;
            t->validate();
            if (idx.shape.empty() && idx.entries.empty())
                idx.shape = t->shape;
            require(t->shape == idx.shape, ErrorKind::Validation,
                    "tensor '" + name + "' has shape " + shape_string(t->shape) + " at level '" + m.levels[l].name +
                        "' but " + shape_string(idx.shape) + " elsewhere");

            TensorEntry e;
            e.level = l;
            e.dtype = t->dtype;
            e.crc32 = crc32_of(t->data);
            auto spec_it = levels[l].specs.find(name);
            if (l == 0) {
                e.kind = spec_it != levels[l].specs.end() ? EntryKind::Quantized : EntryKind::Raw;
                if (e.kind == EntryKind::Quantized) base_spec = &spec_it->second;
            } else {
                auto* below = idx.at(l - 1);
                const Tensor* prev = levels[l - 1].model.find(name);
                auto prev_spec = levels[l - 1].specs.find(name);
                bool chained = below && (below->kind == EntryKind::Quantized || below->kind == EntryKind::Conditional);
                if (below && chained && prev_spec != levels[l - 1].specs.end()) {
                    if (l - 1 > 0) {
                        // Intermediate specs are rebuilt from the base block geometry.
                        require(base_spec && prev_spec->second.block_axis == base_spec->block_axis &&
                                    prev_spec->second.block_size == base_spec->block_size,
                                ErrorKind::Validation,
                                "tensor '" + name + "': level '" + m.levels[l - 1].name +
                                    "' uses a different block geometry than the base level");
                    }
                    e.kind = EntryKind::Conditional;
                } else if (below && prev && prev->dtype == t->dtype && prev->data == t->data) {
                    e.kind = EntryKind::Inherited;
                } else {
                    e.kind = EntryKind::Passthrough;
                }
            }
            idx.entries.push_back(e);
        }
        m.tensors.push_back(std::move(idx));
    }
    return m;
}

/// Encoded records of one tensor, indexed like TensorIndex::entries (empty
/// for inherited entries).
struct TensorRecords {
    std::vector<Bytes> records;
};

inline TensorRecords encode_tensor(const ArchiveManifest& m, const std::vector<LevelInput>& levels,
                                   std::size_t tensor, const CodecContext& ctx)
{
    auto& idx = m.tensors[tensor];
    TensorRecords out;
    out.records.resize(idx.entries.size());
    for (std::size_t k = 0; k < idx.entries.size(); ++k) {
        auto& e = idx.entries[k];
        auto& t = levels[e.level].model.at(idx.name);
        ByteWriter w(out.records[k]);
        switch (e.kind) {
        case EntryKind::Quantized:
            write_low_record(w, encode_low(t, levels[0].specs.at(idx.name), m.chunk_size, ctx));
            break;
        case EntryKind::Raw: write_low_record(w, encode_low(t, std::nullopt, m.chunk_size, ctx)); break;
        case EntryKind::Conditional: {
            auto& low = levels[e.level - 1].model.at(idx.name);
            auto& spec = levels[e.level - 1].specs.at(idx.name);
            auto plan = build_grouping(spec, low);
            write_conditional_record(w, encode_conditional(t, low, spec, plan, m.chunk_size, ctx));
            break;
        }
        case EntryKind::Passthrough:
            write_passthrough_record(w, idx.name, t.dtype, encode_bytes(t.data, m.chunk_size, ctx));
            break;
        case EntryKind::Inherited: break;
        }
    }
    return out;
}

/// Streams tensor records into temporary files and publishes the archive on
/// commit(). Destroying an uncommitted writer removes everything it created.
class ArchiveWriter {
public:
    ArchiveWriter(ArchiveManifest plan, fs::path out_dir) : m_(std::move(plan)), dir_(std::move(out_dir))
    {
        std::error_code ec;
        created_dir_ = !fs::exists(dir_);
        fs::create_directories(dir_, ec);
        require(!ec, ErrorKind::Io, "cannot create '" + dir_.string() + "': " + ec.message());

        std::vector<std::uint32_t> counts(m_.levels.size(), 0);
        for (auto& t : m_.tensors)
            for (auto& e : t.entries) counts[e.level] += has_record(e.kind);
        for (std::size_t i = 0; i < m_.levels.size(); ++i) {
            auto tmp = temp_path(m_.levels[i].file);
            temps_.push_back(tmp);
            outs_.emplace_back(tmp, std::ios::binary | std::ios::trunc);
            require(static_cast<bool>(outs_.back()), ErrorKind::Io, "cannot create '" + tmp.string() + "'");
            Bytes header;
            ByteWriter w(header);
            w.put_string(i == 0 ? kLowMagic : kCondMagic);
            w.put_u16(kFormatVersion);
            w.put_u32(counts[i]);
            write(i, header);
        }
        positions_.assign(m_.levels.size(), kFileHeaderBytes);
    }

    ArchiveWriter(const ArchiveWriter&) = delete;
    ArchiveWriter& operator=(const ArchiveWriter&) = delete;

    ~ArchiveWriter()
    {
        if (committed_) return;
        outs_.clear();
        std::error_code ec;
        for (auto& t : temps_) fs::remove(t, ec);
        if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
    }

    /// Appends records for tensors in manifest order.
    void append(std::size_t tensor, const TensorRecords& recs)
    {
        require(tensor == next_tensor_, ErrorKind::Validation, "tensor records appended out of order");
        ++next_tensor_;
        auto& idx = m_.tensors[tensor];
        for (std::size_t k = 0; k < idx.entries.size(); ++k) {
            auto& e = idx.entries[k];
            if (!has_record(e.kind)) continue;
            e.offset = positions_[e.level];
            e.length = recs.records[k].size();
            write(e.level, recs.records[k]);
            positions_[e.level] += e.length;
        }
    }

    ArchiveManifest commit()
    {
        require(next_tensor_ == m_.tensors.size(), ErrorKind::Validation, "commit before all tensors were written");
        for (std::size_t i = 0; i < outs_.size(); ++i) {
            outs_[i].close();
            require(static_cast<bool>(outs_[i]), ErrorKind::Io, "failed writing '" + temps_[i].string() + "'");
            m_.levels[i].file_bytes = positions_[i];
        }
        validate_manifest(m_);
        auto manifest_tmp = temp_path("manifest.json");
        temps_.push_back(manifest_tmp);
        write_text_file(manifest_tmp, manifest_to_json(m_).dump(2) + "\n");

        std::error_code ec;
        fs::remove(dir_ / "manifest.json", ec);
        for (std::size_t i = 0; i < m_.levels.size(); ++i) {
            fs::rename(temps_[i], dir_ / m_.levels[i].file, ec);
            require(!ec, ErrorKind::Io, "cannot publish '" + m_.levels[i].file + "': " + ec.message());
        }
        fs::rename(manifest_tmp, dir_ / "manifest.json", ec);
        require(!ec, ErrorKind::Io, "cannot publish manifest.json: " + ec.message());
        committed_ = true;
        return m_;
    }

    const ArchiveManifest& manifest() const { return m_; }

private:
    fs::path temp_path(const std::string& file) const { return dir_ / ("." + file + ".tmp"); }

    void write(std::size_t level, ByteView bytes)
    {
        outs_[level].write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(outs_[level]), ErrorKind::Io, "failed writing '" + temps_[level].string() + "'");
    }

    ArchiveManifest m_;
    fs::path dir_;
    bool created_dir_ = false;
    bool committed_ = false;
    std::vector<fs::path> temps_;
    std::vector<std::ofstream> outs_;
    std::vector<std::uint64_t> positions_;
    std::size_t next_tensor_ = 0;
};

/// Serial pack of `levels` (ordered low to high precision) into `out_dir`.
inline ArchiveManifest write_archive(const std::vector<LevelInput>& levels, const fs::path& out_dir,
                                     const WriteOptions& opts = {}, const CodecContext& ctx = CodecContext())
{
    auto plan = plan_archive(levels, opts);
    ArchiveWriter writer(plan, out_dir);
    for (std::size_t t = 0; t < plan.tensors.size(); ++t) writer.append(t, encode_tensor(plan, levels, t, ctx));
    return writer.commit();
}

// ---------------------------------------------------------------------------
// Reading

/// Lazily opened level files sharing one throttle. Only files that are
/// actually needed get opened.
class ArchiveFiles {
public:
    ArchiveFiles(const fs::path& dir, const ArchiveManifest& m, Throttle* throttle = nullptr)
        : dir_(dir), m_(m), throttle_(throttle), readers_(m.levels.size())
    {
    }

    Bytes read(std::size_t level, std::uint64_t offset, std::uint64_t length)
    {
        return reader(level).read(offset, length);
    }

    std::uint64_t bytes_read() const
    {
        std::uint64_t n = 0;
        for (auto& r : readers_)
            if (r) n += r->bytes_read();
        return n;
    }

    bool opened(std::size_t level) const { return readers_[level] != nullptr; }

private:
    ThrottledReader& reader(std::size_t level)
    {
        auto& r = readers_[level];
        if (!r) {
            auto path = dir_ / m_.levels[level].file;
            require(fs::exists(path), ErrorKind::Io, "missing archive file '" + path.string() + "'");
            r = std::make_unique<ThrottledReader>(path, throttle_);
            auto header = r->read(0, kFileHeaderBytes);
            ByteReader hr(header);
            auto magic = hr.string(4);
            require(magic == (level == 0 ? kLowMagic : kCondMagic), ErrorKind::Corrupt,
                    "'" + path.string() + "' has the wrong magic");
            auto version = hr.u16();
            require(version == kFormatVersion, ErrorKind::Corrupt,
                    "'" + path.string() + "' has unsupported version " + std::to_string(version));
        }
        return *r;
    }

    fs::path dir_;
    const ArchiveManifest& m_;
    Throttle* throttle_;
    std::vector<std::unique_ptr<ThrottledReader>> readers_;
};

/// Record bytes needed to materialize one tensor at a target level.
struct TensorFetch {
    std::size_t tensor = 0;
    std::size_t target = 0;
    std::size_t first = 0;       // lowest level on the dependency path
    std::vector<Bytes> records;  // indexed by level - first; empty for inherited entries

    std::uint64_t bytes() const
    {
        std::uint64_t n = 0;
        for (auto& r : records) n += r.size();
        return n;
    }
};

/// Lowest level whose record is needed to rebuild `tensor` at `target`.
inline std::size_t dependency_root(const TensorIndex& idx, std::size_t target)
{
    auto* e = idx.at(target);
    require(e != nullptr, ErrorKind::Validation, "tensor '" + idx.name + "' does not exist at the requested level");
    std::size_t l = target;
    while (idx.at(l)->kind == EntryKind::Conditional || idx.at(l)->kind == EntryKind::Inherited) --l;
    return l;
}

inline TensorFetch fetch_tensor(const ArchiveManifest& m, ArchiveFiles& files, std::size_t tensor, std::size_t target)
{
    auto& idx = m.tensors[tensor];
    TensorFetch f;
    f.tensor = tensor;
    f.target = target;
    f.first = dependency_root(idx, target);
    f.records.resize(target - f.first + 1);
    for (auto l = f.first; l <= target; ++l) {
        auto* e = idx.at(l);
        if (has_record(e->kind)) f.records[l - f.first] = files.read(l, e->offset, e->length);
    }
    return f;
}

namespace detail {

inline void check_crc(const Tensor& t, const TensorEntry& e, const std::string& level)
{
    require(crc32_of(t.data) == e.crc32, ErrorKind::Corrupt,
            "CRC mismatch for tensor '" + t.name + "' at level '" + level + "'");
}

inline LowStream parse_low(const Bytes& record, const std::string& name)
{
    ByteReader r(record);
    auto s = read_low_record(r);
    require(r.at_end() && s.tensor_name == name, ErrorKind::Corrupt, "malformed .qslo record for '" + name + "'");
    return s;
}

inline QshiRecord parse_qshi(const Bytes& record, const std::string& name)
{
    ByteReader r(record);
    auto rec = read_qshi_record(r);
    require(r.at_end() && rec.cond.tensor_name == name, ErrorKind::Corrupt, "malformed .qshi record for '" + name + "'");
    return rec;
}

}  // namespace detail

/// Decodes a fetched tensor, returning (level, tensor) for every level on the
/// dependency path up to the target. Each result is CRC-checked.
inline std::vector<std::pair<std::size_t, Tensor>> decode_tensor(const ArchiveManifest& m, const TensorFetch& f,
                                                                 const CodecContext& ctx = CodecContext())
{
    auto& idx = m.tensors[f.tensor];
    std::vector<std::pair<std::size_t, Tensor>> out;
    Tensor cur;
    std::optional<QuantSpec> base_spec;

    auto* root = idx.at(f.first);
    auto& root_rec = f.records[0];
    if (root->kind == EntryKind::Passthrough) {
        auto rec = detail::parse_qshi(root_rec, idx.name);
        require(rec.passthrough, ErrorKind::Corrupt, "expected a passthrough record for '" + idx.name + "'");
        cur.name = idx.name;
        cur.dtype = rec.cond.high_dtype;
        cur.shape = idx.shape;
        cur.data = decode_bytes(rec.passthrough_data, ctx);
        require(cur.data.size() == byte_length(cur.dtype, cur.numel()), ErrorKind::Corrupt,
                "passthrough tensor '" + idx.name + "' has the wrong byte length");
    } else {
        auto stream = detail::parse_low(root_rec, idx.name);
        require(stream.shape == idx.shape, ErrorKind::Corrupt, "shape of '" + idx.name + "' disagrees with manifest");
        auto [t, spec] = decode_low(stream, ctx);
        cur = std::move(t);
        base_spec = std::move(spec);
    }
    detail::check_crc(cur, *root, m.levels[f.first].name);
    out.emplace_back(f.first, cur);

    for (auto l = f.first + 1; l <= f.target; ++l) {
        auto* e = idx.at(l);
        if (e->kind == EntryKind::Conditional) {
            auto rec = detail::parse_qshi(f.records[l - f.first], idx.name);
            require(!rec.passthrough, ErrorKind::Corrupt, "expected a conditional record for '" + idx.name + "'");
            QuantSpec spec;
            if (l - 1 == f.first) {
                require(base_spec.has_value(), ErrorKind::Corrupt, "conditional entry over an unquantized base");
                spec = *base_spec;
            } else {
                require(base_spec.has_value(), ErrorKind::Corrupt, "chain without a quantized base");
                spec = spec_from_directory(rec.cond, base_spec->block_axis, base_spec->block_size,
                                           element_bits(cur.dtype), cur.numel());
            }
            cur = reconstruct_high(cur, spec, rec.cond, ctx);
        }
        detail::check_crc(cur, *e, m.levels[l].name);
        out.emplace_back(l, cur);
    }
    return out;
}

/// Serial load of every tensor present at `level_name`.
inline ModelTensors load_model(const fs::path& archive_dir, std::string_view level_name,
                               const CodecContext& ctx = CodecContext())
{
    auto m = read_manifest(archive_dir);
    auto level = m.level_index(level_name);
    ArchiveFiles files(archive_dir, m);
    std::vector<Tensor> tensors;
    for (std::size_t t = 0; t < m.tensors.size(); ++t) {
        if (!m.tensors[t].at(level)) continue;
        auto decoded = decode_tensor(m, fetch_tensor(m, files, t, level), ctx);
        tensors.push_back(std::move(decoded.back().second));
    }
    return ModelTensors(std::move(tensors));
}

/// Quant specs of the tensors at `level_name` that can be recovered from the
/// archive: the base level's own specs, or an intermediate level's scales
/// from the group directories of the level above.
inline ModelQuantSpec load_level_specs(const fs::path& archive_dir, std::string_view level_name)
{
    auto m = read_manifest(archive_dir);
    auto level = m.level_index(level_name);
    ArchiveFiles files(archive_dir, m);
    ModelQuantSpec specs;
    for (auto& idx : m.tensors) {
        auto* e = idx.at(level);
        auto* base = idx.at(0);
        if (!e || !base || base->kind != EntryKind::Quantized) continue;
        auto base_stream = detail::parse_low(files.read(0, base->offset, base->length), idx.name);
        if (level == 0) {
            auto spec = *base_stream.spec;
            spec.method = m.levels[0].quant_method;
            specs.emplace(idx.name, std::move(spec));
            continue;
        }
        auto* above = idx.at(level + 1);
        if (e->kind != EntryKind::Conditional || !above || above->kind != EntryKind::Conditional) continue;
        auto rec = detail::parse_qshi(files.read(level + 1, above->offset, above->length), idx.name);
        auto spec = spec_from_directory(rec.cond, base_stream.spec->block_axis, base_stream.spec->block_size,
                                        element_bits(e->dtype), element_count(idx.shape));
        spec.method = m.levels[level].quant_method;
        specs.emplace(idx.name, std::move(spec));
    }
    return specs;
}

}  // namespace qstore
