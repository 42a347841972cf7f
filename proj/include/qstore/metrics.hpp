#pragma once

#include <iomanip>
#include <random>
#include <sstream>

#include "qstore/archive.hpp"

namespace qstore {

struct SizeReport {
    struct Level {
        std::string name;
        std::string file;
        std::uint64_t raw_bytes = 0;     // uncompressed tensor bytes at this level
        std::uint64_t stored_bytes = 0;  // size of the level's data file
    };

    std::vector<Level> levels;
    std::uint64_t low_stream_bytes = 0;           // chunk payloads in the .qslo file
    std::uint64_t conditional_stream_bytes = 0;   // chunk payloads in the .qshi files
    std::uint64_t header_bytes = 0;               // everything else, manifest included
    std::uint64_t manifest_bytes = 0;
    std::uint64_t total_stored_bytes = 0;
    std::uint64_t total_raw_bytes = 0;
    std::uint64_t element_count = 0;  // weights in the highest-precision model

    double bits_per_weight() const { return element_count ? 8.0 * total_stored_bytes / element_count : 0.0; }
    double uncompressed_bits_per_weight() const { return element_count ? 8.0 * total_raw_bytes / element_count : 0.0; }

    nlohmann::json to_json() const
    {
        nlohmann::json lv = nlohmann::json::array();
        for (auto& l : levels)
            lv.push_back({{"name", l.name}, {"file", l.file}, {"raw_bytes", l.raw_bytes}, {"stored_bytes", l.stored_bytes}});
        return {{"levels", lv},
                {"breakdown",
                 {{"low_stream", low_stream_bytes},
                  {"conditional_streams", conditional_stream_bytes},
                  {"headers", header_bytes}}},
                {"manifest_bytes", manifest_bytes},
                {"total_stored_bytes", total_stored_bytes},
                {"total_raw_bytes", total_raw_bytes},
                {"element_count", element_count},
                {"bits_per_weight", bits_per_weight()},
                {"uncompressed_bits_per_weight", uncompressed_bits_per_weight()}};
    }

    std::string to_text() const
    {
        std::ostringstream os;
        os << std::left << std::setw(12) << "level" << std::setw(16) << "file" << std::right << std::setw(16)
           << "raw_bytes" << std::setw(16) << "stored_bytes" << "\n";
        for (auto& l : levels)
            os << std::left << std::setw(12) << l.name << std::setw(16) << l.file << std::right << std::setw(16)
               << l.raw_bytes << std::setw(16) << l.stored_bytes << "\n";
        os << std::left << std::setw(28) << "manifest" << std::right << std::setw(32) << manifest_bytes << "\n";
        os << std::left << std::setw(28) << "total" << std::right << std::setw(16) << total_raw_bytes << std::setw(16)
           << total_stored_bytes << "\n\n";
        os << "low stream payload   " << low_stream_bytes << "\n";
        os << "conditional payload  " << conditional_stream_bytes << "\n";
        os << "headers              " << header_bytes << "\n";
        os << std::fixed << std::setprecision(3);
        os << "bits/weight          " << bits_per_weight() << " (uncompressed " << uncompressed_bits_per_weight()
           << ")\n";
        return os.str();
    }
};

namespace detail {

inline std::uint64_t payload_bytes(const std::vector<EncodedChunk>& chunks)
{
    std::uint64_t n = 0;
    for (auto& c : chunks) n += c.comp_size();
    return n;
}

inline std::uint64_t payload_bytes(const QshiRecord& rec)
{
    if (rec.passthrough) return payload_bytes(rec.passthrough_data);
    std::uint64_t n = 0;
    for (auto& g : rec.cond.groups)
        for (auto& sg : g.subgroups)
            for (auto& plane : sg.planes) n += payload_bytes(plane);
    return n;
}

}  // namespace detail

/// Walks every data file record by record and splits its bytes into chunk
/// payloads and headers. Fails if a file holds bytes no record accounts for.
inline SizeReport size_report(const fs::path& archive_dir)
{
    auto m = read_manifest(archive_dir);
    SizeReport rep;
    rep.manifest_bytes = fs::file_size(archive_dir / "manifest.json");
    rep.header_bytes = rep.manifest_bytes;
    rep.total_stored_bytes = rep.manifest_bytes;

    for (std::size_t l = 0; l < m.levels.size(); ++l) {
        auto path = archive_dir / m.levels[l].file;
        auto data = read_file(path);
        ByteReader r(data);
        r.bytes(kFileHeaderBytes);
        std::uint64_t payload = 0;
        std::uint32_t records = 0;
        {
            ByteReader hr(ByteView(data).first(kFileHeaderBytes));
            hr.bytes(6);
            records = hr.u32();
        }
        for (std::uint32_t i = 0; i < records; ++i) {
            if (l == 0)
                payload += detail::payload_bytes(read_low_record(r).chunks);
            else
                payload += detail::payload_bytes(read_qshi_record(r));
        }
        require(r.at_end(), ErrorKind::Corrupt, "'" + path.string() + "' has trailing bytes after its records");

        (l == 0 ? rep.low_stream_bytes : rep.conditional_stream_bytes) += payload;
        rep.header_bytes += data.size() - payload;
        rep.total_stored_bytes += data.size();
        rep.total_raw_bytes += m.level_raw_bytes(l);
        rep.levels.push_back({m.levels[l].name, m.levels[l].file, m.level_raw_bytes(l), data.size()});
    }
    rep.element_count = m.level_elements(m.levels.size() - 1);
    return rep;
}

struct GroupingEntropyReport {
    double none = 0;
    double quant_fn = 0;
    double value = 0;
    double combined = 0;
    double random = 0;
    std::uint64_t quant_fn_groups = 0;
    std::uint64_t value_groups = 0;
    std::uint64_t combined_groups = 0;
    std::uint64_t element_count = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const
    {
        return {{"symbol_bits", 16},
                {"weighting", "element_count"},
                {"seed", seed},
                {"element_count", element_count},
                {"strategies",
                 {{"none", {{"entropy", none}, {"groups", element_count ? 1 : 0}}},
                  {"quant_fn", {{"entropy", quant_fn}, {"groups", quant_fn_groups}}},
                  {"value", {{"entropy", value}, {"groups", value_groups}}},
                  {"combined", {{"entropy", combined}, {"groups", combined_groups}}},
                  {"random", {{"entropy", random}, {"groups", combined_groups}}}}}};
    }

    std::string to_text() const
    {
        std::ostringstream os;
        os << std::left << std::setw(12) << "strategy" << std::right << std::setw(12) << "groups" << std::setw(16)
           << "bits/weight" << "\n";
        os << std::fixed << std::setprecision(4);
        auto row = [&](const char* name, std::uint64_t groups, double h) {
            os << std::left << std::setw(12) << name << std::right << std::setw(12) << groups << std::setw(16) << h
               << "\n";
        };
        row("none", element_count ? 1 : 0, none);
        row("quant_fn", quant_fn_groups, quant_fn);
        row("value", value_groups, value);
        row("combined", combined_groups, combined);
        row("random", combined_groups, random);
        os << "(16-bit symbols, groups weighted by element count, seed " << seed << ")\n";
        return os.str();
    }
};

inline constexpr std::uint64_t kDefaultEntropySeed = 20240601;

namespace detail {

// Weighted entropy of 16-bit symbols under a dense group labelling.
inline double labelled_entropy(const std::vector<std::uint16_t>& symbols, const std::vector<std::uint32_t>& labels)
{
    std::vector<std::uint64_t> keys(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i)
        keys[i] = (static_cast<std::uint64_t>(labels[i]) << 16) | symbols[i];
    std::sort(keys.begin(), keys.end());

    double acc = 0;
    std::size_t i = 0;
    std::vector<std::uint64_t> counts;
    while (i < keys.size()) {
        auto label = keys[i] >> 16;
        counts.clear();
        std::uint64_t total = 0;
        while (i < keys.size() && (keys[i] >> 16) == label) {
            auto j = i;
            while (j < keys.size() && keys[j] == keys[i]) ++j;
            counts.push_back(j - i);
            total += j - i;
            i = j;
        }
        acc += static_cast<double>(total) * entropy_from_counts(counts, total);
    }
    return symbols.empty() ? 0.0 : acc / static_cast<double>(symbols.size());
}

template <typename Key, typename Hash = std::hash<Key>>
class DenseIds {
public:
    std::uint32_t operator()(const Key& k)
    {
        auto [it, inserted] = ids_.try_emplace(k, static_cast<std::uint32_t>(ids_.size()));
        return it->second;
    }
    std::size_t size() const { return ids_.size(); }

private:
    std::unordered_map<Key, std::uint32_t, Hash> ids_;
};

struct TripleHash {
    std::size_t operator()(const std::tuple<std::uint32_t, std::uint32_t, int>& t) const
    {
        auto [a, b, c] = t;
        std::uint64_t h = (static_cast<std::uint64_t>(a) * 0x9E3779B97F4A7C15ull) ^
                          (static_cast<std::uint64_t>(b) * 0xC2B2AE3D27D4EB4Full) ^ static_cast<std::uint64_t>(c + 512);
        return static_cast<std::size_t>(h ^ (h >> 29));
    }
};

struct PairHash {
    std::size_t operator()(const std::pair<std::uint32_t, std::uint32_t>& p) const
    {
        return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) | p.second);
    }
};

}  // namespace detail

/// Weighted 16-bit-symbol entropy of the high-precision weights under five
/// groupings: none, by quantization function (scale), by quantized value,
/// by both, and a seeded random relabelling with the combined group sizes.
inline GroupingEntropyReport grouping_entropy_report(const ModelTensors& high, const ModelTensors& low,
                                                     const ModelQuantSpec& specs,
                                                     std::uint64_t seed = kDefaultEntropySeed)
{
    std::vector<std::uint16_t> symbols;
    std::vector<std::uint32_t> none_l, fn_l, value_l, combined_l;
    detail::DenseIds<std::pair<std::uint32_t, std::uint32_t>, detail::PairHash> fn_ids;
    detail::DenseIds<int> value_ids;
    detail::DenseIds<std::tuple<std::uint32_t, std::uint32_t, int>, detail::TripleHash> combined_ids;

    std::uint32_t tensor_id = 0;
    for (auto& [name, spec] : specs) {
        auto* h = high.find(name);
        auto* q = low.find(name);
        if (!h || !q) continue;
        require(is_float(h->dtype), ErrorKind::Validation, "entropy report needs FP16/BF16 high tensors");
        require(h->shape == q->shape, ErrorKind::Validation, "shape mismatch for '" + name + "'");
        validate_spec(spec, q->shape, name);
        auto geom = spec.geometry(q->numel());
        for (std::uint64_t b = 0; b < geom.block_count(); ++b) {
            auto key = scale_key(spec.scales[b]);
            auto fn = fn_ids({tensor_id, key});
            for (auto i = geom.begin(b); i < geom.end(b); ++i) {
                int v = quantized_value(q->dtype, q->data, i);
                symbols.push_back(load_u16(h->data, i));
                none_l.push_back(0);
                fn_l.push_back(fn);
                value_l.push_back(value_ids(v));
                combined_l.push_back(combined_ids({tensor_id, key, v}));
            }
        }
        ++tensor_id;
    }

    GroupingEntropyReport rep;
    rep.seed = seed;
    rep.element_count = symbols.size();
    rep.quant_fn_groups = fn_ids.size();
    rep.value_groups = value_ids.size();
    rep.combined_groups = combined_ids.size();
    if (symbols.empty()) return rep;

    rep.none = detail::labelled_entropy(symbols, none_l);
    rep.quant_fn = detail::labelled_entropy(symbols, fn_l);
    rep.value = detail::labelled_entropy(symbols, value_l);
    rep.combined = detail::labelled_entropy(symbols, combined_l);

    auto random_l = combined_l;
    std::mt19937_64 rng(seed);
    std::shuffle(random_l.begin(), random_l.end(), rng);
    rep.random = detail::labelled_entropy(symbols, random_l);
    return rep;
}

inline GroupingEntropyReport grouping_entropy_report(const QuantizedPair& pair, std::uint64_t seed = kDefaultEntropySeed)
{
    ModelQuantSpec specs;
    specs.emplace(pair.high.name, pair.spec);
    return grouping_entropy_report(ModelTensors({pair.high}), ModelTensors({pair.low}), specs, seed);
}

}  // namespace qstore
