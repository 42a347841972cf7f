// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "common.hpp"

using namespace qstore;
using namespace qstore::test;
using namespace std::chrono_literals;

namespace {

// Pinned tolerances and sizes.
constexpr int kRoundTripCases = 240;
constexpr int kOracleSeeds = 1000;
constexpr int kEntropySeeds = 5;
constexpr std::uint64_t kEntropySide = 1024;
constexpr double kPairMaxBpw = 16.0;
constexpr double kPairMaxCondFraction = 0.60;
constexpr double kChainMaxBpw = 20.0;
constexpr std::uint64_t kBlockGroup = 512;
constexpr int kFuzzChunks = 10000;
constexpr int kDelayTensors = 64;
constexpr double kOverlapMaxRatio = 0.75;
constexpr double kBandwidthRatioTol = 0.15;
constexpr double kOnlineQuantFactor = 0.8;
constexpr double kPackMaxSeconds = 120.0;
// 16M weights, the size at which per-subgroup headers stop mattering.
constexpr std::uint64_t kBigRows = 2048, kBigCols = 2048, kBigTensors = 4;
// One 7B-class MLP projection. FP16 absmax scales take only a few hundred
// distinct values per tensor, so group sizes (and compression) grow with it.
constexpr std::uint64_t kChainRows = 11008, kChainCols = 4096;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::uint64_t dir_bytes(const fs::path& d)
{
    std::uint64_t n = 0;
    for (auto& e : fs::directory_iterator(d)) n += e.file_size();
    return n;
}

std::vector<LevelInput> pair_levels(const ModelTensors& high, unsigned bits, BlockAxis axis, std::uint64_t bs)
{
    auto q = quantize_model(high, bits, axis, bs);
    return {LevelInput{q.low, q.specs, "", "rtn_absmax"}, LevelInput{high, {}, "", ""}};
}

Outcome round_trip_matrix()
{
    TempDir dir;
    std::mt19937_64 rng(1);
    const Distribution dists[] = {Distribution::Gaussian, Distribution::Uniform, Distribution::OutlierRow,
                                  Distribution::Constant, Distribution::WithNaN};
    struct Blocking {
        BlockAxis axis;
        std::uint64_t size;
    };
    const Blocking blockings[] = {{BlockAxis::PerRow, 0}, {BlockAxis::FlatGroups, 64}, {BlockAxis::FlatGroups, 512}};
    int cases = 0, failures = 0;
    std::uint64_t elements = 0;
    auto t0 = Clock::now();
    while (cases < kRoundTripCases) {
        for (auto dtype : {DType::FP16, DType::BF16})
            for (unsigned bits : {8u, 4u})
                for (auto bl : blockings)
                    for (auto dist : dists) {
                        // Mostly small shapes; every fourth case goes up to 1024x1024.
                        std::uint64_t cap = cases % 4 == 0 ? 1024 : 96;
                        Shape shape{1 + rng() % cap, 1 + rng() % cap};
                        if (cases % 60 == 0) shape = {1024, 1024};
                        std::vector<Tensor> ts{synthetic_tensor("w", dtype, shape, dist, rng()),
                                               synthetic_tensor("v", dtype, {1 + rng() % 40}, dist, rng())};
                        ModelTensors high(ts);
                        auto levels = pair_levels(high, bits, bl.axis, bl.size);
                        auto out = dir / ("c" + std::to_string(cases));
                        write_archive(levels, out);
                        auto m = read_manifest(out);
                        bool ok = load_model(out, m.levels[0].name) == levels[0].model &&
                                  load_model(out, m.levels[1].name) == high;
                        ok = ok && load_level_specs(out, m.levels[0].name) == levels[0].specs;
                        failures += !ok;
                        elements += high.total_elements();
                        fs::remove_all(out);
                        ++cases;
                    }
    }
    double secs = since(t0);
    return {failures == 0 && secs < 300.0,
            fmt("%d cases, %d mismatches, %.1f M weights, %.1f s (limit 300 s)", cases, failures, elements / 1e6, secs)};
}

Outcome position_oracle()
{
    std::mt19937_64 rng(2);
    std::uint64_t checked = 0, mismatches = 0;
    std::uint8_t elem[2];
    for (int seed = 0; seed < kOracleSeeds; ++seed)
        for (std::uint64_t r = 1; r <= 8; ++r)
            for (std::uint64_t c = 1; c <= 8; ++c) {
                auto p = random_small_pair(rng, {r, c});
                auto cs = encode_conditional(p.high, p.low, p.spec, build_grouping(p.spec, p.low), 1 + rng() % 5);
                auto dec = decode_groups(cs);
                auto slots = brute_force_slots(p.low, p.spec);
                // Explicit (group, subgroup, ordinal) -> position placement.
                Tensor explicit_high{p.high.name, p.high.dtype, p.high.shape, Bytes(p.high.data.size(), 0)};
                for (std::uint64_t i = 0; i < p.high.numel(); ++i) {
                    auto& s = slots[i];
                    auto& layout = dec.layouts[s.group];
                    auto v = static_cast<std::uint32_t>(s.value - cs.value_min);
                    if (s.ordinal >= layout.start[v + 1] - layout.start[v]) {
                        ++mismatches;
                        continue;
                    }
                    for (unsigned pl = 0; pl < cs.plane_count; ++pl)
                        elem[pl] = dec.buffers[s.group][pl * layout.size + layout.start[v] + s.ordinal];
                    detail::store_element(explicit_high, i, elem);
                }
                auto inferred = reconstruct_high(p.low, p.spec, cs);
                mismatches += !(inferred == explicit_high) + !(inferred == p.high);
                ++checked;
            }
    return {mismatches == 0, fmt("%llu tensors (all shapes up to 8x8, %d seeds), %llu mismatches",
                                 static_cast<unsigned long long>(checked), kOracleSeeds,
                                 static_cast<unsigned long long>(mismatches))};
}

Outcome entropy_ordering()
{
    Outcome o;
    std::ostringstream os;
    os.precision(3);
    os << std::fixed;
    for (int seed = 0; seed < kEntropySeeds; ++seed) {
        auto high = synthetic_tensor("w", DType::BF16, {kEntropySide, kEntropySide}, Distribution::Gaussian,
                                     1000 + seed);
        auto r = grouping_entropy_report(quantize_rtn(high, 8, BlockAxis::PerRow, 0));
        bool ok = r.combined < r.value && r.value < r.none && r.combined < r.random;
        o.pass = o.pass && ok;
        os << (seed ? "; " : "") << "seed " << seed << ": " << r.combined << " < " << r.value << " < " << r.none
           << ", random " << r.random;
    }
    os << " (reference ordering 3.51 < 6.52 < 10.41, random 6.87)";
    o.detail = os.str();
    return o;
}

Outcome pair_compression(const fs::path& dir)
{
    auto high = synthetic_model(kBigRows, kBigCols, kBigTensors, DType::BF16, 44);
    auto levels = pair_levels(high, 8, BlockAxis::PerRow, 0);
    auto t0 = Clock::now();
    write_archive(levels, dir);
    double secs = since(t0);
    auto rep = size_report(dir);
    double bpw = rep.bits_per_weight();
    double raw_high = static_cast<double>(high.total_bytes());
    double raw_low = static_cast<double>(levels[0].model.total_bytes());
    double cond = static_cast<double>(rep.levels[1].stored_bytes);
    bool ok = bpw <= kPairMaxBpw && cond <= kPairMaxCondFraction * raw_high &&
              rep.total_stored_bytes < raw_high + raw_low && secs < kPackMaxSeconds;
    return {ok, fmt("%.2f bits/weight (limit %.0f, raw 24), conditional file %.1f%% of raw high (limit %.0f%%), "
                    "total %.1f MB vs raw %.1f MB, pack %.1f s",
                    bpw, kPairMaxBpw, 100 * cond / raw_high, 100 * kPairMaxCondFraction,
                    rep.total_stored_bytes / 1e6, (raw_high + raw_low) / 1e6, secs)};
}

Outcome chain_compression()
{
    TempDir dir;
    auto high = synthetic_model(kChainRows, kChainCols, 1, DType::FP16, 55);
    auto q4 = quantize_model(high, 4, BlockAxis::FlatGroups, kBlockGroup);
    auto q8 = quantize_model(high, 8, BlockAxis::FlatGroups, kBlockGroup);
    write_archive({LevelInput{q4.low, q4.specs, "", "rtn_absmax"}, LevelInput{q8.low, q8.specs, "", "rtn_absmax"},
                   LevelInput{high, {}, "", ""}},
                  dir / "c");
    auto rep = size_report(dir / "c");
    bool exact = load_model(dir / "c", "fp16") == high;
    double bpw = rep.bits_per_weight();
    return {exact && bpw <= kChainMaxBpw,
            fmt("%.2f bits/weight (limit %.0f, raw %.0f), %.2fx savings, top level exact: %s", bpw, kChainMaxBpw,
                rep.uncompressed_bits_per_weight(), rep.uncompressed_bits_per_weight() / bpw, exact ? "yes" : "no")};
}

Outcome codec_properties()
{
    std::mt19937_64 rng(6);
    int bad_round_trip = 0, expanded = 0, out_of_bound = 0, huffman = 0;
    double worst_excess = 0, worst_deficit = 0;
    for (int i = 0; i < kFuzzChunks; ++i) {
        auto d = random_chunk(rng);
        auto c = encode_chunk(d);
        bad_round_trip += decode_chunk(c) != d;
        expanded += c.comp_size() > c.raw_size;
        if (c.mode != ChunkMode::Huffman) continue;
        ++huffman;
        auto hist = byte_histogram(d);
        auto lengths = read_code_lengths(ByteView(c.payload).first(kHuffmanTableBytes));
        std::uint64_t bits = 0;
        for (int s = 0; s < 256; ++s) bits += hist[s] * lengths[s];
        double per_symbol = static_cast<double>(bits) / d.size();
        double h = byte_entropy(d);
        worst_excess = std::max(worst_excess, per_symbol - h);
        worst_deficit = std::max(worst_deficit, h - per_symbol);
        bool stored = c.comp_size() == kHuffmanTableBytes + (bits + 7) / 8;
        out_of_bound += !(per_symbol >= h - 1e-9 && per_symbol <= h + 1.0) || !stored;
    }
    return {bad_round_trip == 0 && expanded == 0 && out_of_bound == 0 && huffman > 0,
            fmt("%d chunks (%d Huffman): %d round-trip failures, %d expanded, %d outside [H, H+1]; "
                "max excess %.3f bits/symbol",
                kFuzzChunks, huffman, bad_round_trip, expanded, out_of_bound, worst_excess)};
}

PipelineConfig config(PipelineMode mode, double mbps = kUnlimitedRate)
{
    PipelineConfig c;
    c.mode = mode;
    c.throttle_mbps = mbps;
    return c;
}

Outcome pipeline_determinism_and_overlap()
{
    TempDir dir;
    auto pair = pair_levels(synthetic_model(128, 512, 12, DType::BF16, 77), 8, BlockAxis::PerRow, 0);
    pipelined_save(pair, dir / "s", {}, config(PipelineMode::Serial));
    pipelined_save(pair, dir / "p", {}, config(PipelineMode::Pipelined));
    bool identical = true;
    for (auto& e : fs::directory_iterator(dir / "s"))
        identical = identical && read_file(e.path()) == read_file(dir / "p" / e.path().filename());
    identical = identical && pipelined_load(dir / "s", "bf16", config(PipelineMode::Serial)) ==
                                 pipelined_load(dir / "s", "bf16", config(PipelineMode::Pipelined));

    // One chunk per tensor, so each stage costs one 5 ms delay per tensor.
    std::vector<LevelInput> single{LevelInput{synthetic_model(4, 64, kDelayTensors, DType::BF16, 78), {}, "", ""}};
    auto timed = [&](PipelineMode mode, bool save) {
        auto c = config(mode);
        c.codec_threads = 1;
        c.delays = {5ms, 5ms};
        TimingReport r;
        auto out = dir / ("d_" + std::string(pipeline_mode_name(mode)));
        if (save)
            pipelined_save(single, out, {}, c, &r);
        else
            pipelined_load(out, "bf16", c, &r);
        return r.wall_seconds;
    };
    double save_s = timed(PipelineMode::Serial, true), save_p = timed(PipelineMode::Pipelined, true);
    double load_s = timed(PipelineMode::Serial, false), load_p = timed(PipelineMode::Pipelined, false);
    bool ok = identical && save_p < kOverlapMaxRatio * save_s && load_p < kOverlapMaxRatio * load_s;
    return {ok, fmt("serial/pipelined byte-identical: %s; %d tensors with 5 ms stage delays: save %.3f s -> %.3f s "
                    "(%.2fx), load %.3f s -> %.3f s (%.2fx), limit %.2fx",
                    identical ? "yes" : "no", kDelayTensors, save_s, save_p, save_p / save_s, load_s, load_p,
                    load_p / load_s, kOverlapMaxRatio)};
}

Outcome bandwidth_trend(const fs::path& archive, const fs::path& raw_high, const fs::path& raw_low)
{
    double raw = static_cast<double>(fs::file_size(raw_high) + fs::file_size(raw_low));
    double ratio = raw / static_cast<double>(dir_bytes(archive));
    std::ostringstream os;
    os.precision(2);
    os << std::fixed << "stored-size ratio " << ratio << "x; speedup";
    std::vector<double> speedups;
    for (double mbps : {500.0, 100.0, 20.0}) {
        auto t0 = Clock::now();
        auto levels = pipelined_load_levels(archive, "bf16", config(PipelineMode::Pipelined, mbps));
        double qs = since(t0);
        t0 = Clock::now();
        Throttle th(mbps);
        auto hi = load_bundle_throttled(raw_high, th);
        auto lo = load_bundle_throttled(raw_low, th);
        double base = since(t0);
        if (levels.size() != 2 || !(levels[1].second == hi) || !(levels[0].second == lo)) return {false, "content differs"};
        speedups.push_back(base / qs);
        os << " @" << mbps << " MB/s " << base / qs << "x (" << base << " s vs " << qs << " s)";
    }
    bool monotone = speedups[0] <= speedups[1] && speedups[1] <= speedups[2];
    double err = std::abs(speedups[2] - ratio) / ratio;
    os << "; deviation at 20 MB/s " << 100 * err << "% (limit " << 100 * kBandwidthRatioTol << "%)";
    return {monotone && err <= kBandwidthRatioTol, os.str()};
}

Outcome online_quantization(const fs::path& archive, const fs::path& raw_high)
{
    constexpr double mbps = 100.0;
    auto t0 = Clock::now();
    auto low = pipelined_load(archive, "int8", config(PipelineMode::Pipelined, mbps));
    double qs = since(t0);

    t0 = Clock::now();
    Throttle th(mbps);
    auto high = load_bundle_throttled(raw_high, th);
    auto q = quantize_model(high, 8, BlockAxis::PerRow, 0);
    double base = since(t0);

    double ratio = static_cast<double>(fs::file_size(raw_high)) /
                   static_cast<double>(fs::file_size(archive / kBaseFileName) + fs::file_size(archive / "manifest.json"));
    double speedup = base / qs;
    bool ok = low == q.low && speedup >= kOnlineQuantFactor * ratio;
    return {ok, fmt("low from archive %.3f s vs high + RTN %.3f s: %.2fx, size ratio %.2fx, need >= %.2fx", qs, base,
                    speedup, ratio, kOnlineQuantFactor * ratio)};
}

}  // namespace

int main()
{
    int failed = 0;
    auto report = [&](int id, const char* name, auto&& fn) {
        Outcome o;
        auto t0 = Clock::now();
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail
                  << fmt(" [%.1f s]", since(t0)) << std::endl;
    };

    TempDir shared;
    auto archive = shared / "pair";

    report(1, "lossless round trip matrix", round_trip_matrix);
    report(2, "position inference vs brute force", position_oracle);
    report(3, "grouping entropy ordering", entropy_ordering);
    report(4, "pair compression", [&] { return pair_compression(archive); });
    report(5, "three-level chain compression", chain_compression);
    report(6, "entropy codec properties", codec_properties);
    report(7, "pipeline determinism and overlap", pipeline_determinism_and_overlap);

    // Criteria 8 and 9 reuse the pair archive from criterion 4.
    auto raw_high = shared / "high.safetensors", raw_low = shared / "low.safetensors";
    bool have_pair = fs::exists(archive / "manifest.json");
    if (have_pair) {
        auto m = read_manifest(archive);
        store_tensor_bundle(load_model(archive, m.levels[1].name), raw_high, BundleFormat::SingleFile);
        store_tensor_bundle(load_model(archive, m.levels[0].name), raw_low, BundleFormat::SingleFile);
    }
    auto need_pair = [&](auto&& fn) {
        return [&, fn]() -> Outcome { return have_pair ? fn() : Outcome{false, "pair archive missing"}; };
    };
    report(8, "bandwidth trend", need_pair([&] { return bandwidth_trend(archive, raw_high, raw_low); }));
    report(9, "online quantization", need_pair([&] { return online_quantization(archive, raw_high); }));

    std::cout << (failed ? "FAILED " : "ALL PASSED ") << 9 - failed << "/9" << std::endl;
    return failed ? 1 : 0;
}
