#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "qstore/qstore.hpp"

using namespace qstore;
using nlohmann::json;

namespace {

struct Common {
    bool json_out = false;
    unsigned threads = default_codec_threads();
};

unsigned effective_threads(unsigned flag)
{
    if (const char* env = std::getenv("QSTORE_THREADS"); env && *env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        require(end && *end == '\0' && v >= 1 && v <= 1024, ErrorKind::Validation,
                "QSTORE_THREADS must be an integer in [1, 1024]");
        return static_cast<unsigned>(v);
    }
    require(flag >= 1, ErrorKind::Validation, "--threads must be >= 1");
    return flag;
}

BundleFormat output_format(const std::string& flag, const fs::path& out)
{
    if (flag == "dir") return BundleFormat::Directory;
    if (flag == "file") return BundleFormat::SingleFile;
    require(flag == "auto", ErrorKind::Validation, "--format must be auto, dir or file");
    return out.extension() == ".safetensors" ? BundleFormat::SingleFile : BundleFormat::Directory;
}

// Sidecar next to a bundle: <dir>/quant_spec.json or <file>.quant_spec.json.
fs::path default_spec_path(const fs::path& bundle)
{
    if (fs::is_directory(bundle)) return bundle / "quant_spec.json";
    return fs::path(bundle.string() + ".quant_spec.json");
}

fs::path spec_path_for(const fs::path& bundle, BundleFormat format)
{
    return format == BundleFormat::Directory ? bundle / "quant_spec.json" : fs::path(bundle.string() + ".quant_spec.json");
}

Shape parse_synthetic(const std::string& s, std::size_t& count)
{
    std::vector<std::uint64_t> parts;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        auto next = s.find_first_of("xX", pos);
        auto piece = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        require(!piece.empty() && piece.find_first_not_of("0123456789") == std::string::npos, ErrorKind::Validation,
                "--synthetic expects ROWSxCOLSxTENSORS");
        parts.push_back(std::stoull(piece));
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    require(parts.size() == 3 && parts[0] && parts[1] && parts[2], ErrorKind::Validation,
            "--synthetic expects ROWSxCOLSxTENSORS with positive values");
    count = parts[2];
    return {parts[0], parts[1]};
}

void emit(const Common& c, const json& j, const std::string& text)
{
    if (c.json_out)
        std::cout << j.dump(2) << "\n";
    else
        std::cout << text;
}

int run_pack(const Common& c, const std::string& high, const std::vector<std::string>& lows,
             const std::vector<std::string>& specs, const std::string& out, std::size_t chunk_size,
             const std::string& mode)
{
    require(!high.empty() || !lows.empty(), ErrorKind::Validation, "pack needs --high and/or --low");
    require(specs.empty() || specs.size() == lows.size(), ErrorKind::Validation,
            "give one --spec per --low, or none to use the sidecar next to each bundle");

    std::vector<LevelInput> levels;
    for (std::size_t i = 0; i < lows.size(); ++i) {
        LevelInput in;
        in.model = load_tensor_bundle(lows[i]);
        fs::path sp = specs.empty() ? default_spec_path(lows[i]) : fs::path(specs[i]);
        if (!specs.empty() || fs::exists(sp)) in.specs = load_quant_spec(sp);
        levels.push_back(std::move(in));
    }
    if (!high.empty()) levels.push_back({load_tensor_bundle(high), {}, {}, "rtn_absmax"});

    PipelineConfig cfg;
    cfg.mode = parse_pipeline_mode(mode);
    cfg.codec_threads = c.threads;
    TimingReport timing;
    pipelined_save(levels, out, WriteOptions{chunk_size}, cfg, &timing);
    auto rep = size_report(out);
    json j = rep.to_json();
    j["timing"] = timing.to_json();
    emit(c, j, rep.to_text());
    return 0;
}

int run_unpack(const Common& c, const std::string& archive, std::string level, const std::string& out,
               const std::string& format_flag, const std::string& mode, double throttle)
{
    auto m = read_manifest(archive);
    if (level.empty()) level = m.levels.back().name;
    PipelineConfig cfg;
    cfg.mode = parse_pipeline_mode(mode);
    cfg.codec_threads = c.threads;
    cfg.throttle_mbps = throttle;
    TimingReport timing;
    auto model = pipelined_load(archive, level, cfg, &timing);

    auto format = output_format(format_flag, out);
    store_tensor_bundle(model, out, format);
    auto specs = load_level_specs(archive, level);
    if (!specs.empty()) store_quant_spec(specs, spec_path_for(out, format));

    json j = timing.to_json();
    j["tensors"] = model.size();
    j["out"] = out;
    std::ostringstream os;
    os << "unpacked level " << level << " (" << model.size() << " tensors) to " << out << " in " << std::fixed
       << std::setprecision(3) << timing.wall_seconds << " s\n";
    emit(c, j, os.str());
    return 0;
}

int run_inspect(const Common& c, const std::string& archive)
{
    auto m = read_manifest(archive);
    auto rep = size_report(archive);
    std::uint64_t on_disk = fs::file_size(fs::path(archive) / "manifest.json");
    for (auto& l : m.levels) on_disk += fs::file_size(fs::path(archive) / l.file);

    json j = rep.to_json();
    j["format_version"] = m.format_version;
    j["chunk_size"] = m.chunk_size;
    j["tensor_count"] = m.tensors.size();
    j["filesystem_bytes"] = on_disk;
    json kinds = json::object();
    for (auto& t : m.tensors)
        for (auto& e : t.entries) {
            auto& slot = kinds[m.levels[e.level].name];
            std::string kind(entry_kind_name(e.kind));
            slot[kind] = (slot.contains(kind) ? slot[kind].get<int>() : 0) + 1;
        }
    j["entry_kinds"] = kinds;

    std::ostringstream os;
    os << "format v" << m.format_version << ", " << m.tensors.size() << " tensors, chunk size " << m.chunk_size << "\n";
    for (auto& l : m.levels) {
        os << "  " << l.name << " (" << dtype_name(l.dtype) << ", " << l.file;
        if (!l.depends_on.empty()) os << ", given " << l.depends_on;
        os << ")";
        if (kinds.contains(l.name))
            for (auto& [k, v] : kinds[l.name].items()) os << " " << k << "=" << v.get<int>();
        os << "\n";
    }
    os << "\n" << rep.to_text();
    emit(c, j, os.str());
    return 0;
}

int run_entropy(const Common& c, const std::string& archive, const std::string& high, const std::string& low,
                const std::string& spec, std::uint64_t seed)
{
    ModelTensors hi, lo;
    ModelQuantSpec specs;
    if (!archive.empty()) {
        require(high.empty() && low.empty(), ErrorKind::Validation, "use either --archive or --high/--low");
        auto m = read_manifest(archive);
        require(m.levels.size() >= 2, ErrorKind::Validation, "archive has a single level");
        auto& top = m.levels.back().name;
        auto& below = m.levels[m.levels.size() - 2].name;
        PipelineConfig cfg;
        cfg.codec_threads = c.threads;
        auto loaded = pipelined_load_levels(archive, top, cfg);
        for (auto& [name, model] : loaded) {
            if (name == top) hi = std::move(model);
            if (name == below) lo = std::move(model);
        }
        specs = load_level_specs(archive, below);
    } else {
        require(!high.empty() && !low.empty(), ErrorKind::Validation, "entropy needs --archive or --high and --low");
        hi = load_tensor_bundle(high);
        lo = load_tensor_bundle(low);
        specs = load_quant_spec(spec.empty() ? default_spec_path(low) : fs::path(spec));
    }
    auto rep = grouping_entropy_report(hi, lo, specs, seed);
    emit(c, rep.to_json(), rep.to_text());
    return 0;
}

int run_quantize(const Common& c, const std::string& high, const std::string& out, unsigned bits,
                 const std::string& axis, std::uint64_t block_size, const std::string& format_flag,
                 const std::string& synthetic, std::uint64_t seed, const std::string& dtype,
                 const std::string& distribution)
{
    require(!high.empty(), ErrorKind::Validation, "quantize needs --high");
    json j;
    std::ostringstream os;
    ModelTensors model;
    if (!synthetic.empty()) {
        std::size_t count = 0;
        auto shape = parse_synthetic(synthetic, count);
        model = synthetic_model(shape[0], shape[1], count, parse_dtype(dtype), seed, parse_distribution(distribution));
        store_tensor_bundle(model, high, output_format(format_flag, high));
        j["high"] = {{"path", high}, {"tensors", count}, {"elements", model.total_elements()}};
        os << "generated " << count << " " << dtype << " tensors (" << synthetic << ") at " << high << "\n";
    } else {
        model = load_tensor_bundle(high);
    }
    if (!out.empty()) {
        auto q = quantize_model(model, bits, parse_block_axis(axis), block_size);
        auto format = output_format(format_flag, out);
        store_tensor_bundle(q.low, out, format);
        store_quant_spec(q.specs, spec_path_for(out, format));
        j["low"] = {{"path", out}, {"bit_width", bits}, {"block_axis", axis}, {"block_size", block_size}};
        os << "quantized to INT" << bits << " (" << axis;
        if (axis != "per_row") os << ", block " << block_size;
        os << ") at " << out << "\n";
    }
    require(!synthetic.empty() || !out.empty(), ErrorKind::Validation, "quantize needs --out or --synthetic");
    emit(c, j, os.str());
    return 0;
}

int run_bench(const Common& c, const std::string& archive, std::string level, const std::string& mode,
              double throttle, const std::vector<std::string>& baselines)
{
    auto m = read_manifest(archive);
    if (level.empty()) level = m.levels.back().name;
    std::vector<PipelineMode> modes;
    if (mode == "both")
        modes = {PipelineMode::Serial, PipelineMode::Pipelined};
    else
        modes = {parse_pipeline_mode(mode)};

    json runs = json::array();
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    double best = 0;
    for (auto md : modes) {
        PipelineConfig cfg;
        cfg.mode = md;
        cfg.codec_threads = c.threads;
        cfg.throttle_mbps = throttle;
        TimingReport t;
        pipelined_load(archive, level, cfg, &t);
        runs.push_back(t.to_json());
        best = best == 0 ? t.wall_seconds : std::min(best, t.wall_seconds);
        os << t.mode << ": wall " << t.wall_seconds << " s, read " << t.io_seconds << " s, decode " << t.codec_seconds
           << " s, " << t.io_bytes << " bytes\n";
    }
    json j = {{"archive", archive}, {"level", level}, {"runs", runs}};
    if (std::isfinite(throttle)) j["throttle_mbps"] = throttle;
    if (!baselines.empty()) {
        Throttle th(throttle);
        auto t0 = std::chrono::steady_clock::now();
        std::uint64_t bytes = 0;
        for (auto& b : baselines) {
            auto model = load_bundle_throttled(b, th);
            bytes += model.total_bytes();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        j["baseline"] = {{"paths", baselines}, {"wall_seconds", secs}, {"bytes", bytes}, {"speedup", secs / best}};
        os << "uncompressed baseline: " << secs << " s, speedup " << secs / best << "x\n";
    }
    emit(c, j, os.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"qstore: joint lossless storage of a model and its quantized versions"};
    app.require_subcommand(1);
    Common common;
    unsigned threads_flag = default_codec_threads();
    auto add_common = [&](CLI::App* sub) {
        sub->add_flag("--json", common.json_out, "machine-readable output");
        sub->add_option("--threads", threads_flag, "codec threads (QSTORE_THREADS overrides)");
    };

    std::string high, low, out, archive, level, spec, mode = "pipelined", format = "auto";
    std::vector<std::string> lows, specs, baselines;
    std::size_t chunk_size = kDefaultChunkSize;
    double throttle = kUnlimitedRate;
    unsigned bits = 8;
    std::string axis = "per_row", synthetic, dtype = "BF16", distribution = "gaussian";
    std::uint64_t block_size = 512, seed = kDefaultEntropySeed;

    auto* pack = app.add_subcommand("pack", "store a model and its quantized versions in one archive");
    pack->add_option("--high", high, "highest-precision bundle");
    pack->add_option("--low", lows, "quantized bundles, lowest precision first");
    pack->add_option("--spec", specs, "quantization sidecar per --low");
    pack->add_option("--out", out, "archive directory")->required();
    pack->add_option("--chunk-size", chunk_size, "entropy coder chunk size in bytes");
    pack->add_option("--mode", mode, "serial or pipelined");
    add_common(pack);

    auto* unpack = app.add_subcommand("unpack", "extract one level as a tensor bundle");
    unpack->add_option("--archive", archive)->required();
    unpack->add_option("--level", level, "level name (default: highest)");
    unpack->add_option("--out", out)->required();
    unpack->add_option("--format", format, "auto, dir or file");
    unpack->add_option("--mode", mode, "serial or pipelined");
    unpack->add_option("--throttle-mbps", throttle, "read bandwidth cap in MB/s");
    add_common(unpack);

    auto* inspect = app.add_subcommand("inspect", "show levels and stored sizes");
    inspect->add_option("--archive", archive)->required();
    add_common(inspect);

    auto* entropy = app.add_subcommand("entropy", "weighted entropy of the high weights under several groupings");
    entropy->add_option("--archive", archive);
    entropy->add_option("--high", high);
    entropy->add_option("--low", low);
    entropy->add_option("--spec", spec);
    entropy->add_option("--seed", seed, "seed of the random grouping baseline");
    add_common(entropy);

    auto* quantize = app.add_subcommand("quantize", "RTN absmax quantization, optionally of a generated model");
    quantize->add_option("--high", high, "input bundle, or output path with --synthetic")->required();
    quantize->add_option("--out", out, "quantized bundle");
    quantize->add_option("--bits", bits, "8 or 4");
    quantize->add_option("--block-axis", axis, "per_row or flat_groups");
    quantize->add_option("--block-size", block_size, "elements per block for flat_groups");
    quantize->add_option("--format", format, "auto, dir or file");
    quantize->add_option("--synthetic", synthetic, "generate ROWSxCOLSxTENSORS weights first");
    quantize->add_option("--seed", seed);
    quantize->add_option("--dtype", dtype, "BF16 or FP16");
    quantize->add_option("--distribution", distribution, "gaussian, uniform, outlier_row, constant or nan");
    add_common(quantize);

    auto* bench = app.add_subcommand("bench", "time loading a level, optionally against uncompressed bundles");
    bench->add_option("--archive", archive)->required();
    bench->add_option("--level", level);
    bench->add_option("--mode", mode, "serial, pipelined or both");
    bench->add_option("--throttle-mbps", throttle, "read bandwidth cap in MB/s");
    bench->add_option("--baseline", baselines, "uncompressed bundles to time under the same cap");
    add_common(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        common.threads = effective_threads(threads_flag);
        if (*pack) return run_pack(common, high, lows, specs, out, chunk_size, mode);
        if (*unpack) return run_unpack(common, archive, level, out, format, mode, throttle);
        if (*inspect) return run_inspect(common, archive);
        if (*entropy) return run_entropy(common, archive, high, low, spec, seed);
        if (*quantize)
            return run_quantize(common, high, out, bits, axis, block_size, format, synthetic, seed, dtype,
                                distribution);
        if (*bench) return run_bench(common, archive, level, mode, throttle, baselines);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == ErrorKind::Validation ? 1 : 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
