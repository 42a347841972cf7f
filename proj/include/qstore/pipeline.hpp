#pragma once

// Two-stage save/load: one I/O thread and one codec stage joined by a FIFO
// that holds at most queue_depth + 1 tensors in flight. Serial mode runs
// the same per-tensor steps back to back, so both modes produce identical
// bytes.

#include <condition_variable>
#include <deque>
#include <exception>

#include "qstore/archive.hpp"

namespace qstore {

enum class PipelineMode { Serial, Pipelined };

inline std::string_view pipeline_mode_name(PipelineMode m) { return m == PipelineMode::Serial ? "serial" : "pipelined"; }

inline PipelineMode parse_pipeline_mode(std::string_view s)
{
    if (s == "serial") return PipelineMode::Serial;
    if (s == "pipelined") return PipelineMode::Pipelined;
    fail(ErrorKind::Validation, "unknown pipeline mode '" + std::string(s) + "'");
}

// Test hooks that stretch stage times.
struct StageDelays {
    std::chrono::microseconds io_per_tensor{0};
    std::chrono::microseconds codec_per_chunk{0};
};

struct PipelineConfig {
    PipelineMode mode = PipelineMode::Pipelined;
    unsigned codec_threads = default_codec_threads();
    std::size_t queue_depth = 2;
    double throttle_mbps = kUnlimitedRate;
    StageDelays delays;
};

struct TimingReport {
    std::string direction = "load";  // "load" or "save"
    std::string mode;
    std::string level;
    double io_seconds = 0;     // reading (load) or writing (save)
    double codec_seconds = 0;  // decoding (load) or encoding (save)
    double wall_seconds = 0;
    std::uint64_t io_bytes = 0;
    std::size_t peak_in_flight = 0;

    nlohmann::json to_json() const
    {
        bool load = direction == "load";
        nlohmann::json j = {{"mode", mode},
                            {"level", level},
                            {load ? "read_seconds" : "write_seconds", io_seconds},
                            {load ? "decode_seconds" : "encode_seconds", codec_seconds},
                            {"wall_seconds", wall_seconds},
                            {load ? "bytes_read" : "bytes_written", io_bytes}};
        return j;
    }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// FIFO with slot accounting: a producer reserves a slot before materializing
// an item, the consumer releases it once the item is fully processed.
template <typename T>
class StageQueue {
public:
    explicit StageQueue(std::size_t slots) : slots_(slots) {}

    // False if the queue was closed while waiting.
    bool reserve()
    {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return closed_ || outstanding_ < slots_; });
        if (closed_) return false;
        ++outstanding_;
        peak_ = std::max(peak_, outstanding_);
        return true;
    }

    void release()
    {
        {
            std::lock_guard lock(mutex_);
            --outstanding_;
        }
        cv_.notify_all();
    }

    void push(T item)
    {
        {
            std::lock_guard lock(mutex_);
            items_.push_back(std::move(item));
        }
        cv_.notify_all();
    }

    // Empty optional once closed and drained.
    std::optional<T> pop()
    {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T item = std::move(items_.front());
        items_.pop_front();
        return item;
    }

    void close()
    {
        {
            std::lock_guard lock(mutex_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    std::size_t peak() const
    {
        std::lock_guard lock(mutex_);
        return peak_;
    }

private:
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<T> items_;
    std::size_t slots_;
    std::size_t outstanding_ = 0;
    std::size_t peak_ = 0;
    bool closed_ = false;
};

template <typename T>
struct StageItem {
    T value;
    std::exception_ptr error;
};

inline void sleep_for(std::chrono::microseconds d)
{
    if (d.count() > 0) std::this_thread::sleep_for(d);
}

}  // namespace detail

/// Loads `level` and every level below it on each tensor's dependency path.
/// Returned in ascending level order; the last entry is `level` itself.
inline std::vector<std::pair<std::string, ModelTensors>> pipelined_load_levels(const fs::path& archive_dir,
                                                                               std::string_view level,
                                                                               const PipelineConfig& config,
                                                                               TimingReport* report = nullptr)
{
    require(config.queue_depth >= 1, ErrorKind::Validation, "queue_depth must be >= 1");
    auto t0 = detail::Clock::now();
    Throttle throttle(config.throttle_mbps);
    auto m = read_manifest(archive_dir);
    auto target = m.level_index(level);
    ArchiveFiles files(archive_dir, m, &throttle);
    CodecContext ctx(config.codec_threads, config.delays.codec_per_chunk);

    std::vector<std::size_t> order;
    for (std::size_t t = 0; t < m.tensors.size(); ++t)
        if (m.tensors[t].at(target)) order.push_back(t);

    std::vector<std::vector<Tensor>> per_level(target + 1);
    double read_s = 0, decode_s = 0;
    std::size_t peak = 1;

    auto read_one = [&](std::size_t t) {
        auto r0 = detail::Clock::now();
        detail::sleep_for(config.delays.io_per_tensor);
        auto f = fetch_tensor(m, files, t, target);
        read_s += detail::seconds_since(r0);
        return f;
    };
    auto decode_one = [&](const TensorFetch& f) {
        auto d0 = detail::Clock::now();
        for (auto& [l, tensor] : decode_tensor(m, f, ctx)) per_level[l].push_back(std::move(tensor));
        decode_s += detail::seconds_since(d0);
    };

    if (config.mode == PipelineMode::Serial) {
        for (auto t : order) decode_one(read_one(t));
    } else {
        detail::StageQueue<detail::StageItem<TensorFetch>> queue(config.queue_depth + 1);
        std::jthread reader([&] {
            for (auto t : order) {
                if (!queue.reserve()) return;
                try {
                    queue.push({read_one(t), nullptr});
                } catch (...) {
                    queue.push({{}, std::current_exception()});
                    return;
                }
            }
        });
        try {
            for (std::size_t done = 0; done < order.size(); ++done) {
                auto item = queue.pop();
                if (item->error) std::rethrow_exception(item->error);
                decode_one(item->value);
                queue.release();
            }
        } catch (...) {
            queue.close();
            reader.join();
            throw;
        }
        reader.join();
        peak = queue.peak();
    }

    std::vector<std::pair<std::string, ModelTensors>> out;
    for (std::size_t l = 0; l <= target; ++l)
        if (!per_level[l].empty() || l == target)
            out.emplace_back(m.levels[l].name, ModelTensors(std::move(per_level[l])));
    if (report) {
        report->direction = "load";
        report->mode = pipeline_mode_name(config.mode);
        report->level = std::string(level);
        report->io_seconds = read_s;
        report->codec_seconds = decode_s;
        report->wall_seconds = detail::seconds_since(t0);
        report->io_bytes = files.bytes_read();
        report->peak_in_flight = peak;
    }
    return out;
}

/// Same contract as load_model, staged per `config`.
inline ModelTensors pipelined_load(const fs::path& archive_dir, std::string_view level, const PipelineConfig& config,
                                   TimingReport* report = nullptr)
{
    auto levels = pipelined_load_levels(archive_dir, level, config, report);
    return std::move(levels.back().second);
}

/// Same contract as write_archive; the archive bytes do not depend on
/// `config`. A failure in either stage leaves no manifest behind.
inline ArchiveManifest pipelined_save(const std::vector<LevelInput>& levels, const fs::path& out_dir,
                                      const WriteOptions& opts, const PipelineConfig& config,
                                      TimingReport* report = nullptr)
{
    require(config.queue_depth >= 1, ErrorKind::Validation, "queue_depth must be >= 1");
    auto t0 = detail::Clock::now();
    auto plan = plan_archive(levels, opts);
    CodecContext ctx(config.codec_threads, config.delays.codec_per_chunk);
    ArchiveWriter writer(plan, out_dir);
    double write_s = 0, encode_s = 0;
    std::uint64_t written = 0;
    std::size_t peak = 1;

    auto encode_one = [&](std::size_t t) {
        auto e0 = detail::Clock::now();
        auto recs = encode_tensor(plan, levels, t, ctx);
        encode_s += detail::seconds_since(e0);
        return recs;
    };
    auto write_one = [&](std::size_t t, const TensorRecords& recs) {
        auto w0 = detail::Clock::now();
        detail::sleep_for(config.delays.io_per_tensor);
        writer.append(t, recs);
        for (auto& r : recs.records) written += r.size();
        write_s += detail::seconds_since(w0);
    };

    if (config.mode == PipelineMode::Serial) {
        for (std::size_t t = 0; t < plan.tensors.size(); ++t) write_one(t, encode_one(t));
    } else {
        detail::StageQueue<detail::StageItem<TensorRecords>> queue(config.queue_depth + 1);
        std::exception_ptr writer_error;
        std::jthread io([&] {
            try {
                for (std::size_t t = 0; t < plan.tensors.size(); ++t) {
                    auto item = queue.pop();
                    if (!item || item->error) return;
                    write_one(t, item->value);
                    queue.release();
                }
            } catch (...) {
                writer_error = std::current_exception();
                queue.close();
            }
        });
        try {
            for (std::size_t t = 0; t < plan.tensors.size(); ++t) {
                if (!queue.reserve()) break;
                queue.push({encode_one(t), nullptr});
            }
        } catch (...) {
            queue.push({{}, std::current_exception()});
            queue.close();
            io.join();
            throw;
        }
        io.join();
        if (writer_error) std::rethrow_exception(writer_error);
        peak = queue.peak();
    }

    auto manifest = writer.commit();
    if (report) {
        report->direction = "save";
        report->mode = pipeline_mode_name(config.mode);
        report->level = manifest.levels.back().name;
        report->io_seconds = write_s;
        report->codec_seconds = encode_s;
        report->wall_seconds = detail::seconds_since(t0);
        report->io_bytes = written;
        report->peak_in_flight = peak;
    }
    return manifest;
}

/// Sequential reader over one file, rate-limited to `mbps` MB/s.
class ThrottledStream {
public:
    ThrottledStream(const fs::path& path, double mbps)
        : throttle_(std::make_unique<Throttle>(mbps)), reader_(path, throttle_.get())
    {
    }

    std::uint64_t size() const { return reader_.size(); }

    // Up to `n` bytes from the current position; empty at end of file.
    Bytes read(std::uint64_t n)
    {
        n = std::min(n, reader_.size() - pos_);
        auto out = reader_.read(pos_, n);
        pos_ += n;
        return out;
    }

    Bytes read_all() { return read(reader_.size() - pos_); }

private:
    std::unique_ptr<Throttle> throttle_;
    ThrottledReader reader_;
    std::uint64_t pos_ = 0;
};

inline ThrottledStream throttled_reader(const fs::path& path, double mbps) { return ThrottledStream(path, mbps); }

/// Reads a tensor bundle with every byte charged against `throttle`.
inline ModelTensors load_bundle_throttled(const fs::path& path, Throttle& throttle)
{
    if (!fs::is_directory(path)) {
        ThrottledReader r(path, &throttle);
        return parse_single_file(r.read_all());
    }
    for (auto& entry : fs::directory_iterator(path))
        if (entry.is_regular_file()) throttle.acquire(entry.file_size());
    return load_directory_bundle(path);
}

}  // namespace qstore
