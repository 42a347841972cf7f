#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "qstore/bundle.hpp"

namespace qstore {

inline constexpr double kUnlimitedRate = std::numeric_limits<double>::infinity();

/// Token bucket shared by all reads of one load. Rates are in MB/s (10^6
/// bytes); an infinite rate disables throttling.
class Throttle {
public:
    explicit Throttle(double mbps = kUnlimitedRate) : bytes_per_second_(mbps * 1e6)
    {
        require(mbps > 0, ErrorKind::Validation, "throttle rate must be positive");
    }

    bool unlimited() const { return !std::isfinite(bytes_per_second_); }

    // Accounts for `n` bytes and sleeps until the bucket allows them.
    void acquire(std::uint64_t n)
    {
        if (unlimited()) return;
        std::chrono::steady_clock::time_point due;
        {
            std::lock_guard lock(mutex_);
            if (!started_) {
                start_ = std::chrono::steady_clock::now();
                started_ = true;
            }
            consumed_ += n;
            due = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                               std::chrono::duration<double>(static_cast<double>(consumed_) / bytes_per_second_));
        }
        std::this_thread::sleep_until(due);
    }

private:
    double bytes_per_second_;
    std::mutex mutex_;
    bool started_ = false;
    std::chrono::steady_clock::time_point start_;
    std::uint64_t consumed_ = 0;
};

/// Positional file reader that charges every read against a Throttle.
class ThrottledReader {
public:
    static constexpr std::size_t kSlice = 64 * 1024;

    ThrottledReader(const fs::path& path, Throttle* throttle) : path_(path), in_(path, std::ios::binary), throttle_(throttle)
    {
        require(static_cast<bool>(in_), ErrorKind::Io, "cannot open '" + path.string() + "'");
        in_.seekg(0, std::ios::end);
        size_ = static_cast<std::uint64_t>(in_.tellg());
    }

    std::uint64_t size() const { return size_; }

    Bytes read(std::uint64_t offset, std::uint64_t length)
    {
        require(offset + length <= size_, ErrorKind::Corrupt,
                "read past end of '" + path_.string() + "' (offset " + std::to_string(offset) + ", length " +
                    std::to_string(length) + ", size " + std::to_string(size_) + ")");
        Bytes out(length);
        in_.seekg(static_cast<std::streamoff>(offset));
        for (std::uint64_t done = 0; done < length;) {
            auto n = std::min<std::uint64_t>(kSlice, length - done);
            in_.read(reinterpret_cast<char*>(out.data() + done), static_cast<std::streamsize>(n));
            require(static_cast<bool>(in_), ErrorKind::Io, "failed reading '" + path_.string() + "'");
            if (throttle_) throttle_->acquire(n);
            done += n;
        }
        bytes_read_ += length;
        return out;
    }

    Bytes read_all() { return read(0, size_); }

    std::uint64_t bytes_read() const { return bytes_read_; }

private:
    fs::path path_;
    std::ifstream in_;
    Throttle* throttle_;
    std::uint64_t size_ = 0;
    std::uint64_t bytes_read_ = 0;
};

}  // namespace qstore
