#pragma once

#include <chrono>
#include <memory>
#include <thread>

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>
#include <tbb/task_arena.h>

namespace qstore {

inline unsigned default_codec_threads()
{
    auto n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

/// Fan-out for independent chunk (de)coding jobs. Results are written to
/// caller-owned slots indexed by job, so output never depends on scheduling.
class CodecContext {
public:
    explicit CodecContext(unsigned threads = 1, std::chrono::microseconds chunk_delay = {})
        : threads_(threads == 0 ? 1 : threads), chunk_delay_(chunk_delay)
    {
        if (threads_ > 1)
            arena_ = std::make_shared<tbb::task_arena>(static_cast<int>(threads_));
    }

    unsigned threads() const { return threads_; }

    template <typename F>
    void for_each(std::size_t n, F&& fn) const
    {
        auto job = [&](std::size_t i) {
            if (chunk_delay_.count() > 0)
                std::this_thread::sleep_for(chunk_delay_);
            fn(i);
        };
        if (!arena_ || n <= 1) {
            for (std::size_t i = 0; i < n; ++i) job(i);
            return;
        }
        arena_->execute([&] {
            tbb::parallel_for(tbb::blocked_range<std::size_t>(0, n), [&](const tbb::blocked_range<std::size_t>& r) {
                for (auto i = r.begin(); i != r.end(); ++i) job(i);
            });
        });
    }

private:
    unsigned threads_;
    std::chrono::microseconds chunk_delay_;  // test hook: sleep injected per chunk job
    std::shared_ptr<tbb::task_arena> arena_;
};

}  // namespace qstore
