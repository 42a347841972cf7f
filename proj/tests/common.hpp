#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include "qstore/qstore.hpp"

namespace qstore::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir()
    {
        static std::atomic<unsigned> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("qstore_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

inline Tensor float_tensor(std::string name, DType dtype, Shape shape, const std::vector<float>& values)
{
    Tensor t{std::move(name), dtype, std::move(shape), {}};
    t.data.resize(2 * values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = float_to_half(dtype, values[i]);
        std::memcpy(t.data.data() + 2 * i, &bits, 2);
    }
    t.validate();
    return t;
}

// Arbitrary bit patterns, NaNs and infinities included.
inline Tensor random_bits_tensor(std::string name, DType dtype, Shape shape, std::mt19937_64& rng)
{
    Tensor t{std::move(name), dtype, std::move(shape), {}};
    t.data.resize(byte_length(dtype, element_count(t.shape)));
    for (auto& b : t.data) b = static_cast<std::uint8_t>(rng());
    return t;
}

inline ModelQuantSpec single_spec(const QuantizedPair& p)
{
    ModelQuantSpec s;
    s.emplace(p.high.name, p.spec);
    return s;
}

// Element i of a float tensor as float.
inline float element(const Tensor& t, std::uint64_t i) { return half_to_float(t.dtype, load_u16(t.data, i)); }

inline std::vector<std::uint8_t> bytes_of(std::initializer_list<int> v)
{
    std::vector<std::uint8_t> out;
    for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

// Position -> (group rank, value, ordinal) computed by brute force: the
// ordinal counts earlier elements sharing both scale bits and value.
struct Slot {
    std::size_t group;
    int value;
    std::uint64_t ordinal;
};

inline std::vector<Slot> brute_force_slots(const Tensor& low, const QuantSpec& spec)
{
    auto geom = spec.geometry(low.numel());
    std::vector<std::uint32_t> key(low.numel());
    for (std::uint64_t b = 0; b < geom.block_count(); ++b)
        for (auto i = geom.begin(b); i < geom.end(b); ++i) key[i] = std::bit_cast<std::uint32_t>(spec.scales[b]);
    std::vector<std::uint32_t> first_seen;
    std::vector<Slot> out(low.numel());
    for (std::uint64_t i = 0; i < low.numel(); ++i) {
        auto it = std::find(first_seen.begin(), first_seen.end(), key[i]);
        if (it == first_seen.end()) it = first_seen.insert(first_seen.end(), key[i]);
        int q = quantized_value(low.dtype, low.data, i);
        std::uint64_t ord = 0;
        for (std::uint64_t j = 0; j < i; ++j)
            ord += key[j] == key[i] && quantized_value(low.dtype, low.data, j) == q;
        out[i] = {static_cast<std::size_t>(it - first_seen.begin()), q, ord};
    }
    return out;
}

// Random spec with deliberately repeated scales so groups span several
// non-adjacent blocks.
inline QuantizedPair random_small_pair(std::mt19937_64& rng, Shape shape = {})
{
    if (shape.empty()) shape = {1 + rng() % 8, 1 + rng() % 8};
    auto dtype = rng() % 2 ? DType::BF16 : DType::FP16;
    unsigned bits = rng() % 2 ? 8 : 4;
    auto axis = rng() % 2 ? BlockAxis::PerRow : BlockAxis::FlatGroups;
    std::uint64_t bs = axis == BlockAxis::PerRow ? shape[1] : 1 + rng() % 9;
    auto high = random_bits_tensor("t", dtype, shape, rng);
    // Keep values finite and small so quantization spreads over the domain.
    std::uniform_real_distribution<float> u(-1, 1);
    for (std::uint64_t i = 0; i < high.numel(); ++i) {
        auto bits16 = float_to_half(dtype, u(rng));
        std::memcpy(high.data.data() + 2 * i, &bits16, 2);
    }
    QuantSpec spec;
    spec.bit_width = bits;
    spec.block_axis = axis;
    spec.block_size = static_cast<std::uint32_t>(bs);
    auto blocks = spec.geometry(high.numel()).block_count();
    const float palette[] = {0.25f, 0.5f, 1.0f};
    for (std::uint64_t b = 0; b < blocks; ++b) spec.scales.push_back(palette[rng() % 3]);

    Tensor low{"t", dtype_for_bits(bits), shape, Bytes(byte_length(dtype_for_bits(bits), high.numel()), 0)};
    auto geom = spec.geometry(high.numel());
    for (std::uint64_t b = 0; b < blocks; ++b)
        for (auto i = geom.begin(b); i < geom.end(b); ++i) {
            int q = quantize_value(element(high, i), spec.scales[b], spec.clamp_max());
            if (bits == 8)
                low.data[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(q));
            else
                int4_set(low.data, i, q);
        }
    return {high, low, spec};
}


inline Bytes random_chunk(std::mt19937_64& rng)
{
    std::size_t n = 1 + rng() % 6000;
    Bytes d(n);
    switch (rng() % 5) {
    case 0:
        for (auto& b : d) b = static_cast<std::uint8_t>(rng());
        break;
    case 1: {
        // small alphabet
        unsigned k = 1 + rng() % 6;
        for (auto& b : d) b = static_cast<std::uint8_t>(rng() % k * 37);
        break;
    }
    case 2: {
        // geometric: long codes
        std::geometric_distribution<int> g(0.3 + 0.6 * (rng() % 100) / 100.0);
        for (auto& b : d) b = static_cast<std::uint8_t>(std::min(g(rng), 255));
        break;
    }
    case 3: {
        // Fibonacci-like weights force the length limit
        std::vector<double> w;
        double a = 1, b = 1;
        for (int i = 0; i < 30; ++i) {
            w.push_back(a);
            double c = a + b;
            a = b;
            b = c;
        }
        std::discrete_distribution<int> dd(w.begin(), w.end());
        for (auto& x : d) x = static_cast<std::uint8_t>(dd(rng));
        break;
    }
    default: {
        std::normal_distribution<double> nd(128, 1 + rng() % 40);
        for (auto& b : d) b = static_cast<std::uint8_t>(std::clamp(nd(rng), 0.0, 255.0));
        break;
    }
    }
    return d;
}

}  // namespace qstore::test
