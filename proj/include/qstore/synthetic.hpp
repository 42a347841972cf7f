#pragma once

// Seeded generators for test models. Not meant to resemble any particular
// checkpoint beyond a small Gaussian weight scale.

#include <cstdio>
#include <random>

#include "qstore/quantizer.hpp"

namespace qstore {

enum class Distribution { Gaussian, Uniform, OutlierRow, Constant, WithNaN };

inline std::string_view distribution_name(Distribution d)
{
    switch (d) {
    case Distribution::Gaussian: return "gaussian";
    case Distribution::Uniform: return "uniform";
    case Distribution::OutlierRow: return "outlier_row";
    case Distribution::Constant: return "constant";
    case Distribution::WithNaN: return "nan";
    }
    return "?";
}

inline Distribution parse_distribution(std::string_view s)
{
    for (auto d : {Distribution::Gaussian, Distribution::Uniform, Distribution::OutlierRow, Distribution::Constant,
                   Distribution::WithNaN})
        if (distribution_name(d) == s) return d;
    fail(ErrorKind::Validation, "unknown distribution '" + std::string(s) + "'");
}

inline constexpr float kWeightSigma = 0.02f;

inline Tensor synthetic_tensor(std::string name, DType dtype, Shape shape, Distribution dist, std::uint64_t seed,
                               float sigma = kWeightSigma)
{
    require(is_float(dtype), ErrorKind::Validation, "synthetic tensors are FP16 or BF16");
    Tensor t{std::move(name), dtype, std::move(shape), {}};
    auto n = element_count(t.shape);
    t.data.resize(byte_length(dtype, n));
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, sigma);
    std::uniform_real_distribution<float> uniform(-2 * sigma, 2 * sigma);
    auto row = row_length(t.shape);
    std::uint64_t outlier_row = n / std::max<std::uint64_t>(row, 1) / 2;
    float constant = normal(rng);

    for (std::uint64_t i = 0; i < n; ++i) {
        float v = 0;
        switch (dist) {
        case Distribution::Gaussian: v = normal(rng); break;
        case Distribution::Uniform: v = uniform(rng); break;
        case Distribution::OutlierRow:
            v = normal(rng);
            if (row && i / row == outlier_row) v *= 50.0f;
            break;
        case Distribution::Constant: v = constant; break;
        case Distribution::WithNaN:
            v = normal(rng);
            if (i % 97 == 13) v = std::numeric_limits<float>::quiet_NaN();
            if (i % 389 == 200) v = (i & 1) ? std::numeric_limits<float>::infinity() : -std::numeric_limits<float>::infinity();
            break;
        }
        auto bits = float_to_half(dtype, v);
        std::memcpy(t.data.data() + 2 * i, &bits, 2);
    }
    return t;
}

/// `count` tensors named "layers.<i>.weight", each rows x cols.
inline ModelTensors synthetic_model(std::uint64_t rows, std::uint64_t cols, std::size_t count, DType dtype,
                                    std::uint64_t seed, Distribution dist = Distribution::Gaussian)
{
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < count; ++i) {
        char name[48];
        std::snprintf(name, sizeof name, "layers.%zu.weight", i);
        out.push_back(synthetic_tensor(name, dtype, {rows, cols}, dist, seed * 1000003ull + i));
    }
    return ModelTensors(std::move(out));
}

}  // namespace qstore
