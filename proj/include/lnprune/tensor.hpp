#pragma once

#include <random>
#include <string>
#include <vector>

#include "lnprune/util.hpp"

namespace lnprune {

using Shape = std::vector<i64>;

i64 shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 N-d array. The one value type for images, weights,
// feature maps and gradients. Invariant: product(shape) == data.size().
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(Shape s);  // zero-filled
    Tensor(Shape s, std::vector<float> d);

    static Tensor full(Shape s, float v);

    i64 numel() const { return static_cast<i64>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    i64 dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool empty() const { return data.empty(); }

    float& at(i64 a) { return data[static_cast<std::size_t>(a)]; }
    float at(i64 a) const { return data[static_cast<std::size_t>(a)]; }
    float& at(i64 a, i64 b) { return data[static_cast<std::size_t>(a * shape[1] + b)]; }
    float at(i64 a, i64 b) const { return data[static_cast<std::size_t>(a * shape[1] + b)]; }
    float& at(i64 a, i64 b, i64 c, i64 d) {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }
    float at(i64 a, i64 b, i64 c, i64 d) const {
        return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
    }

    bool all_finite() const;
    u64 content_hash() const;  // FNV-1a over shape and raw float bytes
};

bool same_shape(const Tensor& a, const Tensor& b);

void fill_uniform(Tensor& t, std::mt19937_64& rng, float lo, float hi);
// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
void fill_kaiming_uniform(Tensor& t, i64 fan_in, std::mt19937_64& rng);

}  // namespace lnprune
