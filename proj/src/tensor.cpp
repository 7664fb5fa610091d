#include "lnprune/tensor.hpp"

#include <cmath>
#include <sstream>

#include "lnprune/errors.hpp"

namespace lnprune {

i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)) {
    for (i64 d : shape) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(shape));
    }
    data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
}

Tensor::Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<i64>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
}

Tensor Tensor::full(Shape s, float v) {
    Tensor t(std::move(s));
    for (float& x : t.data) x = v;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

u64 Tensor::content_hash() const {
    u64 h = fnv1a(shape.data(), shape.size() * sizeof(i64));
    return fnv1a_extend(h, data.data(), data.size() * sizeof(float));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

void fill_uniform(Tensor& t, std::mt19937_64& rng, float lo, float hi) {
    std::uniform_real_distribution<float> dist(lo, hi);
    for (float& v : t.data) v = dist(rng);
}

void fill_kaiming_uniform(Tensor& t, i64 fan_in, std::mt19937_64& rng) {
    float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    fill_uniform(t, rng, -bound, bound);
}

}  // namespace lnprune
