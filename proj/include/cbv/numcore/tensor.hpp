#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cbv/error.hpp"

namespace cbv::numcore {

/// Shape is an ordered list of positive extents. An empty list is a scalar.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shape_eq(const Shape& a, const Shape& b);

/// Dense row-major tensor of 32-bit floats.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float v);
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
    static Tensor scalar(float v);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const;
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // Multi-index access; rank is checked.
    float& at(std::size_t i);
    float at(std::size_t i) const;
    float& at(std::size_t i, std::size_t j);
    float at(std::size_t i, std::size_t j) const;
    float& at(std::size_t i, std::size_t j, std::size_t k);
    float at(std::size_t i, std::size_t j, std::size_t k) const;
    float& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l);
    float at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

    float item() const;

    bool same_shape(const Tensor& other) const { return shape_eq(shape_, other.shape_); }
    Tensor reshaped(Shape shape) const;

    void fill(float v);

private:
    Shape shape_;
    std::vector<float> data_;
};

// Elementwise helpers. Shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor clamp(const Tensor& a, float lo, float hi);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
float max_abs(const Tensor& a);
bool all_finite(const Tensor& a);
bool bit_equal(const Tensor& a, const Tensor& b);

/// Division-safety floor used wherever a norm appears in a denominator.
inline constexpr double kEpsFloor = 1e-12;

/// Returns v / max(||v||, 1e-12). Throws ZeroVector when ||v|| <= 1e-12.
Tensor l2_normalize(const Tensor& v);

/// cos(a, b) with the same zero-norm guard on either argument.
float cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace cbv::numcore
