#include "cbv/numcore/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace cbv::numcore {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (std::size_t e : shape_) {
        if (e == 0) throw ShapeMismatch("tensor extent must be positive, got " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t e : shape_) {
        if (e == 0) throw ShapeMismatch("tensor extent must be positive, got " + shape_str(shape_));
    }
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeMismatch("data length " + std::to_string(data_.size()) + " does not match shape " +
                            shape_str(shape_));
    }
}

Tensor Tensor::full(Shape shape, float v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::scalar(float v) {
    Tensor t{Shape{}, std::vector<float>{v}};
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeMismatch("axis out of range for shape " + shape_str(shape_));
    return shape_[axis];
}

namespace {
void check_rank(const Shape& s, std::size_t r) {
    if (s.size() != r) {
        throw ShapeMismatch("expected rank " + std::to_string(r) + " tensor, got shape " + shape_str(s));
    }
}
}  // namespace

float& Tensor::at(std::size_t i) {
    check_rank(shape_, 1);
    return data_[i];
}
float Tensor::at(std::size_t i) const { return const_cast<Tensor*>(this)->at(i); }

float& Tensor::at(std::size_t i, std::size_t j) {
    check_rank(shape_, 2);
    return data_[i * shape_[1] + j];
}
float Tensor::at(std::size_t i, std::size_t j) const { return const_cast<Tensor*>(this)->at(i, j); }

float& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
    check_rank(shape_, 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
}
float Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    return const_cast<Tensor*>(this)->at(i, j, k);
}

float& Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    check_rank(shape_, 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
float Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return const_cast<Tensor*>(this)->at(i, j, k, l);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeMismatch("item() requires a single-element tensor, got " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeMismatch(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor clamp(const Tensor& a, float lo, float hi) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::min(std::max(a[i], lo), hi);
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

double l2_norm(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    return std::sqrt(acc);
}

float max_abs(const Tensor& a) {
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

bool all_finite(const Tensor& a) {
    for (std::size_t i = 0; i < a.numel(); ++i) {
        if (!std::isfinite(a[i])) return false;
    }
    return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

Tensor l2_normalize(const Tensor& v) {
    double n = l2_norm(v);
    if (n <= kEpsFloor) throw ZeroVector("cannot normalize vector with norm " + std::to_string(n));
    Tensor out(v.shape());
    float inv = static_cast<float>(1.0 / n);
    for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v[i] * inv;
    return out;
}

float cosine_similarity(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "cosine_similarity");
    double na = l2_norm(a);
    double nb = l2_norm(b);
    if (na <= kEpsFloor || nb <= kEpsFloor) {
        throw ZeroVector("cosine_similarity with zero-norm argument");
    }
    return static_cast<float>(dot(a, b) / (na * nb));
}

}  // namespace cbv::numcore
