#include "symseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "symseg/errors.hpp"

namespace symseg {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
    out << "]";
    return out.str();
}

void parallel_zero(float* p, int64_t n) {
    if (n < (1 << 18)) {
        std::memset(p, 0, sizeof(float) * static_cast<size_t>(n));
        return;
    }
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i += (1 << 16)) {
        const int64_t len = std::min<int64_t>(1 << 16, n - i);
        std::memset(p + i, 0, sizeof(float) * static_cast<size_t>(len));
    }
}

namespace {
void check_shape(const Shape& s) {
    for (int64_t d : s)
        if (d <= 0) throw ValidationError("tensor dims must be positive, got " + shape_str(s));
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.resize(static_cast<size_t>(shape_numel(shape_)));
    parallel_zero(data_.data(), numel());
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.resize(static_cast<size_t>(shape_numel(shape_)));
    std::fill(data_.begin(), data_.end(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<int64_t>(values.size()))
        throw ValidationError("tensor value count " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
}

Tensor::Tensor(Shape shape, const float* values, int64_t count) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != count)
        throw ValidationError("tensor value count " + std::to_string(count) +
                              " does not match shape " + shape_str(shape_));
    data_.resize(static_cast<size_t>(count));
    std::memcpy(data_.data(), values, sizeof(float) * static_cast<size_t>(count));
}

Tensor Tensor::uninit(Shape shape) {
    check_shape(shape);
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(static_cast<size_t>(shape_numel(t.shape_)));
    return t;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

float Tensor::min() const {
    return data_.empty() ? 0.0f : *std::min_element(data_.begin(), data_.end());
}

float Tensor::max() const {
    return data_.empty() ? 0.0f : *std::max_element(data_.begin(), data_.end());
}

double Tensor::sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
}

double Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ValidationError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                              " changes element count");
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
}

}  // namespace symseg
