#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace symseg {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

namespace detail {
/// Allocator with two jobs: 64-byte alignment (keeps Eigen on one kernel path
/// regardless of heap layout, which keeps results bit-reproducible run to
/// run) and default-init on construct(p) so resize() skips the value-init
/// pass for floats.
template <typename T>
struct uninit_allocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    uninit_allocator() = default;
    template <typename U>
    uninit_allocator(const uninit_allocator<U>&) noexcept {}

    T* allocate(size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
    }
    void deallocate(T* p, size_t n) noexcept {
        ::operator delete(p, n * sizeof(T), kAlign);
    }
    template <typename U>
    void construct(U* p) noexcept(noexcept(::new (static_cast<void*>(p)) U)) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <typename U>
    bool operator==(const uninit_allocator<U>&) const noexcept {
        return true;
    }
};
}  // namespace detail

/// Dense row-major float32 array. Value semantics; copies are deep.
class Tensor {
public:
    using Storage = std::vector<float, detail::uninit_allocator<float>>;

    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, float fill);
    Tensor(Shape shape, std::vector<float> values);
    Tensor(Shape shape, const float* values, int64_t count);

    /// Allocated but NOT initialized; caller must overwrite every element.
    static Tensor uninit(Shape shape);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(float v) { return Tensor({1}, v); }

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    int64_t dim(size_t i) const { return shape_[i]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    void fill(float v);
    bool all_finite() const;
    float min() const;
    float max() const;
    double sum() const;
    double mean() const;

    Tensor reshaped(Shape new_shape) const;

private:
    Shape shape_;
    Storage data_;
};

int64_t shape_numel(const Shape& s);

/// memset-style parallel fill used by hot paths.
void parallel_zero(float* p, int64_t n);

}  // namespace symseg
