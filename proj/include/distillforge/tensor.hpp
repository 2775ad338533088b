#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace distillforge {

enum class Dtype { F32, F64 };

const char* dtype_name(Dtype dt);
Dtype dtype_from_name(const std::string& name);
std::size_t dtype_size(Dtype dt);

/// Dense row-major tensor. Exactly one of the two buffers is active,
/// selected by dtype(); product(shape) always equals the buffer length.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<long> shape, Dtype dt);

    static Tensor zeros(std::vector<long> shape, Dtype dt = Dtype::F32);
    static Tensor full(std::vector<long> shape, double value, Dtype dt = Dtype::F32);
    static Tensor scalar(double value, Dtype dt = Dtype::F32);
    static Tensor from_values(std::vector<long> shape, const std::vector<double>& values,
                              Dtype dt = Dtype::F32);

    const std::vector<long>& shape() const { return shape_; }
    long dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    long numel() const;
    Dtype dtype() const { return dtype_; }
    bool defined() const { return !shape_.empty() || numel() == 1 || !f32_.empty() || !f64_.empty(); }

    template <typename T> T* data();
    template <typename T> const T* data() const;

    double get(long i) const;
    void set(long i, double v);

    Tensor cast(Dtype dt) const;
    Tensor reshaped(std::vector<long> shape) const;
    void fill(double v);

    /// Exact elementwise equality (same shape, dtype and bits).
    bool bit_equal(const Tensor& other) const;
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<long> shape_;
    Dtype dtype_ = Dtype::F32;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

long shape_numel(const std::vector<long>& shape);
std::string shape_to_string(const std::vector<long>& shape);

template <> inline float* Tensor::data<float>() { return f32_.data(); }
template <> inline const float* Tensor::data<float>() const { return f32_.data(); }
template <> inline double* Tensor::data<double>() { return f64_.data(); }
template <> inline const double* Tensor::data<double>() const { return f64_.data(); }

/// Calls f(T{}) with T = float or double matching dt.
template <class F> decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
    if (dt == Dtype::F32) return f(float{});
    return f(double{});
}

}  // namespace distillforge
