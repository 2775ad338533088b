#include "distillforge/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace distillforge {

const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "float32" : "float64"; }

Dtype dtype_from_name(const std::string& name) {
    if (name == "float32") return Dtype::F32;
    if (name == "float64") return Dtype::F64;
    throw std::invalid_argument("unknown dtype: " + name);
}

std::size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

long shape_numel(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<long>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<long> shape, Dtype dt) : shape_(std::move(shape)), dtype_(dt) {
    long n = shape_numel(shape_);
    if (dt == Dtype::F32)
        f32_.assign(static_cast<std::size_t>(n), 0.0f);
    else
        f64_.assign(static_cast<std::size_t>(n), 0.0);
}

Tensor Tensor::zeros(std::vector<long> shape, Dtype dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(std::vector<long> shape, double value, Dtype dt) {
    Tensor t(std::move(shape), dt);
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

Tensor Tensor::from_values(std::vector<long> shape, const std::vector<double>& values, Dtype dt) {
    Tensor t(std::move(shape), dt);
    if (t.numel() != static_cast<long>(values.size()))
        throw std::invalid_argument("from_values: shape/value count mismatch");
    for (long i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<std::size_t>(i)]);
    return t;
}

long Tensor::numel() const { return shape_numel(shape_); }

double Tensor::get(long i) const {
    return dtype_ == Dtype::F32 ? static_cast<double>(f32_[static_cast<std::size_t>(i)])
                                : f64_[static_cast<std::size_t>(i)];
}

void Tensor::set(long i, double v) {
    if (dtype_ == Dtype::F32)
        f32_[static_cast<std::size_t>(i)] = static_cast<float>(v);
    else
        f64_[static_cast<std::size_t>(i)] = v;
}

Tensor Tensor::cast(Dtype dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (long i = 0; i < numel(); ++i) out.set(i, get(i));
    return out;
}

Tensor Tensor::reshaped(std::vector<long> shape) const {
    if (shape_numel(shape) != numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_to_string(shape_) +
                                    " -> " + shape_to_string(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

void Tensor::fill(double v) {
    if (dtype_ == Dtype::F32)
        std::fill(f32_.begin(), f32_.end(), static_cast<float>(v));
    else
        std::fill(f64_.begin(), f64_.end(), v);
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    if (dtype_ == Dtype::F32)
        return f32_.size() == other.f32_.size() &&
               std::memcmp(f32_.data(), other.f32_.data(), f32_.size() * sizeof(float)) == 0;
    return f64_.size() == other.f64_.size() &&
           std::memcmp(f64_.data(), other.f64_.data(), f64_.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
    for (long i = 0; i < numel(); ++i)
        if (!std::isfinite(get(i))) return false;
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace distillforge
