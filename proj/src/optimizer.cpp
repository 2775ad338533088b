#include "distillforge/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace distillforge {

AdamW::AdamW(std::vector<NodePtr> params, AdamWConfig cfg) : cfg_(cfg) {
    for (auto& p : params) {
        if (!p->trainable) throw std::invalid_argument("AdamW: parameter " + p->name +
                                                       " is not trainable");
        Slot slot;
        slot.param = p;
        slot.m = Tensor::zeros(p->shape(), p->dtype());
        slot.v = Tensor::zeros(p->shape(), p->dtype());
        slots_.push_back(std::move(slot));
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& slot : slots_) {
        Node& p = *slot.param;
        if (!p.has_grad()) continue;
        dispatch_dtype(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
            const T one_m_b1 = static_cast<T>(1.0 - cfg_.beta1);
            const T one_m_b2 = static_cast<T>(1.0 - cfg_.beta2);
            const T lr = static_cast<T>(cfg_.lr);
            const T eps = static_cast<T>(cfg_.eps);
            const T wd = static_cast<T>(cfg_.weight_decay);
            const T inv_bc1 = static_cast<T>(1.0 / bc1);
            const T inv_bc2 = static_cast<T>(1.0 / bc2);
            T* theta = p.value.data<T>();
            const T* g = p.grad.data<T>();
            T* m = slot.m.data<T>();
            T* v = slot.v.data<T>();
            const long n = p.numel();
            for (long i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                const T mhat = m[i] * inv_bc1;
                const T vhat = v[i] * inv_bc2;
                theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[i]);
            }
        });
    }
}

void AdamW::zero_grad() {
    for (auto& slot : slots_)
        if (slot.param->has_grad()) slot.param->grad.fill(0.0);
}

}  // namespace distillforge
