#pragma once

#include <vector>

#include "distillforge/autodiff.hpp"

namespace distillforge {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Moment buffers live in the parameter
/// dtype; bias correction is computed in double. Update order follows the
/// canonical parameter order, so steps are deterministic.
class AdamW {
public:
    AdamW(std::vector<NodePtr> params, AdamWConfig cfg);

    void step();
    void zero_grad();
    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

    struct Slot {
        NodePtr param;
        Tensor m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    long t_ = 0;
};

}  // namespace distillforge
