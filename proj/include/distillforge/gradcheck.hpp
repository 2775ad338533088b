#pragma once

#include <functional>
#include <string>
#include <vector>

#include "distillforge/autodiff.hpp"

namespace distillforge {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    long worst_index = -1;
    double analytic = 0.0;  // at the worst index
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool passed(double tol) const { return max_rel_err < tol; }
};

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences, elementwise over the given float64 parameters. The relative
/// error denominator is max(|analytic|, |numeric|, 1e-8). Throws when the
/// loss is non-finite, naming the perturbed parameter.
GradCheckReport grad_check(const std::function<NodePtr()>& build_loss,
                           const std::vector<NodePtr>& params, double eps = 1e-5,
                           double tol = 1e-5);

}  // namespace distillforge
