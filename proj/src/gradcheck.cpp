#include "distillforge/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace distillforge {

namespace {

double eval_scalar(const std::function<NodePtr()>& build_loss, const std::string& context) {
    NodePtr loss = build_loss();
    if (!loss || loss->numel() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    double v = loss->value.get(0);
    if (!std::isfinite(v))
        throw std::runtime_error("grad_check: non-finite loss value at " + context);
    return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<NodePtr()>& build_loss,
                           const std::vector<NodePtr>& params, double eps, double tol) {
    (void)tol;
    if (eps < 1e-6 || eps > 1e-3)
        throw std::invalid_argument("grad_check: eps must be in [1e-6, 1e-3]");
    for (const auto& p : params) {
        if (p->dtype() != Dtype::F64)
            throw std::invalid_argument("grad_check: parameter " + p->name + " must be float64");
        if (p->has_grad()) p->grad.fill(0.0);
    }

    // Analytic pass.
    NodePtr loss = build_loss();
    if (!loss || loss->numel() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    if (!std::isfinite(loss->value.get(0)))
        throw std::runtime_error("grad_check: non-finite loss at unperturbed point");
    backward(loss);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params)
        analytic.push_back(p->has_grad() ? p->grad : Tensor::zeros(p->shape(), Dtype::F64));

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const NodePtr& p = params[pi];
        GradCheckEntry entry;
        entry.name = p->name.empty() ? ("param#" + std::to_string(pi)) : p->name;
        double* theta = p->value.data<double>();
        for (long i = 0; i < p->numel(); ++i) {
            const double saved = theta[i];
            const std::string ctx = entry.name + "[" + std::to_string(i) + "]";
            theta[i] = saved + eps;
            double fp = eval_scalar(build_loss, ctx + " (+eps)");
            theta[i] = saved - eps;
            double fm = eval_scalar(build_loss, ctx + " (-eps)");
            theta[i] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi].get(i);
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            double rel = std::fabs(a - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace distillforge
