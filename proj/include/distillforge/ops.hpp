#pragma once

#include <string>
#include <vector>

#include "distillforge/autodiff.hpp"

namespace distillforge {
namespace ops {

struct PrimitiveInfo {
    std::string name;
    std::string note;
};

/// The closed set of differentiable primitives everything else is built from.
const std::vector<PrimitiveInfo>& primitive_set();

// Elementwise / scalar.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double s);
NodePtr silu(const NodePtr& x);
NodePtr gelu(const NodePtr& x);

// Broadcast bias adds.
NodePtr add_bias_rows(const NodePtr& x, const NodePtr& b);      // [R,N] + [N]
NodePtr add_bias_channels(const NodePtr& x, const NodePtr& b);  // [B,C,H,W] + [C]
NodePtr add_per_sample_channels(const NodePtr& x, const NodePtr& v);  // [B,C,H,W] + [B,C]

// Linear algebra.
NodePtr matmul(const NodePtr& a, const NodePtr& b);                        // [M,K]x[K,N]
NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& bias);  // w:[out,in], bias nullable
NodePtr bmm(const NodePtr& a, const NodePtr& b, bool transpose_b = false);

// Convolution / resampling.
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias, long stride, long pad);
NodePtr upsample_nearest2x(const NodePtr& x);

// Normalization / attention pieces.
NodePtr group_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, long groups,
                   double eps = 1e-5);
NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps = 1e-5);
NodePtr softmax_lastdim(const NodePtr& x);

// Shape manipulation.
NodePtr reshape(const NodePtr& x, std::vector<long> shape);
NodePtr permute(const NodePtr& x, std::vector<int> dims);
NodePtr concat_channels(const NodePtr& a, const NodePtr& b);
NodePtr slice_lastdim(const NodePtr& x, long start, long len);

// Lookup.
NodePtr embedding(const NodePtr& table, const std::vector<long>& ids);

// Reductions.
NodePtr mse(const NodePtr& a, const NodePtr& b);
NodePtr mse_sum(const NodePtr& a, const NodePtr& b);  // summed, not averaged
NodePtr mean_all(const NodePtr& x);
NodePtr sum_all(const NodePtr& x);

}  // namespace ops
}  // namespace distillforge
