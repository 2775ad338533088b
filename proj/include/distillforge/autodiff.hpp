#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "distillforge/tensor.hpp"

namespace distillforge {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamically built computation graph. Leaves are either
/// parameters (named, possibly trainable) or plain inputs. Interior nodes
/// carry a backward closure that scatters this node's grad into its inputs.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand, same shape/dtype as value
    bool requires_grad = false;
    bool is_param = false;
    bool trainable = false;
    std::string name;  // parameters only
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward_fn;

    bool has_grad() const { return grad.numel() == value.numel() && grad.rank() == value.rank(); }
    Tensor& ensure_grad();
    const std::vector<long>& shape() const { return value.shape(); }
    long dim(int i) const { return value.dim(i); }
    long numel() const { return value.numel(); }
    Dtype dtype() const { return value.dtype(); }
};

NodePtr make_leaf(Tensor value, bool requires_grad = false);
NodePtr make_param(std::string name, Tensor value, bool trainable);

/// Reverse-mode sweep from a scalar root: seeds root.grad with 1 and runs
/// backward closures in reverse topological order. Only the subgraph that
/// requires grad is visited.
void backward(const NodePtr& root);

/// Named parameter collection; iteration order is creation order, which is
/// the canonical checkpoint order.
class ParameterStore {
public:
    NodePtr add(const std::string& name, Tensor init, bool trainable);
    NodePtr get(const std::string& name) const;
    NodePtr find(const std::string& name) const;  // nullptr when missing
    bool has(const std::string& name) const;
    const std::vector<NodePtr>& all() const { return order_; }
    std::vector<NodePtr> trainable_params() const;
    long total_elements() const;
    void zero_grads();

private:
    std::vector<NodePtr> order_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace distillforge
