#include "distillforge/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace distillforge {

Tensor& Node::ensure_grad() {
    if (!has_grad()) grad = Tensor::zeros(value.shape(), value.dtype());
    return grad;
}

NodePtr make_leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

NodePtr make_param(std::string name, Tensor value, bool trainable) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->is_param = true;
    n->trainable = trainable;
    n->requires_grad = trainable;
    n->name = std::move(name);
    return n;
}

void backward(const NodePtr& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS over the grad-requiring subgraph.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        bool descended = false;
        while (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
                descended = true;
                break;
            }
        }
        if (descended) continue;
        topo.push_back(node);
        stack.pop_back();
    }

    root->ensure_grad().fill(1.0);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
}

NodePtr ParameterStore::add(const std::string& name, Tensor init, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = make_param(name, std::move(init), trainable);
    index_[name] = order_.size();
    order_.push_back(p);
    return p;
}

NodePtr ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return order_[it->second];
}

NodePtr ParameterStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : order_[it->second];
}

bool ParameterStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::vector<NodePtr> ParameterStore::trainable_params() const {
    std::vector<NodePtr> out;
    for (const auto& p : order_)
        if (p->trainable) out.push_back(p);
    return out;
}

long ParameterStore::total_elements() const {
    long n = 0;
    for (const auto& p : order_) n += p->numel();
    return n;
}

void ParameterStore::zero_grads() {
    for (const auto& p : order_)
        if (p->has_grad()) p->grad.fill(0.0);
}

}  // namespace distillforge
