#include "avih/autodiff.hpp"

#include <unordered_set>

namespace avih {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>(std::move(value));
    bool needs = false;
    for (const auto& p : parents) {
        if (p && p->requires_grad) {
            needs = true;
            break;
        }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

namespace {

// Iterative post-order DFS; recursion would overflow on deep step graphs.
void topo_sort(const Var& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void backward(const Var& root) {
    AVIH_CHECK(root && root->value.numel() == 1, "backward requires a scalar root");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    topo_sort(root, order);

    root->ensure_grad();
    root->grad.fill(1.0);
    // Post-order list ends at the root; walk it backwards so every node's
    // gradient is complete before it propagates to its parents.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
    }
}

}  // namespace avih
