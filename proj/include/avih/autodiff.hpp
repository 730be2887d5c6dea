#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "avih/tensor.hpp"

namespace avih {

// Reverse-mode tape node. Graphs are small DAGs rebuilt every step (dynamic
// graph). A node records its parents and a closure that scatters the incoming
// gradient; nodes whose ancestors are all constant carry no closure at all,
// so constant subgraphs (e.g. loss targets) cost nothing at backward time.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily by backward()
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    explicit Node(Tensor v) : value(std::move(v)) {}

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor(value.shape());
            grad_ready = true;
        }
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Tensor v) { return std::make_shared<Node>(std::move(v)); }

inline Var leaf(Tensor v) {
    auto n = std::make_shared<Node>(std::move(v));
    n->requires_grad = true;
    return n;
}

// Wraps an op result: requires_grad is inherited from parents, and the
// backward closure is dropped entirely when nothing upstream needs gradients.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Accumulates d(root)/d(x) into every reachable node with requires_grad.
// root must be scalar. Gradients are accumulated (+=): call zero_grad on
// leaves between steps.
void backward(const Var& root);

}  // namespace avih
