#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "unmix/tensor.hpp"

namespace unmix {

// Graph tensors are multi-megabyte and short-lived; glibc would hand each one
// to mmap and return it to the kernel on free, costing a page-fault storm per
// batch. Keep large blocks in the heap instead.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)done;
#endif
}

// Reverse-mode autodiff over whole tensors. Each op appends one node holding
// the result value and a closure that scatters the node's gradient into its
// parents. Graphs are rebuilt per batch; parameters are long-lived leaves
// owned by the model.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.numel() != value.numel()) {
            grad = Tensor<T>(value.shape());
        }
    }

    void accumulate(const T* g, std::size_t count) {
        ensure_grad();
        T* dst = grad.data();
        for (std::size_t i = 0; i < count; ++i) dst[i] += g[i];
    }
};

template <typename T>
using VarPtr = std::shared_ptr<Node<T>>;

template <typename T>
VarPtr<T> make_leaf(Tensor<T> value, bool requires_grad, std::string name = "") {
    tune_allocator_once();
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    n->name = std::move(name);
    if (requires_grad) n->ensure_grad();
    return n;
}

template <typename T>
VarPtr<T> make_node(Tensor<T> value, std::vector<VarPtr<T>> parents) {
    tune_allocator_once();
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p && p->requires_grad) n->requires_grad = true;
    return n;
}

// Backpropagate from a scalar root. Intermediate gradients allocate lazily;
// leaf gradients accumulate until explicitly zeroed (optimizer contract).
template <typename T>
void backward(const VarPtr<T>& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");

    // Iterative post-order DFS over parents.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* node = stack.back().first;
        std::size_t next = stack.back().second;
        if (next < node->parents.size()) {
            ++stack.back().second;
            Node<T>* parent = node->parents[next].get();
            if (parent && parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);  // may reallocate the stack
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.fill(T(0));
    root->grad[0] = T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->requires_grad && node->backprop) node->backprop();
    }
}

}  // namespace unmix
