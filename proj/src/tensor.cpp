#include "spo2/tensor.hpp"

#include "spo2/errors.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace spo2::tn {

namespace {

thread_local bool g_grad_enabled = true;
bool g_nan_check = false;

} // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ')';
    return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

void set_nan_check(bool enabled) { g_nan_check = enabled; }
bool nan_check_enabled() { return g_nan_check; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
std::span<T> Tensor<T>::grad() {
    node_->ensure_grad();
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (!node_->grad.empty()) {
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(shape(), node_->value, node_->requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto node = std::make_shared<Node<T>>();
    node->shape = node_->shape;
    node->value = node_->value;
    return Tensor(std::move(node));
}

template <typename T>
void Tensor<T>::backward() {
    if (numel() != 1) {
        throw ShapeError("backward() requires a single-element tensor, got " +
                         shape_str(shape()));
    }
    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

template <typename T>
Tensor<T> make_result(Shape shape,
                      std::vector<T> values,
                      std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
    if (g_nan_check) {
        for (const T v : values) {
            if (!std::isfinite(v)) {
                throw DataError("non-finite value in op output of shape " + shape_str(shape));
            }
        }
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    bool needs_grad = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            needs_grad = needs_grad || p.requires_grad();
        }
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) {
            node->parents.push_back(p.node_ptr());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>);

} // namespace spo2::tn
