#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spo2::tn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
    }
};

/// Dense row-major array with an optional gradient slot. Copies are shallow:
/// two Tensor handles may refer to the same storage, which is how parameters
/// are shared between a model and its optimizer.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value) { return from({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    /// Gradient buffer; allocated (zeroed) on first access.
    std::span<T> grad();
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    T item() const;

    /// Deep copy without graph history; keeps requires_grad.
    Tensor clone() const;
    /// Deep copy as a leaf that does not require gradients.
    Tensor detach() const;

    /// Reverse-mode sweep seeded with d(this)/d(this) = 1. `this` must be a
    /// single-element tensor.
    void backward();

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Process-wide switch; when disabled, ops do not record graph history.
bool grad_enabled();

/// When enabled, every op output is scanned and a non-finite value raises
/// a DataError naming the offending op shape.
void set_nan_check(bool enabled);
bool nan_check_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Creates the output node of an op. The node records `parents` and
/// `backward_fn` only when gradients are enabled and at least one parent
/// requires them.
template <typename T>
Tensor<T> make_result(Shape shape,
                      std::vector<T> values,
                      std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn);

} // namespace spo2::tn
