#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mmri/tensor.hpp"

namespace mmri::ad {

template <typename T>
class Tape;

// One tensor in the computation graph. Leaves (inputs, parameters) persist
// across tapes; intermediates are owned by the backward records that need them.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Tape<T>* producer = nullptr; // tape whose records produced this node, null for leaves

    void ensure_grad() {
        if (!has_grad) {
            if (grad.shape() != value.shape())
                grad = Tensor<T>(value.shape());
            else
                grad.fill(T(0));
            has_grad = true;
        }
    }
    void clear_grad() { has_grad = false; }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_leaf(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

// Ordered record of executed operations. Replaying the records in reverse
// populates a gradient for every tensor reachable from the loss.
template <typename T>
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    // Output node for an op. A backward record is attached only when the tape
    // is recording and some input carries requires_grad.
    Var<T> output(Tensor<T> v, bool grad_path) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = grad_path && recording_;
        return n;
    }

    bool track(const Var<T>& out) const { return recording_ && out->requires_grad; }

    void record(const Var<T>& out, std::function<void()> fn) {
        out->producer = this;
        records_.push_back(std::move(fn));
    }

    void backward(const Var<T>& loss) {
        check(loss != nullptr, "backward: null loss");
        check(loss->producer == this, "backward: tensor was not produced by recorded operations on this tape");
        check(loss->value.size() == 1, "backward: loss must be a scalar, got shape " + shape_str(loss->value.shape()));
        check(!consumed_, "backward: tape already replayed");
        consumed_ = true;
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    size_t num_records() const { return records_.size(); }

private:
    std::vector<std::function<void()>> records_;
    bool recording_ = true;
    bool consumed_ = false;
};

} // namespace mmri::ad
