#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mlfd/tensor.hpp"

namespace mlfd {

/// A trainable tensor with its gradient slot. Frozen parameters are never
/// written by backward or by an optimizer.
struct Parameter {
    Parameter() = default;
    Parameter(std::string name, Tensor value, bool frozen = false)
        : name(std::move(name)), value(std::move(value)), grad(this->value.shape()), frozen(frozen) {}

    void zero_grad() { grad.fill(0.0); }

    std::string name;
    Tensor value;
    Tensor grad;
    bool frozen = false;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of executed differentiable operations. The reverse sweep
/// visits recorded operations in exact reverse execution order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    /// A non-recording tape evaluates values only; nothing is differentiable.
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf whose gradient is retained on the tape (read it with grad()).
    Var leaf(Tensor value, bool requires_grad = true);
    Var param(Parameter& p);

    /// Used by operations. `fn` is dropped when no input requires a gradient.
    Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient accumulated at a node during backward; nullptr if none flowed.
    const Tensor* grad(Var v) const;

    /// Accumulation buffer for node `id`, zero-allocated on first use.
    Tensor& grad_buffer(std::size_t id);

    /// Reverse sweep from a scalar loss; accumulates into non-frozen Parameters.
    void backward(Var loss);

    /// Drops every recorded node and resets the backward guard.
    void clear();

    /// Node ids whose backward functions ran, in the order they ran.
    const std::vector<std::size_t>& last_sweep() const { return sweep_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        Parameter* param = nullptr;
        BackwardFn fn;
    };

    std::vector<Node> nodes_;
    std::vector<std::size_t> sweep_;
    bool recording_ = true;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace mlfd
