#include "mlfd/autograd.hpp"

#include "mlfd/error.hpp"

namespace mlfd {

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad && recording_, nullptr, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    const bool trainable = recording_ && !p.frozen;
    nodes_.push_back(Node{p.value, {}, false, trainable, trainable ? &p : nullptr, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    if (!value.all_finite()) {
        bool inputs_finite = true;
        for (auto id : inputs) inputs_finite = inputs_finite && nodes_[id].value.all_finite();
        if (inputs_finite) throw NumericError(std::string(op) + " produced a non-finite value from finite inputs");
        throw NumericError(std::string(op) + " received non-finite input");
    }
    bool needs = false;
    if (recording_)
        for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, false, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
}

const Tensor* Tape::grad(Var v) const {
    const auto& n = nodes_.at(v.id());
    return n.has_grad ? &n.grad : nullptr;
}

Tensor& Tape::grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape(), 0.0);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (&loss.tape() != this) throw PreconditionError("backward: loss was not recorded on this tape");
    if (backward_done_)
        throw PreconditionError("backward called twice on the same tape; clear() it first to avoid double accumulation");
    if (loss.value().size() != 1)
        throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.value().shape()));
    backward_done_ = true;
    sweep_.clear();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.has_grad || !n.requires_grad) continue;
        if (n.fn) {
            n.fn(*this, i);
            sweep_.push_back(i);
        } else if (n.param != nullptr && !n.param->frozen) {
            auto& g = n.param->grad;
            if (g.shape() != n.grad.shape()) throw DimensionError("gradient shape mismatch for " + n.param->name);
            double* dst = g.ptr();
            const double* src = n.grad.ptr();
            for (std::size_t k = 0; k < g.size(); ++k) dst[k] += src[k];
        }
    }
}

void Tape::clear() {
    nodes_.clear();
    sweep_.clear();
    backward_done_ = false;
}

}  // namespace mlfd
