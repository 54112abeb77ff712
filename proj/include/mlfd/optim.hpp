#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>

#include "mlfd/autograd.hpp"

namespace mlfd {

enum class OptimizerKind { SGD, Adam, AdamW };

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// SGD, Adam (L2 penalty folded into the gradient) and AdamW (decoupled decay).
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config);

    /// Applies one update to every non-frozen parameter, then zeroes all grads.
    void step(std::span<Parameter* const> params);

    const OptimizerConfig& config() const { return config_; }
    std::uint64_t step_count() const { return step_count_; }

private:
    struct Moments {
        Tensor first;
        Tensor second;
    };

    OptimizerConfig config_;
    std::unordered_map<const Parameter*, Moments> moments_;
    std::uint64_t step_count_ = 0;
};

}  // namespace mlfd
