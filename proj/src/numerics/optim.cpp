#include "mlfd/optim.hpp"

#include <cmath>

#include "mlfd/error.hpp"

namespace mlfd {

OptimizerKind parse_optimizer_kind(const std::string& name) {
    if (name == "sgd") return OptimizerKind::SGD;
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd, adam or adamw)");
}

std::string to_string(OptimizerKind kind) {
    switch (kind) {
        case OptimizerKind::SGD: return "sgd";
        case OptimizerKind::Adam: return "adam";
        case OptimizerKind::AdamW: return "adamw";
    }
    return "?";
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
    if (!(config_.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (config_.weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
}

void Optimizer::step(std::span<Parameter* const> params) {
    ++step_count_;
    const double lr = config_.learning_rate;
    const double wd = config_.weight_decay;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);

    for (Parameter* p : params) {
        if (p->frozen) continue;
        if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
        double* w = p->value.ptr();
        const double* g = p->grad.ptr();
        const std::size_t n = p->value.size();

        if (config_.kind == OptimizerKind::SGD) {
            for (std::size_t i = 0; i < n; ++i) w[i] -= lr * (g[i] + wd * w[i]);
        } else {
            auto [it, inserted] = moments_.try_emplace(p);
            if (inserted || it->second.first.shape() != p->value.shape())
                it->second = Moments{Tensor(p->value.shape()), Tensor(p->value.shape())};
            double* m = it->second.first.ptr();
            double* v = it->second.second.ptr();
            const bool decoupled = config_.kind == OptimizerKind::AdamW;
            for (std::size_t i = 0; i < n; ++i) {
                const double gi = decoupled ? g[i] : g[i] + wd * w[i];
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.epsilon);
                if (decoupled) w[i] -= lr * wd * w[i];
                w[i] -= lr * update;
            }
        }
        p->zero_grad();
    }
}

}  // namespace mlfd
