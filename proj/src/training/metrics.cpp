#include <algorithm>

#include "mlfd/error.hpp"
#include "mlfd/training.hpp"

namespace mlfd::training {

EvalResult evaluate_logits(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw DimensionError("evaluate: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                             " labels");
    if (labels.empty()) throw PreconditionError("evaluate: empty split");
    const std::size_t n = labels.size(), C = logits.dim(1);
    EvalResult r;
    r.k = std::min(k, C);
    r.k_reduced = C < k;
    r.samples = n;
    std::size_t hit1 = 0, hitk = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= C) throw DimensionError("evaluate: label " + std::to_string(labels[i]) + " >= classes " + std::to_string(C));
        const double* row = logits.ptr() + i * C;
        const double truth = row[labels[i]];
        std::size_t above = 0;
        for (std::size_t c = 0; c < C; ++c)
            if (row[c] > truth) ++above;
        if (above < 1) ++hit1;
        if (above < r.k) ++hitk;
    }
    r.acc1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(n);
    r.acc5 = 100.0 * static_cast<double>(hitk) / static_cast<double>(n);
    return r;
}

EvalResult evaluate(models::Model& model, const data::LabeledDataset& d, data::Split split) {
    const auto& ids = d.split(split);
    std::vector<std::size_t> labels;
    for (auto i : ids) labels.push_back(d.labels[i]);
    return evaluate_logits(model.predict(d.inputs.rows(ids)), labels);
}

void MetricsRecord::validate() const {
    if (!(0.0 <= acc1 && acc1 <= acc5 && acc5 <= 100.0))
        throw NumericError("metrics record for " + model + " on " + dataset + " violates 0 <= acc@1 <= acc@5 <= 100");
}

void ConvergencePolicy::validate() const {
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (min_epochs > max_epochs) throw ConfigError("min_epochs must not exceed max_epochs");
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (accumulation < 1) throw ConfigError("accumulation must be >= 1");
    policy.validate();
    Optimizer check(optimizer);
}

}  // namespace mlfd::training
