#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlfd/autograd.hpp"
#include "mlfd/data.hpp"
#include "mlfd/models.hpp"
#include "mlfd/optim.hpp"

namespace mlfd::training {

struct EvalResult {
    double acc1 = 0.0;  // percent
    double acc5 = 0.0;  // percent, top-min(5, C)
    std::size_t k = 5;
    bool k_reduced = false;  // C < 5
    std::size_t samples = 0;
};

/// Ranks by strict comparison: a sample counts at k when fewer than k classes
/// score strictly higher than the true class.
EvalResult evaluate_logits(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k = 5);
EvalResult evaluate(models::Model& model, const data::LabeledDataset& d, data::Split split = data::Split::Test);

struct MetricsRecord {
    std::string experiment;
    std::string variant;
    std::string stage;
    std::string model;
    std::string dataset;
    std::string taps;
    std::uint64_t seed = 0;
    double acc1 = 0.0;
    double acc5 = 0.0;
    bool k_reduced = false;
    std::size_t epoch = 0;
    double wall_seconds = 0.0;

    void validate() const;  // 0 <= acc1 <= acc5 <= 100
};

struct ConvergencePolicy {
    std::size_t max_epochs = 60;
    std::size_t min_epochs = 20;
    std::size_t patience = 10;

    void validate() const;
};

struct TrainConfig {
    OptimizerConfig optimizer;
    std::size_t batch_size = 64;
    std::size_t accumulation = 1;
    ConvergencePolicy policy;

    void validate() const;
};

/// One dataset taking part in a training run. `loss` builds the scalar loss of
/// one batch on the tape and reports named components.
struct Task {
    const data::LabeledDataset* dataset = nullptr;
    std::function<Var(Tape&, const data::Batch&, const models::RunContext&, std::vector<double>& components)> loss;
};

struct TaskEval {
    double val_acc1 = 0.0;
    EvalResult test;
};

struct TaskEpoch {
    std::vector<double> components;  // mean per batch
    double val_acc1 = 0.0;
    double test_acc1 = 0.0;
    double test_acc5 = 0.0;
};

struct EpochLog {
    std::size_t epoch = 0;
    std::vector<TaskEpoch> tasks;
    double mean_val_acc1 = 0.0;
};

struct TrainLog {
    std::vector<std::string> component_names;
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;
    bool stopped_early = false;
    std::uint64_t optimizer_steps = 0;
    double wall_seconds = 0.0;
};

struct TrainHooks {
    /// Evaluates every task after an epoch (eval mode).
    std::function<std::vector<TaskEval>()> evaluate;
    std::function<void(const EpochLog&)> on_epoch;
};

/// Round-robin training: each round draws one batch from every task, scales
/// each loss by 1/(tasks * accumulation), accumulates gradients and steps the
/// optimizer every `accumulation` rounds. An epoch is as many rounds as the
/// largest task has batches; smaller tasks cycle with a fresh shuffle. Early
/// stopping on mean validation acc@1 restores the best epoch's parameters.
TrainLog train_rounds(std::span<Task> tasks, std::vector<Parameter*> params,
                      std::vector<std::pair<std::string, Tensor*>> buffers, const TrainConfig& cfg,
                      std::uint64_t seed, std::vector<std::string> component_names, const TrainHooks& hooks);

/// Plain cross-entropy classifier training of a single model on one dataset.
TrainLog train_classifier(models::Model& model, const data::LabeledDataset& d, const TrainConfig& cfg,
                          std::uint64_t seed);

/// Hard-label cross-entropy of logits against one-hot targets.
Var hard_ce(Var logits, const Tensor& one_hot);

}  // namespace mlfd::training
