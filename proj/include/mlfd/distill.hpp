#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mlfd/data.hpp"
#include "mlfd/fusion.hpp"
#include "mlfd/models.hpp"
#include "mlfd/training.hpp"

namespace mlfd::distill {

struct KDConfig {
    double alpha = 0.6;
    std::vector<double> betas{0.2, 0.2};
    double tau = 2.0;

    /// ConfigError unless alpha, betas >= 0, tau > 0 and one beta per level.
    void validate(std::size_t levels) const;
};

/// Teacher outputs for the training split of one dataset, row-aligned with `samples`.
struct DistillTargets {
    std::string dataset;
    std::vector<std::size_t> samples;
    Tensor probs;  // (n, C), row-stochastic
    std::vector<std::string> levels;
    std::vector<Tensor> embeddings;  // one (n, ...) tensor per level

    void validate() const;
    std::size_t tensor_count() const { return samples.size() * (1 + levels.size()); }
};

struct KDBreakdown {
    double total = 0.0;
    double hard_ce = 0.0;
    double soft_ce = 0.0;
    std::vector<double> mse;
};

struct KDLoss {
    Var total;
    KDBreakdown parts;
};

/// Hard-label CE + alpha * tau^2 * CE(softmax(s/tau), softmax(log t / tau)) + sum_c beta_c * MSE_c.
/// Weighted terms with a zero weight stay out of the graph, so alpha = betas = 0
/// yields exactly the hard-label loss.
KDLoss kd_loss(const Tensor& one_hot, Var student_logits, std::span<const Var> student_embeddings,
               const Tensor& teacher_probs, std::span<const Tensor> teacher_embeddings, const KDConfig& cfg);

/// softmax(log(p) / tau) row-wise.
Tensor temper(const Tensor& probs, double tau);

/// Projects a student embedding to the teacher's shape; identity when shapes agree.
class StudentAdaptor {
public:
    StudentAdaptor() = default;
    StudentAdaptor(std::string level, Shape student_shape, Shape teacher_shape, std::uint64_t seed);

    Var apply(Tape& tape, Var x);
    bool identity() const { return kind_ == Kind::Identity; }
    std::vector<Parameter*> parameters();

private:
    enum class Kind { Identity, Pointwise, Linear, FlattenLinear };
    std::string level_;
    Shape student_shape_, teacher_shape_;
    Kind kind_ = Kind::Identity;
    std::size_t pool_ = 1;
    Parameter weight_, bias_;
};

/// Eval-mode joint-teacher outputs for the training split, persisted under the
/// joint teacher's fingerprint; existing valid targets are reused as they are.
DistillTargets extract_distill_targets(fusion::JointTeacher& jt, const data::LabeledDataset& d,
                                       std::span<const std::string> levels, const fusion::EmbeddingCache& features,
                                       const std::filesystem::path& cache_root);
/// Targets from a single individual teacher (classic one-teacher distillation).
DistillTargets extract_teacher_targets(models::Model& teacher, const data::LabeledDataset& d,
                                       std::span<const std::string> levels);
DistillTargets load_targets(const fusion::EmbeddingCache& cache, const std::string& dataset,
                            std::span<const std::string> levels);
void store_targets(fusion::EmbeddingCache& cache, const DistillTargets& t);

struct StudentRun {
    models::Model model;
    training::TrainLog log;
    std::size_t adaptor_params = 0;
};

/// Trains a freshly initialized student end to end with kd_loss. Adaptors are
/// trained alongside and discarded; the returned model has the bare student spec.
StudentRun train_student(const models::ModelSpec& spec, const data::LabeledDataset& d, const DistillTargets& targets,
                         const KDConfig& kd, const training::TrainConfig& cfg, std::uint64_t seed,
                         const std::function<void(const training::EpochLog&)>& on_epoch = {});

std::vector<std::string> component_names(std::span<const std::string> levels);

}  // namespace mlfd::distill
