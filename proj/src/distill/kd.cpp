#include <cmath>

#include "mlfd/distill.hpp"
#include "mlfd/error.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::distill {

void KDConfig::validate(std::size_t levels) const {
    if (!(alpha >= 0)) throw ConfigError("kd: alpha must be >= 0");
    if (!(tau > 0)) throw ConfigError("kd: tau must be > 0");
    for (double b : betas)
        if (!(b >= 0)) throw ConfigError("kd: every beta must be >= 0");
    if (betas.size() != levels)
        throw ConfigError("kd: " + std::to_string(betas.size()) + " betas for " + std::to_string(levels) + " levels");
}

void DistillTargets::validate() const {
    if (probs.rank() != 2 || probs.dim(0) != samples.size())
        throw DimensionError("distill targets for " + dataset + ": probs " + shape_str(probs.shape()) + " vs " +
                             std::to_string(samples.size()) + " samples");
    for (std::size_t i = 0; i < probs.dim(0); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < probs.dim(1); ++c) s += probs[i * probs.dim(1) + c];
        if (std::abs(s - 1.0) > 1e-9) throw NumericError("distill targets for " + dataset + ": row " + std::to_string(i) + " is not stochastic");
    }
    if (levels.size() != embeddings.size()) throw DimensionError("distill targets: one embedding tensor per level");
    for (const auto& e : embeddings)
        if (e.rank() < 2 || e.dim(0) != samples.size())
            throw DimensionError("distill targets for " + dataset + ": embedding rows disagree with samples");
}

Tensor temper(const Tensor& probs, double tau) {
    Tensor logp(probs.shape());
    for (std::size_t i = 0; i < probs.size(); ++i) logp[i] = std::log(probs[i]);
    return softmax(logp, tau);
}

KDLoss kd_loss(const Tensor& one_hot, Var student_logits, std::span<const Var> student_embeddings,
               const Tensor& teacher_probs, std::span<const Tensor> teacher_embeddings, const KDConfig& cfg) {
    cfg.validate(teacher_embeddings.size());
    if (student_embeddings.size() != teacher_embeddings.size())
        throw ConfigError("kd: " + std::to_string(student_embeddings.size()) + " student levels for " +
                          std::to_string(teacher_embeddings.size()) + " teacher levels");
    Tape& tape = student_logits.tape();
    KDLoss out;
    Var total = training::hard_ce(student_logits, one_hot);
    out.parts.hard_ce = total.value().item();

    Var soft = ops::scale(ops::cross_entropy(ops::softmax_with_temperature(student_logits, cfg.tau),
                                             tape.constant(temper(teacher_probs, cfg.tau))),
                          cfg.tau * cfg.tau);
    out.parts.soft_ce = soft.value().item();
    if (cfg.alpha != 0.0) total = ops::add(total, ops::scale(soft, cfg.alpha));

    for (std::size_t c = 0; c < teacher_embeddings.size(); ++c) {
        Var mse = ops::mse(student_embeddings[c], tape.constant(teacher_embeddings[c]));
        out.parts.mse.push_back(mse.value().item());
        if (cfg.betas[c] != 0.0) total = ops::add(total, ops::scale(mse, cfg.betas[c]));
    }
    out.parts.total = total.value().item();
    out.total = total;
    return out;
}

StudentAdaptor::StudentAdaptor(std::string level, Shape student_shape, Shape teacher_shape, std::uint64_t seed)
    : level_(std::move(level)), student_shape_(std::move(student_shape)), teacher_shape_(std::move(teacher_shape)) {
    const std::string base = "student_adaptor." + level_ + ".";
    const auto& s = student_shape_;
    const auto& t = teacher_shape_;
    if (s == t) {
        kind_ = Kind::Identity;
    } else if (s.size() == 3 && t.size() == 3) {
        if (s[1] < t[1] || s[1] % t[1] != 0 || s[2] % t[2] != 0 || s[1] / t[1] != s[2] / t[2])
            throw ConfigError("student level '" + level_ + "' " + shape_str(s) + " cannot be pooled to teacher " +
                              shape_str(t));
        kind_ = Kind::Pointwise;
        pool_ = s[1] / t[1];
        weight_ = Parameter(base + "weight", xavier_normal({t[0], s[0], 1, 1}, s[0], t[0], seed));
        bias_ = Parameter(base + "bias", Tensor({t[0]}, 0.0));
    } else if (t.size() == 1) {
        kind_ = s.size() == 1 ? Kind::Linear : Kind::FlattenLinear;
        weight_ = Parameter(base + "weight", xavier_init(numel(s), t[0], seed));
        bias_ = Parameter(base + "bias", Tensor({t[0]}, 0.0));
    } else {
        throw ConfigError("student level '" + level_ + "' " + shape_str(s) + " cannot be mapped to teacher " +
                          shape_str(t));
    }
}

Var StudentAdaptor::apply(Tape& tape, Var x) {
    switch (kind_) {
        case Kind::Identity: return x;
        case Kind::Pointwise:
            if (pool_ > 1) x = ops::avg_pool2d(x, pool_);
            return ops::bias_add(ops::conv2d(x, tape.param(weight_), 1, 0), tape.param(bias_));
        case Kind::FlattenLinear: x = ops::flatten(x); [[fallthrough]];
        case Kind::Linear: return ops::bias_add(ops::matmul(x, tape.param(weight_)), tape.param(bias_));
    }
    return x;
}

std::vector<Parameter*> StudentAdaptor::parameters() {
    if (kind_ == Kind::Identity) return {};
    return {&weight_, &bias_};
}

std::vector<std::string> component_names(std::span<const std::string> levels) {
    std::vector<std::string> out{"loss_total", "loss_ce", "loss_soft"};
    for (const auto& l : levels) out.push_back("loss_mse_" + l);
    return out;
}

StudentRun train_student(const models::ModelSpec& spec, const data::LabeledDataset& d, const DistillTargets& targets,
                         const KDConfig& kd, const training::TrainConfig& cfg, std::uint64_t seed,
                         const std::function<void(const training::EpochLog&)>& on_epoch) {
    targets.validate();
    kd.validate(targets.levels.size());
    for (const auto& l : targets.levels)
        if (!spec.taps.contains(l))
            throw ConfigError("distillation level '" + l + "' is not a tap of student " + spec.name);
    if (targets.samples != d.train)
        throw PreconditionError("distillation targets for " + targets.dataset + " do not cover the training split of " +
                                d.name);
    if (targets.probs.dim(1) != spec.classes)
        throw DimensionError("teacher targets have " + std::to_string(targets.probs.dim(1)) +
                             " classes, student head has " + std::to_string(spec.classes));

    StudentRun run{models::Model(spec, seed), {}, 0};
    models::Model& model = run.model;
    const auto shapes = spec.boundary_shapes();
    std::vector<StudentAdaptor> adaptors;
    for (std::size_t c = 0; c < targets.levels.size(); ++c) {
        const auto& level = targets.levels[c];
        Shape teacher_shape(targets.embeddings[c].shape().begin() + 1, targets.embeddings[c].shape().end());
        adaptors.emplace_back(level, shapes[spec.taps.boundary(level)], teacher_shape,
                              derive_seed(seed, "student-adaptor", c));
    }
    auto params = model.parameters();
    for (auto& a : adaptors)
        for (auto* p : a.parameters()) {
            params.push_back(p);
            run.adaptor_params += p->value.size();
        }

    training::Task task{&d, [&](Tape& tape, const data::Batch& b, const models::RunContext& ctx,
                               std::vector<double>& comps) {
                            Var x = tape.constant(b.inputs);
                            auto out = model.forward(tape, x, targets.levels, ctx);
                            std::vector<Var> adapted;
                            std::vector<Tensor> teacher;
                            for (std::size_t c = 0; c < targets.levels.size(); ++c) {
                                adapted.push_back(adaptors[c].apply(tape, out.embeddings.at(targets.levels[c])));
                                teacher.push_back(targets.embeddings[c].rows(b.positions));
                            }
                            auto loss = kd_loss(b.one_hot, out.logits, adapted, targets.probs.rows(b.positions),
                                                teacher, kd);
                            comps = {loss.parts.total, loss.parts.hard_ce, loss.parts.soft_ce};
                            comps.insert(comps.end(), loss.parts.mse.begin(), loss.parts.mse.end());
                            return loss.total;
                        }};
    training::TrainHooks hooks;
    hooks.evaluate = [&] {
        return std::vector<training::TaskEval>{
            {training::evaluate(model, d, data::Split::Val).acc1, training::evaluate(model, d)}};
    };
    hooks.on_epoch = on_epoch;
    run.log = training::train_rounds(std::span(&task, 1), params, model.buffers(), cfg, seed,
                                     component_names(targets.levels), hooks);
    return run;
}

}  // namespace mlfd::distill
