#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::pipeline {

MultiHeadModel::MultiHeadModel(const models::ModelSpec& backbone, std::span<const std::size_t> classes,
                               std::uint64_t seed) {
    backbone.validate();
    if (classes.size() < 2) throw ConfigError("multi-head baseline needs at least two datasets");
    body_ = models::LayerStack(backbone.input_shape, backbone.layers, seed, "body.");
    const std::size_t width = body_.output_shape()[0];
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const std::string base = "head." + std::to_string(k) + ".";
        head_w_.emplace_back(base + "weight",
                             xavier_init(width, classes[k], derive_seed(seed, backbone.layers.size(), k)));
        head_b_.emplace_back(base + "bias", Tensor({classes[k]}, 0.0));
    }
}

Var MultiHeadModel::forward(Tape& tape, Var x, std::size_t head, const models::RunContext& ctx) {
    if (head >= head_w_.size()) throw QueryError("multi-head model has no head " + std::to_string(head));
    Var e = body_.run(tape, x, ctx);
    return ops::bias_add(ops::matmul(e, tape.param(head_w_[head])), tape.param(head_b_[head]));
}

Tensor MultiHeadModel::predict(const Tensor& inputs, std::size_t head) {
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < inputs.dim(0); b += 250) {
        Tape tape(false);
        Var x = tape.constant(inputs.row_range(b, std::min(inputs.dim(0), b + 250)));
        parts.push_back(forward(tape, x, head, models::RunContext{}).value());
    }
    return stack_rows(parts);
}

std::vector<Parameter*> MultiHeadModel::parameters() {
    auto out = body_.parameters();
    for (std::size_t k = 0; k < head_w_.size(); ++k) {
        out.push_back(&head_w_[k]);
        out.push_back(&head_b_[k]);
    }
    return out;
}

std::size_t MultiHeadModel::backbone_params() const { return models::count_params(body_.parameters()); }

std::size_t MultiHeadModel::head_params(std::size_t head) const {
    return head_w_.at(head).value.size() + head_b_.at(head).value.size();
}

std::vector<Tensor> multi_head_round_gradients(MultiHeadModel& model, std::span<const data::Batch> batches,
                                               bool accumulate) {
    auto params = model.parameters();
    for (auto* p : params) p->zero_grad();
    const double w = 1.0 / static_cast<double>(batches.size());
    const models::RunContext ctx{Mode::Train, 0, 0};
    if (accumulate) {
        for (std::size_t k = 0; k < batches.size(); ++k) {
            Tape tape;
            Var logits = model.forward(tape, tape.constant(batches[k].inputs), k, ctx);
            tape.backward(ops::scale(training::hard_ce(logits, batches[k].one_hot), w));
        }
    } else {
        Tape tape;
        Var total;
        for (std::size_t k = 0; k < batches.size(); ++k) {
            Var logits = model.forward(tape, tape.constant(batches[k].inputs), k, ctx);
            Var l = ops::scale(training::hard_ce(logits, batches[k].one_hot), w);
            total = total.valid() ? ops::add(total, l) : l;
        }
        tape.backward(total);
    }
    std::vector<Tensor> grads;
    for (auto* p : params) {
        grads.push_back(p->grad);
        p->zero_grad();
    }
    return grads;
}

BaselineResult train_multi_head(MultiHeadModel& model, std::span<const data::LabeledDataset> datasets,
                                const training::TrainConfig& cfg, std::uint64_t seed) {
    if (datasets.size() != model.heads()) throw ConfigError("multi-head model and dataset count disagree");
    std::vector<training::Task> tasks;
    for (std::size_t k = 0; k < datasets.size(); ++k)
        tasks.push_back({&datasets[k], [&model, k](Tape& tape, const data::Batch& b, const models::RunContext& ctx,
                                                   std::vector<double>& comps) {
                             Var loss = training::hard_ce(model.forward(tape, tape.constant(b.inputs), k, ctx),
                                                          b.one_hot);
                             comps = {loss.value().item()};
                             return loss;
                         }});
    auto eval_head = [&](std::size_t k, data::Split split) {
        const auto& d = datasets[k];
        const auto& ids = d.split(split);
        std::vector<std::size_t> labels;
        for (auto i : ids) labels.push_back(d.labels[i]);
        return training::evaluate_logits(model.predict(d.inputs.rows(ids), k), labels);
    };
    training::TrainHooks hooks;
    hooks.evaluate = [&] {
        std::vector<training::TaskEval> out;
        for (std::size_t k = 0; k < datasets.size(); ++k)
            out.push_back({eval_head(k, data::Split::Val).acc1, eval_head(k, data::Split::Test)});
        return out;
    };
    BaselineResult r;
    r.log = training::train_rounds(tasks, model.parameters(), model.buffers(), cfg, seed, {"loss_ce"}, hooks);
    for (std::size_t k = 0; k < datasets.size(); ++k) r.test.push_back(eval_head(k, data::Split::Test));
    return r;
}

UnionDataset make_union(std::span<const data::LabeledDataset> datasets) {
    if (datasets.size() < 2) throw ConfigError("joint-head baseline needs at least two datasets");
    UnionDataset u;
    u.merged.name = "union";
    std::vector<Tensor> inputs;
    std::size_t rows = 0, classes = 0;
    for (const auto& d : datasets) {
        if (d.sample_shape() != datasets[0].sample_shape())
            throw ConfigError("joint-head baseline needs one input shape; " + d.name + " has " +
                              shape_str(d.sample_shape()));
        u.offsets.push_back(classes);
        u.row_start.push_back(rows);
        for (auto y : d.labels) u.merged.labels.push_back(classes + y);
        for (auto i : d.train) u.merged.train.push_back(rows + i);
        for (auto i : d.val) u.merged.val.push_back(rows + i);
        for (auto i : d.test) u.merged.test.push_back(rows + i);
        inputs.push_back(d.inputs);
        rows += d.size();
        classes += d.num_classes;
    }
    u.merged.inputs = stack_rows(inputs);
    u.merged.num_classes = classes;
    u.merged.validate();
    return u;
}

std::vector<training::EvalResult> evaluate_union(models::Model& model, const UnionDataset& u,
                                                 std::span<const data::LabeledDataset> datasets) {
    if (model.spec().classes != u.merged.num_classes)
        throw DimensionError("joint-head model has " + std::to_string(model.spec().classes) + " classes, union has " +
                             std::to_string(u.merged.num_classes));
    std::vector<training::EvalResult> out;
    for (std::size_t k = 0; k < datasets.size(); ++k) {
        const auto& d = datasets[k];
        std::vector<std::size_t> labels;
        for (auto i : d.test) labels.push_back(u.offsets[k] + d.labels[i]);
        out.push_back(training::evaluate_logits(model.predict(d.inputs.rows(d.test)), labels));
    }
    return out;
}

}  // namespace mlfd::pipeline
