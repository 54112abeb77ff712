#include <chrono>

#include "mlfd/error.hpp"
#include "mlfd/rng.hpp"
#include "mlfd/training.hpp"

namespace mlfd::training {

Var hard_ce(Var logits, const Tensor& one_hot) {
    Tape& tape = logits.tape();
    return ops::cross_entropy(ops::softmax_with_temperature(logits, 1.0), tape.constant(one_hot));
}

namespace {

struct Snapshot {
    std::vector<Tensor> params;
    std::vector<Tensor> buffers;
};

Snapshot take(const std::vector<Parameter*>& params, const std::vector<std::pair<std::string, Tensor*>>& buffers) {
    Snapshot s;
    for (auto* p : params) s.params.push_back(p->value);
    for (const auto& b : buffers) s.buffers.push_back(*b.second);
    return s;
}

void restore(const Snapshot& s, const std::vector<Parameter*>& params,
             const std::vector<std::pair<std::string, Tensor*>>& buffers) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.params[i];
    for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].second = s.buffers[i];
}

}  // namespace

TrainLog train_rounds(std::span<Task> tasks, std::vector<Parameter*> params,
                      std::vector<std::pair<std::string, Tensor*>> buffers, const TrainConfig& cfg,
                      std::uint64_t seed, std::vector<std::string> component_names, const TrainHooks& hooks) {
    cfg.validate();
    if (tasks.empty()) throw PreconditionError("training needs at least one dataset");
    const auto started = std::chrono::steady_clock::now();
    const std::size_t m = tasks.size();
    Optimizer opt(cfg.optimizer);
    for (auto* p : params) p->zero_grad();

    std::vector<data::BatchPlan> plans(m);
    std::vector<std::size_t> batches(m);
    std::size_t rounds = 0;
    for (std::size_t t = 0; t < m; ++t) {
        if (!tasks[t].dataset || tasks[t].dataset->train.empty())
            throw PreconditionError("training task " + std::to_string(t) + " has no training samples");
        plans[t].batch_size = cfg.batch_size;
        plans[t].shuffle_seed = derive_seed(seed, "batches", t);
        batches[t] = (tasks[t].dataset->train.size() + cfg.batch_size - 1) / cfg.batch_size;
        rounds = std::max(rounds, batches[t]);
    }
    const double loss_scale = 1.0 / static_cast<double>(m * cfg.accumulation);
    const std::uint64_t dropout_root = derive_seed(seed, "dropout");

    TrainLog log;
    log.component_names = std::move(component_names);
    double best = -1.0;
    Snapshot best_state;
    std::uint64_t global_round = 0;

    for (std::size_t epoch = 0; epoch < cfg.policy.max_epochs; ++epoch) {
        EpochLog el;
        el.epoch = epoch;
        el.tasks.resize(m);
        std::vector<std::vector<std::vector<std::size_t>>> order(m);
        std::vector<std::size_t> cycle(m, 0);
        for (std::size_t t = 0; t < m; ++t)
            order[t] = data::batch_positions(tasks[t].dataset->train.size(), plans[t], epoch * 1024);
        std::vector<std::size_t> seen(m, 0);
        std::size_t pending = 0;
        for (std::size_t r = 0; r < rounds; ++r, ++global_round) {
            for (std::size_t t = 0; t < m; ++t) {
                const std::size_t b = r % batches[t];
                if (r > 0 && b == 0) {
                    ++cycle[t];
                    order[t] = data::batch_positions(tasks[t].dataset->train.size(), plans[t], epoch * 1024 + cycle[t]);
                }
                const data::Batch batch = data::make_batch(*tasks[t].dataset, data::Split::Train, order[t][b]);
                models::RunContext ctx{Mode::Train, derive_seed(dropout_root, t), global_round};
                Tape tape;
                std::vector<double> comps;
                Var loss = tasks[t].loss(tape, batch, ctx, comps);
                if (loss_scale != 1.0) loss = ops::scale(loss, loss_scale);
                tape.backward(loss);
                auto& acc = el.tasks[t].components;
                if (acc.size() < comps.size()) acc.resize(comps.size(), 0.0);
                for (std::size_t c = 0; c < comps.size(); ++c) acc[c] += comps[c];
                ++seen[t];
            }
            if (++pending == cfg.accumulation) {
                opt.step(params);
                pending = 0;
            }
        }
        if (pending > 0) opt.step(params);
        for (std::size_t t = 0; t < m; ++t)
            for (double& c : el.tasks[t].components) c /= static_cast<double>(seen[t]);

        if (hooks.evaluate) {
            const auto evals = hooks.evaluate();
            double sum = 0.0;
            for (std::size_t t = 0; t < m && t < evals.size(); ++t) {
                el.tasks[t].val_acc1 = evals[t].val_acc1;
                el.tasks[t].test_acc1 = evals[t].test.acc1;
                el.tasks[t].test_acc5 = evals[t].test.acc5;
                sum += evals[t].val_acc1;
            }
            el.mean_val_acc1 = sum / static_cast<double>(m);
        }
        log.epochs.push_back(el);
        if (hooks.on_epoch) hooks.on_epoch(el);

        if (el.mean_val_acc1 >= best) {
            best = el.mean_val_acc1;
            log.best_epoch = epoch;
            best_state = take(params, buffers);
        }
        if (epoch + 1 >= cfg.policy.min_epochs && epoch - log.best_epoch >= cfg.policy.patience) {
            log.stopped_early = epoch + 1 < cfg.policy.max_epochs;
            break;
        }
    }
    restore(best_state, params, buffers);
    log.optimizer_steps = opt.step_count();
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return log;
}

TrainLog train_classifier(models::Model& model, const data::LabeledDataset& d, const TrainConfig& cfg,
                          std::uint64_t seed) {
    Task task{&d, [&](Tape& tape, const data::Batch& b, const models::RunContext& ctx, std::vector<double>& comps) {
                  Var x = tape.constant(b.inputs);
                  Var loss = hard_ce(model.forward(tape, x, {}, ctx).logits, b.one_hot);
                  comps = {loss.value().item()};
                  return loss;
              }};
    TrainHooks hooks;
    hooks.evaluate = [&] {
        return std::vector<TaskEval>{{evaluate(model, d, data::Split::Val).acc1, evaluate(model, d)}};
    };
    return train_rounds(std::span(&task, 1), model.parameters(), model.buffers(), cfg, seed, {"loss_ce"}, hooks);
}

}  // namespace mlfd::training
