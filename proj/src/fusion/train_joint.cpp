#include "mlfd/error.hpp"
#include "mlfd/fusion.hpp"

namespace mlfd::fusion {

std::string teacher_level_id(std::size_t teacher) { return "teacher" + std::to_string(teacher); }

namespace {

constexpr data::Split kSplits[] = {data::Split::Train, data::Split::Val, data::Split::Test};

void require_owner(JointTeacher& jt, const EmbeddingCache& cache) {
    const auto expected = jt.teacher_hash();
    if (cache.owner_hash() != expected)
        throw StaleCacheError("embedding cache " + cache.dir().string() + " belongs to teachers " +
                              cache.owner_hash() + ", current teachers hash to " + expected);
}

/// Cached fusion-level features of every teacher for one split, aligned with the split order.
std::vector<Tensor> cached_features(JointTeacher& jt, const data::LabeledDataset& d, data::Split split,
                                    const EmbeddingCache& cache) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < jt.teacher_count(); ++i) {
        const auto level = teacher_level_id(i);
        if (!cache.has(d.name, split, level))
            throw PreconditionError("embedding cache lacks " + d.name + "/" + data::to_string(split) + " for " + level +
                                    "; run build-cache first");
        if (cache.samples(d.name, split, level) != d.split(split))
            throw CorruptionError("cached sample order for " + d.name + "/" + data::to_string(split) +
                                  " does not match the dataset split");
        out.push_back(cache.get(d.name, split, level));
    }
    return out;
}

training::EvalResult evaluate_features(JointTeacher& jt, const std::vector<Tensor>& feats,
                                       std::span<const std::size_t> labels, std::size_t head) {
    std::vector<Tensor> parts;
    const std::size_t n = labels.size(), chunk = 250;
    for (std::size_t b = 0; b < n; b += chunk) {
        Tape tape(false);
        std::vector<Var> vars;
        for (const auto& f : feats) vars.push_back(tape.constant(f.row_range(b, std::min(n, b + chunk))));
        parts.push_back(jt.forward_cached(tape, vars, head, {}, models::RunContext{}).logits.value());
    }
    return training::evaluate_logits(stack_rows(parts), labels);
}

std::vector<std::size_t> split_labels(const data::LabeledDataset& d, data::Split split) {
    std::vector<std::size_t> out;
    for (auto i : d.split(split)) out.push_back(d.labels[i]);
    return out;
}

struct CachedSet {
    const data::LabeledDataset* d;
    std::size_t head;
    std::vector<Tensor> train, val, test;
    std::vector<std::size_t> val_labels, test_labels;
};

CachedSet load_set(JointTeacher& jt, const data::LabeledDataset& d, std::size_t head, const EmbeddingCache& cache) {
    CachedSet s{&d, head, cached_features(jt, d, data::Split::Train, cache),
                cached_features(jt, d, data::Split::Val, cache), cached_features(jt, d, data::Split::Test, cache),
                split_labels(d, data::Split::Val), split_labels(d, data::Split::Test)};
    return s;
}

training::Task make_task(JointTeacher& jt, const CachedSet& s) {
    return training::Task{s.d, [&jt, &s](Tape& tape, const data::Batch& b, const models::RunContext& ctx,
                                         std::vector<double>& comps) {
                              std::vector<Var> vars;
                              for (const auto& f : s.train) vars.push_back(tape.constant(f.rows(b.positions)));
                              Var loss = training::hard_ce(jt.forward_cached(tape, vars, s.head, {}, ctx).logits,
                                                           b.one_hot);
                              comps = {loss.value().item()};
                              return loss;
                          }};
}

std::vector<training::TaskEval> evaluate_sets(JointTeacher& jt, std::span<const CachedSet> sets) {
    std::vector<training::TaskEval> out;
    for (const auto& s : sets) {
        training::TaskEval e;
        e.val_acc1 = s.val_labels.empty() ? 0.0 : evaluate_features(jt, s.val, s.val_labels, s.head).acc1;
        e.test = evaluate_features(jt, s.test, s.test_labels, s.head);
        out.push_back(e);
    }
    return out;
}

}  // namespace

void precompute_teacher_embeddings(JointTeacher& jt, std::span<const data::LabeledDataset> datasets,
                                   EmbeddingCache& cache) {
    require_owner(jt, cache);
    for (const auto& d : datasets)
        for (auto split : kSplits) {
            const auto& ids = d.split(split);
            if (ids.empty()) continue;
            Tensor inputs;
            for (std::size_t i = 0; i < jt.teacher_count(); ++i) {
                const auto level = teacher_level_id(i);
                if (cache.has(d.name, split, level)) continue;
                if (inputs.empty()) inputs = d.inputs.rows(ids);
                cache.put(d.name, split, level, ids, jt.backbone_features(i, inputs));
            }
        }
}

training::TrainLog train_joint_teacher(JointTeacher& jt, std::span<const data::LabeledDataset> datasets,
                                       const EmbeddingCache& cache, const training::TrainConfig& cfg,
                                       std::uint64_t seed,
                                       const std::function<void(const training::EpochLog&)>& on_epoch) {
    require_owner(jt, cache);
    if (datasets.empty()) throw PreconditionError("joint teacher training needs datasets");
    std::vector<CachedSet> sets;
    sets.reserve(datasets.size());
    for (const auto& d : datasets) sets.push_back(load_set(jt, d, jt.dataset_index(d.name), cache));
    std::vector<training::Task> tasks;
    for (const auto& s : sets) tasks.push_back(make_task(jt, s));
    training::TrainHooks hooks;
    hooks.evaluate = [&] { return evaluate_sets(jt, sets); };
    hooks.on_epoch = on_epoch;
    return training::train_rounds(tasks, jt.trainable_parameters(), jt.buffers(), cfg, seed, {"loss_ce"}, hooks);
}

training::EvalResult evaluate_joint(JointTeacher& jt, const data::LabeledDataset& d, std::size_t head,
                                    const EmbeddingCache& cache, data::Split split) {
    require_owner(jt, cache);
    return evaluate_features(jt, cached_features(jt, d, split, cache), split_labels(d, split), head);
}

training::TrainLog train_added_head(JointTeacher& jt, std::size_t head, const data::LabeledDataset& d,
                                    const EmbeddingCache& cache, const training::TrainConfig& cfg,
                                    std::uint64_t seed) {
    require_owner(jt, cache);
    auto all = jt.trainable_parameters();
    auto mine = jt.head_parameters(head);
    std::vector<bool> was(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        was[i] = all[i]->frozen;
        all[i]->frozen = std::find(mine.begin(), mine.end(), all[i]) == mine.end();
    }
    // Batchnorm buffers stay fixed: the trunk runs in eval mode while only the head learns.
    std::vector<CachedSet> sets{load_set(jt, d, head, cache)};
    training::Task task{&d, [&jt, &sets](Tape& tape, const data::Batch& b, const models::RunContext& ctx,
                                         std::vector<double>& comps) {
                            const auto& s = sets.front();
                            std::vector<Var> vars;
                            for (const auto& f : s.train) vars.push_back(tape.constant(f.rows(b.positions)));
                            models::RunContext frozen_ctx = ctx;
                            frozen_ctx.mode = Mode::Eval;
                            auto out = jt.forward_cached(tape, vars, s.head, {}, frozen_ctx);
                            Var loss = training::hard_ce(out.logits, b.one_hot);
                            comps = {loss.value().item()};
                            return loss;
                        }};
    training::TrainHooks hooks;
    hooks.evaluate = [&] { return evaluate_sets(jt, sets); };
    training::TrainLog log;
    try {
        log = training::train_rounds(std::span(&task, 1), mine, {}, cfg, seed, {"loss_ce"}, hooks);
    } catch (...) {
        for (std::size_t i = 0; i < all.size(); ++i) all[i]->frozen = was[i];
        throw;
    }
    for (std::size_t i = 0; i < all.size(); ++i) all[i]->frozen = was[i];
    return log;
}

}  // namespace mlfd::fusion
