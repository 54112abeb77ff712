#include "mlfd/distill.hpp"
#include "mlfd/error.hpp"

namespace mlfd::distill {

namespace {

const std::string kProbs = "probs";

}  // namespace

void store_targets(fusion::EmbeddingCache& cache, const DistillTargets& t) {
    t.validate();
    cache.put(t.dataset, data::Split::Train, kProbs, t.samples, t.probs);
    for (std::size_t c = 0; c < t.levels.size(); ++c)
        cache.put(t.dataset, data::Split::Train, t.levels[c], t.samples, t.embeddings[c]);
}

DistillTargets load_targets(const fusion::EmbeddingCache& cache, const std::string& dataset,
                            std::span<const std::string> levels) {
    DistillTargets t;
    t.dataset = dataset;
    t.samples = cache.samples(dataset, data::Split::Train, kProbs);
    t.probs = cache.get(dataset, data::Split::Train, kProbs);
    for (const auto& l : levels) {
        if (cache.samples(dataset, data::Split::Train, l) != t.samples)
            throw CorruptionError("cached targets for " + dataset + " disagree on sample order at level " + l);
        t.levels.push_back(l);
        t.embeddings.push_back(cache.get(dataset, data::Split::Train, l));
    }
    t.validate();
    return t;
}

DistillTargets extract_distill_targets(fusion::JointTeacher& jt, const data::LabeledDataset& d,
                                       std::span<const std::string> levels, const fusion::EmbeddingCache& features,
                                       const std::filesystem::path& cache_root) {
    const std::size_t head = jt.dataset_index(d.name);
    for (const auto& l : levels) (void)jt.taps().boundary(l);
    fusion::EmbeddingCache store(cache_root, jt.fingerprint(), "targets");
    bool complete = store.has(d.name, data::Split::Train, kProbs);
    for (const auto& l : levels) complete = complete && store.has(d.name, data::Split::Train, l);
    if (complete) return load_targets(store, d.name, levels);

    if (features.owner_hash() != jt.teacher_hash())
        throw StaleCacheError("embedding cache " + features.dir().string() + " does not belong to this joint teacher");
    std::vector<Tensor> feats;
    for (std::size_t i = 0; i < jt.teacher_count(); ++i) {
        const auto level = fusion::teacher_level_id(i);
        if (features.samples(d.name, data::Split::Train, level) != d.train)
            throw CorruptionError("cached features for " + d.name + " do not match its training split");
        feats.push_back(features.get(d.name, data::Split::Train, level));
    }
    const std::size_t n = d.train.size(), chunk = 250;
    std::vector<Tensor> logits;
    std::vector<std::vector<Tensor>> embs(levels.size());
    for (std::size_t b = 0; b < n; b += chunk) {
        Tape tape(false);
        std::vector<Var> vars;
        for (const auto& f : feats) vars.push_back(tape.constant(f.row_range(b, std::min(n, b + chunk))));
        auto out = jt.forward_cached(tape, vars, head, levels, models::RunContext{});
        logits.push_back(out.logits.value());
        for (std::size_t c = 0; c < levels.size(); ++c) embs[c].push_back(out.embeddings.at(levels[c]).value());
    }
    DistillTargets t;
    t.dataset = d.name;
    t.samples = d.train;
    t.probs = softmax(stack_rows(logits));
    for (std::size_t c = 0; c < levels.size(); ++c) {
        t.levels.push_back(levels[c]);
        t.embeddings.push_back(stack_rows(embs[c]));
    }
    store_targets(store, t);
    return t;
}

DistillTargets extract_teacher_targets(models::Model& teacher, const data::LabeledDataset& d,
                                       std::span<const std::string> levels) {
    const Tensor inputs = d.inputs.rows(d.train);
    DistillTargets t;
    t.dataset = d.name;
    t.samples = d.train;
    t.probs = softmax(teacher.predict(inputs));
    for (const auto& l : levels) {
        t.levels.push_back(l);
        t.embeddings.push_back(teacher.embed(inputs, l));
    }
    t.validate();
    return t;
}

}  // namespace mlfd::distill
