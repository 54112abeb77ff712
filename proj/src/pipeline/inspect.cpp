#include <algorithm>
#include <fstream>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"

namespace mlfd::pipeline {

namespace fs = std::filesystem;

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

std::vector<training::MetricsRecord> Experiment::evaluate_all(const std::string& model_filter) {
    std::vector<fs::path> runs;
    if (fs::exists(root_))
        for (const auto& e : fs::recursive_directory_iterator(root_))
            if (e.is_regular_file() && e.path().filename() == "stamp" &&
                fs::exists(e.path().parent_path() / "result.csv"))
                runs.push_back(e.path().parent_path());
    std::sort(runs.begin(), runs.end());

    std::vector<training::MetricsRecord> out;
    for (const auto& dir : runs) {
        const auto stored = read_results_file(dir / "result.csv");
        if (stored.empty()) continue;
        const std::string& model = stored.front().model;
        if (!model_filter.empty() && model != model_filter) continue;
        const fs::path ckpt = dir / "checkpoint";
        std::vector<training::EvalResult> fresh;
        if (model == "joint_teacher") {
            auto jt = fusion::load_joint_teacher(ckpt);
            const auto cache = teacher_cache(jt);
            for (const auto& r : stored) {
                const auto& d = dataset_named(r.dataset);
                fresh.push_back(fusion::evaluate_joint(jt, d, jt.dataset_index(d.name), cache));
            }
        } else if (model == "multi_head") {
            std::ifstream in(ckpt / "multi_head.json");
            if (!in) throw PreconditionError("multi-head checkpoint lacks multi_head.json in " + ckpt.string());
            nlohmann::json j;
            in >> j;
            const auto classes = j.at("classes").get<std::vector<std::size_t>>();
            MultiHeadModel m(models::ModelSpec::from_json(j.at("backbone")), classes, 0);
            const auto params = m.parameters();
            const auto bufs = m.buffers();
            models::load_parameters(params, bufs, ckpt);
            for (std::size_t k = 0; k < stored.size(); ++k) {
                const auto& d = dataset_named(stored[k].dataset);
                std::vector<std::size_t> labels;
                for (auto i : d.test) labels.push_back(d.labels[i]);
                fresh.push_back(training::evaluate_logits(m.predict(d.inputs.rows(d.test), k), labels));
            }
        } else if (model == "joint_head") {
            auto m = models::load_checkpoint(ckpt);
            const auto u = make_union(datasets());
            const auto all = evaluate_union(m, u, datasets());
            for (const auto& r : stored)
                for (std::size_t k = 0; k < datasets().size(); ++k)
                    if (datasets()[k].name == r.dataset) fresh.push_back(all[k]);
        } else {
            auto m = models::load_checkpoint(ckpt);
            for (const auto& r : stored) fresh.push_back(training::evaluate(m, dataset_named(r.dataset)));
        }
        for (std::size_t k = 0; k < stored.size(); ++k) {
            auto r = stored[k];
            r.acc1 = fresh[k].acc1;
            r.acc5 = fresh[k].acc5;
            r.k_reduced = fresh[k].k_reduced;
            r.wall_seconds = 0.0;
            r.validate();
            out.push_back(std::move(r));
        }
    }
    if (!model_filter.empty() && out.empty())
        throw QueryError("no finished run for model '" + model_filter + "' under " + root_.string());
    return out;
}

void Experiment::dump_embeddings(const std::string& model, const std::string& level, data::Split split,
                                 const fs::path& out) {
    const std::uint64_t seed = seeds().front();
    const std::string label = taps_label(cfg_.levels);
    auto index_of = [&](const std::string& prefix) {
        try {
            const std::size_t k = std::stoul(model.substr(prefix.size()));
            if (k < 1 || k > cfg_.family.m) throw std::out_of_range("model index");
            return k - 1;
        } catch (const std::logic_error&) {
            throw QueryError("unknown model '" + model + "'");
        }
    };

    struct Block {
        std::string dataset;
        std::vector<std::size_t> samples;
        Tensor values;
    };
    std::vector<Block> blocks;
    auto from_model = [&](models::Model& m, const data::LabeledDataset& d) {
        if (!m.spec().taps.contains(level)) throw QueryError("model '" + model + "' has no level '" + level + "'");
        const auto& ids = d.split(split);
        blocks.push_back({d.name, ids, m.embed(d.inputs.rows(ids), level)});
    };

    if (model == "joint_teacher") {
        if (cfg_.variant == Variant::SingleDatasetKd) throw QueryError("this variant has no joint teacher");
        auto jt = load_joint(seed, joint_plan(cfg_.levels));
        (void)jt.taps().boundary(level);
        const auto cache = teacher_cache(jt);
        const std::string levels[] = {level};
        for (const auto& name : jt.spec().datasets) {
            const auto& d = dataset_named(name);
            std::vector<Tensor> feats;
            for (std::size_t i = 0; i < jt.teacher_count(); ++i)
                feats.push_back(cache.get(d.name, split, fusion::teacher_level_id(i)));
            const auto ids = cache.samples(d.name, split, fusion::teacher_level_id(0));
            Tape tape(false);
            std::vector<Var> vars;
            for (auto& f : feats) vars.push_back(tape.constant(f));
            auto o = jt.forward_cached(tape, vars, jt.dataset_index(name), levels, models::RunContext{});
            blocks.push_back({d.name, ids, o.embeddings.at(level).value()});
        }
    } else {
        RunDir rd = starts_with(model, "teacher_")   ? teacher_dir(index_of("teacher_"), seed)
                    : starts_with(model, "student_") ? student_dir(index_of("student_"), seed, label)
                    : starts_with(model, "baseline_")
                        ? RunDir(root_, {"baselines", model, "", seed})
                        : throw QueryError("unknown model '" + model +
                                           "' (expected teacher_K, student_K, baseline_K or joint_teacher)");
        if (!fs::exists(rd.path() / "stamp"))
            throw PreconditionError("model '" + model + "' has not been trained for seed " + std::to_string(seed));
        auto m = models::load_checkpoint(rd.checkpoint());
        const auto stored = rd.read_results();
        from_model(m, dataset_named(stored.at(0).dataset));
    }

    fs::create_directories(out);
    std::string index = csv_row(std::vector<std::string>{"dataset", "sample", "label", "file"});
    for (const auto& b : blocks) {
        const auto& d = dataset_named(b.dataset);
        fs::create_directories(out / b.dataset);
        for (std::size_t r = 0; r < b.samples.size(); ++r) {
            const std::string file = b.dataset + "/sample_" + std::to_string(b.samples[r]) + ".tnsr";
            Tensor row = b.values.row_range(r, r + 1);
            Shape shape(row.shape().begin() + 1, row.shape().end());
            save_tensor(out / file, row.reshaped(shape));
            index += csv_row(std::vector<std::string>{b.dataset, std::to_string(b.samples[r]),
                                                      std::to_string(d.labels[b.samples[r]]), file});
        }
    }
    std::ofstream(out / "index.csv", std::ios::binary | std::ios::trunc) << index;
    progress("dumped " + std::to_string(blocks.empty() ? 0 : blocks.front().samples.size()) + "+ embeddings to " +
             out.string());
}

}  // namespace mlfd::pipeline
