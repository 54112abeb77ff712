#include <algorithm>
#include <fstream>
#include <iostream>
#include <mutex>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::mutex progress_mu;

std::string hash_of(std::initializer_list<std::string> parts) {
    std::uint64_t h = fnv1a("mlfd-inputs");
    for (const auto& p : parts) h = fnv1a(p + '\x1f', h);
    return hex64(h);
}

json kd_json(const distill::KDConfig& kd) { return {{"alpha", kd.alpha}, {"betas", kd.betas}, {"tau", kd.tau}}; }

void log_epochs(const RunDir& rd, const training::TrainLog& log) {
    for (const auto& e : log.epochs) {
        std::string line = "epoch " + std::to_string(e.epoch) + " mean_val_acc1 " + format_fixed(e.mean_val_acc1);
        for (const auto& t : e.tasks) line += " test_acc1 " + format_fixed(t.test_acc1);
        rd.log(line);
    }
    rd.log("best_epoch " + std::to_string(log.best_epoch) + (log.stopped_early ? " (early stop)" : "") +
           " optimizer_steps " + std::to_string(log.optimizer_steps));
}

std::string backbone_checksum(fusion::JointTeacher& jt) {
    std::uint64_t h = fnv1a("backbones");
    for (const auto* p : jt.backbone_parameters()) h = fnv1a(hex64(tensor_checksum(p->value)), h);
    return hex64(h);
}

}  // namespace

Experiment::Experiment(ResolvedConfig cfg, Options opts)
    : resolved_(std::move(cfg)), cfg_(resolved_.experiment()), opts_(std::move(opts)) {
    cfg_.validate();
    if (opts_.jobs == 0) throw ConfigError("--jobs must be >= 1");
    root_ = opts_.out / cfg_.id;
}

fs::path Experiment::cache_root() const { return fusion::EmbeddingCache::resolve_root(root_ / "cache"); }

std::vector<std::uint64_t> Experiment::seeds() const {
    if (opts_.seed) return {*opts_.seed};
    return cfg_.seeds;
}

void Experiment::progress(const std::string& line) const {
    if (!opts_.progress) return;
    std::lock_guard lock(progress_mu);
    *opts_.progress << line << std::endl;
}

std::string Experiment::taps_label(const std::vector<std::string>& levels) {
    std::string s;
    for (std::size_t i = 0; i < levels.size(); ++i) s += (i ? "+" : "") + levels[i];
    return s;
}

std::string Experiment::stage_name(const std::string& base) const {
    return cfg_.variant == Variant::Standard ? base : base + "-" + to_string(cfg_.variant);
}

std::string Experiment::data_hash() const {
    return hash_of({resolved_.doc.at("data").dump(), std::to_string(cfg_.master_seed)});
}

// ---- data ----------------------------------------------------------------

void Experiment::gen_data() {
    const fs::path dir = root_ / "data";
    const std::string h = data_hash();
    std::ifstream stamp_in(dir / "stamp");
    std::string stamp;
    if (stamp_in && std::getline(stamp_in, stamp) && stamp == h) {
        datasets_.clear();
        for (std::size_t i = 0; i < cfg_.family.m; ++i)
            datasets_.push_back(data::load_dataset(dir / cfg_.family.dataset_name(i)));
        loaded_ = true;
        progress("data: up to date");
        return;
    }
    DirLock lock(dir);
    fs::remove(dir / "stamp");
    datasets_ = data::gen_synthetic_family(cfg_.family);
    for (const auto& d : datasets_) data::save_dataset(d, dir / d.name);
    std::ofstream(dir / "stamp") << h << "\n";
    loaded_ = true;
    progress("data: generated " + std::to_string(datasets_.size()) + " datasets");
}

const std::vector<data::LabeledDataset>& Experiment::datasets() {
    if (!loaded_) gen_data();
    return datasets_;
}

const data::LabeledDataset& Experiment::dataset_named(const std::string& name) {
    for (const auto& d : datasets())
        if (d.name == name) return d;
    throw QueryError("no dataset named '" + name + "'");
}

training::MetricsRecord Experiment::record(const RunInfo& info, const std::string& dataset,
                                           const training::EvalResult& r, std::size_t epoch, double wall) const {
    training::MetricsRecord m;
    m.experiment = cfg_.id;
    m.variant = to_string(cfg_.variant);
    m.stage = info.stage;
    m.model = info.model;
    m.dataset = dataset;
    m.taps = info.taps;
    m.seed = info.seed;
    m.acc1 = r.acc1;
    m.acc5 = r.acc5;
    m.k_reduced = r.k_reduced;
    m.epoch = epoch;
    m.wall_seconds = wall;
    m.validate();
    return m;
}

// ---- stage 1 -------------------------------------------------------------

std::vector<std::size_t> Experiment::teacher_datasets() const {
    std::vector<std::size_t> out(cfg_.family.m);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = cfg_.variant == Variant::SameDatasetTeacher ? cfg_.same_dataset_target : i;
    return out;
}

std::vector<std::size_t> Experiment::student_datasets() const {
    if (cfg_.variant == Variant::CrossDataset) return {cfg_.holdout};
    return iota_indices(cfg_.family.m);
}

RunDir Experiment::teacher_dir(std::size_t i, std::uint64_t seed) const {
    const bool own = cfg_.variant == Variant::SameArch || cfg_.variant == Variant::SameDatasetTeacher;
    return RunDir(root_, {own ? stage_name("teachers") : "teachers", "teacher_" + std::to_string(i + 1), "", seed});
}

std::string Experiment::teacher_input_hash(std::size_t i, std::uint64_t seed) {
    const auto& d = datasets().at(teacher_datasets()[i]);
    const auto spec = cfg_.teacher_spec(i, d);
    std::string pre = "trained";
    if (!cfg_.pretrained_teachers.empty())
        pre = models::checkpoint_fingerprint(cfg_.pretrained_teachers[i]);
    return hash_of({data_hash(), d.name, spec.hash(), resolved_.doc.at("train").at("teacher").dump(), pre,
                    std::to_string(cfg_.job_seed("teacher_" + std::to_string(i + 1), seed))});
}

void Experiment::train_teachers(std::uint64_t seed) {
    const auto& ds = datasets();
    const auto owner = teacher_datasets();
    std::vector<std::string> hashes;
    for (std::size_t i = 0; i < cfg_.family.m; ++i) hashes.push_back(teacher_input_hash(i, seed));
    parallel_for(cfg_.family.m, opts_.jobs, [&](std::size_t i) {
        RunDir rd = teacher_dir(i, seed);
        if (rd.up_to_date(hashes[i])) {
            progress(rd.info().model + " seed " + std::to_string(seed) + ": up to date");
            return;
        }
        DirLock lock(rd.path());
        rd.begin(hashes[i], resolved_);
        const auto& d = ds[owner[i]];
        const auto spec = cfg_.teacher_spec(i, d);
        training::EvalResult test;
        std::size_t epoch = 0;
        double wall = 0.0;
        models::Model model;
        if (!cfg_.pretrained_teachers.empty()) {
            const fs::path src = cfg_.pretrained_teachers[i];
            if (models::checkpoint_spec_hash(src) != spec.hash())
                throw ConfigError("pretrained teacher " + src.string() + " does not match the spec of teacher " +
                                  std::to_string(i + 1));
            model = models::load_checkpoint(src);
            rd.log("skipped: pretrained checkpoint " + src.string());
        } else {
            progress(rd.info().model + " seed " + std::to_string(seed) + ": training on " + d.name);
            model = models::build_model(spec, cfg_.job_seed(rd.info().model, seed));
            const auto log = training::train_classifier(model, d, cfg_.teacher_train, cfg_.job_seed(rd.info().model, seed));
            log_epochs(rd, log);
            const std::string names[] = {d.name};
            rd.write_curves(log, names);
            epoch = log.best_epoch;
            wall = log.wall_seconds;
        }
        test = training::evaluate(model, d);
        models::save_checkpoint(model, rd.checkpoint());
        const auto rec = record(rd.info(), d.name, test, epoch, wall);
        rd.write_results(std::span(&rec, 1));
        rd.log("test acc1 " + format_fixed(test.acc1) + " acc5 " + format_fixed(test.acc5));
        rd.finish(hashes[i]);
        progress(rd.info().model + " seed " + std::to_string(seed) + ": acc1 " + format_fixed(test.acc1));
    });
}

models::Model Experiment::load_teacher(std::size_t i, std::uint64_t seed) {
    RunDir rd = teacher_dir(i, seed);
    if (!rd.up_to_date(teacher_input_hash(i, seed)))
        throw PreconditionError("teacher " + std::to_string(i + 1) + " for seed " + std::to_string(seed) +
                                " is missing or out of date; run train-teacher first");
    return models::load_checkpoint(rd.checkpoint());
}

// ---- stage 2 -------------------------------------------------------------

Experiment::JointPlan Experiment::joint_plan(const std::vector<std::string>& levels, std::size_t m_limit) const {
    JointPlan p;
    const std::size_t m = cfg_.family.m;
    const std::size_t k = m_limit ? m_limit : m;
    for (std::size_t i = 0; i < k; ++i) {
        if (cfg_.variant == Variant::CrossDataset && i == cfg_.holdout) continue;
        p.teachers.push_back(i);
        p.datasets.push_back(i);
    }
    p.students = cfg_.variant == Variant::CrossDataset ? std::vector<std::size_t>{cfg_.holdout} : p.datasets;
    p.levels = levels;
    p.label = taps_label(levels);
    if (m_limit) p.label = "m=" + std::to_string(m_limit) + ":" + p.label;
    return p;
}

fusion::JointTeacherSpec Experiment::joint_spec(const JointPlan& plan) {
    const auto& ds = datasets();
    const auto owner = teacher_datasets();
    fusion::JointTeacherSpec s;
    for (auto t : plan.teachers) s.teachers.push_back(cfg_.teacher_spec(t, ds[owner[t]]));
    for (auto d : plan.datasets) {
        s.datasets.push_back(ds[d].name);
        s.classes.push_back(ds[d].num_classes);
    }
    s.levels = plan.levels;
    const auto ref = std::find(plan.teachers.begin(), plan.teachers.end(), cfg_.reference_teacher);
    s.reference = ref == plan.teachers.end() ? 0 : static_cast<std::size_t>(ref - plan.teachers.begin());
    s.dropout = cfg_.fusion_dropout;
    s.dense_dropout = cfg_.fusion_dense_dropout;
    s.validate();
    return s;
}

RunDir Experiment::joint_dir(std::uint64_t seed, const JointPlan& plan) const {
    return RunDir(root_, {stage_name("joint"), "joint_teacher", plan.label, seed});
}

std::string Experiment::joint_input_hash(std::uint64_t seed, const JointPlan& plan) {
    std::string teachers;
    for (auto t : plan.teachers) teachers += teacher_input_hash(t, seed);
    const bool head = cfg_.variant == Variant::CrossDataset;
    return hash_of({teachers, joint_spec(plan).hash(), resolved_.doc.at("train").at("joint").dump(),
                    head ? resolved_.doc.at("train").at("head").dump() + datasets()[cfg_.holdout].name : "",
                    std::to_string(cfg_.job_seed("joint:" + plan.label, seed))});
}

fusion::EmbeddingCache Experiment::teacher_cache(fusion::JointTeacher& jt) const {
    return fusion::EmbeddingCache(cache_root(), jt.teacher_hash());
}

void Experiment::build_cache(std::uint64_t seed, const std::vector<std::string>& levels) {
    auto limits = cfg_.variant == Variant::VaryM ? cfg_.vary_m : std::vector<std::size_t>{0};
    for (auto k : limits) {
        const auto plan = joint_plan(levels, k);
        std::vector<models::Model> teachers;
        for (auto t : plan.teachers) teachers.push_back(load_teacher(t, seed));
        fusion::JointTeacher jt(joint_spec(plan), std::move(teachers), 0);
        auto cache = teacher_cache(jt);
        std::vector<data::LabeledDataset> needed;
        for (std::size_t i = 0; i < datasets().size(); ++i)
            if (std::count(plan.datasets.begin(), plan.datasets.end(), i) ||
                std::count(plan.students.begin(), plan.students.end(), i))
                needed.push_back(datasets()[i]);
        const std::size_t before = cache.entry_count();
        fusion::precompute_teacher_embeddings(jt, needed, cache);
        progress("cache " + plan.label + " seed " + std::to_string(seed) + ": " +
                 std::to_string(cache.entry_count() - before) + " new entries, " +
                 std::to_string(cache.entry_count()) + " total");
    }
}

void Experiment::run_joint_stage(std::uint64_t seed, const JointPlan& plan) {
    RunDir rd = joint_dir(seed, plan);
    const std::string h = joint_input_hash(seed, plan);
    if (rd.up_to_date(h)) {
        progress("joint teacher " + plan.label + " seed " + std::to_string(seed) + ": up to date");
        return;
    }
    const auto& ds = datasets();
    std::vector<models::Model> teachers;
    for (auto t : plan.teachers) teachers.push_back(load_teacher(t, seed));
    const std::uint64_t job = cfg_.job_seed("joint:" + plan.label, seed);
    fusion::JointTeacher jt(joint_spec(plan), std::move(teachers), job);

    DirLock lock(rd.path());
    rd.begin(h, resolved_);
    auto cache = teacher_cache(jt);
    {
        std::vector<data::LabeledDataset> needed;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (std::count(plan.datasets.begin(), plan.datasets.end(), i) ||
                std::count(plan.students.begin(), plan.students.end(), i))
                needed.push_back(ds[i]);
        fusion::precompute_teacher_embeddings(jt, needed, cache);
    }
    std::vector<data::LabeledDataset> train_sets;
    std::vector<std::string> names;
    for (auto d : plan.datasets) {
        train_sets.push_back(ds[d]);
        names.push_back(ds[d].name);
    }
    progress("joint teacher " + plan.label + " seed " + std::to_string(seed) + ": training on " +
             std::to_string(train_sets.size()) + " datasets");
    const std::string frozen_before = backbone_checksum(jt);
    const auto log = fusion::train_joint_teacher(jt, train_sets, cache, cfg_.joint_train, job);
    const bool unchanged = backbone_checksum(jt) == frozen_before;
    rd.log(std::string("frozen backbones unchanged: ") + (unchanged ? "yes" : "NO"));
    if (!unchanged) throw NumericError("joint-teacher training modified a frozen backbone");
    log_epochs(rd, log);
    rd.write_curves(log, names);

    std::vector<training::MetricsRecord> recs;
    for (std::size_t k = 0; k < train_sets.size(); ++k)
        recs.push_back(record(rd.info(), names[k], fusion::evaluate_joint(jt, train_sets[k], k, cache), log.best_epoch,
                              log.wall_seconds));
    if (cfg_.variant == Variant::CrossDataset) {
        const auto& d = ds[cfg_.holdout];
        const std::size_t head = jt.add_head(d.name, d.num_classes, derive_seed(job, "added-head"));
        const auto hlog = fusion::train_added_head(jt, head, d, cache, cfg_.head_train, derive_seed(job, "added-head"));
        rd.log("added head for " + d.name + ": " + std::to_string(hlog.epochs.size()) + " epochs");
        recs.push_back(record(rd.info(), d.name, fusion::evaluate_joint(jt, d, head, cache), hlog.best_epoch,
                              hlog.wall_seconds));
    }
    fusion::save_joint_teacher(jt, rd.checkpoint());
    rd.write_results(recs);
    rd.finish(h);
    for (const auto& r : recs)
        progress("joint teacher " + plan.label + " seed " + std::to_string(seed) + " " + r.dataset + ": acc1 " +
                 format_fixed(r.acc1));
}

void Experiment::train_joint(std::uint64_t seed, const std::vector<std::string>& levels) {
    if (cfg_.variant == Variant::SingleDatasetKd)
        throw ConfigError("the single-dataset-kd variant has no joint teacher");
    if (cfg_.variant == Variant::VaryM) {
        for (auto k : cfg_.vary_m) run_joint_stage(seed, joint_plan(levels, k));
        return;
    }
    run_joint_stage(seed, joint_plan(levels));
}

fusion::JointTeacher Experiment::load_joint(std::uint64_t seed, const JointPlan& plan) {
    RunDir rd = joint_dir(seed, plan);
    if (!rd.up_to_date(joint_input_hash(seed, plan)))
        throw PreconditionError("joint teacher " + plan.label + " for seed " + std::to_string(seed) +
                                " is missing or out of date; run train-joint first");
    return fusion::load_joint_teacher(rd.checkpoint());
}

// ---- stage 3 -------------------------------------------------------------

RunDir Experiment::student_dir(std::size_t i, std::uint64_t seed, const std::string& label) const {
    return RunDir(root_, {stage_name("students"), "student_" + std::to_string(i + 1), label, seed});
}

void Experiment::extract_targets(std::uint64_t seed, const std::vector<std::string>& levels) {
    if (cfg_.variant == Variant::SingleDatasetKd)
        throw ConfigError("the single-dataset-kd variant takes its targets from the individual teachers");
    auto limits = cfg_.variant == Variant::VaryM ? cfg_.vary_m : std::vector<std::size_t>{0};
    for (auto k : limits) {
        const auto plan = joint_plan(levels, k);
        auto jt = load_joint(seed, plan);
        const auto features = teacher_cache(jt);
        for (auto i : plan.students) {
            const auto t = distill::extract_distill_targets(jt, datasets()[i], levels, features, cache_root());
            progress("targets " + plan.label + " seed " + std::to_string(seed) + " " + t.dataset + ": " +
                     std::to_string(t.tensor_count()) + " tensors");
        }
    }
}

void Experiment::run_student_stage(std::uint64_t seed, const JointPlan& plan,
                                   const std::vector<distill::KDConfig>& kd) {
    const auto& ds = datasets();
    auto jt = load_joint(seed, plan);
    const std::string fp = jt.fingerprint();
    const auto features = teacher_cache(jt);

    struct Job {
        std::size_t dataset;
        std::string hash;
        distill::DistillTargets targets;
    };
    std::vector<Job> jobs;
    for (auto i : plan.students) {
        const auto spec = cfg_.student_spec(i, ds[i]);
        const std::string h =
            hash_of({fp, plan.label, spec.hash(), kd_json(kd[i]).dump(), resolved_.doc.at("train").at("student").dump(),
                     std::to_string(cfg_.job_seed("model_" + std::to_string(i + 1), seed))});
        RunDir rd = student_dir(i, seed, plan.label);
        if (rd.up_to_date(h)) {
            progress(rd.info().model + " " + plan.label + " seed " + std::to_string(seed) + ": up to date");
            continue;
        }
        // Targets are extracted serially; the student jobs below only read them.
        jobs.push_back({i, h, distill::extract_distill_targets(jt, ds[i], plan.levels, features, cache_root())});
    }
    parallel_for(jobs.size(), opts_.jobs, [&](std::size_t j) {
        const auto& job = jobs[j];
        const std::size_t i = job.dataset;
        RunDir rd = student_dir(i, seed, plan.label);
        DirLock lock(rd.path());
        rd.begin(job.hash, resolved_);
        rd.log("joint teacher " + fp);
        progress(rd.info().model + " " + plan.label + " seed " + std::to_string(seed) + ": distilling on " +
                 ds[i].name);
        auto run = distill::train_student(cfg_.student_spec(i, ds[i]), ds[i], job.targets, kd[i], cfg_.student_train,
                                          cfg_.job_seed("model_" + std::to_string(i + 1), seed));
        log_epochs(rd, run.log);
        const std::string names[] = {ds[i].name};
        rd.write_curves(run.log, names);
        rd.log("adaptor parameters (discarded) " + std::to_string(run.adaptor_params));
        models::save_checkpoint(run.model, rd.checkpoint());
        const auto test = training::evaluate(run.model, ds[i]);
        const auto rec = record(rd.info(), ds[i].name, test, run.log.best_epoch, run.log.wall_seconds);
        rd.write_results(std::span(&rec, 1));
        rd.finish(job.hash);
        progress(rd.info().model + " " + plan.label + " seed " + std::to_string(seed) + ": acc1 " +
                 format_fixed(test.acc1));
    });
}

void Experiment::run_single_dataset_kd(std::uint64_t seed) {
    const auto& ds = datasets();
    const std::string label = taps_label(cfg_.levels);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto teacher = load_teacher(i, seed);
        const auto spec = cfg_.student_spec(i, ds[i]);
        const std::string h = hash_of({teacher.fingerprint(), label, spec.hash(), kd_json(cfg_.kd[i]).dump(),
                                       resolved_.doc.at("train").at("student").dump(),
                                       std::to_string(cfg_.job_seed("model_" + std::to_string(i + 1), seed))});
        RunDir rd = student_dir(i, seed, label);
        if (rd.up_to_date(h)) {
            progress(rd.info().model + " seed " + std::to_string(seed) + ": up to date");
            continue;
        }
        for (const auto& l : cfg_.levels)
            if (!teacher.spec().taps.contains(l))
                throw ConfigError("level '" + l + "' is not a tap of teacher " + std::to_string(i + 1));
        const auto targets = distill::extract_teacher_targets(teacher, ds[i], cfg_.levels);
        DirLock lock(rd.path());
        rd.begin(h, resolved_);
        rd.log("single-dataset teacher " + teacher.fingerprint());
        progress(rd.info().model + " seed " + std::to_string(seed) + ": distilling from teacher " +
                 std::to_string(i + 1));
        auto run = distill::train_student(spec, ds[i], targets, cfg_.kd[i], cfg_.student_train,
                                          cfg_.job_seed("model_" + std::to_string(i + 1), seed));
        log_epochs(rd, run.log);
        const std::string names[] = {ds[i].name};
        rd.write_curves(run.log, names);
        models::save_checkpoint(run.model, rd.checkpoint());
        const auto test = training::evaluate(run.model, ds[i]);
        const auto rec = record(rd.info(), ds[i].name, test, run.log.best_epoch, run.log.wall_seconds);
        rd.write_results(std::span(&rec, 1));
        rd.finish(h);
    }
}

void Experiment::distill(std::uint64_t seed, const std::vector<std::string>& levels) {
    if (cfg_.variant == Variant::SingleDatasetKd) {
        run_single_dataset_kd(seed);
        return;
    }
    if (levels.size() != cfg_.levels.size())
        throw ConfigError("distillation levels must match taps.levels in count (one beta per level)");
    auto limits = cfg_.variant == Variant::VaryM ? cfg_.vary_m : std::vector<std::size_t>{0};
    for (auto k : limits) run_student_stage(seed, joint_plan(levels, k), cfg_.kd);
}

// ---- baselines -----------------------------------------------------------

void Experiment::baselines(std::uint64_t seed) {
    const auto& ds = datasets();
    const std::string train_json = resolved_.doc.at("train").at("student").dump();
    if (cfg_.dataset_specific) {
        const auto which = student_datasets();
        parallel_for(which.size(), opts_.jobs, [&](std::size_t j) {
            const std::size_t i = which[j];
            const auto spec = cfg_.student_spec(i, ds[i]);
            const std::uint64_t s = cfg_.job_seed("model_" + std::to_string(i + 1), seed);
            const std::string h = hash_of({data_hash(), ds[i].name, spec.hash(), train_json, std::to_string(s)});
            RunDir rd(root_, {"baselines", "baseline_" + std::to_string(i + 1), "", seed});
            if (rd.up_to_date(h)) {
                progress(rd.info().model + " seed " + std::to_string(seed) + ": up to date");
                return;
            }
            DirLock lock(rd.path());
            rd.begin(h, resolved_);
            progress(rd.info().model + " seed " + std::to_string(seed) + ": training on " + ds[i].name);
            auto model = models::build_model(spec, s);
            const auto log = training::train_classifier(model, ds[i], cfg_.student_train, s);
            log_epochs(rd, log);
            const std::string names[] = {ds[i].name};
            rd.write_curves(log, names);
            models::save_checkpoint(model, rd.checkpoint());
            const auto test = training::evaluate(model, ds[i]);
            const auto rec = record(rd.info(), ds[i].name, test, log.best_epoch, log.wall_seconds);
            rd.write_results(std::span(&rec, 1));
            rd.finish(h);
            progress(rd.info().model + " seed " + std::to_string(seed) + ": acc1 " + format_fixed(test.acc1));
        });
    }
    if (cfg_.variant != Variant::Standard || ds.size() < 2) return;

    std::vector<std::string> names;
    std::vector<std::size_t> classes;
    for (const auto& d : ds) {
        names.push_back(d.name);
        classes.push_back(d.num_classes);
    }
    if (cfg_.multi_head) {
        const auto spec = cfg_.student_spec(0, ds[0]);
        const std::uint64_t s = cfg_.job_seed("multi_head", seed);
        const std::string h = hash_of({data_hash(), spec.hash(), train_json, std::to_string(s)});
        RunDir rd(root_, {"baselines", "multi_head", "", seed});
        if (rd.up_to_date(h)) {
            progress("multi_head seed " + std::to_string(seed) + ": up to date");
        } else {
            DirLock lock(rd.path());
            rd.begin(h, resolved_);
            progress("multi_head seed " + std::to_string(seed) + ": training on " + std::to_string(ds.size()) +
                     " datasets");
            MultiHeadModel model(spec, classes, s);
            rd.log("parameters: backbone " + std::to_string(model.backbone_params()) + " + heads");
            const auto res = train_multi_head(model, ds, cfg_.student_train, s);
            log_epochs(rd, res.log);
            rd.write_curves(res.log, names);
            const auto params = model.parameters();
            const auto buffers = model.buffers();
            models::save_parameters(params, buffers, rd.checkpoint());
            std::ofstream(rd.checkpoint() / "multi_head.json")
                << json{{"backbone", spec.to_json()}, {"classes", classes}}.dump(2) << "\n";
            std::vector<training::MetricsRecord> recs;
            for (std::size_t k = 0; k < ds.size(); ++k)
                recs.push_back(record(rd.info(), names[k], res.test[k], res.log.best_epoch, res.log.wall_seconds));
            rd.write_results(recs);
            rd.finish(h);
        }
    }
    if (cfg_.joint_head) {
        auto spec = cfg_.student_spec(0, ds[0]);
        const UnionDataset u = make_union(ds);
        spec.classes = u.merged.num_classes;
        spec.name += "-union";
        const std::uint64_t s = cfg_.job_seed("joint_head", seed);
        const std::string h = hash_of({data_hash(), spec.hash(), train_json, std::to_string(s)});
        RunDir rd(root_, {"baselines", "joint_head", "", seed});
        if (rd.up_to_date(h)) {
            progress("joint_head seed " + std::to_string(seed) + ": up to date");
        } else {
            DirLock lock(rd.path());
            rd.begin(h, resolved_);
            progress("joint_head seed " + std::to_string(seed) + ": training on " +
                     std::to_string(u.merged.num_classes) + " union classes");
            auto model = models::build_model(spec, s);
            const auto log = training::train_classifier(model, u.merged, cfg_.student_train, s);
            log_epochs(rd, log);
            const std::string union_name[] = {"union"};
            rd.write_curves(log, union_name);
            models::save_checkpoint(model, rd.checkpoint());
            const auto test = evaluate_union(model, u, ds);
            std::vector<training::MetricsRecord> recs;
            for (std::size_t k = 0; k < ds.size(); ++k)
                recs.push_back(record(rd.info(), names[k], test[k], log.best_epoch, log.wall_seconds));
            rd.write_results(recs);
            rd.finish(h);
        }
    }
}

// ---- whole experiment ----------------------------------------------------

void Experiment::run_all() {
    datasets();
    for (auto seed : seeds()) {
        progress("== seed " + std::to_string(seed));
        train_teachers(seed);
        switch (cfg_.variant) {
            case Variant::SingleDatasetKd: run_single_dataset_kd(seed); break;
            default:
                train_joint(seed, cfg_.levels);
                distill(seed, cfg_.levels);
                break;
        }
        baselines(seed);
    }
    write_report(root_);
    progress("report: " + (root_ / "report.csv").string());
}

}  // namespace mlfd::pipeline
