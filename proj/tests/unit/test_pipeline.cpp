#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"
#include "mlfd/rng.hpp"
#include "support/fixtures.hpp"
#include "support/temp_dir.hpp"

using namespace mlfd;
using namespace mlfd::pipeline;
namespace fs = std::filesystem;

namespace {

const fs::path kTinyConfig = fs::path(MLFD_SOURCE_DIR) / "configs" / "tiny.json";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Experiment tiny_experiment(const fs::path& out, std::vector<std::string> overrides = {}) {
    Options opts;
    opts.out = out;
    return Experiment(load_config(kTinyConfig, overrides), opts);
}

std::vector<training::MetricsRecord> select(const std::vector<training::MetricsRecord>& all, const std::string& stage,
                                            const std::string& model_prefix) {
    std::vector<training::MetricsRecord> out;
    for (const auto& r : all)
        if (r.stage == stage && r.model.rfind(model_prefix, 0) == 0) out.push_back(r);
    return out;
}

// Every regular file under `dir` with its checksum, keyed by relative path.
std::map<std::string, std::uint64_t> tree_checksums(const fs::path& dir, const std::set<std::string>& skip = {}) {
    std::map<std::string, std::uint64_t> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && !skip.count(e.path().filename().string()))
            out[fs::relative(e.path(), dir).string()] = file_checksum(e.path());
    return out;
}

}  // namespace

TEST(MultiHead, AccumulationMatchesSummedLoss) {
    const auto fam = data::gen_synthetic_family(testkit::tiny_family_spec());
    std::vector<std::size_t> classes;
    for (const auto& d : fam) classes.push_back(d.num_classes);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        MultiHeadModel model(testkit::mlp_spec(fam[0]), classes, seed);
        std::vector<data::Batch> batches;
        for (std::size_t k = 0; k < fam.size(); ++k) {
            data::BatchPlan plan;
            plan.batch_size = 8 + k;
            plan.shuffle_seed = derive_seed(seed, k);
            batches.push_back(data::iterate_batches(fam[k], plan, 0).front());
        }
        const auto acc = multi_head_round_gradients(model, batches, true);
        const auto sum = multi_head_round_gradients(model, batches, false);
        ASSERT_EQ(acc.size(), sum.size());
        double worst = 0.0, norm = 0.0;
        for (std::size_t i = 0; i < acc.size(); ++i)
            for (std::size_t j = 0; j < acc[i].size(); ++j) {
                worst = std::max(worst, std::abs(acc[i][j] - sum[i][j]));
                norm = std::max(norm, std::abs(acc[i][j]));
            }
        EXPECT_LE(worst, 1e-9) << "seed " << seed;
        EXPECT_GT(norm, 0.0);
    }
}

TEST(MultiHead, ParameterCountIsBackbonePlusHeads) {
    const auto fam = data::gen_synthetic_family(testkit::tiny_family_spec());
    const std::vector<std::size_t> classes{3, 4, 3};
    const auto spec = testkit::mlp_spec(fam[0]);
    MultiHeadModel model(spec, classes, 1);
    const auto params = model.parameters();
    std::vector<const Parameter*> cp(params.begin(), params.end());
    std::size_t heads = 0;
    for (std::size_t k = 0; k < 3; ++k) heads += model.head_params(k);
    EXPECT_EQ(models::count_params(cp), model.backbone_params() + heads);
    EXPECT_EQ(heads, 32u * 10u + 10u);
    const std::vector<std::size_t> one{3};
    EXPECT_THROW(MultiHeadModel(spec, one, 1), ConfigError);
}

TEST(JointHead, UnionOffsetsAndOneHot) {
    const auto fam = data::gen_synthetic_family(testkit::tiny_family_spec());
    const auto u = make_union(fam);
    EXPECT_EQ(u.merged.num_classes, 10u);
    EXPECT_EQ(u.offsets, (std::vector<std::size_t>{0, 3, 7}));
    EXPECT_EQ(u.merged.size(), fam[0].size() + fam[1].size() + fam[2].size());
    for (std::size_t k = 0; k < fam.size(); ++k) {
        for (std::size_t i = 0; i < fam[k].size(); ++i) {
            const std::size_t label = u.merged.labels[u.row_start[k] + i];
            EXPECT_GE(label, u.offsets[k]);
            EXPECT_LT(label, u.offsets[k] + fam[k].num_classes);
        }
        const std::vector<std::size_t> labels{u.merged.labels[u.row_start[k]]};
        const Tensor hot = data::one_hot(labels, u.merged.num_classes);
        std::size_t nonzero = 0;
        for (std::size_t c = 0; c < hot.size(); ++c)
            if (hot[c] != 0.0) {
                ++nonzero;
                EXPECT_GE(c, u.offsets[k]);
                EXPECT_LT(c, u.offsets[k] + fam[k].num_classes);
            }
        EXPECT_EQ(nonzero, 1u);
    }
}

TEST(JointHead, FullUnionArgmax) {
    const auto fam = data::gen_synthetic_family(testkit::tiny_family_spec());
    const auto u = make_union(fam);
    models::Model m(models::library_spec("mlp-small", fam[0].sample_shape(), u.merged.num_classes), 1);
    // Zero weights and a bias favouring class 5 of dataset 1's block: dataset 1 is correct
    // only on its own class 2, and datasets 0 and 2 are never correct under the full-union argmax.
    m.head_weight().value.fill(0.0);
    m.head_bias().value[5] = 1.0;
    const auto r = evaluate_union(m, u, fam);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0].acc1, 0.0);
    EXPECT_EQ(r[2].acc1, 0.0);
    std::size_t hits = 0;
    for (auto i : fam[1].test) hits += fam[1].labels[i] == 2;
    EXPECT_DOUBLE_EQ(r[1].acc1, 100.0 * static_cast<double>(hits) / static_cast<double>(fam[1].test.size()));
}

TEST(Experiment, RunAllWritesValidReport) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path());
    ex.run_all();
    const auto records = read_report_records(ex.root());
    EXPECT_EQ(select(records, "teachers", "teacher_").size(), 3u);
    EXPECT_EQ(select(records, "joint", "joint_teacher").size(), 3u);
    EXPECT_EQ(select(records, "students", "student_").size(), 3u);
    EXPECT_EQ(select(records, "baselines", "baseline_").size(), 3u);
    EXPECT_EQ(select(records, "baselines", "multi_head").size(), 3u);
    EXPECT_EQ(select(records, "baselines", "joint_head").size(), 3u);
    for (const auto& r : records) EXPECT_NO_THROW(r.validate());
    for (const char* f : {"report.csv", "summary.csv", "curves.csv"}) EXPECT_TRUE(fs::exists(ex.root() / f)) << f;
    // Each teacher is evaluated only on its own dataset.
    for (const auto& r : select(records, "teachers", "teacher_"))
        EXPECT_EQ(r.dataset, "synth" + r.model.substr(std::string("teacher_").size()));
    const auto report = slurp(ex.root() / "report.csv");
    EXPECT_NE(report.find("\r\n"), std::string::npos);
    EXPECT_EQ(report.find("wall"), std::string::npos);
}

TEST(Experiment, DeterministicAcrossRunDirectories) {
    testkit::TempDir a, b;
    auto ea = tiny_experiment(a.path());
    auto eb = tiny_experiment(b.path());
    ea.run_all();
    eb.run_all();
    EXPECT_EQ(slurp(ea.root() / "report.csv"), slurp(eb.root() / "report.csv"));
}

TEST(Experiment, StageThreeRerunIsBitwise) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path());
    ex.run_all();
    const std::vector<std::string> levels = ex.config().levels;
    const auto students = ex.root() / "students";
    ASSERT_TRUE(fs::exists(students));
    const std::set<std::string> volatile_files{"log.txt", "config.json", "result.csv", "metrics.csv"};
    const auto before = tree_checksums(students, volatile_files);
    const auto results_before = read_report_records(ex.root());
    fs::remove_all(students);

    auto again = tiny_experiment(tmp.path());
    again.distill(1, levels);
    EXPECT_EQ(tree_checksums(students, volatile_files), before);
    const auto a = select(results_before, "students", "student_");
    const auto b = select(read_report_records(ex.root()), "students", "student_");
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].acc1, b[i].acc1);
        EXPECT_EQ(a[i].acc5, b[i].acc5);
        EXPECT_EQ(a[i].epoch, b[i].epoch);
    }
}

TEST(Experiment, ZeroKdWeightsMatchBaselineRun) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path(), {"kd.alpha=0", "kd.betas=[0,0]", "baselines.multi_head=false",
                                           "baselines.joint_head=false"});
    ex.run_all();
    const auto records = read_report_records(ex.root());
    const auto students = select(records, "students", "student_");
    const auto baselines = select(records, "baselines", "baseline_");
    ASSERT_EQ(students.size(), 3u);
    ASSERT_EQ(baselines.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(students[k].acc1, baselines[k].acc1);
        EXPECT_EQ(students[k].acc5, baselines[k].acc5);
        const auto label = Experiment::taps_label(ex.config().levels);
        const auto s = ex.root() / "students" / label / ("student_" + std::to_string(k + 1) + "_s1") / "checkpoint";
        const auto b = ex.root() / "baselines" / ("baseline_" + std::to_string(k + 1) + "_s1") / "checkpoint";
        EXPECT_EQ(models::checkpoint_fingerprint(s), models::checkpoint_fingerprint(b));
    }
}

TEST(Experiment, AblationRowsAndSharedTeachers) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path(), {"ablation.students=false"});
    ex.run_all();
    const auto teacher_stamps = tree_checksums(ex.root() / "teachers", {"log.txt"});
    ex.ablate();
    EXPECT_EQ(tree_checksums(ex.root() / "teachers", {"log.txt"}), teacher_stamps);

    const auto& sets = ex.config().ablation_tap_sets;
    std::set<std::string> labels;
    for (const auto& s : sets) labels.insert(Experiment::taps_label(s));
    std::size_t rows = 0;
    for (const auto& r : select(read_report_records(ex.root()), "joint", "joint_teacher"))
        rows += labels.count(r.taps);
    EXPECT_EQ(rows, sets.size() * ex.config().family.m * ex.seeds().size());
}

TEST(Experiment, AblationRejectsTooDeepTapSet) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path(), {"ablation.tap_sets=[[\"spatial1\",\"top\"]]"});
    EXPECT_THROW(ex.ablate(), ConfigError);
}

TEST(Experiment, PretrainedTeachersAreSkipped) {
    testkit::TempDir tmp;
    auto first = tiny_experiment(tmp.path() / "a");
    first.train_teachers(1);
    std::vector<std::string> dirs;
    for (int k = 1; k <= 3; ++k)
        dirs.push_back("\"" + (first.root() / "teachers" / ("teacher_" + std::to_string(k) + "_s1") / "checkpoint").string() +
                       "\"");
    const std::string list = "[" + dirs[0] + "," + dirs[1] + "," + dirs[2] + "]";
    auto second = tiny_experiment(tmp.path() / "b", {"models.pretrained_teachers=" + list});
    second.train_teachers(1);
    const auto log = slurp(second.root() / "teachers" / "teacher_2_s1" / "log.txt");
    EXPECT_NE(log.find("skipped"), std::string::npos);
    EXPECT_EQ(models::checkpoint_fingerprint(second.root() / "teachers" / "teacher_2_s1" / "checkpoint"),
              models::checkpoint_fingerprint(first.root() / "teachers" / "teacher_2_s1" / "checkpoint"));

    const std::string swapped = "[" + dirs[1] + "," + dirs[0] + "," + dirs[2] + "]";
    auto third = tiny_experiment(tmp.path() / "c", {"models.pretrained_teachers=" + swapped});
    EXPECT_THROW(third.train_teachers(1), ConfigError);
}

TEST(Experiment, DistillBeforeJointIsPrecondition) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path());
    ex.train_teachers(1);
    EXPECT_THROW(ex.distill(1, ex.config().levels), PreconditionError);
}

TEST(Experiment, VariantsRun) {
    for (const char* v : {"same-arch", "same-dataset-teacher", "cross-dataset", "single-dataset-kd", "vary-m"}) {
        testkit::TempDir tmp;
        auto ex = tiny_experiment(tmp.path(), {std::string("experiment.variant=") + v});
        ASSERT_NO_THROW(ex.run_all()) << v;
        const auto records = read_report_records(ex.root());
        const std::string stage = std::string("students-") + v;
        EXPECT_FALSE(select(records, stage, "student_").empty()) << v;
        for (const auto& r : records) EXPECT_NO_THROW(r.validate());
    }
}

TEST(Experiment, CrossDatasetStudentUsesExcludedDataset) {
    testkit::TempDir tmp;
    auto ex = tiny_experiment(tmp.path(), {"experiment.variant=cross-dataset"});
    ex.run_all();
    const auto records = read_report_records(ex.root());
    const auto students = select(records, "students-cross-dataset", "student_");
    ASSERT_EQ(students.size(), 1u);
    EXPECT_EQ(students[0].dataset, "synth3");
    const auto joint = ex.root() / "joint-cross-dataset";
    ASSERT_TRUE(fs::exists(joint));
    for (const auto& e : fs::recursive_directory_iterator(joint))
        if (e.path().filename() == "joint.json") {
            const auto spec = fusion::JointTeacherSpec::from_json(nlohmann::json::parse(slurp(e.path())));
            EXPECT_EQ(spec.teachers.size(), 2u);
        }
}
