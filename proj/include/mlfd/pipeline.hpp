#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlfd/data.hpp"
#include "mlfd/distill.hpp"
#include "mlfd/fusion.hpp"
#include "mlfd/models.hpp"
#include "mlfd/training.hpp"

namespace mlfd::pipeline {

// ---- configuration -------------------------------------------------------

enum class Variant { Standard, SameArch, SameDatasetTeacher, CrossDataset, SingleDatasetKd, VaryM };
Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

struct ExperimentConfig {
    std::string id = "synth3";
    Variant variant = Variant::Standard;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::uint64_t master_seed = 1;

    data::SyntheticFamilySpec family;
    std::vector<nlohmann::json> teachers;  // per dataset: library name or spec object
    std::vector<nlohmann::json> students;
    std::vector<std::string> pretrained_teachers;  // checkpoint dirs; empty = train
    std::size_t reference_teacher = 0;

    std::vector<std::string> levels;  // depth order
    std::vector<std::vector<std::string>> ablation_tap_sets;
    double ablation_beta = 0.2;
    bool ablation_students = true;

    std::vector<distill::KDConfig> kd;  // one per dataset

    training::TrainConfig teacher_train, joint_train, student_train, head_train;
    double fusion_dropout = 0.85;
    double fusion_dense_dropout = 0.5;

    bool dataset_specific = true, multi_head = true, joint_head = true;
    std::size_t holdout = 0;
    std::size_t same_dataset_target = 0;
    std::vector<std::size_t> vary_m;

    void validate() const;
    models::ModelSpec teacher_spec(std::size_t i, const data::LabeledDataset& d) const;
    models::ModelSpec student_spec(std::size_t i, const data::LabeledDataset& d) const;
    /// Per-job seed derived from (master_seed, job name, replicate seed).
    std::uint64_t job_seed(const std::string& job, std::uint64_t seed) const;
};

/// Fully defaulted configuration document plus provenance.
struct ResolvedConfig {
    nlohmann::json doc;
    std::string source;                  // file path or "<defaults>"
    std::vector<std::string> overrides;  // "key=value" as given
    std::vector<std::string> defaulted;  // dotted keys that took their default

    /// Canonical hash; independent of key order in the source.
    std::string hash() const;
    ExperimentConfig experiment() const;
};

nlohmann::json default_config();
/// Merges `user` over the defaults; unknown keys raise one ConfigError listing all of them.
ResolvedConfig resolve_config(const nlohmann::json& user, std::span<const std::string> overrides,
                              std::string source);
ResolvedConfig load_config(const std::optional<std::filesystem::path>& path, std::span<const std::string> overrides);
/// Human-readable list of every key, its default and meaning.
std::string config_reference();

// ---- run directories -----------------------------------------------------

/// RFC-4180 field quoting.
std::string csv_field(const std::string& s);
std::string csv_row(std::span<const std::string> fields);
std::string format_fixed(double v, int decimals = 4);

/// Exclusive writer lock on a directory; released on destruction.
class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path path_;
};

struct RunInfo {
    std::string stage;
    std::string model;
    std::string taps;
    std::uint64_t seed = 0;
};

/// One job's directory: `<root>/<stage>/<model>_s<seed>/`.
class RunDir {
public:
    RunDir(std::filesystem::path root, RunInfo info);
    const std::filesystem::path& path() const { return path_; }
    const RunInfo& info() const { return info_; }
    std::filesystem::path checkpoint() const { return path_ / "checkpoint"; }

    /// True when a previous run with the same input hash finished.
    bool up_to_date(const std::string& input_hash) const;
    void begin(const std::string& input_hash, const ResolvedConfig& cfg);  // clears old outputs
    void finish(const std::string& input_hash);
    void log(const std::string& line) const;

    void write_curves(const training::TrainLog& log, std::span<const std::string> datasets) const;
    void write_results(std::span<const training::MetricsRecord> records) const;
    std::vector<training::MetricsRecord> read_results() const;

private:
    std::filesystem::path path_;
    RunInfo info_;
};

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

/// Records of one result.csv.
std::vector<training::MetricsRecord> read_results_file(const std::filesystem::path& path);
/// Records of every finished run under `root`, sorted.
std::vector<training::MetricsRecord> read_report_records(const std::filesystem::path& root);
/// Writes report.csv and curves.csv under `root` (sorted, without wall time).
void write_report(const std::filesystem::path& root);

// ---- baselines -----------------------------------------------------------

/// Shared backbone with one linear head per dataset.
class MultiHeadModel {
public:
    MultiHeadModel(const models::ModelSpec& backbone, std::span<const std::size_t> classes, std::uint64_t seed);

    Var forward(Tape& tape, Var x, std::size_t head, const models::RunContext& ctx);
    Tensor predict(const Tensor& inputs, std::size_t head);
    std::vector<Parameter*> parameters();
    std::vector<std::pair<std::string, Tensor*>> buffers() { return body_.buffers(); }
    std::size_t heads() const { return head_w_.size(); }
    std::size_t backbone_params() const;
    std::size_t head_params(std::size_t head) const;

private:
    models::LayerStack body_;
    std::vector<Parameter> head_w_, head_b_;
};

/// Parameter gradients after one round (one batch per dataset, each loss / m),
/// computed either by accumulating per-batch backward passes or from a single
/// backward of the summed loss.
std::vector<Tensor> multi_head_round_gradients(MultiHeadModel& model, std::span<const data::Batch> batches,
                                               bool accumulate);

struct BaselineResult {
    training::TrainLog log;
    std::vector<training::EvalResult> test;  // per dataset
};

BaselineResult train_multi_head(MultiHeadModel& model, std::span<const data::LabeledDataset> datasets,
                                const training::TrainConfig& cfg, std::uint64_t seed);

/// Disjoint union of the datasets' label spaces with per-dataset class offsets.
struct UnionDataset {
    data::LabeledDataset merged;
    std::vector<std::size_t> offsets;    // first union class of each dataset
    std::vector<std::size_t> row_start;  // first merged sample of each dataset
};
UnionDataset make_union(std::span<const data::LabeledDataset> datasets);
/// Per-dataset test metrics with argmax over the full union of classes.
std::vector<training::EvalResult> evaluate_union(models::Model& model, const UnionDataset& u,
                                                 std::span<const data::LabeledDataset> datasets);

// ---- experiment driver ---------------------------------------------------

struct Options {
    std::filesystem::path out = "runs";
    std::size_t jobs = 1;
    std::optional<std::uint64_t> seed;  // restrict to one replicate
    std::ostream* progress = nullptr;
};

class Experiment {
public:
    Experiment(ResolvedConfig cfg, Options opts);

    const ExperimentConfig& config() const { return cfg_; }
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path cache_root() const;
    std::vector<std::uint64_t> seeds() const;

    void gen_data();
    const std::vector<data::LabeledDataset>& datasets();

    void train_teachers(std::uint64_t seed);
    void build_cache(std::uint64_t seed, const std::vector<std::string>& levels);
    void train_joint(std::uint64_t seed, const std::vector<std::string>& levels);
    void extract_targets(std::uint64_t seed, const std::vector<std::string>& levels);
    void distill(std::uint64_t seed, const std::vector<std::string>& levels);
    void baselines(std::uint64_t seed);

    /// Stages 1-3 for the configured variant plus baselines, then the report.
    void run_all();
    void ablate();
    std::vector<training::MetricsRecord> evaluate_all(const std::string& model_filter = {});
    void dump_embeddings(const std::string& model, const std::string& level, data::Split split,
                         const std::filesystem::path& out);

    static std::string taps_label(const std::vector<std::string>& levels);

private:
    struct JointPlan {
        std::vector<std::size_t> teachers;  // teacher run indices feeding the joint teacher
        std::vector<std::size_t> datasets;  // datasets with heads
        std::vector<std::size_t> students;  // datasets that get a distilled student
        std::vector<std::string> levels;
        std::string label;                  // taps label, prefixed with m for vary-m
    };

    void progress(const std::string& line) const;
    std::string stage_name(const std::string& base) const;
    std::string data_hash() const;
    const data::LabeledDataset& dataset_named(const std::string& name);
    fusion::JointTeacherSpec joint_spec(const JointPlan& plan);
    std::string joint_input_hash(std::uint64_t seed, const JointPlan& plan);
    std::vector<std::size_t> teacher_datasets() const;  // dataset each teacher trains on
    std::vector<std::size_t> student_datasets() const;
    JointPlan joint_plan(const std::vector<std::string>& levels, std::size_t m_limit = 0) const;
    std::string teacher_input_hash(std::size_t i, std::uint64_t seed);
    models::Model load_teacher(std::size_t i, std::uint64_t seed);
    fusion::JointTeacher load_joint(std::uint64_t seed, const JointPlan& plan);
    RunDir teacher_dir(std::size_t i, std::uint64_t seed) const;
    RunDir joint_dir(std::uint64_t seed, const JointPlan& plan) const;
    RunDir student_dir(std::size_t i, std::uint64_t seed, const std::string& label) const;
    fusion::EmbeddingCache teacher_cache(fusion::JointTeacher& jt) const;

    void run_joint_stage(std::uint64_t seed, const JointPlan& plan);
    void run_student_stage(std::uint64_t seed, const JointPlan& plan, const std::vector<distill::KDConfig>& kd);
    void run_single_dataset_kd(std::uint64_t seed);
    training::MetricsRecord record(const RunInfo& info, const std::string& dataset,
                                   const training::EvalResult& r, std::size_t epoch, double wall) const;

    ResolvedConfig resolved_;
    ExperimentConfig cfg_;
    Options opts_;
    std::filesystem::path root_;
    std::vector<data::LabeledDataset> datasets_;
    bool loaded_ = false;
};

}  // namespace mlfd::pipeline
