#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mlfd/data.hpp"
#include "mlfd/models.hpp"
#include "mlfd/training.hpp"

namespace mlfd::fusion {

/// On-disk store of per-sample tensors under
/// `<root>/<owner_hash>/[<namespace>/]<dataset>/<split>/<level>/shard_<k>.tnsr`
/// with a text index (sample -> shard, offset) per level directory.
class EmbeddingCache {
public:
    EmbeddingCache(std::filesystem::path root, std::string owner_hash, std::string ns = {});

    /// MLFD_CACHE_DIR when set, otherwise `fallback`.
    static std::filesystem::path resolve_root(const std::filesystem::path& fallback);

    const std::string& owner_hash() const { return hash_; }
    std::filesystem::path dir() const;
    std::filesystem::path level_dir(const std::string& dataset, data::Split split, const std::string& level) const;

    /// Rows of `values` belong to `samples` (dataset sample indices), in order.
    void put(const std::string& dataset, data::Split split, const std::string& level,
             std::span<const std::size_t> samples, const Tensor& values);
    bool has(const std::string& dataset, data::Split split, const std::string& level) const;
    /// Stacked rows in stored order, after checksum verification.
    Tensor get(const std::string& dataset, data::Split split, const std::string& level) const;
    std::vector<std::size_t> samples(const std::string& dataset, data::Split split, const std::string& level) const;
    Tensor get_sample(const std::string& dataset, data::Split split, const std::string& level,
                      std::size_t sample) const;
    /// Total indexed (sample, level) entries under this owner.
    std::size_t entry_count() const;

    static constexpr std::size_t kShardRows = 512;

private:
    void check_owner() const;

    std::filesystem::path root_;
    std::string hash_;
    std::string ns_;
};

enum class AdaptorKind { Pointwise, Linear };

/// Projects one teacher's fusion-level features to the common fusion shape:
/// average pooling to the common spatial size followed by a 1x1 convolution,
/// or a linear layer for vector features.
class Adaptor {
public:
    Adaptor() = default;
    Adaptor(std::size_t teacher, Shape in_shape, Shape out_shape, std::uint64_t seed);

    Var apply(Tape& tape, Var x);

    std::size_t teacher() const { return teacher_; }
    AdaptorKind kind() const { return kind_; }
    const Shape& in_shape() const { return in_shape_; }
    const Shape& out_shape() const { return out_shape_; }
    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
    Parameter& weight() { return weight_; }
    Parameter& bias() { return bias_; }

private:
    std::size_t teacher_ = 0;
    AdaptorKind kind_ = AdaptorKind::Linear;
    Shape in_shape_, out_shape_;
    std::size_t pool_ = 1;
    Parameter weight_, bias_;
};

/// Channel-wise concatenation of adapted teacher features, in teacher order.
Var fuse_embeddings(Tape& tape, std::span<Adaptor> adaptors, std::span<const Var> embeddings);

struct JointTeacherSpec {
    std::vector<models::ModelSpec> teachers;
    std::vector<std::string> datasets;  // one head per dataset
    std::vector<std::size_t> classes;
    std::vector<std::string> levels;    // depth order; levels[0] is the fusion level
    std::size_t reference = 0;          // teacher whose layers after the fusion level form the trunk
    double dropout = 0.85;              // on the fused vector when fusion happens at a vector level
    double dense_dropout = 0.5;         // before the heads when a trunk follows a spatial fusion

    void validate() const;
    nlohmann::json to_json() const;
    static JointTeacherSpec from_json(const nlohmann::json& j);
    std::string hash() const;
};

class JointTeacher {
public:
    JointTeacher() = default;
    /// Takes ownership of trained teachers and freezes them.
    JointTeacher(JointTeacherSpec spec, std::vector<models::Model> teachers, std::uint64_t seed);

    struct Output {
        Var logits;
        std::map<std::string, Var> embeddings;
    };

    const JointTeacherSpec& spec() const { return spec_; }
    std::size_t teacher_count() const { return teachers_.size(); }
    models::Model& teacher(std::size_t i) { return teachers_.at(i); }
    Adaptor& adaptor(std::size_t i) { return adaptors_.at(i); }
    models::LayerStack& trunk() { return trunk_; }
    const models::TapSet& taps() const { return taps_; }
    const Shape& fused_shape() const { return trunk_.shapes().front(); }
    /// Per-sample embedding shape at one of the joint teacher's levels.
    Shape level_shape(const std::string& level) const;
    std::size_t dataset_index(const std::string& name) const;  // QueryError when absent

    std::vector<Parameter*> trainable_parameters();
    std::vector<Parameter*> backbone_parameters();
    std::vector<std::pair<std::string, Tensor*>> buffers();  // trainable-side buffers only

    /// Level-l1 features of teacher i (eval mode, no tape history needed).
    Tensor backbone_features(std::size_t i, const Tensor& inputs, std::size_t chunk = 250);
    Output forward_cached(Tape& tape, std::span<const Var> features, std::size_t dataset,
                          std::span<const std::string> levels, const models::RunContext& ctx);
    Output forward_raw(Tape& tape, Var inputs, std::size_t dataset, std::span<const std::string> levels,
                       const models::RunContext& ctx);

    /// Identifies the frozen backbones (specs, weights, fusion level); keys the embedding cache.
    std::string teacher_hash();
    std::string fingerprint();

    /// Adds a head for a dataset the teacher was not trained on (cross-dataset variant).
    std::size_t add_head(const std::string& dataset, std::size_t classes, std::uint64_t seed);
    std::vector<Parameter*> head_parameters(std::size_t dataset);

private:
    Var heads(Tape& tape, Var x, std::size_t dataset, const models::RunContext& ctx);

    JointTeacherSpec spec_;
    std::vector<models::Model> teachers_;
    std::vector<std::size_t> fusion_boundary_;
    std::vector<Adaptor> adaptors_;
    models::LayerStack trunk_;
    models::TapSet taps_;
    std::vector<Parameter> head_w_, head_b_;
    std::uint64_t head_stream_ = 0;
    double head_dropout_ = 0.0;
};

JointTeacher build_joint_teacher(JointTeacherSpec spec, std::vector<models::Model> teachers, std::uint64_t seed);

void save_joint_teacher(JointTeacher& jt, const std::filesystem::path& dir);
JointTeacher load_joint_teacher(const std::filesystem::path& dir);

/// Stores the fusion-level features of every teacher for every sample of
/// every dataset (all splits). Existing valid entries are left untouched.
void precompute_teacher_embeddings(JointTeacher& jt, std::span<const data::LabeledDataset> datasets,
                                   EmbeddingCache& cache);
std::string teacher_level_id(std::size_t teacher);

/// Trains adaptors, trunk and heads on cached features; backbones stay frozen.
training::TrainLog train_joint_teacher(JointTeacher& jt, std::span<const data::LabeledDataset> datasets,
                                       const EmbeddingCache& cache, const training::TrainConfig& cfg,
                                       std::uint64_t seed,
                                       const std::function<void(const training::EpochLog&)>& on_epoch = {});

/// Evaluates head `dataset` on a split through the cache.
training::EvalResult evaluate_joint(JointTeacher& jt, const data::LabeledDataset& d, std::size_t head,
                                    const EmbeddingCache& cache, data::Split split = data::Split::Test);

/// Trains only a freshly added head on the frozen trunk (cross-dataset targets).
training::TrainLog train_added_head(JointTeacher& jt, std::size_t head, const data::LabeledDataset& d,
                                    const EmbeddingCache& cache, const training::TrainConfig& cfg, std::uint64_t seed);

}  // namespace mlfd::fusion
