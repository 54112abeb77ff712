#include <algorithm>
#include <fstream>

#include "mlfd/error.hpp"
#include "mlfd/fusion.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::fusion {

Adaptor::Adaptor(std::size_t teacher, Shape in_shape, Shape out_shape, std::uint64_t seed)
    : teacher_(teacher), in_shape_(std::move(in_shape)), out_shape_(std::move(out_shape)) {
    const std::string base = "adaptor." + std::to_string(teacher) + ".";
    if (in_shape_.size() == 3 && out_shape_.size() == 3) {
        kind_ = AdaptorKind::Pointwise;
        if (in_shape_[1] % out_shape_[1] != 0 || in_shape_[1] / out_shape_[1] != in_shape_[2] / out_shape_[2] ||
            in_shape_[2] % out_shape_[2] != 0)
            throw DimensionError("adaptor " + std::to_string(teacher) + ": cannot pool " + shape_str(in_shape_) +
                                 " to " + shape_str(out_shape_));
        pool_ = in_shape_[1] / out_shape_[1];
        weight_ = Parameter(base + "weight",
                            xavier_normal({out_shape_[0], in_shape_[0], 1, 1}, in_shape_[0], out_shape_[0], seed));
        bias_ = Parameter(base + "bias", Tensor({out_shape_[0]}, 0.0));
    } else if (in_shape_.size() == 1 && out_shape_.size() == 1) {
        kind_ = AdaptorKind::Linear;
        weight_ = Parameter(base + "weight", xavier_init(in_shape_[0], out_shape_[0], seed));
        bias_ = Parameter(base + "bias", Tensor({out_shape_[0]}, 0.0));
    } else {
        throw ConfigError("adaptor " + std::to_string(teacher) + ": cannot map " + shape_str(in_shape_) + " to " +
                          shape_str(out_shape_) + " (spatial and vector features do not mix)");
    }
}

Var Adaptor::apply(Tape& tape, Var x) {
    Shape expect{x.shape()[0]};
    expect.insert(expect.end(), in_shape_.begin(), in_shape_.end());
    if (x.shape() != expect)
        throw DimensionError("adaptor " + std::to_string(teacher_) + ": expected " + shape_str(expect) + ", got " +
                             shape_str(x.shape()));
    if (kind_ == AdaptorKind::Linear) return ops::bias_add(ops::matmul(x, tape.param(weight_)), tape.param(bias_));
    if (pool_ > 1) x = ops::avg_pool2d(x, pool_);
    return ops::bias_add(ops::conv2d(x, tape.param(weight_), 1, 0), tape.param(bias_));
}

Var fuse_embeddings(Tape& tape, std::span<Adaptor> adaptors, std::span<const Var> embeddings) {
    if (embeddings.size() != adaptors.size())
        throw PreconditionError("fusion: incomplete input, " + std::to_string(embeddings.size()) +
                                " teacher embeddings for " + std::to_string(adaptors.size()) + " adaptors");
    std::vector<Var> parts;
    for (std::size_t i = 0; i < adaptors.size(); ++i) {
        if (!embeddings[i].valid())
            throw PreconditionError("fusion: incomplete input, teacher " + std::to_string(i) + " embedding missing");
        parts.push_back(adaptors[i].apply(tape, embeddings[i]));
    }
    if (parts.size() == 1) return parts.front();
    if (parts.front().shape().size() == 2) {
        // Vector features: concatenate along the feature axis via a (N,F,1,1) view.
        std::vector<Var> views;
        for (auto& p : parts) views.push_back(ops::reshape(p, {p.shape()[0], p.shape()[1], 1, 1}));
        return ops::flatten(ops::concat_channels(views));
    }
    return ops::concat_channels(parts);
}

void JointTeacherSpec::validate() const {
    if (teachers.empty()) throw ConfigError("joint teacher needs at least one individual teacher");
    if (datasets.empty() || datasets.size() != classes.size())
        throw ConfigError("joint teacher needs one class count per dataset");
    if (levels.empty()) throw ConfigError("joint teacher needs at least one level");
    if (reference >= teachers.size()) throw ConfigError("joint teacher reference index out of range");
    if (dropout < 0 || dropout >= 1 || dense_dropout < 0 || dense_dropout >= 1)
        throw ConfigError("joint teacher dropout must lie in [0,1)");
    for (std::size_t i = 0; i < teachers.size(); ++i)
        if (!teachers[i].taps.contains(levels.front()))
            throw ConfigError("teacher " + std::to_string(i) + " (" + teachers[i].name + ") has no level '" +
                              levels.front() + "'");
    const auto& ref = teachers[reference];
    std::size_t prev = 0;
    for (std::size_t c = 0; c < levels.size(); ++c) {
        if (!ref.taps.contains(levels[c]))
            throw ConfigError("reference teacher " + ref.name + " has no level '" + levels[c] + "'");
        const std::size_t b = ref.taps.boundary(levels[c]);
        if (c > 0 && b <= prev) throw ConfigError("joint teacher levels must run from input toward head");
        prev = b;
    }
}

nlohmann::json JointTeacherSpec::to_json() const {
    nlohmann::json j;
    j["teachers"] = nlohmann::json::array();
    for (const auto& t : teachers) j["teachers"].push_back(t.to_json());
    j["datasets"] = datasets;
    j["classes"] = classes;
    j["levels"] = levels;
    j["reference"] = reference;
    j["dropout"] = dropout;
    j["dense_dropout"] = dense_dropout;
    return j;
}

JointTeacherSpec JointTeacherSpec::from_json(const nlohmann::json& j) {
    JointTeacherSpec s;
    try {
        for (const auto& t : j.at("teachers")) s.teachers.push_back(models::ModelSpec::from_json(t));
        s.datasets = j.at("datasets").get<std::vector<std::string>>();
        s.classes = j.at("classes").get<std::vector<std::size_t>>();
        s.levels = j.at("levels").get<std::vector<std::string>>();
        s.reference = j.at("reference").get<std::size_t>();
        s.dropout = j.at("dropout").get<double>();
        s.dense_dropout = j.at("dense_dropout").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("joint teacher spec: ") + e.what());
    }
    return s;
}

std::string JointTeacherSpec::hash() const { return hex64(fnv1a(to_json().dump())); }

JointTeacher::JointTeacher(JointTeacherSpec spec, std::vector<models::Model> teachers, std::uint64_t seed)
    : spec_(std::move(spec)), teachers_(std::move(teachers)) {
    spec_.validate();
    if (teachers_.size() != spec_.teachers.size())
        throw ConfigError("joint teacher: " + std::to_string(teachers_.size()) + " models for " +
                          std::to_string(spec_.teachers.size()) + " teacher specs");
    std::vector<Shape> in_shapes;
    for (std::size_t i = 0; i < teachers_.size(); ++i) {
        if (!(teachers_[i].spec() == spec_.teachers[i]))
            throw ConfigError("joint teacher: model " + std::to_string(i) + " does not match its spec");
        teachers_[i].freeze();
        fusion_boundary_.push_back(spec_.teachers[i].taps.boundary(spec_.levels.front()));
        in_shapes.push_back(spec_.teachers[i].boundary_shapes()[fusion_boundary_.back()]);
    }
    const std::size_t rank = in_shapes.front().size();
    for (const auto& s : in_shapes)
        if (s.size() != rank)
            throw ConfigError("joint teacher: teachers expose level '" + spec_.levels.front() +
                              "' with different ranks");
    Shape target = in_shapes.front();
    for (const auto& s : in_shapes) {
        target[0] = std::max(target[0], s[0]);
        for (std::size_t a = 1; a < rank; ++a) target[a] = std::min(target[a], s[a]);
    }
    for (std::size_t i = 0; i < teachers_.size(); ++i)
        adaptors_.emplace_back(i, in_shapes[i], target, derive_seed(seed, "adaptor", i));

    Shape fused = target;
    fused[0] *= teachers_.size();
    const auto& ref = spec_.teachers[spec_.reference];
    const std::size_t b1 = ref.taps.boundary(spec_.levels.front());
    std::vector<models::LayerSpec> layers(ref.layers.begin() + static_cast<std::ptrdiff_t>(b1), ref.layers.end());
    trunk_ = models::LayerStack(fused, std::move(layers), derive_seed(seed, "trunk"), "trunk.");
    if (trunk_.output_shape().size() != 1)
        throw ConfigError("joint teacher trunk must end in a flat embedding, got " + shape_str(trunk_.output_shape()));
    for (const auto& level : spec_.levels) taps_.add(level, ref.taps.boundary(level) - b1);

    head_stream_ = derive_seed(0, "joint.head");
    head_dropout_ = trunk_.layers().empty() ? spec_.dropout : spec_.dense_dropout;
    const auto datasets = spec_.datasets;
    const auto classes = spec_.classes;
    spec_.datasets.clear();
    spec_.classes.clear();
    for (std::size_t d = 0; d < datasets.size(); ++d) add_head(datasets[d], classes[d], derive_seed(seed, "head", d));
}

std::size_t JointTeacher::add_head(const std::string& dataset, std::size_t classes, std::uint64_t seed) {
    if (std::find(spec_.datasets.begin(), spec_.datasets.end(), dataset) != spec_.datasets.end())
        throw ConfigError("joint teacher already has a head for '" + dataset + "'");
    if (classes < 1) throw ConfigError("head for '" + dataset + "' needs classes >= 1");
    const std::size_t width = trunk_.output_shape()[0];
    head_w_.emplace_back("head." + dataset + ".weight", xavier_init(width, classes, seed));
    head_b_.emplace_back("head." + dataset + ".bias", Tensor({classes}, 0.0));
    spec_.datasets.push_back(dataset);
    spec_.classes.push_back(classes);
    return spec_.datasets.size() - 1;
}

std::size_t JointTeacher::dataset_index(const std::string& name) const {
    auto it = std::find(spec_.datasets.begin(), spec_.datasets.end(), name);
    if (it == spec_.datasets.end()) throw QueryError("joint teacher has no head for dataset '" + name + "'");
    return static_cast<std::size_t>(it - spec_.datasets.begin());
}

Shape JointTeacher::level_shape(const std::string& level) const { return trunk_.shapes()[taps_.boundary(level)]; }

std::vector<Parameter*> JointTeacher::trainable_parameters() {
    std::vector<Parameter*> out;
    for (auto& a : adaptors_)
        for (auto* p : a.parameters()) out.push_back(p);
    for (auto* p : trunk_.parameters()) out.push_back(p);
    for (std::size_t d = 0; d < head_w_.size(); ++d) {
        out.push_back(&head_w_[d]);
        out.push_back(&head_b_[d]);
    }
    return out;
}

std::vector<Parameter*> JointTeacher::head_parameters(std::size_t dataset) {
    if (dataset >= head_w_.size()) throw QueryError("joint teacher head " + std::to_string(dataset) + " out of range");
    return {&head_w_[dataset], &head_b_[dataset]};
}

std::vector<Parameter*> JointTeacher::backbone_parameters() {
    std::vector<Parameter*> out;
    for (auto& t : teachers_)
        for (auto* p : t.parameters()) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> JointTeacher::buffers() { return trunk_.buffers(); }

Tensor JointTeacher::backbone_features(std::size_t i, const Tensor& inputs, std::size_t chunk) {
    auto& t = teachers_.at(i);
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < inputs.dim(0); b += chunk) {
        Tape tape(false);
        Var x = tape.constant(inputs.row_range(b, std::min(inputs.dim(0), b + chunk)));
        parts.push_back(t.body().run(tape, x, 0, fusion_boundary_[i], models::RunContext{}).value());
    }
    return stack_rows(parts);
}

Var JointTeacher::heads(Tape& tape, Var x, std::size_t dataset, const models::RunContext& ctx) {
    if (dataset >= head_w_.size())
        throw QueryError("joint teacher: no head " + std::to_string(dataset) + " (has " +
                         std::to_string(head_w_.size()) + ")");
    x = ops::dropout(x, head_dropout_, derive_seed(ctx.seed, head_stream_, ctx.step), ctx.mode);
    return ops::bias_add(ops::matmul(x, tape.param(head_w_[dataset])), tape.param(head_b_[dataset]));
}

JointTeacher::Output JointTeacher::forward_cached(Tape& tape, std::span<const Var> features, std::size_t dataset,
                                                  std::span<const std::string> levels,
                                                  const models::RunContext& ctx) {
    if (dataset >= head_w_.size())
        throw QueryError("joint teacher: no head " + std::to_string(dataset) + " (has " +
                         std::to_string(head_w_.size()) + ")");
    std::vector<std::size_t> wanted;
    for (const auto& l : levels) wanted.push_back(taps_.boundary(l));
    Var fused = fuse_embeddings(tape, adaptors_, features);
    std::map<std::size_t, Var> seen;
    Var x = trunk_.run(tape, fused, 0, trunk_.layers().size(), ctx, [&](std::size_t b, Var v) {
        if (std::find(wanted.begin(), wanted.end(), b) != wanted.end()) seen[b] = v;
    });
    Output out;
    for (std::size_t i = 0; i < levels.size(); ++i) out.embeddings[levels[i]] = seen.at(wanted[i]);
    out.logits = heads(tape, x, dataset, ctx);
    return out;
}

JointTeacher::Output JointTeacher::forward_raw(Tape& tape, Var inputs, std::size_t dataset,
                                               std::span<const std::string> levels, const models::RunContext& ctx) {
    std::vector<Var> features;
    for (std::size_t i = 0; i < teachers_.size(); ++i)
        features.push_back(teachers_[i].body().run(tape, inputs, 0, fusion_boundary_[i], models::RunContext{}));
    return forward_cached(tape, features, dataset, levels, ctx);
}

std::string JointTeacher::teacher_hash() {
    std::uint64_t h = fnv1a("joint-teacher-backbones:" + spec_.levels.front());
    for (auto& t : teachers_) h = fnv1a(t.fingerprint(), h);
    return hex64(h);
}

std::string JointTeacher::fingerprint() {
    std::uint64_t h = fnv1a(spec_.to_json().dump());
    h = fnv1a(teacher_hash(), h);
    for (const auto* p : trainable_parameters()) h = fnv1a(hex64(tensor_checksum(p->value)), h);
    for (const auto& [name, t] : buffers()) h = fnv1a(hex64(tensor_checksum(*t)), h);
    return hex64(h);
}

JointTeacher build_joint_teacher(JointTeacherSpec spec, std::vector<models::Model> teachers, std::uint64_t seed) {
    return JointTeacher(std::move(spec), std::move(teachers), seed);
}

void save_joint_teacher(JointTeacher& jt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "joint.json", std::ios::trunc);
        out << jt.spec().to_json().dump(2) << "\n";
        if (!out) throw IoError("cannot write " + (dir / "joint.json").string());
    }
    for (std::size_t i = 0; i < jt.teacher_count(); ++i)
        models::save_checkpoint(jt.teacher(i), dir / ("teacher_" + std::to_string(i)));
    const auto params = jt.trainable_parameters();
    const auto bufs = jt.buffers();
    models::save_parameters(params, bufs, dir / "fusion");
    std::ofstream out(dir / "fingerprint", std::ios::trunc);
    out << jt.fingerprint() << "\n";
}

JointTeacher load_joint_teacher(const std::filesystem::path& dir) {
    std::ifstream in(dir / "joint.json");
    if (!in) throw PreconditionError("no joint teacher checkpoint in " + dir.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("unreadable " + (dir / "joint.json").string() + ": " + e.what());
    }
    auto spec = JointTeacherSpec::from_json(j);
    std::vector<models::Model> teachers;
    for (std::size_t i = 0; i < spec.teachers.size(); ++i)
        teachers.push_back(models::load_checkpoint(dir / ("teacher_" + std::to_string(i))));
    JointTeacher jt(spec, std::move(teachers), 0);
    const auto params = jt.trainable_parameters();
    const auto bufs = jt.buffers();
    models::load_parameters(params, bufs, dir / "fusion");
    return jt;
}

}  // namespace mlfd::fusion
