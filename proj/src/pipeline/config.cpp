#include <fstream>
#include <sstream>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::pipeline {

using nlohmann::json;

namespace {

struct Entry {
    const char* key;
    json value;
    const char* help;
};

json train_defaults(json max_epochs, json min_epochs, json patience) {
    return json{{"optimizer", "adam"}, {"learning_rate", 0.001}, {"weight_decay", 0.0}, {"batch_size", 64},
                {"accumulation", 1},  {"max_epochs", max_epochs}, {"min_epochs", min_epochs}, {"patience", patience}};
}

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        {"experiment.id", "synth3", "run directory name under --out"},
        {"experiment.variant", "standard",
         "standard | same-arch | same-dataset-teacher | cross-dataset | single-dataset-kd | vary-m"},
        {"experiment.seeds", json::array({1, 2, 3, 4, 5}), "replicate seeds; every headline number is a mean over them"},
        {"experiment.master_seed", 1, "root of all randomness (data, initialization, shuffling, dropout)"},
        {"data.m", 3, "number of datasets in the synthetic family"},
        {"data.latent_dim", 16, "latent prototype dimension"},
        {"data.prototype_pool", 16, "shared pool of class prototypes the datasets draw from"},
        {"data.classes", json::array({8, 8, 8}), "class count per dataset"},
        {"data.train_samples", 2000, "training samples per dataset (validation is carved out of these)"},
        {"data.test_samples", 500, "test samples per dataset"},
        {"data.style_scale", 0.5, "magnitude of the per-dataset affine style transform"},
        {"data.noise_sigma", 0.5, "Gaussian noise added in latent space"},
        {"data.pixel_noise_sigma", 4.0, "Gaussian noise added after rendering"},
        {"data.render", "image", "image | vector"},
        {"data.image_side", 16, "rendered image side (single channel)"},
        {"data.vector_dim", 64, "rendered width in vector mode"},
        {"data.val_fraction", 0.1, "stratified share of the training samples held out for validation"},
        {"data.names", json::array(), "dataset names; empty means synth1..synthM"},
        {"models.teachers", json::array({"cnn-small", "cnn-se", "cnn-small"}),
         "teacher per dataset: library name (mlp-small, cnn-small, cnn-se) or a layer-spec object"},
        {"models.students", json::array({"cnn-small", "cnn-small", "cnn-small"}), "student per dataset"},
        {"models.pretrained_teachers", json::array(), "teacher checkpoint directories to use instead of training"},
        {"models.reference_teacher", 0, "teacher whose layers after the fusion level form the joint trunk"},
        {"taps.levels", json::array({"spatial1", "top"}), "distillation/fusion levels, input side first"},
        {"ablation.tap_sets",
         json::array({json::array({"top"}), json::array({"spatial1", "top"}),
                      json::array({"spatial2", "spatial1", "top"}),
                      json::array({"spatial3", "spatial2", "spatial1", "top"})}),
         "level sets swept by `ablate`"},
        {"ablation.beta", 0.2, "beta applied to every level during the sweep"},
        {"ablation.students", true, "also distill students for every swept level set"},
        {"kd.alpha", 0.6, "weight of the temperature-softened teacher term"},
        {"kd.betas", json::array({0.2, 0.2}), "embedding MSE weight per level"},
        {"kd.tau", 2.0, "temperature"},
        {"kd.per_dataset", json::array(), "optional per-dataset objects overriding alpha, betas, tau"},
        {"train.teacher", train_defaults(40, 20, 10), "individual teachers"},
        {"train.joint", train_defaults(nullptr, nullptr, 10),
         "joint teacher; null epochs default to 1/5 of the teacher budget"},
        {"train.student", train_defaults(40, 20, 10), "students and every baseline"},
        {"train.head", train_defaults(10, 5, 5), "brief head for a dataset unseen by the joint teacher"},
        {"fusion.dropout", 0.85, "dropout on the fused vector when fusing at a vector level"},
        {"fusion.dense_dropout", 0.5, "dropout before the heads when a trunk follows a spatial fusion"},
        {"baselines.dataset_specific", true, "student architecture trained with plain cross-entropy"},
        {"baselines.multi_head", true, "shared backbone with one head per dataset"},
        {"baselines.joint_head", true, "single head over the union of all classes"},
        {"cross_dataset.holdout", nullptr, "dataset excluded from the joint teacher; null means the last one"},
        {"same_dataset.target", 0, "dataset every teacher trains on in the same-dataset-teacher variant"},
        {"vary_m.values", json::array({2, 3}), "joint-teacher dataset counts compared by the vary-m variant"},
    };
    return table;
}

json::json_pointer pointer(const std::string& dotted) {
    std::string p;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) p += "/" + part;
    return json::json_pointer(p);
}

bool compatible(const json& def, const json& v) {
    if (def.is_null()) return v.is_null() || v.is_number();
    if (def.is_number()) return v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    if (def.is_object()) return v.is_object();
    return true;
}

void merge(const json& def, const json& user, json& out, const std::string& prefix, std::vector<std::string>& unknown,
           std::vector<std::string>& bad_type) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!def.contains(it.key())) {
            unknown.push_back(key);
            continue;
        }
        const json& d = def[it.key()];
        if (!compatible(d, it.value())) {
            bad_type.push_back(key);
            continue;
        }
        if (d.is_object()) merge(d, it.value(), out[it.key()], key, unknown, bad_type);
        else out[it.key()] = it.value();
    }
}

void collect_leaves(const json& def, const json& user, const std::string& prefix, std::vector<std::string>& out) {
    for (auto it = def.begin(); it != def.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        const bool given = user.is_object() && user.contains(it.key());
        if (it.value().is_object()) collect_leaves(it.value(), given ? user[it.key()] : json::object(), key, out);
        else if (!given) out.push_back(key);
    }
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return s;
}

training::TrainConfig parse_train(const json& j) {
    training::TrainConfig t;
    t.optimizer.kind = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    t.optimizer.learning_rate = j.at("learning_rate").get<double>();
    t.optimizer.weight_decay = j.at("weight_decay").get<double>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.accumulation = j.at("accumulation").get<std::size_t>();
    t.policy.max_epochs = j.at("max_epochs").get<std::size_t>();
    t.policy.min_epochs = j.at("min_epochs").get<std::size_t>();
    t.policy.patience = j.at("patience").get<std::size_t>();
    return t;
}

std::vector<json> per_dataset_models(const json& list, std::size_t m, const char* what) {
    std::vector<json> out(list.begin(), list.end());
    if (out.size() == 1) out.assign(m, out.front());
    if (out.size() != m)
        throw ConfigError(std::string("models.") + what + " lists " + std::to_string(out.size()) +
                          " entries for m = " + std::to_string(m));
    return out;
}

}  // namespace

Variant parse_variant(const std::string& name) {
    if (name == "standard") return Variant::Standard;
    if (name == "same-arch") return Variant::SameArch;
    if (name == "same-dataset-teacher") return Variant::SameDatasetTeacher;
    if (name == "cross-dataset") return Variant::CrossDataset;
    if (name == "single-dataset-kd") return Variant::SingleDatasetKd;
    if (name == "vary-m") return Variant::VaryM;
    throw ConfigError("unknown experiment variant '" + name + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Standard: return "standard";
        case Variant::SameArch: return "same-arch";
        case Variant::SameDatasetTeacher: return "same-dataset-teacher";
        case Variant::CrossDataset: return "cross-dataset";
        case Variant::SingleDatasetKd: return "single-dataset-kd";
        case Variant::VaryM: return "vary-m";
    }
    return "?";
}

json default_config() {
    json doc = json::object();
    for (const auto& e : entries()) doc[pointer(e.key)] = e.value;
    return doc;
}

ResolvedConfig resolve_config(const json& user, std::span<const std::string> overrides, std::string source) {
    if (!user.is_object()) throw ConfigError("configuration root must be an object");
    const json def = default_config();
    json given = user;
    std::vector<std::string> unknown, bad_type;
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
        const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
        if (!def.contains(pointer(key))) {
            unknown.push_back(key);
            continue;
        }
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        given[pointer(key)] = value;
    }
    ResolvedConfig r;
    r.doc = def;
    r.source = std::move(source);
    r.overrides.assign(overrides.begin(), overrides.end());
    merge(def, given, r.doc, "", unknown, bad_type);
    if (!unknown.empty()) throw ConfigError("unknown configuration keys: " + join(unknown));
    if (!bad_type.empty()) throw ConfigError("configuration keys with the wrong type: " + join(bad_type));
    collect_leaves(def, given, "", r.defaulted);
    r.experiment().validate();
    return r;
}

ResolvedConfig load_config(const std::optional<std::filesystem::path>& path, std::span<const std::string> overrides) {
    if (!path) return resolve_config(json::object(), overrides, "<defaults>");
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config file " + path->string());
    json user;
    try {
        user = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path->string() + " is not valid JSON: " + e.what());
    }
    return resolve_config(user, overrides, path->string());
}

std::string ResolvedConfig::hash() const { return hex64(fnv1a(doc.dump())); }

ExperimentConfig ResolvedConfig::experiment() const {
    ExperimentConfig c;
    try {
        const json& e = doc.at("experiment");
        c.id = e.at("id").get<std::string>();
        c.variant = parse_variant(e.at("variant").get<std::string>());
        c.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
        c.master_seed = e.at("master_seed").get<std::uint64_t>();

        const json& d = doc.at("data");
        auto& f = c.family;
        f.m = d.at("m").get<std::size_t>();
        f.latent_dim = d.at("latent_dim").get<std::size_t>();
        f.prototype_pool = d.at("prototype_pool").get<std::size_t>();
        f.classes = d.at("classes").get<std::vector<std::size_t>>();
        if (f.classes.size() == 1 && f.m > 1) f.classes.assign(f.m, f.classes.front());
        f.train_samples = d.at("train_samples").get<std::size_t>();
        f.test_samples = d.at("test_samples").get<std::size_t>();
        f.style_scale = d.at("style_scale").get<double>();
        f.noise_sigma = d.at("noise_sigma").get<double>();
        f.pixel_noise_sigma = d.at("pixel_noise_sigma").get<double>();
        const auto render = d.at("render").get<std::string>();
        if (render != "image" && render != "vector") throw ConfigError("data.render must be image or vector");
        f.render = render == "image" ? data::RenderMode::Image : data::RenderMode::Vector;
        f.image_side = d.at("image_side").get<std::size_t>();
        f.vector_dim = d.at("vector_dim").get<std::size_t>();
        f.val_fraction = d.at("val_fraction").get<double>();
        f.names = d.at("names").get<std::vector<std::string>>();
        f.master_seed = derive_seed(c.master_seed, "data");

        const json& m = doc.at("models");
        c.teachers = per_dataset_models(m.at("teachers"), f.m, "teachers");
        c.students = per_dataset_models(m.at("students"), f.m, "students");
        c.pretrained_teachers = m.at("pretrained_teachers").get<std::vector<std::string>>();
        c.reference_teacher = m.at("reference_teacher").get<std::size_t>();

        c.levels = doc.at("taps").at("levels").get<std::vector<std::string>>();
        const json& a = doc.at("ablation");
        c.ablation_tap_sets = a.at("tap_sets").get<std::vector<std::vector<std::string>>>();
        c.ablation_beta = a.at("beta").get<double>();
        c.ablation_students = a.at("students").get<bool>();

        const json& kd = doc.at("kd");
        distill::KDConfig base;
        base.alpha = kd.at("alpha").get<double>();
        base.betas = kd.at("betas").get<std::vector<double>>();
        base.tau = kd.at("tau").get<double>();
        c.kd.assign(f.m, base);
        const auto& per = kd.at("per_dataset");
        if (!per.empty() && per.size() != f.m)
            throw ConfigError("kd.per_dataset must be empty or list m = " + std::to_string(f.m) + " entries");
        for (std::size_t i = 0; i < per.size(); ++i) {
            for (auto it = per[i].begin(); it != per[i].end(); ++it)
                if (it.key() != "alpha" && it.key() != "betas" && it.key() != "tau")
                    throw ConfigError("unknown configuration keys: kd.per_dataset[" + std::to_string(i) + "]." +
                                      it.key());
            c.kd[i].alpha = per[i].value("alpha", base.alpha);
            c.kd[i].betas = per[i].value("betas", base.betas);
            c.kd[i].tau = per[i].value("tau", base.tau);
        }

        const json& t = doc.at("train");
        c.teacher_train = parse_train(t.at("teacher"));
        json joint = t.at("joint");
        if (joint.at("max_epochs").is_null())
            joint["max_epochs"] = std::max<std::size_t>(1, c.teacher_train.policy.max_epochs / 5);
        if (joint.at("min_epochs").is_null())
            joint["min_epochs"] = std::min(joint["max_epochs"].get<std::size_t>(),
                                           std::max<std::size_t>(1, c.teacher_train.policy.min_epochs / 5));
        c.joint_train = parse_train(joint);
        c.student_train = parse_train(t.at("student"));
        c.head_train = parse_train(t.at("head"));

        c.fusion_dropout = doc.at("fusion").at("dropout").get<double>();
        c.fusion_dense_dropout = doc.at("fusion").at("dense_dropout").get<double>();
        const json& b = doc.at("baselines");
        c.dataset_specific = b.at("dataset_specific").get<bool>();
        c.multi_head = b.at("multi_head").get<bool>();
        c.joint_head = b.at("joint_head").get<bool>();
        const json& h = doc.at("cross_dataset").at("holdout");
        c.holdout = h.is_null() ? f.m - 1 : h.get<std::size_t>();
        c.same_dataset_target = doc.at("same_dataset").at("target").get<std::size_t>();
        c.vary_m = doc.at("vary_m").at("values").get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed configuration value: ") + e.what());
    }
    return c;
}

void ExperimentConfig::validate() const {
    if (id.empty() || id.find('/') != std::string::npos) throw ConfigError("experiment.id must be a plain name");
    if (seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
    family.validate();
    if (levels.empty()) throw ConfigError("taps.levels must name at least one level");
    for (const auto& k : kd) k.validate(levels.size());
    for (const auto* t : {&teacher_train, &joint_train, &student_train, &head_train}) t->validate();
    if (reference_teacher >= family.m) throw ConfigError("models.reference_teacher out of range");
    if (!pretrained_teachers.empty() && pretrained_teachers.size() != family.m)
        throw ConfigError("models.pretrained_teachers must list m checkpoints");
    if (fusion_dropout < 0 || fusion_dropout >= 1 || fusion_dense_dropout < 0 || fusion_dense_dropout >= 1)
        throw ConfigError("fusion dropout must lie in [0,1)");
    if (ablation_beta < 0) throw ConfigError("ablation.beta must be >= 0");
    for (const auto& set : ablation_tap_sets)
        if (set.empty()) throw ConfigError("ablation.tap_sets entries must not be empty");
    if (variant == Variant::CrossDataset && (family.m < 2 || holdout >= family.m))
        throw ConfigError("cross-dataset variant needs m >= 2 and a valid holdout index");
    if (variant == Variant::SameDatasetTeacher && same_dataset_target >= family.m)
        throw ConfigError("same_dataset.target out of range");
    if (variant == Variant::VaryM)
        for (auto v : vary_m)
            if (v < 1 || v > family.m) throw ConfigError("vary_m.values must lie in [1, m]");
    if ((multi_head || joint_head) && family.m < 2 && variant == Variant::Standard)
        throw ConfigError("multi-head and joint-head baselines need m >= 2");
}

namespace {

models::ModelSpec resolve_spec(const json& entry, const data::LabeledDataset& d, const std::string& role) {
    if (entry.is_string()) {
        auto s = models::library_spec(entry.get<std::string>(), d.sample_shape(), d.num_classes);
        return s;
    }
    if (!entry.is_object()) throw ConfigError(role + " model must be a library name or a spec object");
    json j = entry;
    if (!j.contains("input_shape")) j["input_shape"] = d.sample_shape();
    if (!j.contains("classes")) j["classes"] = d.num_classes;
    if (!j.contains("name")) j["name"] = role;
    auto s = models::ModelSpec::from_json(j);
    if (s.input_shape != d.sample_shape() || s.classes != d.num_classes)
        throw ConfigError(role + " spec does not match dataset " + d.name);
    return s;
}

}  // namespace

models::ModelSpec ExperimentConfig::teacher_spec(std::size_t i, const data::LabeledDataset& d) const {
    const json& entry = variant == Variant::SameArch ? teachers.at(0) : teachers.at(i);
    return resolve_spec(entry, d, "teacher " + std::to_string(i + 1));
}

models::ModelSpec ExperimentConfig::student_spec(std::size_t i, const data::LabeledDataset& d) const {
    return resolve_spec(students.at(i), d, "student " + std::to_string(i + 1));
}

std::uint64_t ExperimentConfig::job_seed(const std::string& job, std::uint64_t seed) const {
    return derive_seed(master_seed, job, seed);
}

std::string config_reference() {
    std::ostringstream os;
    os << "# Configuration keys (JSON; override any leaf with --set key=value)\n\n";
    for (const auto& e : entries()) {
        if (e.value.is_object()) {
            for (auto it = e.value.begin(); it != e.value.end(); ++it)
                os << e.key << "." << it.key() << " = " << it.value().dump() << "\n";
            os << "    " << e.help << "\n";
        } else {
            os << e.key << " = " << e.value.dump() << "\n    " << e.help << "\n";
        }
    }
    return os.str();
}

}  // namespace mlfd::pipeline
