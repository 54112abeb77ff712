#include <fstream>
#include <map>
#include <sstream>

#include "mlfd/error.hpp"
#include "mlfd/models.hpp"

namespace mlfd::models {

namespace {

namespace fs = std::filesystem;

std::string file_name_for(const std::string& tensor_name) { return tensor_name + ".tnsr"; }

std::map<std::string, std::string> read_index(const fs::path& dir) {
    const auto path = dir / "checkpoint";
    std::ifstream in(path);
    if (!in) throw FormatError("missing checkpoint manifest " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw FormatError("malformed line '" + line + "' in " + path.string());
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    if (kv["format"] != "mlfd-checkpoint 1") throw FormatError("unsupported checkpoint format in " + path.string());
    return kv;
}

void write_index(const fs::path& dir, const std::map<std::string, std::string>& kv) {
    std::ofstream out(dir / "checkpoint", std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
    out << "format = mlfd-checkpoint 1\n";
    for (const auto& [k, v] : kv)
        if (k != "format") out << k << " = " << v << "\n";
}

Tensor load_checked(const fs::path& dir, const std::string& name, const std::map<std::string, std::string>& kv,
                    const Shape& expect) {
    const auto path = dir / file_name_for(name);
    if (!fs::exists(path)) throw CorruptionError("checkpoint tensor missing: " + path.string());
    auto it = kv.find("tensor." + name);
    if (it == kv.end()) throw FormatError("checkpoint manifest lacks tensor '" + name + "' in " + dir.string());
    Tensor t = load_tensor(path);
    if (hex64(tensor_checksum(t)) != it->second) throw CorruptionError("checksum mismatch for " + path.string());
    if (t.shape() != expect)
        throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(expect));
    return t;
}

}  // namespace

void save_parameters(std::span<Parameter* const> params, std::span<const std::pair<std::string, Tensor*>> buffers,
                     const fs::path& dir) {
    fs::create_directories(dir);
    std::map<std::string, std::string> kv;
    auto keep = [&](const std::string& name, const Tensor& t) {
        if (kv.count("tensor." + name)) throw ConfigError("duplicate tensor name '" + name + "' in checkpoint");
        save_tensor(dir / file_name_for(name), t);
        kv["tensor." + name] = hex64(tensor_checksum(t));
    };
    for (auto* p : params) keep(p->name, p->value);
    for (const auto& [name, t] : buffers) keep(name, *t);
    if (fs::exists(dir / "checkpoint")) {
        for (const auto& [k, v] : read_index(dir))
            if (!kv.count(k)) kv[k] = v;
    }
    write_index(dir, kv);
}

void load_parameters(std::span<Parameter* const> params, std::span<const std::pair<std::string, Tensor*>> buffers,
                     const fs::path& dir) {
    const auto kv = read_index(dir);
    for (auto* p : params) {
        p->value = load_checked(dir, p->name, kv, p->value.shape());
        p->grad = Tensor(p->value.shape());
    }
    for (const auto& [name, t] : buffers) *t = load_checked(dir, name, kv, t->shape());
}

void save_checkpoint(Model& model, const fs::path& dir) {
    fs::create_directories(dir);
    const auto spec_json = model.spec().to_json().dump(2);
    {
        std::ofstream out(dir / "spec.json", std::ios::trunc);
        if (!out) throw IoError("cannot write " + (dir / "spec.json").string());
        out << spec_json << "\n";
    }
    const auto params = model.parameters();
    const auto buffers = model.buffers();
    save_parameters(params, buffers, dir);
    auto kv = read_index(dir);
    kv["spec_hash"] = model.spec().hash();
    kv["fingerprint"] = model.fingerprint();
    write_index(dir, kv);
}

Model load_checkpoint(const fs::path& dir) {
    const auto kv = read_index(dir);
    std::ifstream in(dir / "spec.json");
    if (!in) throw FormatError("missing spec.json in " + dir.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("unreadable spec.json in " + dir.string() + ": " + e.what());
    }
    ModelSpec spec = ModelSpec::from_json(j);
    auto it = kv.find("spec_hash");
    if (it == kv.end() || it->second != spec.hash())
        throw CorruptionError("spec.json does not match the checkpoint manifest in " + dir.string());
    Model model(spec, 0);
    const auto params = model.parameters();
    const auto buffers = model.buffers();
    load_parameters(params, buffers, dir);
    return model;
}

std::string checkpoint_spec_hash(const fs::path& dir) {
    const auto kv = read_index(dir);
    auto it = kv.find("spec_hash");
    if (it == kv.end()) throw FormatError("checkpoint in " + dir.string() + " records no spec hash");
    return it->second;
}

std::string checkpoint_fingerprint(const fs::path& dir) {
    const auto kv = read_index(dir);
    auto it = kv.find("fingerprint");
    if (it == kv.end()) throw FormatError("checkpoint in " + dir.string() + " records no fingerprint");
    return it->second;
}

}  // namespace mlfd::models
