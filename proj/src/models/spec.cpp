#include <algorithm>
#include <sstream>

#include "mlfd/error.hpp"
#include "mlfd/models.hpp"

namespace mlfd::models {

LayerSpec LayerSpec::dense(std::size_t units) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.units = units;
    return l;
}

LayerSpec LayerSpec::conv(std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.units = out;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
}

LayerSpec LayerSpec::batchnorm() {
    LayerSpec l;
    l.kind = LayerKind::BatchNorm;
    return l;
}

LayerSpec LayerSpec::gelu() {
    LayerSpec l;
    l.kind = LayerKind::Gelu;
    return l;
}

LayerSpec LayerSpec::relu() {
    LayerSpec l;
    l.kind = LayerKind::Relu;
    return l;
}

LayerSpec LayerSpec::dropout(double p) {
    LayerSpec l;
    l.kind = LayerKind::Dropout;
    l.p = p;
    return l;
}

LayerSpec LayerSpec::avgpool(std::size_t window) {
    LayerSpec l;
    l.kind = LayerKind::AvgPool;
    l.window = window;
    return l;
}

LayerSpec LayerSpec::global_avgpool() {
    LayerSpec l;
    l.kind = LayerKind::GlobalAvgPool;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::Flatten;
    return l;
}

LayerSpec LayerSpec::squeeze_excite(std::size_t reduction) {
    LayerSpec l;
    l.kind = LayerKind::SqueezeExcite;
    l.reduction = reduction;
    return l;
}

std::string LayerSpec::describe() const {
    std::ostringstream os;
    switch (kind) {
        case LayerKind::Dense: os << "dense(" << units << ")"; break;
        case LayerKind::Conv:
            os << "conv(" << units << ",k=" << kernel << ",s=" << stride << ",p=" << padding << ")";
            break;
        case LayerKind::BatchNorm: os << "batchnorm"; break;
        case LayerKind::Gelu: os << "gelu"; break;
        case LayerKind::Relu: os << "relu"; break;
        case LayerKind::Dropout: os << "dropout(" << p << ")"; break;
        case LayerKind::AvgPool: os << "avgpool(" << window << ")"; break;
        case LayerKind::GlobalAvgPool: os << "global_avgpool"; break;
        case LayerKind::Flatten: os << "flatten"; break;
        case LayerKind::SqueezeExcite: os << "squeeze_excite(" << reduction << ")"; break;
    }
    return os.str();
}

nlohmann::json to_json(const LayerSpec& l) {
    using nlohmann::json;
    switch (l.kind) {
        case LayerKind::Dense: return json{{"type", "dense"}, {"units", l.units}};
        case LayerKind::Conv:
            return json{{"type", "conv"}, {"out", l.units}, {"kernel", l.kernel}, {"stride", l.stride}, {"padding", l.padding}};
        case LayerKind::BatchNorm: return json{{"type", "batchnorm"}};
        case LayerKind::Gelu: return json{{"type", "gelu"}};
        case LayerKind::Relu: return json{{"type", "relu"}};
        case LayerKind::Dropout: return json{{"type", "dropout"}, {"p", l.p}};
        case LayerKind::AvgPool: return json{{"type", "avgpool"}, {"window", l.window}};
        case LayerKind::GlobalAvgPool: return json{{"type", "global_avgpool"}};
        case LayerKind::Flatten: return json{{"type", "flatten"}};
        case LayerKind::SqueezeExcite: return json{{"type", "squeeze_excite"}, {"reduction", l.reduction}};
    }
    return {};
}

namespace {

std::size_t get_count(const nlohmann::json& j, const char* key, std::size_t fallback, bool required) {
    if (!j.contains(key)) {
        if (required) throw ConfigError(std::string("layer descriptor lacks '") + key + "': " + j.dump());
        return fallback;
    }
    if (!j[key].is_number_unsigned()) throw ConfigError(std::string("layer field '") + key + "' must be a nonnegative integer");
    return j[key].get<std::size_t>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed) {
    std::vector<std::string> unknown;
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; }))
            unknown.push_back(it.key());
    if (!unknown.empty()) {
        std::string msg = "unknown keys in layer descriptor:";
        for (const auto& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
}

}  // namespace

LayerSpec layer_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
        throw ConfigError("layer descriptor needs a string 'type': " + j.dump());
    const auto type = j["type"].get<std::string>();
    if (type == "dense") {
        reject_unknown(j, {"type", "units"});
        return LayerSpec::dense(get_count(j, "units", 0, true));
    }
    if (type == "conv") {
        reject_unknown(j, {"type", "out", "kernel", "stride", "padding"});
        const auto k = get_count(j, "kernel", 3, false);
        return LayerSpec::conv(get_count(j, "out", 0, true), k, get_count(j, "stride", 1, false),
                               get_count(j, "padding", k / 2, false));
    }
    if (type == "batchnorm") return reject_unknown(j, {"type"}), LayerSpec::batchnorm();
    if (type == "gelu") return reject_unknown(j, {"type"}), LayerSpec::gelu();
    if (type == "relu") return reject_unknown(j, {"type"}), LayerSpec::relu();
    if (type == "flatten") return reject_unknown(j, {"type"}), LayerSpec::flatten();
    if (type == "global_avgpool") return reject_unknown(j, {"type"}), LayerSpec::global_avgpool();
    if (type == "dropout") {
        reject_unknown(j, {"type", "p"});
        if (!j.contains("p") || !j["p"].is_number()) throw ConfigError("dropout layer needs numeric 'p'");
        return LayerSpec::dropout(j["p"].get<double>());
    }
    if (type == "avgpool") {
        reject_unknown(j, {"type", "window"});
        return LayerSpec::avgpool(get_count(j, "window", 2, false));
    }
    if (type == "squeeze_excite") {
        reject_unknown(j, {"type", "reduction"});
        return LayerSpec::squeeze_excite(get_count(j, "reduction", 4, false));
    }
    throw ConfigError("unknown layer type '" + type + "'");
}

void TapSet::add(std::string name, std::size_t boundary) {
    if (contains(name)) throw ConfigError("duplicate tap '" + name + "'");
    if (!boundaries.empty() && boundary <= boundaries.back())
        throw ConfigError("tap '" + name + "' must bind a deeper boundary than '" + names.back() + "'");
    names.push_back(std::move(name));
    boundaries.push_back(boundary);
}

bool TapSet::contains(const std::string& name) const {
    return std::find(names.begin(), names.end(), name) != names.end();
}

std::size_t TapSet::boundary(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw QueryError("level '" + name + "' is not in the tap set");
    return boundaries[static_cast<std::size_t>(it - names.begin())];
}

Shape layer_output_shape(const LayerSpec& l, const Shape& in, std::size_t index) {
    const auto where = [&] { return "layer " + std::to_string(index) + " (" + l.describe() + ")"; };
    const auto fail = [&](const std::string& why) -> Shape {
        throw ConfigError("incompatible layers: " + where() + " cannot follow " +
                          (index == 0 ? std::string("the input") : "layer " + std::to_string(index - 1)) +
                          " producing " + shape_str(in) + ": " + why);
    };
    switch (l.kind) {
        case LayerKind::Dense:
            if (in.size() != 1) return fail("dense needs a flat input");
            if (l.units == 0) return fail("zero units");
            return {l.units};
        case LayerKind::Conv: {
            if (in.size() != 3) return fail("conv needs a (C,H,W) input");
            if (l.units == 0 || l.kernel == 0 || l.stride == 0) return fail("zero extent");
            if (in[1] + 2 * l.padding < l.kernel || in[2] + 2 * l.padding < l.kernel) return fail("kernel larger than input");
            return {l.units, (in[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                    (in[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        }
        case LayerKind::BatchNorm:
            if (in.size() != 1 && in.size() != 3) return fail("batchnorm needs a flat or (C,H,W) input");
            return in;
        case LayerKind::Gelu:
        case LayerKind::Relu: return in;
        case LayerKind::Dropout:
            if (!(l.p >= 0.0 && l.p < 1.0)) return fail("dropout probability outside [0,1)");
            return in;
        case LayerKind::AvgPool:
            if (in.size() != 3) return fail("avgpool needs a (C,H,W) input");
            if (l.window == 0 || in[1] % l.window || in[2] % l.window) return fail("window does not divide spatial extent");
            return {in[0], in[1] / l.window, in[2] / l.window};
        case LayerKind::GlobalAvgPool:
            if (in.size() != 3) return fail("global_avgpool needs a (C,H,W) input");
            return {in[0]};
        case LayerKind::Flatten: return {numel(in)};
        case LayerKind::SqueezeExcite:
            if (in.size() != 3) return fail("squeeze_excite needs a (C,H,W) input");
            if (l.reduction == 0) return fail("zero reduction");
            return in;
    }
    return in;
}

std::vector<Shape> ModelSpec::boundary_shapes() const {
    if (input_shape.empty()) throw ConfigError("model '" + name + "' has no input shape");
    std::vector<Shape> shapes{input_shape};
    for (std::size_t i = 0; i < layers.size(); ++i) shapes.push_back(layer_output_shape(layers[i], shapes.back(), i));
    return shapes;
}

void ModelSpec::validate() const {
    const auto shapes = boundary_shapes();
    if (shapes.back().size() != 1)
        throw ConfigError("model '" + name + "': the head needs a flat pre-head activation, got " +
                          shape_str(shapes.back()));
    if (classes < 1) throw ConfigError("model '" + name + "': head needs >= 1 class");
    if (taps.size() < 1) throw ConfigError("model '" + name + "': tap set must name at least one level");
    for (std::size_t i = 0; i < taps.size(); ++i) {
        if (taps.boundaries[i] > layers.size())
            throw ConfigError("model '" + name + "': tap '" + taps.names[i] + "' bound to nonexistent boundary " +
                              std::to_string(taps.boundaries[i]));
        if (i && taps.boundaries[i] <= taps.boundaries[i - 1])
            throw ConfigError("model '" + name + "': tap bindings must strictly increase in depth");
    }
}

nlohmann::json ModelSpec::to_json() const {
    nlohmann::json layers_json = nlohmann::json::array();
    for (const auto& l : layers) layers_json.push_back(models::to_json(l));
    nlohmann::json taps_json = nlohmann::json::array();
    for (std::size_t i = 0; i < taps.size(); ++i)
        taps_json.push_back({{"name", taps.names[i]}, {"boundary", taps.boundaries[i]}});
    return {{"name", name}, {"input_shape", input_shape}, {"layers", layers_json}, {"classes", classes}, {"taps", taps_json}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model spec must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "name" && it.key() != "input_shape" && it.key() != "layers" && it.key() != "classes" &&
            it.key() != "taps")
            throw ConfigError("unknown key in model spec: " + it.key());
    ModelSpec s;
    try {
        s.name = j.value("name", std::string("custom"));
        s.input_shape = j.at("input_shape").get<Shape>();
        s.classes = j.at("classes").get<std::size_t>();
        for (const auto& l : j.at("layers")) s.layers.push_back(layer_from_json(l));
        for (const auto& t : j.at("taps")) s.taps.add(t.at("name").get<std::string>(), t.at("boundary").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string ModelSpec::hash() const { return hex64(fnv1a(to_json().dump())); }

std::size_t weighted_depth(const ModelSpec& spec) {
    std::size_t d = 1;  // head
    for (const auto& l : spec.layers) d += (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv) ? 1 : 0;
    return d;
}

std::vector<std::string> library_names() { return {"mlp-small", "cnn-small", "cnn-se"}; }

ModelSpec library_spec(const std::string& arch, const Shape& input_shape, std::size_t classes) {
    ModelSpec s;
    s.name = arch;
    s.input_shape = input_shape;
    s.classes = classes;
    using L = LayerSpec;
    if (arch == "mlp-small") {
        s.layers = {L::flatten(), L::dense(64), L::gelu(), L::dense(64), L::gelu(), L::dense(32), L::gelu()};
        s.taps.add("hidden2", 3);
        s.taps.add("hidden1", 5);
        s.taps.add("top", 7);
    } else if (arch == "cnn-small" || arch == "cnn-se") {
        if (input_shape.size() != 3)
            throw ConfigError("architecture '" + arch + "' needs image inputs (C,H,W), got " + shape_str(input_shape));
        s.layers = {L::conv(8), L::batchnorm(), L::gelu()};
        s.taps.add("spatial3", s.layers.size());
        s.layers.insert(s.layers.end(), {L::avgpool(2), L::conv(8), L::batchnorm(), L::gelu()});
        s.taps.add("spatial2", s.layers.size());
        s.layers.insert(s.layers.end(), {L::avgpool(2), L::conv(16), L::batchnorm(), L::gelu()});
        if (arch == "cnn-se") s.layers.push_back(L::squeeze_excite(4));
        s.taps.add("spatial1", s.layers.size());
        s.layers.insert(s.layers.end(), {L::flatten(), L::dense(32), L::gelu()});
        s.taps.add("top", s.layers.size());
    } else {
        throw ConfigError("unknown architecture '" + arch + "' (expected mlp-small, cnn-small or cnn-se)");
    }
    s.validate();
    return s;
}

}  // namespace mlfd::models
