#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mlfd/data.hpp"
#include "mlfd/error.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::data {

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

Shape LabeledDataset::sample_shape() const {
    return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

const std::vector<std::size_t>& LabeledDataset::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Val: return val;
        case Split::Test: return test;
    }
    return train;
}

void LabeledDataset::validate() const {
    if (labels.empty()) throw FormatError("dataset '" + name + "' has no samples");
    if (num_classes == 0) throw FormatError("dataset '" + name + "' has zero classes");
    if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
        throw FormatError("dataset '" + name + "' inputs " + shape_str(inputs.shape()) + " do not match " +
                          std::to_string(labels.size()) + " labels");
    for (auto y : labels)
        if (y >= num_classes)
            throw FormatError("dataset '" + name + "' label " + std::to_string(y) + " >= class count " +
                              std::to_string(num_classes));
    std::vector<char> seen(labels.size(), 0);
    for (const auto* part : {&train, &val, &test})
        for (auto i : *part) {
            if (i >= labels.size()) throw FormatError("dataset '" + name + "' split index out of range");
            if (seen[i]++) throw FormatError("dataset '" + name + "' splits overlap at sample " + std::to_string(i));
        }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw FormatError("dataset '" + name + "' splits do not cover every sample");
}

bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
    return a.name == b.name && bitwise_equal(a.inputs, b.inputs) && a.labels == b.labels &&
           a.num_classes == b.num_classes && a.train == b.train && a.val == b.val && a.test == b.test;
}

namespace {

std::string join_indices(const std::vector<std::size_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
    return os.str();
}

std::string splits_text(const LabeledDataset& d) {
    return "train: " + join_indices(d.train) + "\nval: " + join_indices(d.val) + "\ntest: " + join_indices(d.test) +
           "\n";
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("missing manifest " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw FormatError("malformed manifest line '" + line + "' in " + path.string());
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key,
                         const std::filesystem::path& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("manifest " + path.string() + " lacks field '" + key + "'");
    return it->second;
}

std::size_t parse_count(const std::string& text, const std::string& key) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &pos);
    } catch (const std::exception&) {
        throw FormatError("manifest field '" + key + "' is not a decimal integer: '" + text + "'");
    }
    if (pos != text.size()) throw FormatError("manifest field '" + key + "' is not a decimal integer: '" + text + "'");
    return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) out.push_back(parse_count(tok, "splits"));
    return out;
}

}  // namespace

void save_dataset(const LabeledDataset& d, const std::filesystem::path& dir) {
    d.validate();
    std::filesystem::create_directories(dir);
    std::vector<double> label_values(d.labels.begin(), d.labels.end());
    const Tensor labels({d.labels.size()}, std::move(label_values));
    save_tensor(dir / "inputs.tnsr", d.inputs);
    save_tensor(dir / "labels.tnsr", labels);
    const std::string splits = splits_text(d);
    {
        std::ofstream out(dir / "splits", std::ios::trunc);
        out << splits;
    }
    std::ofstream m(dir / "manifest", std::ios::trunc);
    if (!m) throw IoError("cannot write manifest in " + dir.string());
    std::ostringstream shape;
    for (std::size_t i = 0; i < d.sample_shape().size(); ++i) shape << (i ? " " : "") << d.sample_shape()[i];
    m << "format = mlfd-dataset 1\n"
      << "name = " << d.name << "\n"
      << "samples = " << d.size() << "\n"
      << "classes = " << d.num_classes << "\n"
      << "input_shape = " << shape.str() << "\n"
      << "train = " << d.train.size() << "\n"
      << "val = " << d.val.size() << "\n"
      << "test = " << d.test.size() << "\n"
      << "inputs_checksum = " << hex64(file_checksum(dir / "inputs.tnsr")) << "\n"
      << "labels_checksum = " << hex64(file_checksum(dir / "labels.tnsr")) << "\n"
      << "splits_checksum = " << hex64(fnv1a(splits)) << "\n";
}

LabeledDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest = dir / "manifest";
    const auto kv = read_key_values(manifest);
    if (field(kv, "format", manifest) != "mlfd-dataset 1") throw FormatError("unsupported dataset format in " + manifest.string());
    LabeledDataset d;
    d.name = field(kv, "name", manifest);
    const std::size_t samples = parse_count(field(kv, "samples", manifest), "samples");
    d.num_classes = parse_count(field(kv, "classes", manifest), "classes");
    if (d.num_classes == 0) throw FormatError("manifest " + manifest.string() + " declares zero classes");
    if (samples == 0) throw FormatError("manifest " + manifest.string() + " declares zero samples");
    Shape sample_shape;
    {
        std::istringstream is(field(kv, "input_shape", manifest));
        std::string tok;
        while (is >> tok) sample_shape.push_back(parse_count(tok, "input_shape"));
    }
    const std::size_t n_train = parse_count(field(kv, "train", manifest), "train");
    const std::size_t n_val = parse_count(field(kv, "val", manifest), "val");
    const std::size_t n_test = parse_count(field(kv, "test", manifest), "test");

    for (const auto& [file, key] : {std::pair{"inputs.tnsr", "inputs_checksum"}, std::pair{"labels.tnsr", "labels_checksum"}}) {
        const auto path = dir / file;
        if (!std::filesystem::exists(path)) throw CorruptionError("missing tensor file " + path.string());
        if (hex64(file_checksum(path)) != field(kv, key, manifest)) {
            load_tensor(path);  // reports truncation with the file name when that is the cause
            throw CorruptionError("checksum mismatch for " + path.string());
        }
    }
    d.inputs = load_tensor(dir / "inputs.tnsr");
    const Tensor labels = load_tensor(dir / "labels.tnsr");

    std::ifstream sf(dir / "splits");
    if (!sf) throw FormatError("missing splits file in " + dir.string());
    std::stringstream ss;
    ss << sf.rdbuf();
    const std::string splits = ss.str();
    if (hex64(fnv1a(splits)) != field(kv, "splits_checksum", manifest))
        throw CorruptionError("checksum mismatch for " + (dir / "splits").string());
    std::istringstream lines(splits);
    std::string line;
    while (std::getline(lines, line)) {
        auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError("malformed splits line in " + dir.string());
        const std::string key = line.substr(0, colon);
        auto idx = parse_index_list(line.substr(colon + 1));
        if (key == "train") d.train = std::move(idx);
        else if (key == "val") d.val = std::move(idx);
        else if (key == "test") d.test = std::move(idx);
        else throw FormatError("unknown split '" + key + "' in " + dir.string());
    }

    Shape expect{samples};
    expect.insert(expect.end(), sample_shape.begin(), sample_shape.end());
    if (d.inputs.shape() != expect)
        throw FormatError("inputs.tnsr shape " + shape_str(d.inputs.shape()) + " disagrees with manifest " +
                          shape_str(expect));
    if (labels.shape() != Shape{samples}) throw FormatError("labels.tnsr shape disagrees with manifest");
    d.labels.resize(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        const double v = labels[i];
        if (v < 0 || v != std::floor(v)) throw FormatError("non-integer label in " + dir.string());
        d.labels[i] = static_cast<std::size_t>(v);
    }
    if (d.train.size() != n_train || d.val.size() != n_val || d.test.size() != n_test)
        throw FormatError("split sizes disagree with manifest in " + dir.string());
    d.validate();
    return d;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
    Tensor out({labels.size(), classes}, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) throw DimensionError("one_hot: label " + std::to_string(labels[i]) + " >= " + std::to_string(classes));
        out[i * classes + labels[i]] = 1.0;
    }
    return out;
}

std::vector<std::vector<std::size_t>> batch_positions(std::size_t count, const BatchPlan& plan, std::size_t epoch) {
    if (plan.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    auto order = iota_indices(count);
    Rng rng(derive_seed(plan.shuffle_seed, 0x5eed, epoch));
    shuffle_in_place(order, rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < count; b += plan.batch_size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + plan.batch_size)));
    return out;
}

Batch make_batch(const LabeledDataset& d, Split split, std::span<const std::size_t> positions) {
    const auto& ids = d.split(split);
    Batch b;
    b.positions.assign(positions.begin(), positions.end());
    std::vector<std::size_t> labels;
    for (auto p : positions) {
        if (p >= ids.size()) throw DimensionError("batch position out of range for split " + to_string(split));
        b.indices.push_back(ids[p]);
        labels.push_back(d.labels[ids[p]]);
    }
    b.inputs = d.inputs.rows(b.indices);
    b.one_hot = one_hot(labels, d.num_classes);
    return b;
}

std::vector<Batch> iterate_batches(const LabeledDataset& d, const BatchPlan& plan, std::size_t epoch, Split split) {
    std::vector<Batch> out;
    for (const auto& pos : batch_positions(d.split(split).size(), plan, epoch)) out.push_back(make_batch(d, split, pos));
    return out;
}

}  // namespace mlfd::data
