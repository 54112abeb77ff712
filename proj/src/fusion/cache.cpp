#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "mlfd/error.hpp"
#include "mlfd/fusion.hpp"

namespace mlfd::fusion {

namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> read_kv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("missing cache manifest " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

std::string need(const std::map<std::string, std::string>& kv, const std::string& key, const fs::path& where) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("cache manifest " + where.string() + " lacks '" + key + "'");
    return it->second;
}

}  // namespace

EmbeddingCache::EmbeddingCache(fs::path root, std::string owner_hash, std::string ns)
    : root_(std::move(root)), hash_(std::move(owner_hash)), ns_(std::move(ns)) {
    if (hash_.empty()) throw PreconditionError("embedding cache needs an owner hash");
    check_owner();
}

fs::path EmbeddingCache::resolve_root(const fs::path& fallback) {
    if (const char* env = std::getenv("MLFD_CACHE_DIR"); env && *env) return fs::path(env);
    return fallback;
}

fs::path EmbeddingCache::dir() const { return root_ / hash_; }

fs::path EmbeddingCache::level_dir(const std::string& dataset, data::Split split, const std::string& level) const {
    fs::path p = dir();
    if (!ns_.empty()) p /= ns_;
    return p / dataset / data::to_string(split) / level;
}

void EmbeddingCache::check_owner() const {
    const auto manifest = dir() / "manifest";
    if (!fs::exists(manifest)) return;
    const auto recorded = need(read_kv(manifest), "owner_hash", manifest);
    if (recorded != hash_)
        throw StaleCacheError("cache at " + dir().string() + " was written for " + recorded + ", expected " + hash_);
}

void EmbeddingCache::put(const std::string& dataset, data::Split split, const std::string& level,
                         std::span<const std::size_t> samples, const Tensor& values) {
    check_owner();
    if (values.rank() < 2 || values.dim(0) != samples.size())
        throw DimensionError("cache put: " + std::to_string(samples.size()) + " samples vs values " +
                             shape_str(values.shape()));
    fs::create_directories(dir());
    if (!fs::exists(dir() / "manifest")) {
        std::ofstream m(dir() / "manifest");
        m << "format = mlfd-cache 1\nowner_hash = " << hash_ << "\n";
        if (!m) throw IoError("cannot write cache manifest in " + dir().string());
    }
    const auto ld = level_dir(dataset, split, level);
    fs::create_directories(ld);
    std::ostringstream index, manifest;
    Shape row(values.shape().begin() + 1, values.shape().end());
    manifest << "format = mlfd-cache-level 1\nrows = " << samples.size() << "\nshape =";
    for (auto e : row) manifest << " " << e;
    manifest << "\n";
    const std::size_t shards = (samples.size() + kShardRows - 1) / kShardRows;
    manifest << "shards = " << shards << "\n";
    for (std::size_t k = 0; k < shards; ++k) {
        const std::size_t b = k * kShardRows, e = std::min(samples.size(), b + kShardRows);
        const Tensor shard = values.row_range(b, e);
        save_tensor(ld / ("shard_" + std::to_string(k) + ".tnsr"), shard);
        manifest << "shard_" << k << " = " << hex64(tensor_checksum(shard)) << "\n";
        for (std::size_t r = b; r < e; ++r) index << samples[r] << " " << k << " " << (r - b) << "\n";
    }
    std::ofstream(ld / "index", std::ios::trunc) << index.str();
    // Manifest last: its presence marks a complete entry.
    std::ofstream out(ld / "manifest", std::ios::trunc);
    out << manifest.str();
    if (!out) throw IoError("cannot write " + (ld / "manifest").string());
}

bool EmbeddingCache::has(const std::string& dataset, data::Split split, const std::string& level) const {
    return fs::exists(level_dir(dataset, split, level) / "manifest");
}

std::vector<std::size_t> EmbeddingCache::samples(const std::string& dataset, data::Split split,
                                                 const std::string& level) const {
    check_owner();
    const auto ld = level_dir(dataset, split, level);
    if (!has(dataset, split, level))
        throw PreconditionError("cache has no entry for " + dataset + "/" + data::to_string(split) + "/" + level +
                                " under " + dir().string());
    std::ifstream in(ld / "index");
    if (!in) throw FormatError("missing cache index in " + ld.string());
    std::vector<std::size_t> out;
    std::size_t s, k, o;
    while (in >> s >> k >> o) out.push_back(s);
    return out;
}

Tensor EmbeddingCache::get(const std::string& dataset, data::Split split, const std::string& level) const {
    check_owner();
    if (!has(dataset, split, level))
        throw PreconditionError("cache has no entry for " + dataset + "/" + data::to_string(split) + "/" + level +
                                " under " + dir().string());
    const auto ld = level_dir(dataset, split, level);
    const auto kv = read_kv(ld / "manifest");
    const std::size_t shards = std::stoull(need(kv, "shards", ld / "manifest"));
    std::vector<Tensor> parts;
    for (std::size_t k = 0; k < shards; ++k) {
        const auto path = ld / ("shard_" + std::to_string(k) + ".tnsr");
        Tensor t = load_tensor(path);
        if (hex64(tensor_checksum(t)) != need(kv, "shard_" + std::to_string(k), ld / "manifest"))
            throw CorruptionError("checksum mismatch for " + path.string());
        parts.push_back(std::move(t));
    }
    Tensor out = stack_rows(parts);
    if (out.dim(0) != std::stoull(need(kv, "rows", ld / "manifest")))
        throw CorruptionError("row count mismatch in " + ld.string());
    return out;
}

Tensor EmbeddingCache::get_sample(const std::string& dataset, data::Split split, const std::string& level,
                                  std::size_t sample) const {
    check_owner();
    const auto ld = level_dir(dataset, split, level);
    std::ifstream in(ld / "index");
    if (!in) throw PreconditionError("cache has no entry for " + ld.string());
    std::size_t s, k, o;
    while (in >> s >> k >> o)
        if (s == sample) {
            const auto kv = read_kv(ld / "manifest");
            const auto path = ld / ("shard_" + std::to_string(k) + ".tnsr");
            Tensor shard = load_tensor(path);
            if (hex64(tensor_checksum(shard)) != need(kv, "shard_" + std::to_string(k), ld / "manifest"))
                throw CorruptionError("checksum mismatch for " + path.string());
            Tensor row = shard.row_range(o, o + 1);
            Shape shape(row.shape().begin() + 1, row.shape().end());
            return row.reshaped(shape);
        }
    throw QueryError("sample " + std::to_string(sample) + " not cached in " + ld.string());
}

std::size_t EmbeddingCache::entry_count() const {
    fs::path base = dir();
    if (!ns_.empty()) base /= ns_;
    if (!fs::exists(base)) return 0;
    std::size_t n = 0;
    for (const auto& e : fs::recursive_directory_iterator(base))
        if (e.is_regular_file() && e.path().filename() == "index") {
            std::ifstream in(e.path());
            std::string line;
            while (std::getline(in, line))
                if (!line.empty()) ++n;
        }
    return n;
}

}  // namespace mlfd::fusion
