#include "mlfd/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "mlfd/error.hpp"

static_assert(std::endian::native == std::endian::little, "tensor payload assumes a little-endian host");

namespace mlfd {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
    for (auto e : shape_)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    for (auto e : shape_)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    if (numel(shape_) != data_.size())
        throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size())
        throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

std::size_t Tensor::row_size() const {
    if (shape_.empty()) return 0;
    return data_.size() / shape_[0];
}

Tensor Tensor::rows(std::span<const std::size_t> index) const {
    if (shape_.empty() || index.empty()) throw DimensionError("rows() needs a non-scalar tensor and indices");
    const std::size_t stride = row_size();
    Shape out_shape = shape_;
    out_shape[0] = index.size();
    std::vector<double> out(index.size() * stride);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= shape_[0])
            throw DimensionError("row " + std::to_string(index[r]) + " out of range for " + shape_str(shape_));
        std::memcpy(out.data() + r * stride, data_.data() + index[r] * stride, stride * sizeof(double));
    }
    return Tensor(std::move(out_shape), std::move(out));
}

Tensor Tensor::row_range(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin >= end || end > shape_[0])
        throw DimensionError("row range [" + std::to_string(begin) + "," + std::to_string(end) + ") on " +
                             shape_str(shape_));
    const std::size_t stride = row_size();
    Shape out_shape = shape_;
    out_shape[0] = end - begin;
    return Tensor(std::move(out_shape),
                  std::vector<double>(data_.begin() + begin * stride, data_.begin() + end * stride));
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

Tensor stack_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("stack_rows of nothing");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
            throw DimensionError("stack_rows: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        rows += p.shape()[0];
    }
    std::vector<double> out;
    out.reserve(rows * numel(tail));
    for (const auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    return Tensor(std::move(shape), std::move(out));
}

namespace {

constexpr char kMagic[8] = {'M', 'L', 'F', 'D', 'T', 'N', 'S', 'R'};

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& source) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CorruptionError("truncated tensor header in " + source);
    return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kMagic, sizeof(kMagic));
    put<std::uint16_t>(out, kTensorFormatVersion);
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in, const std::string& source) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in) throw CorruptionError("truncated tensor header in " + source);
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("bad tensor magic in " + source);
    const auto version = get<std::uint16_t>(in, source);
    if (version != kTensorFormatVersion)
        throw FormatError("unsupported tensor format version " + std::to_string(version) + " in " + source);
    const auto dtype = get<std::uint8_t>(in, source);
    if (dtype != kDtypeF64) throw FormatError("unsupported dtype code " + std::to_string(dtype) + " in " + source);
    const auto rank = get<std::uint8_t>(in, source);
    Shape shape(rank);
    for (auto& e : shape) {
        e = get<std::uint64_t>(in, source);
        if (e == 0) throw FormatError("zero extent in " + source);
    }
    std::vector<double> values(numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != values.size() * sizeof(double))
        throw CorruptionError("truncated tensor payload in " + source);
    return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    write_tensor(out, t);
    if (!out) throw IoError("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    Tensor t = read_tensor(in, path.string());
    if (in.peek() != std::char_traits<char>::eof()) throw CorruptionError("trailing bytes in " + path.string());
    return t;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& text, std::uint64_t seed) {
    return fnv1a(std::as_bytes(std::span(text.data(), text.size())), seed);
}

std::uint64_t tensor_checksum(const Tensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto e : t.shape()) h = fnv1a(std::as_bytes(std::span(&e, 1)), h);
    return fnv1a(std::as_bytes(t.values()), h);
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        auto n = static_cast<std::size_t>(in.gcount());
        h = fnv1a(std::as_bytes(std::span(buf, n)), h);
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

}  // namespace mlfd
