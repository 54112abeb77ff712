#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mlfd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit reals.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double item() const;

    /// Same payload under a new shape with identical element count.
    Tensor reshaped(Shape shape) const;
    /// Gather along axis 0.
    Tensor rows(std::span<const std::size_t> index) const;
    Tensor row_range(std::size_t begin, std::size_t end) const;
    /// Elements per axis-0 row.
    std::size_t row_size() const;

    bool all_finite() const noexcept;
    void fill(double v);

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Shape and payload compared as raw bytes.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Concatenate along axis 0; all trailing extents must agree.
Tensor stack_rows(std::span<const Tensor> parts);

// Serialized layout: "MLFDTNSR", u16 version, u8 dtype (0 = f64), u8 rank,
// u64 extents, then little-endian row-major payload.
inline constexpr std::uint16_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const std::string& source);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t tensor_checksum(const Tensor& t);
std::uint64_t file_checksum(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace mlfd
