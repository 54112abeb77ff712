#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mlfd/tensor.hpp"

namespace mlfd::data {

enum class Split { Train, Val, Test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

/// One classification dataset. Inputs are (n, features) or (n, channels, H, W).
struct LabeledDataset {
    std::string name;
    Tensor inputs;
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::vector<std::size_t> train, val, test;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const;
    const std::vector<std::size_t>& split(Split s) const;

    /// Throws FormatError when an invariant is broken.
    void validate() const;
};

bool operator==(const LabeledDataset& a, const LabeledDataset& b);

enum class RenderMode { Vector, Image };

/// Recipe for a family of related datasets: shared class-prototype latents,
/// a shared random linear decoder, and a per-dataset affine style.
struct SyntheticFamilySpec {
    std::size_t m = 3;
    std::size_t latent_dim = 16;
    std::size_t prototype_pool = 16;
    std::vector<std::size_t> classes{8, 8, 8};
    std::size_t train_samples = 2000;  // per dataset, validation carved out of these
    std::size_t test_samples = 500;
    double style_scale = 0.5;
    double noise_sigma = 1.0;        // latent-space noise
    double pixel_noise_sigma = 0.0;  // rendered-space noise
    RenderMode render = RenderMode::Image;
    std::size_t image_side = 16;
    std::size_t vector_dim = 64;
    double val_fraction = 0.1;
    std::uint64_t master_seed = 1;
    std::vector<std::string> names;  // defaults to synth1..synthm

    void validate() const;
    std::string dataset_name(std::size_t i) const;
};

std::vector<LabeledDataset> gen_synthetic_family(const SyntheticFamilySpec& spec);

/// Mean rendered distance between the same pool prototype styled by two
/// different family members, averaged over member pairs and prototypes.
double cross_dataset_prototype_distance(const SyntheticFamilySpec& spec);

/// Directory layout: manifest, inputs.tnsr, labels.tnsr, splits.
void save_dataset(const LabeledDataset& d, const std::filesystem::path& dir);
LabeledDataset load_dataset(const std::filesystem::path& dir);

struct BatchPlan {
    std::size_t batch_size = 64;
    std::uint64_t shuffle_seed = 0;
    std::size_t accumulation = 1;  // micro-batches per optimizer step
};

struct Batch {
    Tensor inputs;
    Tensor one_hot;
    std::vector<std::size_t> indices;  // dataset sample indices
    std::vector<std::size_t> positions;  // positions within the split
};

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

/// Split positions per batch for (seed, epoch); the last batch may be short.
std::vector<std::vector<std::size_t>> batch_positions(std::size_t count, const BatchPlan& plan, std::size_t epoch);

Batch make_batch(const LabeledDataset& d, Split split, std::span<const std::size_t> positions);

std::vector<Batch> iterate_batches(const LabeledDataset& d, const BatchPlan& plan, std::size_t epoch,
                                   Split split = Split::Train);

}  // namespace mlfd::data
