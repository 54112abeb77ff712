#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "mlfd/data.hpp"
#include "mlfd/error.hpp"
#include "support/temp_dir.hpp"

using namespace mlfd;
using namespace mlfd::data;

namespace {

SyntheticFamilySpec small_vector_family(std::uint64_t seed = 3) {
    SyntheticFamilySpec s;
    s.m = 2;
    s.classes = {3, 4};
    s.prototype_pool = 6;
    s.latent_dim = 5;
    s.train_samples = 40;
    s.test_samples = 12;
    s.render = RenderMode::Vector;
    s.vector_dim = 7;
    s.master_seed = seed;
    return s;
}

// Multiclass perceptron with a bias column; converges iff the points are linearly separable.
bool perceptron_separates(const Tensor& x, const std::vector<std::size_t>& y, std::size_t classes) {
    const std::size_t n = y.size(), f = x.row_size();
    std::vector<double> w(classes * (f + 1), 0.0);
    auto score = [&](std::size_t i, std::size_t c) {
        double s = w[c * (f + 1) + f];
        for (std::size_t j = 0; j < f; ++j) s += w[c * (f + 1) + j] * x[i * f + j];
        return s;
    };
    for (int epoch = 0; epoch < 10000; ++epoch) {
        std::size_t mistakes = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = y[i] == 0 ? 1 : 0;
            for (std::size_t c = 0; c < classes; ++c)
                if (c != y[i] && score(i, c) > score(i, best)) best = c;
            if (score(i, y[i]) > score(i, best)) continue;
            ++mistakes;
            for (std::size_t j = 0; j <= f; ++j) {
                const double xv = j < f ? x[i * f + j] : 1.0;
                w[y[i] * (f + 1) + j] += xv;
                w[best * (f + 1) + j] -= xv;
            }
        }
        if (mistakes == 0) return true;
    }
    return false;
}

}  // namespace

TEST(Synthetic, ZeroNoiseFamilyIsLinearlySeparable) {
    SyntheticFamilySpec s;
    s.m = 1;
    s.classes = {2};
    s.prototype_pool = 4;
    s.latent_dim = 4;
    s.train_samples = 8;
    s.test_samples = 0;
    s.val_fraction = 0.0;
    s.noise_sigma = 0.0;
    s.pixel_noise_sigma = 0.0;
    s.render = RenderMode::Vector;
    s.vector_dim = 6;
    const auto fam = gen_synthetic_family(s);
    ASSERT_EQ(fam.size(), 1u);
    const auto& d = fam[0];
    EXPECT_EQ(d.size(), 8u);
    EXPECT_EQ(std::count(d.labels.begin(), d.labels.end(), 0u), 4);
    EXPECT_TRUE(perceptron_separates(d.inputs.rows(d.train), d.labels, 2));
}

TEST(Synthetic, BundledShapesAndCounts) {
    SyntheticFamilySpec s;
    s.m = 3;
    s.classes = {8, 8, 8};
    s.train_samples = 2000;
    s.test_samples = 500;
    const auto fam = gen_synthetic_family(s);
    ASSERT_EQ(fam.size(), 3u);
    for (const auto& d : fam) {
        EXPECT_EQ(d.inputs.shape(), (Shape{2500, 1, 16, 16}));
        EXPECT_EQ(d.num_classes, 8u);
        EXPECT_EQ(d.train.size() + d.val.size(), 2000u);
        EXPECT_EQ(d.val.size(), 200u);
        EXPECT_EQ(d.test.size(), 500u);
        std::vector<std::size_t> per_class(8, 0);
        for (auto i : d.val) ++per_class[d.labels[i]];
        for (auto c : per_class) EXPECT_EQ(c, 25u);
    }
}

TEST(Synthetic, DeterministicGivenSeed) {
    const auto a = gen_synthetic_family(small_vector_family());
    const auto b = gen_synthetic_family(small_vector_family());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(a[i] == b[i]);
        EXPECT_TRUE(bitwise_equal(a[i].inputs, b[i].inputs));
    }
    EXPECT_FALSE(bitwise_equal(a[0].inputs, gen_synthetic_family(small_vector_family(4))[0].inputs));
}

TEST(Synthetic, TooManyClassesForPool) {
    auto s = small_vector_family();
    s.classes = {3, 7};
    EXPECT_THROW(gen_synthetic_family(s), ConfigError);
}

TEST(Synthetic, StyleScaleMonotoneInPrototypeDistance) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto s = small_vector_family(seed);
        s.m = 3;
        s.classes = {3, 3, 3};
        double previous = -1.0;
        for (double scale : {0.0, 0.1, 0.25, 0.5, 1.0, 2.0}) {
            s.style_scale = scale;
            const double d = cross_dataset_prototype_distance(s);
            EXPECT_GT(d, previous) << "seed " << seed << " scale " << scale;
            previous = d;
        }
    }
}

TEST(DatasetIo, RoundTripIsExact) {
    testkit::TempDir tmp;
    const auto fam = gen_synthetic_family(small_vector_family());
    save_dataset(fam[1], tmp.path() / "d");
    const auto back = load_dataset(tmp.path() / "d");
    EXPECT_TRUE(back == fam[1]);
    EXPECT_TRUE(bitwise_equal(back.inputs, fam[1].inputs));
}

TEST(DatasetIo, TruncatedTensorIsCorruption) {
    testkit::TempDir tmp;
    const auto fam = gen_synthetic_family(small_vector_family());
    save_dataset(fam[0], tmp.path() / "d");
    const auto file = tmp.path() / "d" / "inputs.tnsr";
    std::filesystem::resize_file(file, std::filesystem::file_size(file) - 16);
    try {
        load_dataset(tmp.path() / "d");
        FAIL() << "expected CorruptionError";
    } catch (const CorruptionError& e) {
        EXPECT_NE(std::string(e.what()).find("inputs.tnsr"), std::string::npos);
    }
}

TEST(DatasetIo, ZeroClassManifestIsFormatError) {
    testkit::TempDir tmp;
    const auto fam = gen_synthetic_family(small_vector_family());
    save_dataset(fam[0], tmp.path() / "d");
    const auto manifest = tmp.path() / "d" / "manifest";
    std::stringstream text;
    text << std::ifstream(manifest).rdbuf();
    std::string s = text.str();
    const auto pos = s.find("classes = 3");
    ASSERT_NE(pos, std::string::npos);
    s.replace(pos, 11, "classes = 0");
    std::ofstream(manifest, std::ios::trunc) << s;
    EXPECT_THROW(load_dataset(tmp.path() / "d"), FormatError);

    s.erase(s.find("classes = 0"), 12);
    std::ofstream(manifest, std::ios::trunc) << s;
    EXPECT_THROW(load_dataset(tmp.path() / "d"), FormatError);
}

TEST(Batches, ShortFinalBatch) {
    BatchPlan plan;
    plan.batch_size = 4;
    plan.shuffle_seed = 9;
    const auto batches = batch_positions(10, plan, 0);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[0].size(), 4u);
    EXPECT_EQ(batches[1].size(), 4u);
    EXPECT_EQ(batches[2].size(), 2u);
}

TEST(Batches, DeterministicAndCovering) {
    const auto d = gen_synthetic_family(small_vector_family())[0];
    BatchPlan plan;
    plan.batch_size = 7;
    plan.shuffle_seed = 5;
    const auto a = iterate_batches(d, plan, 3);
    const auto b = iterate_batches(d, plan, 3);
    const auto c = iterate_batches(d, plan, 4);
    ASSERT_EQ(a.size(), b.size());
    std::multiset<std::size_t> seen;
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].indices, b[i].indices);
        differs = differs || a[i].indices != c[i].indices;
        EXPECT_EQ(a[i].one_hot.shape(), (Shape{a[i].indices.size(), d.num_classes}));
        seen.insert(a[i].indices.begin(), a[i].indices.end());
    }
    EXPECT_TRUE(differs);
    EXPECT_EQ(seen, std::multiset<std::size_t>(d.train.begin(), d.train.end()));
}
