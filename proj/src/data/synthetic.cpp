#include <algorithm>
#include <cmath>

#include "mlfd/data.hpp"
#include "mlfd/error.hpp"
#include "mlfd/rng.hpp"

namespace mlfd::data {

void SyntheticFamilySpec::validate() const {
    if (m < 1) throw ConfigError("synthetic family: m must be >= 1");
    if (classes.size() != m)
        throw ConfigError("synthetic family: " + std::to_string(classes.size()) + " class counts for m = " +
                          std::to_string(m));
    for (auto c : classes) {
        if (c < 2) throw ConfigError("synthetic family: every dataset needs >= 2 classes");
        if (c > prototype_pool)
            throw ConfigError("synthetic family: " + std::to_string(c) + " classes exceed the prototype pool of " +
                              std::to_string(prototype_pool));
    }
    if (latent_dim < 1) throw ConfigError("synthetic family: latent_dim must be >= 1");
    if (train_samples < 1) throw ConfigError("synthetic family: train_samples must be >= 1");
    if (noise_sigma < 0 || pixel_noise_sigma < 0) throw ConfigError("synthetic family: noise sigma must be >= 0");
    if (style_scale < 0) throw ConfigError("synthetic family: style_scale must be >= 0");
    if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("synthetic family: val_fraction must lie in [0,1)");
    if (render == RenderMode::Image && image_side < 1) throw ConfigError("synthetic family: image_side must be >= 1");
    if (render == RenderMode::Vector && vector_dim < 1) throw ConfigError("synthetic family: vector_dim must be >= 1");
    if (!names.empty() && names.size() != m) throw ConfigError("synthetic family: names must list m entries");
}

std::string SyntheticFamilySpec::dataset_name(std::size_t i) const {
    return names.empty() ? "synth" + std::to_string(i + 1) : names[i];
}

namespace {

struct Family {
    std::size_t render_dim = 0;
    std::vector<double> prototypes;  // pool x latent
    std::vector<double> decoder;     // render_dim x latent
    std::vector<std::vector<double>> style_matrix;  // per dataset, latent x latent
    std::vector<std::vector<double>> style_offset;  // per dataset, latent
    std::vector<std::vector<std::size_t>> selection;  // per dataset, C_i pool ids
};

// Smooth basis images so convolution and pooling see spatial structure.
std::vector<double> image_decoder(std::size_t side, std::size_t latent, Rng& rng) {
    const std::size_t px = side * side;
    std::vector<double> dec(px * latent, 0.0);
    constexpr double two_pi = 6.283185307179586476925;
    for (std::size_t k = 0; k < latent; ++k) {
        for (int wave = 0; wave < 3; ++wave) {
            const double fu = std::floor(uniform01(rng) * 4.0);
            const double fv = std::floor(uniform01(rng) * 4.0);
            const double phase = two_pi * uniform01(rng);
            const double amp = standard_normal(rng);
            for (std::size_t u = 0; u < side; ++u)
                for (std::size_t v = 0; v < side; ++v)
                    dec[(u * side + v) * latent + k] +=
                        amp * std::cos(two_pi * (fu * static_cast<double>(u) + fv * static_cast<double>(v)) /
                                           static_cast<double>(side) +
                                       phase);
        }
        double norm = 0.0;
        for (std::size_t p = 0; p < px; ++p) norm += dec[p * latent + k] * dec[p * latent + k];
        const double s = std::sqrt(static_cast<double>(px) / static_cast<double>(latent)) / std::sqrt(norm);
        for (std::size_t p = 0; p < px; ++p) dec[p * latent + k] *= s;
    }
    return dec;
}

Family build_family(const SyntheticFamilySpec& spec) {
    spec.validate();
    Family f;
    const std::size_t L = spec.latent_dim;
    f.render_dim = spec.render == RenderMode::Image ? spec.image_side * spec.image_side : spec.vector_dim;

    Rng proto_rng(derive_seed(spec.master_seed, "prototypes"));
    f.prototypes.resize(spec.prototype_pool * L);
    for (double& v : f.prototypes) v = standard_normal(proto_rng);

    Rng dec_rng(derive_seed(spec.master_seed, "decoder"));
    if (spec.render == RenderMode::Image) {
        f.decoder = image_decoder(spec.image_side, L, dec_rng);
    } else {
        f.decoder.resize(f.render_dim * L);
        const double s = 1.0 / std::sqrt(static_cast<double>(L));
        for (double& v : f.decoder) v = s * standard_normal(dec_rng);
    }

    const double inv_sqrt_l = 1.0 / std::sqrt(static_cast<double>(L));
    for (std::size_t i = 0; i < spec.m; ++i) {
        // Style draws are independent of style_scale so the scale acts as a pure magnitude knob.
        Rng style_rng(derive_seed(spec.master_seed, "style", i));
        std::vector<double> a(L * L), b(L);
        for (std::size_t r = 0; r < L; ++r)
            for (std::size_t c = 0; c < L; ++c)
                a[r * L + c] = (r == c ? 1.0 : 0.0) + spec.style_scale * inv_sqrt_l * standard_normal(style_rng);
        for (double& v : b) v = spec.style_scale * standard_normal(style_rng);
        f.style_matrix.push_back(std::move(a));
        f.style_offset.push_back(std::move(b));

        Rng sel_rng(derive_seed(spec.master_seed, "select", i));
        auto pool = iota_indices(spec.prototype_pool);
        shuffle_in_place(pool, sel_rng);
        pool.resize(spec.classes[i]);
        f.selection.push_back(std::move(pool));
    }
    return f;
}

/// Styled latent for dataset i: A_i z + b_i.
std::vector<double> style(const Family& f, std::size_t i, std::span<const double> z) {
    const std::size_t L = z.size();
    std::vector<double> out(f.style_offset[i]);
    const auto& a = f.style_matrix[i];
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < L; ++c) out[r] += a[r * L + c] * z[c];
    return out;
}

void render(const Family& f, std::span<const double> latent, double* out) {
    const std::size_t L = latent.size();
    for (std::size_t p = 0; p < f.render_dim; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < L; ++k) acc += f.decoder[p * L + k] * latent[k];
        out[p] = acc;
    }
}

}  // namespace

std::vector<LabeledDataset> gen_synthetic_family(const SyntheticFamilySpec& spec) {
    const Family f = build_family(spec);
    const std::size_t L = spec.latent_dim;
    std::vector<LabeledDataset> out;
    for (std::size_t i = 0; i < spec.m; ++i) {
        const std::size_t C = spec.classes[i];
        const std::size_t n = spec.train_samples + spec.test_samples;
        Shape shape{n};
        if (spec.render == RenderMode::Image) shape.insert(shape.end(), {1, spec.image_side, spec.image_side});
        else shape.push_back(spec.vector_dim);

        LabeledDataset d;
        d.name = spec.dataset_name(i);
        d.num_classes = C;
        d.inputs = Tensor(shape);
        d.labels.resize(n);
        Rng noise_rng(derive_seed(spec.master_seed, "samples", i));
        std::vector<double> z(L);
        for (std::size_t s = 0; s < n; ++s) {
            // Sample order is class-balanced within each of the train and test blocks.
            const std::size_t y = (s < spec.train_samples ? s : s - spec.train_samples) % C;
            d.labels[s] = y;
            const double* proto = f.prototypes.data() + f.selection[i][y] * L;
            auto latent = style(f, i, std::span(proto, L));
            for (std::size_t k = 0; k < L; ++k) latent[k] += spec.noise_sigma * standard_normal(noise_rng);
            double* px = d.inputs.ptr() + s * f.render_dim;
            render(f, latent, px);
            if (spec.pixel_noise_sigma > 0)
                for (std::size_t p = 0; p < f.render_dim; ++p) px[p] += spec.pixel_noise_sigma * standard_normal(noise_rng);
        }

        // Stratified validation split carved out of the training block.
        Rng split_rng(derive_seed(spec.master_seed, "split", i));
        std::vector<std::vector<std::size_t>> by_class(C);
        for (std::size_t s = 0; s < spec.train_samples; ++s) by_class[d.labels[s]].push_back(s);
        std::vector<char> is_val(n, 0);
        for (auto& members : by_class) {
            shuffle_in_place(members, split_rng);
            const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(members.size())));
            for (std::size_t k = 0; k < n_val && k < members.size(); ++k) is_val[members[k]] = 1;
        }
        for (std::size_t s = 0; s < spec.train_samples; ++s) (is_val[s] ? d.val : d.train).push_back(s);
        for (std::size_t s = spec.train_samples; s < n; ++s) d.test.push_back(s);
        d.validate();
        out.push_back(std::move(d));
    }
    return out;
}

double cross_dataset_prototype_distance(const SyntheticFamilySpec& spec) {
    const Family f = build_family(spec);
    if (spec.m < 2) return 0.0;
    const std::size_t L = spec.latent_dim;
    std::vector<double> ra(f.render_dim), rb(f.render_dim);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < spec.m; ++i)
        for (std::size_t j = i + 1; j < spec.m; ++j)
            for (std::size_t p = 0; p < spec.prototype_pool; ++p) {
                std::span<const double> z(f.prototypes.data() + p * L, L);
                render(f, style(f, i, z), ra.data());
                render(f, style(f, j, z), rb.data());
                double d2 = 0.0;
                for (std::size_t k = 0; k < f.render_dim; ++k) d2 += (ra[k] - rb[k]) * (ra[k] - rb[k]);
                total += std::sqrt(d2);
                ++count;
            }
    return total / static_cast<double>(count);
}

}  // namespace mlfd::data
