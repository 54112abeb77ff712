#pragma once

#include <string>
#include <vector>

#include "mlfd/data.hpp"
#include "mlfd/fusion.hpp"
#include "mlfd/models.hpp"
#include "mlfd/training.hpp"

namespace mlfd::testkit {

inline data::SyntheticFamilySpec tiny_family_spec(double noise = 0.3, std::uint64_t seed = 11) {
    data::SyntheticFamilySpec s;
    s.m = 3;
    s.classes = {3, 4, 3};
    s.prototype_pool = 6;
    s.latent_dim = 6;
    s.train_samples = 60;
    s.test_samples = 30;
    s.noise_sigma = noise;
    s.pixel_noise_sigma = 0.0;
    s.render = data::RenderMode::Vector;
    s.vector_dim = 10;
    s.master_seed = seed;
    return s;
}

inline training::TrainConfig quick_train(std::size_t epochs = 8, double lr = 3e-3) {
    training::TrainConfig c;
    c.optimizer.kind = OptimizerKind::Adam;
    c.optimizer.learning_rate = lr;
    c.batch_size = 16;
    c.policy.max_epochs = epochs;
    c.policy.min_epochs = epochs;
    c.policy.patience = epochs;
    return c;
}

inline models::ModelSpec mlp_spec(const data::LabeledDataset& d) {
    return models::library_spec("mlp-small", d.sample_shape(), d.num_classes);
}

inline std::vector<models::Model> trained_teachers(const std::vector<data::LabeledDataset>& fam, std::size_t epochs = 6) {
    std::vector<models::Model> out;
    for (std::size_t i = 0; i < fam.size(); ++i) {
        models::Model m(mlp_spec(fam[i]), 100 + i);
        training::train_classifier(m, fam[i], quick_train(epochs), 200 + i);
        out.push_back(std::move(m));
    }
    return out;
}

inline fusion::JointTeacherSpec joint_spec_for(const std::vector<data::LabeledDataset>& fam,
                                              const std::vector<models::Model>& teachers,
                                              std::vector<std::string> levels = {"hidden1", "top"}) {
    fusion::JointTeacherSpec s;
    for (const auto& t : teachers) s.teachers.push_back(t.spec());
    for (const auto& d : fam) {
        s.datasets.push_back(d.name);
        s.classes.push_back(d.num_classes);
    }
    s.levels = std::move(levels);
    return s;
}

}  // namespace mlfd::testkit
