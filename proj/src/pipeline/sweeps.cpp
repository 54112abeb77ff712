#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"

namespace mlfd::pipeline {

void Experiment::ablate() {
    if (cfg_.variant == Variant::SingleDatasetKd || cfg_.variant == Variant::VaryM)
        throw ConfigError("the tap-level sweep needs a variant with one joint teacher over all datasets");
    if (cfg_.ablation_tap_sets.empty()) throw ConfigError("ablation.tap_sets is empty");
    datasets();
    // Catch sets that exceed a model's depth before any training starts.
    for (const auto& set : cfg_.ablation_tap_sets) {
        for (std::size_t i = 0; i < cfg_.family.m; ++i) {
            const auto t = cfg_.teacher_spec(i, datasets()[teacher_datasets()[i]]);
            const auto s = cfg_.student_spec(i, datasets()[i]);
            for (const auto& l : set) {
                if (!t.taps.contains(l))
                    throw ConfigError("tap set " + taps_label(set) + ": teacher " + std::to_string(i + 1) +
                                      " has no level '" + l + "'");
                if (cfg_.ablation_students && !s.taps.contains(l))
                    throw ConfigError("tap set " + taps_label(set) + ": student " + std::to_string(i + 1) +
                                      " has no level '" + l + "'");
            }
        }
    }
    for (auto seed : seeds()) {
        progress("== seed " + std::to_string(seed));
        train_teachers(seed);
        for (const auto& set : cfg_.ablation_tap_sets) {
            const auto plan = joint_plan(set);
            run_joint_stage(seed, plan);
            if (!cfg_.ablation_students) continue;
            auto kd = cfg_.kd;
            for (auto& k : kd) k.betas.assign(set.size(), cfg_.ablation_beta);
            run_student_stage(seed, plan, kd);
        }
    }
    write_report(root_);
    progress("report: " + (root_ / "report.csv").string());
}

}  // namespace mlfd::pipeline
