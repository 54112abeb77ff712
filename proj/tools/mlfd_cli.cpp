#include <malloc.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mlfd/error.hpp"
#include "mlfd/pipeline.hpp"

namespace {

using mlfd::pipeline::Experiment;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    std::size_t jobs = 1;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--set", c.sets, "override one key, e.g. --set train.student.max_epochs=10")
        ->allow_extra_args(false)
        ->take_all();
    cmd->add_option("--seed", c.seed, "run a single replicate seed");
    cmd->add_option("--out", c.out, "runs root")->capture_default_str();
    cmd->add_option("--jobs", c.jobs, "concurrent training jobs")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_flag("-q,--quiet", c.quiet, "no progress lines on stderr");
}

Experiment make_experiment(const Common& c) {
    std::optional<std::filesystem::path> path;
    if (!c.config.empty()) path = c.config;
    auto resolved = mlfd::pipeline::load_config(path, c.sets);
    mlfd::pipeline::Options o;
    o.out = c.out;
    o.jobs = c.jobs;
    o.seed = c.seed;
    o.progress = c.quiet ? nullptr : &std::cerr;
    return Experiment(std::move(resolved), std::move(o));
}

void print_records(const std::vector<mlfd::training::MetricsRecord>& recs) {
    using mlfd::pipeline::csv_row;
    using mlfd::pipeline::format_fixed;
    std::cout << csv_row(std::vector<std::string>{"stage", "model", "taps", "dataset", "seed", "acc1", "acc5",
                                                  "k_reduced"});
    for (const auto& r : recs)
        std::cout << csv_row(std::vector<std::string>{r.stage, r.model, r.taps, r.dataset, std::to_string(r.seed),
                                                      format_fixed(r.acc1), format_fixed(r.acc5),
                                                      r.k_reduced ? "1" : "0"});
}

}  // namespace

int main(int argc, char** argv) {
    // Keep large temporaries on the heap instead of fresh mappings per op.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);

    CLI::App app{"mlfd: multi-dataset, multi-level feature distillation"};
    app.require_subcommand(1);
    Common c;
    std::map<std::string, CLI::App*> cmds;
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"gen-data", "generate the synthetic dataset family"},
             {"train-teacher", "stage 1: train one teacher per dataset"},
             {"build-cache", "store frozen teacher features for the joint teacher"},
             {"train-joint", "stage 2: train the joint teacher on all datasets"},
             {"extract-targets", "store joint-teacher probabilities and embeddings"},
             {"distill", "stage 3: distill one student per dataset"},
             {"baseline", "train the dataset-specific, multi-head and joint-head baselines"},
             {"eval", "re-evaluate finished checkpoints on their test splits"},
             {"ablate", "tap-level sweep over ablation.tap_sets"},
             {"run-all", "stages 1-3 plus baselines, then the report"},
             {"dump-embeddings", "export per-sample embeddings for external projection"},
             {"report", "rebuild report.csv, summary.csv and curves.csv"},
             {"config-reference", "print every configuration key with its default"}}) {
        cmds[name] = app.add_subcommand(name, help);
        if (name != "config-reference") add_common(cmds[name], c);
    }
    std::string model, level = "top", split = "test", dest;
    cmds["eval"]->add_option("--model", model, "only this model id (e.g. student_1)");
    cmds["dump-embeddings"]->add_option("--model", model, "teacher_K, student_K, baseline_K or joint_teacher")->required();
    cmds["dump-embeddings"]->add_option("--level", level, "tap name")->capture_default_str();
    cmds["dump-embeddings"]->add_option("--split", split, "train, val or test")->capture_default_str();
    cmds["dump-embeddings"]->add_option("--dest", dest, "output directory (default <out>/<id>/embeddings/...)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cmds["config-reference"]->parsed()) {
            std::cout << mlfd::pipeline::config_reference();
            return 0;
        }
        auto exp = make_experiment(c);
        const auto& levels = exp.config().levels;
        auto each_seed = [&](auto fn) {
            exp.datasets();
            for (auto s : exp.seeds()) fn(s);
        };
        if (cmds["gen-data"]->parsed()) exp.gen_data();
        else if (cmds["train-teacher"]->parsed()) each_seed([&](auto s) { exp.train_teachers(s); });
        else if (cmds["build-cache"]->parsed()) each_seed([&](auto s) { exp.build_cache(s, levels); });
        else if (cmds["train-joint"]->parsed()) each_seed([&](auto s) { exp.train_joint(s, levels); });
        else if (cmds["extract-targets"]->parsed()) each_seed([&](auto s) { exp.extract_targets(s, levels); });
        else if (cmds["distill"]->parsed()) each_seed([&](auto s) { exp.distill(s, levels); });
        else if (cmds["baseline"]->parsed()) each_seed([&](auto s) { exp.baselines(s); });
        else if (cmds["eval"]->parsed()) print_records(exp.evaluate_all(model));
        else if (cmds["ablate"]->parsed()) exp.ablate();
        else if (cmds["run-all"]->parsed()) exp.run_all();
        else if (cmds["dump-embeddings"]->parsed()) {
            const std::filesystem::path out =
                dest.empty() ? exp.root() / "embeddings" / (model + "_" + level + "_" + split) : std::filesystem::path(dest);
            exp.dump_embeddings(model, level, mlfd::data::parse_split(split), out);
        } else if (cmds["report"]->parsed()) {
            if (!std::filesystem::exists(exp.root()))
                throw mlfd::PreconditionError("no runs under " + exp.root().string());
            mlfd::pipeline::write_report(exp.root());
            std::ifstream in(exp.root() / "report.csv", std::ios::binary);
            std::cout << in.rdbuf();
        }
        return 0;
    } catch (const mlfd::Error& e) {
        std::cerr << "mlfd: " << e.what() << "\n";
        return mlfd::exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "mlfd: " << e.what() << "\n";
        return 1;
    }
}
