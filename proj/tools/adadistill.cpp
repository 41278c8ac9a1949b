// Command-line front end: dataset generation, teacher training, student
// distillation, metric evaluation and multi-method comparison, all driven
// by one JSON config. Every artifact lands under --out-dir; failures exit
// nonzero with a one-line JSON error record on stderr.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "adadistill/harness.hpp"

namespace fs = std::filesystem;
using namespace adadistill;

namespace {

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const InvalidSpecError*>(&e)) return "invalid_spec";
    if (dynamic_cast<const FileFormatError*>(&e)) return "file_format";
    if (dynamic_cast<const DivergedRunError*>(&e)) return "diverged_run";
    if (dynamic_cast<const InsufficientSamplesError*>(&e)) return "insufficient_samples";
    if (dynamic_cast<const InvalidBatchSizeError*>(&e)) return "invalid_batch_size";
    if (dynamic_cast<const DimensionMismatchError*>(&e)) return "dimension_mismatch";
    if (dynamic_cast<const ShapeMismatchError*>(&e)) return "shape_mismatch";
    if (dynamic_cast<const NonFiniteError*>(&e)) return "non_finite";
    if (dynamic_cast<const ZeroNormError*>(&e)) return "zero_norm";
    if (dynamic_cast<const Error*>(&e)) return "error";
    return "internal";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileFormatError("cannot open '" + path.string() + "'");
    out << text;
    if (!out) throw FileFormatError("write failed for '" + path.string() + "'");
}

std::vector<std::string> run_notes() {
    return {
        "teacher features are l2-normalized before any center update",
        "verification accuracy is single-fold best-threshold over one pair set",
    };
}

// metrics.json shared by train-teacher, distill and evaluate: flat metric
// records plus the run context needed to reproduce them
nlohmann::json metrics_document(const std::vector<MetricRecord>& records,
                                const ExperimentConfig& cfg, std::uint64_t seed) {
    nlohmann::json doc;
    doc["schema"] = "metric_records_v1";
    doc["records"] = metrics_to_json(records);
    doc["notes"] = run_notes();
    doc["config"] = to_json(cfg);
    doc["seed"] = seed;
    return doc;
}

std::vector<MetricRecord> distribution_records(const MlpNetwork& net, const Dataset& ds,
                                               const CenterBank& centers) {
    auto [emb, cache] = forward(net, ds.inputs);
    (void)cache;
    const std::vector<std::size_t> train = ds.train_indices();
    const Mat train_emb = gather_rows(emb, train);
    std::vector<std::size_t> train_labels;
    train_labels.reserve(train.size());
    for (std::size_t i : train) train_labels.push_back(ds.labels[i]);
    const DistributionSummary d = center_vs_sample_distributions(train_emb, train_labels, centers);

    std::vector<MetricRecord> records(2);
    records[0].name = "mean_sample_center_cosine";
    records[0].value = d.mean_sample_center;
    records[0].parameters = {{"split", "train"}};
    records[1].name = "mean_sample_sample_cosine";
    records[1].value = d.mean_sample_sample;
    records[1].parameters = {{"split", "train"}};
    return records;
}

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> log_every;
};

void add_common(CLI::App* sub, CommonOpts& opts, bool with_seed = true) {
    sub->add_option("--config", opts.config_path, "experiment config JSON")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out-dir", opts.out_dir, "directory for artifacts");
    if (with_seed) {
        sub->add_option("--seed", opts.seed, "override the config's first seed");
        sub->add_option("--log-every", opts.log_every, "runlog row cadence in iterations");
    }
}

ExperimentConfig load_with_overrides(const CommonOpts& opts) {
    ExperimentConfig cfg = load_config(opts.config_path);
    if (opts.log_every) {
        cfg.log_every = *opts.log_every;
        cfg.validate();
    }
    return cfg;
}

std::uint64_t pick_seed(const ExperimentConfig& cfg, const CommonOpts& opts) {
    return opts.seed ? *opts.seed : cfg.seeds.front();
}

fs::path prepare_out_dir(const CommonOpts& opts) {
    fs::path dir(opts.out_dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale adaptive knowledge distillation lab"};
    app.require_subcommand(1);

    CommonOpts gen_opts, teach_opts, distill_opts, eval_opts, compare_opts;
    std::string gen_out = "dataset.bin";
    std::string teacher_net_path, teacher_centers_path;
    std::string eval_net_path, eval_dataset_path;
    bool eval_roc = false;

    CLI::App* gen = app.add_subcommand("gen-data", "generate and save the synthetic dataset");
    add_common(gen, gen_opts, false);
    gen->add_option("--out", gen_out, "dataset file name under --out-dir");

    CLI::App* teach = app.add_subcommand("train-teacher", "fit the teacher classifier");
    add_common(teach, teach_opts);

    CLI::App* dist = app.add_subcommand("distill", "train a student under the configured method");
    add_common(dist, distill_opts);
    dist->add_option("--teacher-net", teacher_net_path, "trained teacher network file")
        ->check(CLI::ExistingFile);
    dist->add_option("--teacher-centers", teacher_centers_path, "teacher classifier centers file")
        ->check(CLI::ExistingFile);

    CLI::App* eval = app.add_subcommand("evaluate", "score a trained network on the holdout pairs");
    add_common(eval, eval_opts, false);
    eval->add_option("--net", eval_net_path, "network file to evaluate")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--dataset", eval_dataset_path, "previously generated dataset file")
        ->check(CLI::ExistingFile);
    eval->add_flag("--roc", eval_roc, "also write roc.csv");

    CLI::App* comp = app.add_subcommand("compare", "sweep methods x seeds and tabulate metrics");
    add_common(comp, compare_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            const ExperimentConfig cfg = load_config(gen_opts.config_path);
            const Dataset ds = generate_dataset(cfg.dataset);
            const fs::path out = prepare_out_dir(gen_opts) / gen_out;
            save_dataset(ds, out.string());
            nlohmann::json summary = {{"written", out.string()},
                                      {"samples", ds.sample_count()},
                                      {"holdout", ds.holdout_indices().size()}};
            std::cout << summary.dump() << '\n';
        } else if (teach->parsed()) {
            const ExperimentConfig cfg = load_with_overrides(teach_opts);
            const std::uint64_t seed = pick_seed(cfg, teach_opts);
            const fs::path dir = prepare_out_dir(teach_opts);
            TeacherResult result = train_teacher(cfg, Seed{seed});

            save_network(result.net, (dir / "teacher_net.bin").string());
            save_centers(result.centers, (dir / "teacher_centers.bin").string());
            write_runlog_csv(result.log, (dir / "runlog.csv").string());
            write_checkpoints_csv(result.log, (dir / "checkpoints.csv").string());

            const Dataset ds = generate_dataset(cfg.dataset);
            const EvalResult ev = evaluate_network(result.net, ds, cfg);
            std::vector<MetricRecord> records = eval_to_records(ev, cfg);
            for (MetricRecord& r : distribution_records(result.net, ds, result.centers)) {
                records.push_back(std::move(r));
            }
            write_text(dir / "metrics.json", metrics_document(records, cfg, seed).dump(2) + "\n");
            nlohmann::json summary = {{"verification_accuracy", ev.verification_accuracy},
                                      {"final_loss", result.log.loss.back()},
                                      {"out_dir", dir.string()}};
            std::cout << summary.dump() << '\n';
        } else if (dist->parsed()) {
            const ExperimentConfig cfg = load_with_overrides(distill_opts);
            const std::uint64_t seed = pick_seed(cfg, distill_opts);
            const fs::path dir = prepare_out_dir(distill_opts);

            std::optional<MlpNetwork> teacher;
            std::optional<CenterBank> centers;
            if (method_uses_teacher(cfg.method)) {
                if (teacher_net_path.empty() || teacher_centers_path.empty()) {
                    throw InvalidSpecError("method '" + to_string(cfg.method) +
                                           "' needs --teacher-net and --teacher-centers");
                }
                teacher = load_network(teacher_net_path);
                centers = load_centers(teacher_centers_path);
            }
            DistillResult result =
                distill_student(cfg, Seed{seed}, teacher ? &*teacher : nullptr,
                                centers ? &*centers : nullptr);

            save_network(result.net, (dir / "student_net.bin").string());
            write_runlog_csv(result.log, (dir / "runlog.csv").string());
            write_checkpoints_csv(result.log, (dir / "checkpoints.csv").string());

            const Dataset ds = generate_dataset(cfg.dataset);
            const EvalResult ev = evaluate_network(result.net, ds, cfg);
            write_text(dir / "metrics.json",
                       metrics_document(eval_to_records(ev, cfg), cfg, seed).dump(2) + "\n");
            nlohmann::json summary = {{"method", to_string(cfg.method)},
                                      {"verification_accuracy", ev.verification_accuracy},
                                      {"final_loss", result.log.loss.back()},
                                      {"out_dir", dir.string()}};
            std::cout << summary.dump() << '\n';
        } else if (eval->parsed()) {
            const ExperimentConfig cfg = load_config(eval_opts.config_path);
            const MlpNetwork net = load_network(eval_net_path);
            Dataset ds;
            if (!eval_dataset_path.empty()) {
                ds = load_dataset(eval_dataset_path);
                if (detail::dataset_to_json(ds.spec) != detail::dataset_to_json(cfg.dataset)) {
                    throw InvalidSpecError(
                        "evaluate: dataset file was generated from a different spec than the "
                        "config");
                }
            } else {
                ds = generate_dataset(cfg.dataset);
            }
            const fs::path dir = prepare_out_dir(eval_opts);
            const EvalResult ev = evaluate_network(net, ds, cfg);
            write_text(dir / "metrics.json",
                       metrics_document(eval_to_records(ev, cfg), cfg, cfg.seeds.front()).dump(2) +
                           "\n");
            if (eval_roc) write_roc_csv((dir / "roc.csv").string(), ev.roc);
            nlohmann::json summary = {{"verification_accuracy", ev.verification_accuracy},
                                      {"rank1", ev.rank1},
                                      {"out_dir", dir.string()}};
            std::cout << summary.dump() << '\n';
        } else if (comp->parsed()) {
            auto [base, methods] = load_compare_config(compare_opts.config_path);
            if (compare_opts.log_every) base.log_every = *compare_opts.log_every;
            if (compare_opts.seed) base.seeds = {*compare_opts.seed};
            base.validate();
            const fs::path dir = prepare_out_dir(compare_opts);
            const CompareReport report = compare_methods(expand_methods(base, methods));
            write_report_csv(report, (dir / "report.csv").string());
            write_text(dir / "metrics.json", compare_to_json(report).dump(2) + "\n");
            nlohmann::json summary = {{"rows", report.rows.size()},
                                      {"methods", methods.size()},
                                      {"out_dir", dir.string()}};
            std::cout << summary.dump() << '\n';
        }
    } catch (const std::exception& e) {
        nlohmann::json record = {{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}};
        std::cerr << record.dump() << '\n';
        return 1;
    }
    return 0;
}
