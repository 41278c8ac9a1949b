#pragma once

// Experiment orchestration: train a teacher classifier, freeze it, distill
// students under the different supervision regimes, and aggregate holdout
// metrics into comparison reports. Everything is driven by one JSON config
// and a run seed; given both, every logged number is reproducible bitwise.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adadistill/data.hpp"
#include "adadistill/errors.hpp"
#include "adadistill/eval.hpp"
#include "adadistill/losses.hpp"
#include "adadistill/models.hpp"
#include "adadistill/numkit.hpp"
#include "adadistill/optim.hpp"

namespace adadistill {

enum class Method {
    Standalone,            // margin softmax with the student's own trainable centers
    MseKd,                 // feature regression onto the teacher embedding
    AmlDistill,            // margin softmax against frozen teacher centers
    AdaDistillAlpha,       // EMA-refined centers, capability momentum
    AdaDistillAlphaPrime,  // EMA-refined centers, capability x hard-sample momentum
};

inline std::string to_string(Method m) {
    switch (m) {
        case Method::Standalone: return "standalone";
        case Method::MseKd: return "mse_kd";
        case Method::AmlDistill: return "amldistill";
        case Method::AdaDistillAlpha: return "adadistill_alpha";
        case Method::AdaDistillAlphaPrime: return "adadistill_alpha_prime";
    }
    throw InvalidSpecError("to_string: bad Method value");
}

inline Method method_from_string(const std::string& s) {
    if (s == "standalone") return Method::Standalone;
    if (s == "mse_kd") return Method::MseKd;
    if (s == "amldistill") return Method::AmlDistill;
    if (s == "adadistill_alpha") return Method::AdaDistillAlpha;
    if (s == "adadistill_alpha_prime") return Method::AdaDistillAlphaPrime;
    throw InvalidSpecError("unknown method '" + s + "'");
}

inline bool method_uses_teacher(Method m) { return m != Method::Standalone; }

inline bool method_is_adaptive(Method m) {
    return m == Method::AdaDistillAlpha || m == Method::AdaDistillAlphaPrime;
}

// Per-method (lambda, beta) defaults: the margin term carries every method
// except pure feature regression.
inline std::pair<double, double> method_default_weights(Method m) {
    return m == Method::MseKd ? std::pair{0.0, 1.0} : std::pair{1.0, 0.0};
}

struct EvalProtocol {
    std::size_t genuine_pairs = 500;
    std::size_t impostor_pairs = 2000;
    Vec far_targets{1e-2, 1e-3};

    void validate() const {
        if (genuine_pairs == 0 || impostor_pairs == 0) {
            throw InvalidSpecError("EvalProtocol: need nonzero pair counts");
        }
        if (far_targets.empty()) throw InvalidSpecError("EvalProtocol: need far_targets");
        for (double t : far_targets) {
            if (!(t >= 0.0 && t <= 1.0)) {
                throw InvalidSpecError("EvalProtocol: far_targets must lie in [0,1]");
            }
        }
    }
};

struct ExperimentConfig {
    SyntheticDatasetSpec dataset{20, 50, 16, 0.3, Seed{7}};
    MlpSpec teacher_spec{{16, 64, 64, 8}, Activation::Relu};
    MlpSpec student_spec{{16, 32, 8}, Activation::Relu};
    // s=64 is tuned for datasets with tens of thousands of identities; at 20
    // classes that scale makes the early logit gradients violent enough to
    // collapse every feature onto one direction. s=6 trains stably here for
    // the teacher and for every distillation method, including the student's
    // own-classifier baseline.
    MarginConfig margin{0.5, 0.0, 6.0};
    Method method = Method::AdaDistillAlphaPrime;
    double lambda = 1.0;
    double beta = 0.0;
    std::size_t total_iterations = 5000;
    std::size_t teacher_iterations = 5000;
    std::size_t batch_size = 64;
    double initial_lr = 0.1;
    double lr_decay = 0.1;
    std::vector<std::size_t> milestones;  // empty: derived from the iteration count
    std::vector<std::uint64_t> seeds{1, 2, 3};
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t log_every = 1;
    EvalProtocol eval;

    LrSchedule schedule(std::size_t total) const {
        if (milestones.empty()) return make_step_schedule(initial_lr, total, lr_decay);
        LrSchedule s{initial_lr, milestones, lr_decay};
        s.validate();
        return s;
    }

    void validate() const {
        dataset.validate();
        teacher_spec.validate();
        student_spec.validate();
        margin.validate();
        eval.validate();
        if (teacher_spec.layer_widths.front() != dataset.input_dim ||
            student_spec.layer_widths.front() != dataset.input_dim) {
            throw InvalidSpecError("ExperimentConfig: network input width must equal input_dim");
        }
        if (method_uses_teacher(method) &&
            teacher_spec.layer_widths.back() != student_spec.layer_widths.back()) {
            throw InvalidSpecError(
                "ExperimentConfig: teacher and student embedding widths must match for "
                "distillation methods");
        }
        if (!(lambda >= 0.0) || !(beta >= 0.0) || lambda + beta <= 0.0) {
            throw InvalidSpecError("ExperimentConfig: need lambda, beta >= 0 and lambda+beta > 0");
        }
        if (method == Method::Standalone && beta != 0.0) {
            throw InvalidSpecError("ExperimentConfig: standalone has no teacher term, beta must be 0");
        }
        if (method == Method::MseKd && !(beta > 0.0)) {
            throw InvalidSpecError("ExperimentConfig: mse_kd requires beta > 0");
        }
        if ((method == Method::AmlDistill || method_is_adaptive(method)) && !(lambda > 0.0)) {
            throw InvalidSpecError("ExperimentConfig: margin-based methods require lambda > 0");
        }
        if (total_iterations == 0 || teacher_iterations == 0 || batch_size == 0 ||
            log_every == 0) {
            throw InvalidSpecError("ExperimentConfig: iteration, batch and log counts must be > 0");
        }
        if (seeds.empty()) throw InvalidSpecError("ExperimentConfig: need at least one seed");
        if (!(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
            throw InvalidSpecError("ExperimentConfig: momentum in [0,1), weight_decay >= 0");
        }
        schedule(total_iterations).validate();
        (void)schedule(teacher_iterations);
    }
};

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const char* where) {
    if (!j.is_object()) throw InvalidSpecError(std::string(where) + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw InvalidSpecError(std::string(where) + ": unknown key '" + it.key() + "'");
        }
    }
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key, T fallback, const char* where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidSpecError(std::string(where) + "." + key + ": " + e.what());
    }
}

inline SyntheticDatasetSpec dataset_from_json(const nlohmann::json& j) {
    require_keys(j, {"class_count", "samples_per_class", "input_dim", "intra_class_noise", "seed"},
                 "dataset");
    SyntheticDatasetSpec d;
    d.class_count = json_get<std::size_t>(j, "class_count", d.class_count, "dataset");
    d.samples_per_class =
        json_get<std::size_t>(j, "samples_per_class", d.samples_per_class, "dataset");
    d.input_dim = json_get<std::size_t>(j, "input_dim", d.input_dim, "dataset");
    d.intra_class_noise =
        json_get<double>(j, "intra_class_noise", d.intra_class_noise, "dataset");
    d.seed.value = json_get<std::uint64_t>(j, "seed", d.seed.value, "dataset");
    return d;
}

inline nlohmann::json dataset_to_json(const SyntheticDatasetSpec& d) {
    return {{"class_count", d.class_count},
            {"samples_per_class", d.samples_per_class},
            {"input_dim", d.input_dim},
            {"intra_class_noise", d.intra_class_noise},
            {"seed", d.seed.value}};
}

inline MlpSpec mlp_from_json(const nlohmann::json& j, const char* where) {
    require_keys(j, {"layer_widths", "activation"}, where);
    MlpSpec s;
    s.layer_widths = json_get<std::vector<std::size_t>>(j, "layer_widths", s.layer_widths, where);
    s.activation = activation_from_string(
        json_get<std::string>(j, "activation", to_string(s.activation), where));
    return s;
}

inline nlohmann::json mlp_to_json(const MlpSpec& s) {
    return {{"layer_widths", s.layer_widths}, {"activation", to_string(s.activation)}};
}

inline MarginConfig margin_from_json(const nlohmann::json& j) {
    require_keys(j, {"m1", "m2", "s"}, "margin");
    MarginConfig m;
    m.m1 = json_get<double>(j, "m1", m.m1, "margin");
    m.m2 = json_get<double>(j, "m2", m.m2, "margin");
    m.s = json_get<double>(j, "s", m.s, "margin");
    return m;
}

inline nlohmann::json margin_to_json(const MarginConfig& m) {
    return {{"m1", m.m1}, {"m2", m.m2}, {"s", m.s}};
}

inline std::string format_g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

} // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["dataset"] = detail::dataset_to_json(cfg.dataset);
    j["teacher"] = detail::mlp_to_json(cfg.teacher_spec);
    j["student"] = detail::mlp_to_json(cfg.student_spec);
    j["margin"] = detail::margin_to_json(cfg.margin);
    j["method"] = to_string(cfg.method);
    j["lambda"] = cfg.lambda;
    j["beta"] = cfg.beta;
    j["total_iterations"] = cfg.total_iterations;
    j["teacher_iterations"] = cfg.teacher_iterations;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = nlohmann::json{{"initial", cfg.initial_lr}, {"decay", cfg.lr_decay}};
    if (!cfg.milestones.empty()) j["lr"]["milestones"] = cfg.milestones;
    j["seeds"] = cfg.seeds;
    j["momentum"] = cfg.momentum;
    j["weight_decay"] = cfg.weight_decay;
    j["log_every"] = cfg.log_every;
    j["evaluation"] = nlohmann::json{{"genuine_pairs", cfg.eval.genuine_pairs},
                                     {"impostor_pairs", cfg.eval.impostor_pairs},
                                     {"far_targets", cfg.eval.far_targets}};
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    detail::require_keys(j,
                         {"dataset", "teacher", "student", "margin", "method", "lambda", "beta",
                          "total_iterations", "teacher_iterations", "batch_size", "lr", "seeds",
                          "momentum", "weight_decay", "log_every", "evaluation"},
                         "config");
    ExperimentConfig cfg;
    if (j.contains("dataset")) cfg.dataset = detail::dataset_from_json(j.at("dataset"));
    if (j.contains("teacher")) cfg.teacher_spec = detail::mlp_from_json(j.at("teacher"), "teacher");
    if (j.contains("student")) cfg.student_spec = detail::mlp_from_json(j.at("student"), "student");
    if (j.contains("margin")) cfg.margin = detail::margin_from_json(j.at("margin"));
    cfg.method = method_from_string(
        detail::json_get<std::string>(j, "method", to_string(cfg.method), "config"));
    auto [def_lambda, def_beta] = method_default_weights(cfg.method);
    cfg.lambda = detail::json_get<double>(j, "lambda", def_lambda, "config");
    cfg.beta = detail::json_get<double>(j, "beta", def_beta, "config");
    cfg.total_iterations =
        detail::json_get<std::size_t>(j, "total_iterations", cfg.total_iterations, "config");
    cfg.teacher_iterations =
        detail::json_get<std::size_t>(j, "teacher_iterations", cfg.teacher_iterations, "config");
    cfg.batch_size = detail::json_get<std::size_t>(j, "batch_size", cfg.batch_size, "config");
    if (j.contains("lr")) {
        const auto& lr = j.at("lr");
        detail::require_keys(lr, {"initial", "decay", "milestones"}, "lr");
        cfg.initial_lr = detail::json_get<double>(lr, "initial", cfg.initial_lr, "lr");
        cfg.lr_decay = detail::json_get<double>(lr, "decay", cfg.lr_decay, "lr");
        cfg.milestones =
            detail::json_get<std::vector<std::size_t>>(lr, "milestones", cfg.milestones, "lr");
    }
    cfg.seeds = detail::json_get<std::vector<std::uint64_t>>(j, "seeds", cfg.seeds, "config");
    cfg.momentum = detail::json_get<double>(j, "momentum", cfg.momentum, "config");
    cfg.weight_decay = detail::json_get<double>(j, "weight_decay", cfg.weight_decay, "config");
    cfg.log_every = detail::json_get<std::size_t>(j, "log_every", cfg.log_every, "config");
    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        detail::require_keys(e, {"genuine_pairs", "impostor_pairs", "far_targets"}, "evaluation");
        cfg.eval.genuine_pairs =
            detail::json_get<std::size_t>(e, "genuine_pairs", cfg.eval.genuine_pairs, "evaluation");
        cfg.eval.impostor_pairs = detail::json_get<std::size_t>(e, "impostor_pairs",
                                                                cfg.eval.impostor_pairs,
                                                                "evaluation");
        cfg.eval.far_targets =
            detail::json_get<Vec>(e, "far_targets", cfg.eval.far_targets, "evaluation");
    }
    cfg.validate();
    return cfg;
}

namespace detail {

// One config file drives every subcommand. The optional top-level "methods"
// array names the sweep for compare runs; single-run loads validate and
// drop it.
inline std::pair<nlohmann::json, std::vector<Method>> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileFormatError("load_config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FileFormatError("load_config: parse error in '" + path + "': " + e.what());
    }
    std::vector<Method> methods;
    if (j.is_object() && j.contains("methods")) {
        if (!j.at("methods").is_array() || j.at("methods").empty()) {
            throw InvalidSpecError("config.methods: expected a non-empty array of method names");
        }
        for (const auto& name : j.at("methods")) {
            methods.push_back(method_from_string(name.get<std::string>()));
        }
        j.erase("methods");
    } else {
        methods = {Method::Standalone, Method::MseKd, Method::AmlDistill,
                   Method::AdaDistillAlpha, Method::AdaDistillAlphaPrime};
    }
    return {std::move(j), std::move(methods)};
}

} // namespace detail

inline ExperimentConfig load_config(const std::string& path) {
    auto [j, methods] = detail::read_config_file(path);
    return config_from_json(j);
}

// Compare configs are a base experiment plus the list of methods to sweep;
// lambda/beta reset to each method's defaults during expansion.
inline std::pair<ExperimentConfig, std::vector<Method>> load_compare_config(
    const std::string& path) {
    auto [j, methods] = detail::read_config_file(path);
    if (j.is_object() && !j.contains("method")) j["method"] = to_string(methods.front());
    return {config_from_json(j), methods};
}

inline std::vector<ExperimentConfig> expand_methods(const ExperimentConfig& base,
                                                    const std::vector<Method>& methods) {
    std::vector<ExperimentConfig> out;
    for (Method m : methods) {
        ExperimentConfig cfg = base;
        cfg.method = m;
        std::tie(cfg.lambda, cfg.beta) = method_default_weights(m);
        cfg.validate();
        out.push_back(std::move(cfg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run logs

struct CheckpointRow {
    std::size_t iteration = 0;
    double verification_accuracy = 0.0;
};

struct RunLog {
    std::vector<std::size_t> iterations;
    Vec loss;
    Vec lr;
    Vec mean_alpha;  // NaN for methods without a momentum signal
    Vec min_alpha;
    Vec max_alpha;
    Vec batch_ms;  // wall clock; kept out of deterministic artifacts
    std::vector<CheckpointRow> checkpoints;
};

inline void write_runlog_csv(const RunLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileFormatError("write_runlog_csv: cannot open '" + path + "'");
    out << "iteration,loss,lr,mean_alpha\n";
    for (std::size_t i = 0; i < log.iterations.size(); ++i) {
        out << log.iterations[i] << ',' << detail::format_g17(log.loss[i]) << ','
            << detail::format_g17(log.lr[i]) << ',';
        if (std::isfinite(log.mean_alpha[i])) out << detail::format_g17(log.mean_alpha[i]);
        out << '\n';
    }
    if (!out) throw FileFormatError("write_runlog_csv: write failed for '" + path + "'");
}

inline void write_checkpoints_csv(const RunLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileFormatError("write_checkpoints_csv: cannot open '" + path + "'");
    out << "iteration,verification_accuracy\n";
    for (const CheckpointRow& row : log.checkpoints) {
        out << row.iteration << ',' << detail::format_g17(row.verification_accuracy) << '\n';
    }
    if (!out) throw FileFormatError("write_checkpoints_csv: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Center bank persistence

inline constexpr char kCentersMagic[8] = {'A', 'D', 'C', 'T', 'R', '0', '0', '1'};

inline void save_centers(const CenterBank& bank, const std::string& path) {
    nlohmann::json header;
    header["class_count"] = bank.class_count();
    header["dim"] = bank.dim();
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileFormatError("save_centers: cannot open '" + path + "'");
    out.write(kCentersMagic, sizeof(kCentersMagic));
    const std::uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(), std::streamsize(header_text.size()));
    const Mat& c = bank.centers();
    out.write(reinterpret_cast<const char*>(c.data.data()),
              std::streamsize(c.data.size() * sizeof(double)));
    if (!out) throw FileFormatError("save_centers: write failed for '" + path + "'");
}

inline CenterBank load_centers(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileFormatError("load_centers: cannot open '" + path + "'");
    char magic[sizeof(kCentersMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCentersMagic, sizeof(magic)) != 0) {
        throw FileFormatError("load_centers: bad magic in '" + path + "'");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 20)) throw FileFormatError("load_centers: implausible header length");
    std::string header_text(len, '\0');
    in.read(header_text.data(), std::streamsize(len));
    if (!in) throw FileFormatError("load_centers: truncated header");

    std::size_t rows = 0, cols = 0;
    try {
        nlohmann::json header = nlohmann::json::parse(header_text);
        rows = header.at("class_count").get<std::size_t>();
        cols = header.at("dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FileFormatError(std::string("load_centers: header: ") + e.what());
    }
    if (rows == 0 || cols == 0) throw FileFormatError("load_centers: empty shape");

    Mat centers(rows, cols);
    in.read(reinterpret_cast<char*>(centers.data.data()),
            std::streamsize(centers.data.size() * sizeof(double)));
    if (!in) throw ShapeMismatchError("load_centers: payload shorter than declared shape");
    char extra;
    if (in.read(&extra, 1)) {
        throw ShapeMismatchError("load_centers: trailing bytes beyond declared shape");
    }
    check_finite(centers.data, "load_centers");
    return CenterBank(std::move(centers));
}

// ---------------------------------------------------------------------------
// Training internals

namespace detail {

// Deterministic endless batch source: one shuffled epoch at a time, each
// epoch reshuffled under its own derived seed.
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::size_t batch_size, Seed base)
        : ds_(&ds), batch_size_(batch_size), base_(base) {
        refill();
    }

    const std::vector<std::size_t>& next() {
        if (cursor_ == batches_.size()) refill();
        return batches_[cursor_++];
    }

private:
    void refill() {
        batches_ = make_batches(*ds_, batch_size_, derive_seed(base_, epoch_));
        ++epoch_;
        cursor_ = 0;
    }

    const Dataset* ds_;
    std::size_t batch_size_;
    Seed base_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::vector<std::size_t>> batches_;
};

inline std::vector<std::size_t> gather_labels(const Dataset& ds,
                                              const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(ds.labels[i]);
    return out;
}

inline Mat random_unit_rows(std::size_t rows, std::size_t cols, Seed seed) {
    auto eng = make_engine(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat m(rows, cols);
    for (double& x : m.data) x = g(eng);
    for (std::size_t i = 0; i < rows; ++i) l2_normalize_inplace(m.row(i));
    return m;
}

inline void renormalize_rows(Mat& m) {
    for (std::size_t i = 0; i < m.rows; ++i) l2_normalize_inplace(m.row(i));
}

inline double holdout_accuracy(const MlpNetwork& net, const Dataset& ds, const PairList& pairs) {
    auto [emb, cache] = forward(net, ds.inputs);
    (void)cache;
    return verification_accuracy(score_pairs(emb, pairs)).first;
}

inline Seed eval_pair_seed(const ExperimentConfig& cfg) {
    // tied to the dataset seed, not the run seed, so every run on the same
    // dataset scores the same pairs
    return derive_seed(cfg.dataset.seed, 9001);
}

inline double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / double(xs.size());
}

} // namespace detail

struct TeacherResult {
    MlpNetwork net;
    CenterBank centers;
    RunLog log;
};

// Fit the teacher as a standalone margin-softmax classifier: network and
// classifier rows both move by gradient, rows reprojected onto the sphere
// after each step.
inline TeacherResult train_teacher(const ExperimentConfig& cfg, Seed run_seed) {
    cfg.validate();
    const Dataset ds = generate_dataset(cfg.dataset);
    const PairList pairs =
        generate_pairs(ds, cfg.eval.genuine_pairs, cfg.eval.impostor_pairs,
                       detail::eval_pair_seed(cfg));

    const Seed base = derive_seed(run_seed, 101);
    MlpNetwork net = init_network(cfg.teacher_spec, derive_seed(base, 1));
    Mat centers = detail::random_unit_rows(cfg.dataset.class_count, net.embedding_dim(),
                                           derive_seed(base, 2));
    detail::BatchStream stream(ds, cfg.batch_size, derive_seed(base, 3));
    const LrSchedule sched = cfg.schedule(cfg.teacher_iterations);
    SgdState state;
    RunLog log;
    const std::size_t total = cfg.teacher_iterations;
    const std::size_t cadence = std::max<std::size_t>(1, total / 20);

    for (std::size_t it = 0; it < total; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<std::size_t>& batch = stream.next();
        const Mat x = gather_rows(ds.inputs, batch);
        const std::vector<std::size_t> labels = detail::gather_labels(ds, batch);

        auto [emb, cache] = forward(net, x);
        TrainableLossOutput tl;
        try {
            tl = aml_loss_trainable(emb, labels, centers, cfg.margin);
        } catch (const NonFiniteError& e) {
            throw DivergedRunError("train_teacher: non-finite loss at iteration " +
                                   std::to_string(it) + ": " + e.what());
        }
        if (!std::isfinite(tl.loss.value)) {
            throw DivergedRunError("train_teacher: loss diverged at iteration " +
                                   std::to_string(it));
        }

        const ParamGrads grads = backward(net, cache, tl.loss.grad_features);
        std::vector<std::span<double>> params = parameter_views(net);
        std::vector<std::span<const double>> gviews = grad_views(grads);
        params.emplace_back(centers.data);
        gviews.emplace_back(tl.grad_centers.data);
        sgd_step(params, gviews, state, lr_at(sched, it), cfg.momentum, cfg.weight_decay);
        detail::renormalize_rows(centers);

        if (it % cfg.log_every == 0 || it + 1 == total) {
            const auto t1 = std::chrono::steady_clock::now();
            log.iterations.push_back(it);
            log.loss.push_back(tl.loss.value);
            log.lr.push_back(lr_at(sched, it));
            log.mean_alpha.push_back(std::numeric_limits<double>::quiet_NaN());
            log.min_alpha.push_back(std::numeric_limits<double>::quiet_NaN());
            log.max_alpha.push_back(std::numeric_limits<double>::quiet_NaN());
            log.batch_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        if ((it + 1) % cadence == 0 || it + 1 == total) {
            log.checkpoints.push_back({it, detail::holdout_accuracy(net, ds, pairs)});
        }
    }
    return {std::move(net), CenterBank(std::move(centers)), std::move(log)};
}

struct DistillResult {
    MlpNetwork net;
    RunLog log;
};

// One student training run. The teacher and its centers are required for
// every method except standalone; student_init (when given) replaces the
// seeded initialization, e.g. to start from a copy of the teacher.
inline DistillResult distill_student(const ExperimentConfig& cfg, Seed run_seed,
                                     const MlpNetwork* teacher, const CenterBank* teacher_centers,
                                     const MlpNetwork* student_init = nullptr) {
    cfg.validate();
    if (method_uses_teacher(cfg.method)) {
        if (teacher == nullptr || teacher_centers == nullptr) {
            throw InvalidSpecError("distill_student: method '" + to_string(cfg.method) +
                                   "' requires a teacher network and its centers");
        }
        if (teacher->input_dim() != cfg.dataset.input_dim) {
            throw DimensionMismatchError("distill_student: teacher input width mismatch");
        }
        if (teacher->embedding_dim() != cfg.student_spec.layer_widths.back()) {
            throw DimensionMismatchError("distill_student: embedding width mismatch");
        }
        if (teacher_centers->class_count() != cfg.dataset.class_count ||
            teacher_centers->dim() != teacher->embedding_dim()) {
            throw DimensionMismatchError("distill_student: teacher center shape mismatch");
        }
    }

    const Dataset ds = generate_dataset(cfg.dataset);
    const PairList pairs =
        generate_pairs(ds, cfg.eval.genuine_pairs, cfg.eval.impostor_pairs,
                       detail::eval_pair_seed(cfg));

    const Seed base = derive_seed(run_seed, 202);
    MlpNetwork net;
    if (student_init != nullptr) {
        if (student_init->spec.layer_widths != cfg.student_spec.layer_widths ||
            student_init->spec.activation != cfg.student_spec.activation) {
            throw InvalidSpecError("distill_student: student_init spec differs from config");
        }
        net = *student_init;
    } else {
        net = init_network(cfg.student_spec, derive_seed(base, 1));
    }

    // own trainable classifier rows for methods that carry a standalone
    // margin term
    const bool own_centers_active =
        cfg.method == Method::Standalone || (cfg.method == Method::MseKd && cfg.lambda > 0.0);
    Mat own_centers;
    if (own_centers_active) {
        own_centers = detail::random_unit_rows(cfg.dataset.class_count, net.embedding_dim(),
                                               derive_seed(base, 2));
    }
    CenterBank bank = method_is_adaptive(cfg.method) ? CenterBank(teacher_centers->centers())
                                                     : CenterBank(Mat(1, 1, {1.0}));

    detail::BatchStream stream(ds, cfg.batch_size, derive_seed(base, 3));
    const LrSchedule sched = cfg.schedule(cfg.total_iterations);
    SgdState state;
    RunLog log;
    const std::size_t total = cfg.total_iterations;
    const std::size_t cadence = std::max<std::size_t>(1, total / 20);
    const CombinedLossConfig weights{cfg.lambda, cfg.beta};

    for (std::size_t it = 0; it < total; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<std::size_t>& batch = stream.next();
        const Mat x = gather_rows(ds.inputs, batch);
        const std::vector<std::size_t> labels = detail::gather_labels(ds, batch);

        auto [fs, cache] = forward(net, x);
        Mat ft;
        if (method_uses_teacher(cfg.method)) {
            auto [emb, tcache] = forward(*teacher, x);
            (void)tcache;
            ft = std::move(emb);
        }

        LossOutput main, kd;
        Mat own_center_grads;
        double a_mean = std::numeric_limits<double>::quiet_NaN();
        double a_min = a_mean, a_max = a_mean;
        try {
            switch (cfg.method) {
                case Method::Standalone: {
                    TrainableLossOutput tl = aml_loss_trainable(fs, labels, own_centers, cfg.margin);
                    main = std::move(tl.loss);
                    own_center_grads = std::move(tl.grad_centers);
                    kd = zero_loss(fs.rows, fs.cols);
                    break;
                }
                case Method::MseKd: {
                    if (own_centers_active) {
                        TrainableLossOutput tl =
                            aml_loss_trainable(fs, labels, own_centers, cfg.margin);
                        main = std::move(tl.loss);
                        own_center_grads = std::move(tl.grad_centers);
                    } else {
                        main = zero_loss(fs.rows, fs.cols);
                    }
                    kd = mse_kd_loss(fs, ft);
                    break;
                }
                case Method::AmlDistill: {
                    main = amldistill_loss(fs, labels, teacher_centers->centers(), cfg.margin);
                    kd = cfg.beta > 0.0 ? mse_kd_loss(fs, ft) : zero_loss(fs.rows, fs.cols);
                    break;
                }
                case Method::AdaDistillAlpha:
                case Method::AdaDistillAlphaPrime: {
                    const AlphaMode mode = cfg.method == Method::AdaDistillAlpha
                                               ? AlphaMode::Plain
                                               : AlphaMode::HardWeighted;
                    AdaStepResult r = adadistill_step(fs, ft, labels, bank, cfg.margin, mode);
                    main = std::move(r.loss);
                    kd = cfg.beta > 0.0 ? mse_kd_loss(fs, ft) : zero_loss(fs.rows, fs.cols);
                    a_mean = detail::mean_of(r.alphas);
                    a_min = *std::min_element(r.alphas.begin(), r.alphas.end());
                    a_max = *std::max_element(r.alphas.begin(), r.alphas.end());
                    break;
                }
            }
        } catch (const NonFiniteError& e) {
            throw DivergedRunError("distill_student: non-finite loss at iteration " +
                                   std::to_string(it) + ": " + e.what());
        }

        const LossOutput total_loss = combined_loss(main, kd, weights);
        if (!std::isfinite(total_loss.value)) {
            throw DivergedRunError("distill_student: loss diverged at iteration " +
                                   std::to_string(it));
        }

        const ParamGrads grads = backward(net, cache, total_loss.grad_features);
        std::vector<std::span<double>> params = parameter_views(net);
        std::vector<std::span<const double>> gviews = grad_views(grads);
        if (own_centers_active) {
            // center gradients pick up the same lambda weighting the feature
            // gradients received inside combined_loss
            for (double& g : own_center_grads.data) g *= cfg.lambda;
            params.emplace_back(own_centers.data);
            gviews.emplace_back(own_center_grads.data);
        }
        sgd_step(params, gviews, state, lr_at(sched, it), cfg.momentum, cfg.weight_decay);
        if (own_centers_active) detail::renormalize_rows(own_centers);

        if (it % cfg.log_every == 0 || it + 1 == total) {
            const auto t1 = std::chrono::steady_clock::now();
            log.iterations.push_back(it);
            log.loss.push_back(total_loss.value);
            log.lr.push_back(lr_at(sched, it));
            log.mean_alpha.push_back(a_mean);
            log.min_alpha.push_back(a_min);
            log.max_alpha.push_back(a_max);
            log.batch_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        if ((it + 1) % cadence == 0 || it + 1 == total) {
            log.checkpoints.push_back({it, detail::holdout_accuracy(net, ds, pairs)});
        }
    }
    return {std::move(net), std::move(log)};
}

// ---------------------------------------------------------------------------
// Evaluation of a trained embedding network

struct EvalResult {
    double verification_accuracy = 0.0;
    double best_threshold = 0.0;
    std::vector<RocPoint> tar_points;  // aligned with cfg.eval.far_targets
    double rank1 = 0.0;
    std::vector<RocPoint> roc;
};

inline EvalResult evaluate_network(const MlpNetwork& net, const Dataset& ds,
                                   const ExperimentConfig& cfg) {
    const PairList pairs =
        generate_pairs(ds, cfg.eval.genuine_pairs, cfg.eval.impostor_pairs,
                       detail::eval_pair_seed(cfg));
    auto [emb, cache] = forward(net, ds.inputs);
    (void)cache;

    EvalResult res;
    const ScoreSet scores = score_pairs(emb, pairs);
    std::tie(res.verification_accuracy, res.best_threshold) = verification_accuracy(scores);
    for (double t : cfg.eval.far_targets) res.tar_points.push_back(tar_at_far(scores, t));
    res.roc = roc_curve(scores);

    // identification: holdout probes against per-class center estimates from
    // the training split
    const std::vector<std::size_t> train = ds.train_indices();
    const std::vector<std::size_t> hold = ds.holdout_indices();
    const Mat train_emb = gather_rows(emb, train);
    std::vector<std::size_t> train_labels;
    train_labels.reserve(train.size());
    for (std::size_t i : train) train_labels.push_back(ds.labels[i]);
    const CenterEstimate est =
        estimate_class_centers(train_emb, train_labels, cfg.dataset.class_count);

    Mat gallery(0, emb.cols);
    std::vector<std::size_t> gallery_labels;
    for (std::size_t c = 0; c < cfg.dataset.class_count; ++c) {
        const bool degenerate =
            std::find(est.degenerate_classes.begin(), est.degenerate_classes.end(), c) !=
            est.degenerate_classes.end();
        if (degenerate) continue;
        gallery.data.insert(gallery.data.end(), est.centers.row(c).begin(),
                            est.centers.row(c).end());
        ++gallery.rows;
        gallery_labels.push_back(c);
    }
    const Mat probes = gather_rows(emb, hold);
    std::vector<std::size_t> probe_labels;
    probe_labels.reserve(hold.size());
    for (std::size_t i : hold) probe_labels.push_back(ds.labels[i]);
    res.rank1 = rank1_identification(probes, probe_labels, gallery, gallery_labels);
    return res;
}

inline std::vector<MetricRecord> eval_to_records(const EvalResult& res,
                                                 const ExperimentConfig& cfg) {
    std::vector<MetricRecord> records;
    MetricRecord acc;
    acc.name = "verification_accuracy";
    acc.value = res.verification_accuracy;
    acc.parameters = {{"protocol", "single_fold_best_threshold"},
                      {"best_threshold", res.best_threshold}};
    acc.genuine_pairs = cfg.eval.genuine_pairs;
    acc.impostor_pairs = cfg.eval.impostor_pairs;
    records.push_back(std::move(acc));
    for (std::size_t i = 0; i < cfg.eval.far_targets.size(); ++i) {
        MetricRecord tar;
        tar.name = "tar_at_far";
        tar.value = res.tar_points[i].tar;
        tar.parameters = {{"far_target", cfg.eval.far_targets[i]},
                          {"threshold", res.tar_points[i].threshold},
                          {"empirical_far", res.tar_points[i].far}};
        tar.genuine_pairs = cfg.eval.genuine_pairs;
        tar.impostor_pairs = cfg.eval.impostor_pairs;
        if (res.tar_points[i].unreliable_far) {
            tar.warnings.push_back("impostor count too small to resolve the FAR target");
        }
        records.push_back(std::move(tar));
    }
    MetricRecord r1;
    r1.name = "rank1_identification";
    r1.value = res.rank1;
    r1.parameters = {{"gallery", "train_split_class_centers"}, {"probes", "holdout_split"}};
    records.push_back(std::move(r1));
    return records;
}

// ---------------------------------------------------------------------------
// Method comparison

struct MethodSeedRow {
    Method method = Method::Standalone;
    std::uint64_t seed = 0;
    double verification_accuracy = 0.0;
    double best_threshold = 0.0;
    std::vector<RocPoint> tar_points;
    double rank1 = 0.0;
    double final_window_loss = 0.0;  // mean training loss over the closing window
    double final_mean_alpha = 0.0;   // NaN when the method has no momentum signal
};

struct MethodAggregate {
    Method method = Method::Standalone;
    double mean_accuracy = 0.0, std_accuracy = 0.0;
    double mean_rank1 = 0.0, std_rank1 = 0.0;
    Vec mean_tar;  // aligned with far_targets
};

struct CompareReport {
    std::vector<MethodSeedRow> rows;       // config-major, seed-minor order
    std::vector<MethodAggregate> aggregates;
    Vec far_targets;
    std::vector<std::string> notes;
    nlohmann::json configs;
};

namespace detail {

inline std::pair<double, double> mean_std(const Vec& xs) {
    const double mu = mean_of(xs);
    if (xs.size() < 2) return {mu, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mu) * (x - mu);
    return {mu, std::sqrt(ss / double(xs.size() - 1))};
}

inline double final_window_mean(const Vec& xs, std::size_t window) {
    const std::size_t n = std::min(window, xs.size());
    return mean_of(std::span<const double>(xs).last(n));
}

inline nlohmann::json teacher_cache_key(const ExperimentConfig& cfg, std::uint64_t seed) {
    return {{"dataset", dataset_to_json(cfg.dataset)},
            {"teacher", mlp_to_json(cfg.teacher_spec)},
            {"margin", margin_to_json(cfg.margin)},
            {"teacher_iterations", cfg.teacher_iterations},
            {"batch_size", cfg.batch_size},
            {"initial_lr", cfg.initial_lr},
            {"lr_decay", cfg.lr_decay},
            {"milestones", cfg.milestones},
            {"momentum", cfg.momentum},
            {"weight_decay", cfg.weight_decay},
            {"seed", seed}};
}

} // namespace detail

inline constexpr std::size_t kFinalWindow = 200;

inline CompareReport compare_methods(const std::vector<ExperimentConfig>& configs) {
    if (configs.empty()) throw InvalidSpecError("compare_methods: need at least one config");
    const nlohmann::json shared_dataset = detail::dataset_to_json(configs.front().dataset);
    for (const ExperimentConfig& cfg : configs) {
        cfg.validate();
        if (detail::dataset_to_json(cfg.dataset) != shared_dataset ||
            cfg.eval.genuine_pairs != configs.front().eval.genuine_pairs ||
            cfg.eval.impostor_pairs != configs.front().eval.impostor_pairs ||
            cfg.eval.far_targets != configs.front().eval.far_targets) {
            throw InvalidSpecError(
                "compare_methods: all configs must share the dataset and evaluation pairs");
        }
    }

    const Dataset ds = generate_dataset(configs.front().dataset);
    std::map<std::string, TeacherResult> teacher_cache;
    CompareReport report;
    report.far_targets = configs.front().eval.far_targets;

    for (const ExperimentConfig& cfg : configs) {
        for (std::uint64_t seed : cfg.seeds) {
            const MlpNetwork* teacher = nullptr;
            const CenterBank* centers = nullptr;
            if (method_uses_teacher(cfg.method)) {
                const std::string key = detail::teacher_cache_key(cfg, seed).dump();
                auto it = teacher_cache.find(key);
                if (it == teacher_cache.end()) {
                    it = teacher_cache.emplace(key, train_teacher(cfg, Seed{seed})).first;
                }
                teacher = &it->second.net;
                centers = &it->second.centers;
            }
            DistillResult run = distill_student(cfg, Seed{seed}, teacher, centers);
            const EvalResult ev = evaluate_network(run.net, ds, cfg);

            MethodSeedRow row;
            row.method = cfg.method;
            row.seed = seed;
            row.verification_accuracy = ev.verification_accuracy;
            row.best_threshold = ev.best_threshold;
            row.tar_points = ev.tar_points;
            row.rank1 = ev.rank1;
            row.final_window_loss = detail::final_window_mean(run.log.loss, kFinalWindow);
            row.final_mean_alpha =
                method_is_adaptive(cfg.method)
                    ? detail::final_window_mean(run.log.mean_alpha, kFinalWindow)
                    : std::numeric_limits<double>::quiet_NaN();
            report.rows.push_back(std::move(row));
        }

        MethodAggregate agg;
        agg.method = cfg.method;
        Vec accs, ranks;
        std::vector<Vec> tars(cfg.eval.far_targets.size());
        for (std::size_t i = report.rows.size() - cfg.seeds.size(); i < report.rows.size(); ++i) {
            accs.push_back(report.rows[i].verification_accuracy);
            ranks.push_back(report.rows[i].rank1);
            for (std::size_t t = 0; t < tars.size(); ++t) {
                tars[t].push_back(report.rows[i].tar_points[t].tar);
            }
        }
        std::tie(agg.mean_accuracy, agg.std_accuracy) = detail::mean_std(accs);
        std::tie(agg.mean_rank1, agg.std_rank1) = detail::mean_std(ranks);
        for (const Vec& t : tars) agg.mean_tar.push_back(detail::mean_of(t));
        report.aggregates.push_back(std::move(agg));
    }

    report.notes = {
        "verification accuracy is single-fold best-threshold over one pair set",
        "teacher features are l2-normalized before any center update",
        "FAR operating points use the conservative just-above-kth-impostor threshold",
    };
    for (const ExperimentConfig& cfg : configs) report.configs.push_back(to_json(cfg));
    return report;
}

inline nlohmann::json compare_to_json(const CompareReport& report) {
    nlohmann::json j;
    j["schema"] = "compare_report_v1";
    j["far_targets"] = report.far_targets;
    j["rows"] = nlohmann::json::array();
    for (const MethodSeedRow& row : report.rows) {
        nlohmann::json r;
        r["method"] = to_string(row.method);
        r["seed"] = row.seed;
        r["verification_accuracy"] = row.verification_accuracy;
        r["best_threshold"] = row.best_threshold;
        r["tar_at_far"] = nlohmann::json::array();
        for (std::size_t t = 0; t < row.tar_points.size(); ++t) {
            r["tar_at_far"].push_back({{"far_target", report.far_targets[t]},
                                       {"tar", row.tar_points[t].tar},
                                       {"threshold", row.tar_points[t].threshold},
                                       {"empirical_far", row.tar_points[t].far},
                                       {"unreliable_far", row.tar_points[t].unreliable_far}});
        }
        r["rank1"] = row.rank1;
        r["final_window_loss"] = row.final_window_loss;
        if (std::isfinite(row.final_mean_alpha)) r["final_mean_alpha"] = row.final_mean_alpha;
        j["rows"].push_back(std::move(r));
    }
    j["aggregates"] = nlohmann::json::array();
    for (const MethodAggregate& agg : report.aggregates) {
        j["aggregates"].push_back({{"method", to_string(agg.method)},
                                   {"mean_accuracy", agg.mean_accuracy},
                                   {"std_accuracy", agg.std_accuracy},
                                   {"mean_rank1", agg.mean_rank1},
                                   {"std_rank1", agg.std_rank1},
                                   {"mean_tar", agg.mean_tar}});
    }
    j["notes"] = report.notes;
    j["configs"] = report.configs;
    return j;
}

inline void write_report_csv(const CompareReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FileFormatError("write_report_csv: cannot open '" + path + "'");
    out << "method,seed,verification_accuracy,best_threshold";
    for (double t : report.far_targets) out << ",tar_at_far_" << detail::format_g17(t);
    out << ",rank1,final_window_loss,final_mean_alpha\n";
    for (const MethodSeedRow& row : report.rows) {
        out << to_string(row.method) << ',' << row.seed << ','
            << detail::format_g17(row.verification_accuracy) << ','
            << detail::format_g17(row.best_threshold);
        for (const RocPoint& p : row.tar_points) out << ',' << detail::format_g17(p.tar);
        out << ',' << detail::format_g17(row.rank1) << ','
            << detail::format_g17(row.final_window_loss) << ',';
        if (std::isfinite(row.final_mean_alpha)) out << detail::format_g17(row.final_mean_alpha);
        out << '\n';
    }
    for (const MethodAggregate& agg : report.aggregates) {
        out << to_string(agg.method) << ",mean," << detail::format_g17(agg.mean_accuracy) << ',';
        for (double t : agg.mean_tar) out << ',' << detail::format_g17(t);
        out << ',' << detail::format_g17(agg.mean_rank1) << ",,\n";
        out << to_string(agg.method) << ",std," << detail::format_g17(agg.std_accuracy) << ',';
        for (std::size_t t = 0; t < agg.mean_tar.size(); ++t) out << ',';
        out << ',' << detail::format_g17(agg.std_rank1) << ",,\n";
    }
    if (!out) throw FileFormatError("write_report_csv: write failed for '" + path + "'");
}

} // namespace adadistill
