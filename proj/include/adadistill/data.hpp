#pragma once

// Synthetic identity data: classes are unit latent directions on the
// input hypersphere, samples are normalized noisy copies. Also seeded
// batching and verification-pair construction, plus a columnar binary
// file format with a JSON header.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adadistill/errors.hpp"
#include "adadistill/numkit.hpp"

namespace adadistill {

struct SyntheticDatasetSpec {
    std::size_t class_count = 20;
    std::size_t samples_per_class = 50;
    std::size_t input_dim = 16;
    double intra_class_noise = 0.3;
    Seed seed{0};

    void validate() const {
        if (class_count < 2 || samples_per_class < 2 || input_dim < 2) {
            throw InvalidSpecError(
                "SyntheticDatasetSpec: need class_count >= 2, samples_per_class >= 2, "
                "input_dim >= 2");
        }
        if (!(intra_class_noise >= 0.0)) {
            throw InvalidSpecError("SyntheticDatasetSpec: intra_class_noise must be >= 0");
        }
    }
};

struct Dataset {
    SyntheticDatasetSpec spec;
    Mat inputs;                        // (class_count * samples_per_class) x input_dim
    std::vector<std::size_t> labels;
    Mat latent_directions;             // generative ground truth, unit rows
    std::vector<std::uint8_t> holdout_mask;  // 1 = held out for evaluation

    std::size_t sample_count() const { return inputs.rows; }

    std::vector<std::size_t> train_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < holdout_mask.size(); ++i) {
            if (!holdout_mask[i]) idx.push_back(i);
        }
        return idx;
    }
    std::vector<std::size_t> holdout_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < holdout_mask.size(); ++i) {
            if (holdout_mask[i]) idx.push_back(i);
        }
        return idx;
    }
};

struct PairList {
    std::vector<std::pair<std::size_t, std::size_t>> genuine;
    std::vector<std::pair<std::size_t, std::size_t>> impostor;
};

// Latent directions first, then samples in (class, slot) order, all from
// one engine, so the latents do not move when samples_per_class changes.
// The last fifth of each class (floor) is marked held out.
inline Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    auto eng = make_engine(spec.seed);
    std::normal_distribution<double> g(0.0, 1.0);

    ds.latent_directions = Mat(spec.class_count, spec.input_dim);
    for (double& x : ds.latent_directions.data) x = g(eng);
    for (std::size_t j = 0; j < spec.class_count; ++j) {
        l2_normalize_inplace(ds.latent_directions.row(j));
    }

    const std::size_t n = spec.class_count * spec.samples_per_class;
    const std::size_t holdout_per_class = spec.samples_per_class / 5;
    ds.inputs = Mat(n, spec.input_dim);
    ds.labels.resize(n);
    ds.holdout_mask.assign(n, 0);
    for (std::size_t j = 0; j < spec.class_count; ++j) {
        auto latent = ds.latent_directions.row(j);
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            const std::size_t i = j * spec.samples_per_class + s;
            auto row = ds.inputs.row(i);
            for (std::size_t t = 0; t < spec.input_dim; ++t) {
                row[t] = latent[t] + spec.intra_class_noise * g(eng);
            }
            l2_normalize_inplace(row);
            ds.labels[i] = j;
            if (s >= spec.samples_per_class - holdout_per_class) ds.holdout_mask[i] = 1;
        }
    }
    return ds;
}

// Seeded shuffle of the training indices chunked into fixed-size batches;
// a trailing short chunk is dropped.
inline std::vector<std::vector<std::size_t>> make_batches(const Dataset& ds,
                                                          std::size_t batch_size,
                                                          Seed epoch_seed) {
    std::vector<std::size_t> train = ds.train_indices();
    if (batch_size == 0 || batch_size > train.size()) {
        throw InvalidBatchSizeError("make_batches: batch size " + std::to_string(batch_size) +
                                    " for " + std::to_string(train.size()) +
                                    " training samples");
    }
    auto eng = make_engine(epoch_seed);
    std::shuffle(train.begin(), train.end(), eng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start + batch_size <= train.size(); start += batch_size) {
        batches.emplace_back(train.begin() + std::ptrdiff_t(start),
                             train.begin() + std::ptrdiff_t(start + batch_size));
    }
    return batches;
}

// Uniform sample without replacement from all eligible holdout pairs.
inline PairList generate_pairs(const Dataset& ds, std::size_t n_genuine, std::size_t n_impostor,
                               Seed seed) {
    std::vector<std::size_t> hold = ds.holdout_indices();
    std::size_t classes_with_two = 0;
    {
        std::vector<std::size_t> per_class(ds.spec.class_count, 0);
        for (std::size_t i : hold) ++per_class[ds.labels[i]];
        for (std::size_t cnt : per_class) {
            if (cnt >= 2) ++classes_with_two;
        }
    }
    if (hold.size() < 4 || classes_with_two < 2) {
        throw InsufficientSamplesError(
            "generate_pairs: holdout needs at least 2 samples in each of 2 classes");
    }

    std::vector<std::pair<std::size_t, std::size_t>> all_genuine, all_impostor;
    for (std::size_t a = 0; a < hold.size(); ++a) {
        for (std::size_t b = a + 1; b < hold.size(); ++b) {
            if (ds.labels[hold[a]] == ds.labels[hold[b]]) {
                all_genuine.emplace_back(hold[a], hold[b]);
            } else {
                all_impostor.emplace_back(hold[a], hold[b]);
            }
        }
    }
    if (n_genuine > all_genuine.size() || n_impostor > all_impostor.size()) {
        throw InsufficientSamplesError(
            "generate_pairs: requested " + std::to_string(n_genuine) + "/" +
            std::to_string(n_impostor) + " pairs but only " +
            std::to_string(all_genuine.size()) + "/" + std::to_string(all_impostor.size()) +
            " exist");
    }
    auto eng = make_engine(seed);
    std::shuffle(all_genuine.begin(), all_genuine.end(), eng);
    std::shuffle(all_impostor.begin(), all_impostor.end(), eng);
    PairList pairs;
    pairs.genuine.assign(all_genuine.begin(), all_genuine.begin() + std::ptrdiff_t(n_genuine));
    pairs.impostor.assign(all_impostor.begin(), all_impostor.begin() + std::ptrdiff_t(n_impostor));
    return pairs;
}

// ---------------------------------------------------------------------
// Columnar binary container: magic, u64 header length, JSON header with
// the generator spec and split size, then inputs (doubles), labels
// (u32), latent directions (doubles), holdout mask (u8).
// ---------------------------------------------------------------------

inline constexpr char kDatasetMagic[8] = {'A', 'D', 'D', 'A', 'T', '0', '0', '1'};

inline void save_dataset(const Dataset& ds, const std::string& path) {
    nlohmann::json header;
    header["class_count"] = ds.spec.class_count;
    header["samples_per_class"] = ds.spec.samples_per_class;
    header["input_dim"] = ds.spec.input_dim;
    header["intra_class_noise"] = ds.spec.intra_class_noise;
    header["seed"] = ds.spec.seed.value;
    header["holdout_count"] = ds.holdout_indices().size();
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileFormatError("save_dataset: cannot open '" + path + "'");
    out.write(kDatasetMagic, sizeof(kDatasetMagic));
    const std::uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(), std::streamsize(header_text.size()));

    out.write(reinterpret_cast<const char*>(ds.inputs.data.data()),
              std::streamsize(ds.inputs.data.size() * sizeof(double)));
    std::vector<std::uint32_t> labels32(ds.labels.begin(), ds.labels.end());
    out.write(reinterpret_cast<const char*>(labels32.data()),
              std::streamsize(labels32.size() * sizeof(std::uint32_t)));
    out.write(reinterpret_cast<const char*>(ds.latent_directions.data.data()),
              std::streamsize(ds.latent_directions.data.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(ds.holdout_mask.data()),
              std::streamsize(ds.holdout_mask.size()));
    if (!out) throw FileFormatError("save_dataset: write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileFormatError("load_dataset: cannot open '" + path + "'");
    char magic[sizeof(kDatasetMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) {
        throw FileFormatError("load_dataset: bad magic in '" + path + "'");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 20)) throw FileFormatError("load_dataset: implausible header length");
    std::string header_text(len, '\0');
    in.read(header_text.data(), std::streamsize(len));
    if (!in) throw FileFormatError("load_dataset: truncated header");

    Dataset ds;
    try {
        nlohmann::json header = nlohmann::json::parse(header_text);
        ds.spec.class_count = header.at("class_count").get<std::size_t>();
        ds.spec.samples_per_class = header.at("samples_per_class").get<std::size_t>();
        ds.spec.input_dim = header.at("input_dim").get<std::size_t>();
        ds.spec.intra_class_noise = header.at("intra_class_noise").get<double>();
        ds.spec.seed = Seed{header.at("seed").get<std::uint64_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw FileFormatError(std::string("load_dataset: header: ") + e.what());
    }
    ds.spec.validate();

    const std::size_t n = ds.spec.class_count * ds.spec.samples_per_class;
    ds.inputs = Mat(n, ds.spec.input_dim);
    in.read(reinterpret_cast<char*>(ds.inputs.data.data()),
            std::streamsize(ds.inputs.data.size() * sizeof(double)));
    std::vector<std::uint32_t> labels32(n);
    in.read(reinterpret_cast<char*>(labels32.data()),
            std::streamsize(labels32.size() * sizeof(std::uint32_t)));
    ds.latent_directions = Mat(ds.spec.class_count, ds.spec.input_dim);
    in.read(reinterpret_cast<char*>(ds.latent_directions.data.data()),
            std::streamsize(ds.latent_directions.data.size() * sizeof(double)));
    ds.holdout_mask.resize(n);
    in.read(reinterpret_cast<char*>(ds.holdout_mask.data()), std::streamsize(n));
    if (!in) throw ShapeMismatchError("load_dataset: payload shorter than header shapes");
    char extra;
    if (in.read(&extra, 1)) {
        throw ShapeMismatchError("load_dataset: trailing bytes beyond declared shapes");
    }

    ds.labels.assign(labels32.begin(), labels32.end());
    for (std::size_t y : ds.labels) {
        if (y >= ds.spec.class_count) {
            throw LabelOutOfRangeError("load_dataset: stored label " + std::to_string(y) +
                                       " out of range");
        }
    }
    for (std::uint8_t m : ds.holdout_mask) {
        if (m > 1) throw FileFormatError("load_dataset: holdout mask byte not 0/1");
    }
    check_finite(ds.inputs.data, "load_dataset inputs");
    check_finite(ds.latent_directions.data, "load_dataset latents");
    return ds;
}

} // namespace adadistill
