#pragma once

// Small fully-connected embedding networks standing in for the teacher and
// student backbones, with exact forward/backward passes and a flat binary
// serialization format (JSON shape header followed by raw parameters).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adadistill/errors.hpp"
#include "adadistill/numkit.hpp"

namespace adadistill {

enum class Activation { Relu, Tanh };

inline std::string to_string(Activation a) {
    return a == Activation::Relu ? "relu" : "tanh";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    throw InvalidSpecError("unknown activation '" + s + "'");
}

// widths run input dim -> hidden... -> embedding dim; the activation is
// applied to every hidden layer and never to the output.
struct MlpSpec {
    std::vector<std::size_t> layer_widths;
    Activation activation = Activation::Relu;

    void validate() const {
        if (layer_widths.size() < 2) {
            throw InvalidSpecError("MlpSpec: need at least input and output widths");
        }
        for (std::size_t w : layer_widths) {
            if (w == 0) throw InvalidSpecError("MlpSpec: zero layer width");
        }
    }
};

// Retained intermediates from one forward pass; spent by exactly one
// backward pass.
struct BatchCache {
    std::vector<Mat> activations;      // activations[0] is the input batch
    std::vector<Mat> pre_activations;  // one per layer
    bool consumed = false;
};

struct ParamGrads {
    std::vector<Mat> weights;
    std::vector<Vec> biases;
};

struct MlpNetwork {
    MlpSpec spec;
    std::vector<Mat> weights;  // layer l maps widths[l] -> widths[l+1], stored out x in
    std::vector<Vec> biases;

    std::size_t layer_count() const { return weights.size(); }
    std::size_t input_dim() const { return spec.layer_widths.front(); }
    std::size_t embedding_dim() const { return spec.layer_widths.back(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Mat& w : weights) n += w.data.size();
        for (const Vec& b : biases) n += b.size();
        return n;
    }
};

// Fan-in-scaled gaussian init (He for relu, Xavier for tanh), zero biases.
inline MlpNetwork init_network(const MlpSpec& spec, Seed seed) {
    spec.validate();
    MlpNetwork net;
    net.spec = spec;
    auto eng = make_engine(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const std::size_t fan_in = spec.layer_widths[l];
        const std::size_t fan_out = spec.layer_widths[l + 1];
        const double gain = spec.activation == Activation::Relu ? 2.0 : 1.0;
        const double scale = std::sqrt(gain / double(fan_in));
        Mat w(fan_out, fan_in);
        for (double& x : w.data) x = scale * g(eng);
        net.weights.push_back(std::move(w));
        net.biases.emplace_back(fan_out, 0.0);
    }
    return net;
}

// Affine chain with hidden activations; embeddings leave unnormalized
// (the losses normalize internally).
inline std::pair<Mat, BatchCache> forward(const MlpNetwork& net, const Mat& inputs) {
    if (inputs.cols != net.input_dim()) {
        throw DimensionMismatchError("forward: input dim " + std::to_string(inputs.cols) +
                                     " vs network input " + std::to_string(net.input_dim()));
    }
    BatchCache cache;
    cache.activations.push_back(inputs);
    Mat current = inputs;
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        Mat z = matmul_nt(current, net.weights[l]);
        for (std::size_t i = 0; i < z.rows; ++i) {
            auto row = z.row(i);
            for (std::size_t j = 0; j < z.cols; ++j) row[j] += net.biases[l][j];
        }
        cache.pre_activations.push_back(z);
        if (l + 1 == net.layer_count()) {
            current = std::move(z);
        } else {
            Mat a(z.rows, z.cols);
            if (net.spec.activation == Activation::Relu) {
                for (std::size_t i = 0; i < z.data.size(); ++i) {
                    a.data[i] = z.data[i] > 0.0 ? z.data[i] : 0.0;
                }
            } else {
                for (std::size_t i = 0; i < z.data.size(); ++i) {
                    a.data[i] = std::tanh(z.data[i]);
                }
            }
            cache.activations.push_back(a);
            current = std::move(a);
        }
    }
    return {std::move(current), std::move(cache)};
}

// Reverse-mode pass: contracts grad_embeddings with the cached
// intermediates into parameter gradients. The cache is single-use.
inline ParamGrads backward(const MlpNetwork& net, BatchCache& cache, const Mat& grad_embeddings) {
    if (cache.consumed) {
        throw StaleCacheError("backward: cache already consumed");
    }
    if (cache.pre_activations.size() != net.layer_count() ||
        cache.activations.size() != net.layer_count()) {
        throw StaleCacheError("backward: cache does not match this network");
    }
    const Mat& last = cache.pre_activations.back();
    if (grad_embeddings.rows != last.rows || grad_embeddings.cols != last.cols) {
        throw ShapeMismatchError("backward: gradient shape " +
                                 std::to_string(grad_embeddings.rows) + "x" +
                                 std::to_string(grad_embeddings.cols) + " vs embeddings " +
                                 std::to_string(last.rows) + "x" + std::to_string(last.cols));
    }
    cache.consumed = true;

    ParamGrads grads;
    grads.weights.resize(net.layer_count());
    grads.biases.resize(net.layer_count());

    Mat delta = grad_embeddings;  // d loss / d z_l, starting at the output layer
    for (std::size_t l = net.layer_count(); l-- > 0;) {
        const Mat& a_prev = cache.activations[l];
        grads.weights[l] = matmul_tn(delta, a_prev);
        Vec gb(delta.cols, 0.0);
        for (std::size_t i = 0; i < delta.rows; ++i) {
            for (std::size_t j = 0; j < delta.cols; ++j) gb[j] += delta(i, j);
        }
        grads.biases[l] = std::move(gb);

        if (l == 0) break;
        Mat prev = matmul(delta, net.weights[l]);  // N x widths[l]
        const Mat& z_prev = cache.pre_activations[l - 1];
        if (net.spec.activation == Activation::Relu) {
            for (std::size_t i = 0; i < prev.data.size(); ++i) {
                if (z_prev.data[i] <= 0.0) prev.data[i] = 0.0;
            }
        } else {
            for (std::size_t i = 0; i < prev.data.size(); ++i) {
                const double t = std::tanh(z_prev.data[i]);
                prev.data[i] *= 1.0 - t * t;
            }
        }
        delta = std::move(prev);
    }
    return grads;
}

// Mutable spans over every parameter tensor in a fixed order (w0, b0,
// w1, b1, ...); the optimizer walks these.
inline std::vector<std::span<double>> parameter_views(MlpNetwork& net) {
    std::vector<std::span<double>> views;
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        views.emplace_back(net.weights[l].data);
        views.emplace_back(net.biases[l]);
    }
    return views;
}

inline std::vector<std::span<const double>> grad_views(const ParamGrads& grads) {
    std::vector<std::span<const double>> views;
    for (std::size_t l = 0; l < grads.weights.size(); ++l) {
        views.emplace_back(grads.weights[l].data);
        views.emplace_back(grads.biases[l]);
    }
    return views;
}

// ---------------------------------------------------------------------
// Serialization: magic, little-endian u64 header length, JSON header
// (spec + shapes), then raw doubles: all weight matrices row-major in
// layer order, then all bias vectors in layer order.
// ---------------------------------------------------------------------

inline constexpr char kNetworkMagic[8] = {'A', 'D', 'N', 'E', 'T', '0', '0', '1'};

inline void save_network(const MlpNetwork& net, const std::string& path) {
    nlohmann::json header;
    header["layer_widths"] = net.spec.layer_widths;
    header["activation"] = to_string(net.spec.activation);
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileFormatError("save_network: cannot open '" + path + "'");
    out.write(kNetworkMagic, sizeof(kNetworkMagic));
    const std::uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(), std::streamsize(header_text.size()));
    for (const Mat& w : net.weights) {
        out.write(reinterpret_cast<const char*>(w.data.data()),
                  std::streamsize(w.data.size() * sizeof(double)));
    }
    for (const Vec& b : net.biases) {
        out.write(reinterpret_cast<const char*>(b.data()),
                  std::streamsize(b.size() * sizeof(double)));
    }
    if (!out) throw FileFormatError("save_network: write failed for '" + path + "'");
}

inline MlpNetwork load_network(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileFormatError("load_network: cannot open '" + path + "'");
    char magic[sizeof(kNetworkMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kNetworkMagic, sizeof(magic)) != 0) {
        throw FileFormatError("load_network: bad magic in '" + path + "'");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 20)) {
        throw FileFormatError("load_network: implausible header length");
    }
    std::string header_text(len, '\0');
    in.read(header_text.data(), std::streamsize(len));
    if (!in) throw FileFormatError("load_network: truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw FileFormatError(std::string("load_network: header parse error: ") + e.what());
    }

    MlpNetwork net;
    try {
        net.spec.layer_widths = header.at("layer_widths").get<std::vector<std::size_t>>();
        net.spec.activation = activation_from_string(header.at("activation").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw FileFormatError(std::string("load_network: header fields: ") + e.what());
    }
    net.spec.validate();

    for (std::size_t l = 0; l + 1 < net.spec.layer_widths.size(); ++l) {
        Mat w(net.spec.layer_widths[l + 1], net.spec.layer_widths[l]);
        in.read(reinterpret_cast<char*>(w.data.data()),
                std::streamsize(w.data.size() * sizeof(double)));
        if (!in) throw ShapeMismatchError("load_network: payload shorter than header shapes");
        net.weights.push_back(std::move(w));
    }
    for (std::size_t l = 0; l + 1 < net.spec.layer_widths.size(); ++l) {
        Vec b(net.spec.layer_widths[l + 1], 0.0);
        in.read(reinterpret_cast<char*>(b.data()), std::streamsize(b.size() * sizeof(double)));
        if (!in) throw ShapeMismatchError("load_network: payload shorter than header shapes");
        net.biases.push_back(std::move(b));
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw ShapeMismatchError("load_network: trailing bytes beyond declared shapes");
    }
    for (const Mat& w : net.weights) check_finite(w.data, "load_network weights");
    for (const Vec& b : net.biases) check_finite(b, "load_network biases");
    return net;
}

} // namespace adadistill
