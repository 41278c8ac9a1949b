#pragma once

// Dense vector/matrix primitives: normalization, cosine similarity,
// clipping, small matmul helpers, seeded RNG plumbing, and a
// central-difference gradient oracle used by the verification suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adadistill/errors.hpp"

namespace adadistill {

using Vec = std::vector<double>;

// Below this a vector counts as zero and cannot be normalized.
inline constexpr double kNormEpsilon = 1e-12;

// Row-major dense matrix. Rows are handed out as spans so batch code can
// iterate features without copying.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Mat(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols) {
            throw DimensionMismatchError("Mat: data size " + std::to_string(data.size()) +
                                         " does not match " + std::to_string(rows) + "x" +
                                         std::to_string(cols));
        }
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<double> row(std::size_t i) {
        if (i >= rows) {
            throw IndexOutOfRangeError("Mat::row: index " + std::to_string(i) +
                                       " out of range (rows=" + std::to_string(rows) + ")");
        }
        return {data.data() + i * cols, cols};
    }
    std::span<const double> row(std::size_t i) const {
        if (i >= rows) {
            throw IndexOutOfRangeError("Mat::row: index " + std::to_string(i) +
                                       " out of range (rows=" + std::to_string(rows) + ")");
        }
        return {data.data() + i * cols, cols};
    }
};

struct Seed {
    std::uint64_t value = 0;
};

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw DimensionMismatchError("dot: size " + std::to_string(u.size()) + " vs " +
                                     std::to_string(v.size()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
    return acc;
}

inline double norm(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

inline void l2_normalize_inplace(std::span<double> v) {
    const double n = norm(v);
    if (n <= kNormEpsilon) {
        throw ZeroNormError("l2_normalize: norm " + std::to_string(n) + " is below epsilon");
    }
    for (double& x : v) x /= n;
}

inline Vec l2_normalize(std::span<const double> v) {
    Vec out(v.begin(), v.end());
    l2_normalize_inplace(out);
    return out;
}

inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw DimensionMismatchError("cosine: size " + std::to_string(u.size()) + " vs " +
                                     std::to_string(v.size()));
    }
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu <= kNormEpsilon || nv <= kNormEpsilon) {
        throw ZeroNormError("cosine: an operand has near-zero norm");
    }
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

inline double clip01(double x) {
    if (!std::isfinite(x)) {
        throw NonFiniteError("clip01: input is not finite");
    }
    return std::min(1.0, std::max(0.0, x));
}

inline void check_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NonFiniteError(std::string(what) + ": non-finite entry");
        }
    }
}

// Central differences, one coordinate at a time. Deliberately knows nothing
// about the functions it probes; the test suite uses it as an independent
// oracle against every analytic gradient.
template <typename F>
Vec finite_diff_grad(F&& f, std::span<double> x, double h = 1e-6) {
    Vec grad(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double fp = f(std::span<const double>(x.data(), x.size()));
        x[i] = saved - h;
        const double fm = f(std::span<const double>(x.data(), x.size()));
        x[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NonFiniteError("finite_diff_grad: function evaluation is not finite");
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

// C = A * B, A is m x k, B is k x n.
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) {
        throw DimensionMismatchError("matmul: inner dims " + std::to_string(a.cols) + " vs " +
                                     std::to_string(b.rows));
    }
    Mat c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) {
                c(i, j) += aik * b(k, j);
            }
        }
    }
    return c;
}

// C = A * B^T, A is m x k, B is n x k. This is the "batch features against
// row-per-class weights" pattern.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) {
        throw DimensionMismatchError("matmul_nt: inner dims " + std::to_string(a.cols) + " vs " +
                                     std::to_string(b.cols));
    }
    Mat c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.rows; ++j) {
            c(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return c;
}

// C = A^T * B, A is k x m, B is k x n.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) {
        throw DimensionMismatchError("matmul_tn: inner dims " + std::to_string(a.rows) + " vs " +
                                     std::to_string(b.rows));
    }
    Mat c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) {
                c(i, j) += aki * b(k, j);
            }
        }
    }
    return c;
}

inline Mat gather_rows(const Mat& m, std::span<const std::size_t> indices) {
    Mat out(indices.size(), m.cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m.rows) {
            throw IndexOutOfRangeError("gather_rows: index " + std::to_string(indices[i]) +
                                       " out of range (rows=" + std::to_string(m.rows) + ")");
        }
        std::copy_n(m.data.data() + indices[i] * m.cols, m.cols,
                    out.data.data() + i * m.cols);
    }
    return out;
}

// splitmix64 finalizer. Used only to derive well-separated engine seeds
// from one user-facing run seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent streams per purpose (data generation, init, batching, ...)
// so adding a consumer never perturbs the others.
inline Seed derive_seed(Seed base, std::uint64_t stream) {
    return Seed{splitmix64(splitmix64(base.value) ^ splitmix64(stream + 0x517cc1b727220a95ULL))};
}

inline std::mt19937_64 make_engine(Seed seed) {
    return std::mt19937_64(seed.value);
}

} // namespace adadistill
