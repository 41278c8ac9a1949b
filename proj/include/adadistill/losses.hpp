#pragma once

// Margin-penalty softmax losses over cosine logits, the MSE feature
// distillation loss, their weighted combination, and the adaptively
// weighted EMA class-center machinery. Every loss returns its value and
// the exact analytic gradient with respect to the (unnormalized) student
// feature batch.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adadistill/errors.hpp"
#include "adadistill/numkit.hpp"

namespace adadistill {

// m1: additive angular margin (radians), m2: additive cosine margin,
// s: logit scale. m1>0, m2=0 is the ArcFace setting; m1=0, m2>0 is CosFace.
struct MarginConfig {
    double m1 = 0.5;
    double m2 = 0.0;
    double s = 64.0;

    void validate() const {
        if (!(m1 >= 0.0) || !(m2 >= 0.0) || !(s > 0.0)) {
            throw InvalidSpecError("MarginConfig: need m1 >= 0, m2 >= 0, s > 0");
        }
    }
};

enum class AlphaMode { Plain, HardWeighted };

struct CombinedLossConfig {
    double lambda = 1.0;
    double beta = 0.0;

    void validate() const {
        if (!(lambda >= 0.0) || !(beta >= 0.0)) {
            throw InvalidSpecError("CombinedLossConfig: need lambda >= 0 and beta >= 0");
        }
    }
};

struct LossOutput {
    double value = 0.0;
    Mat grad_features;      // N x d, w.r.t. unnormalized student features
    Mat per_sample_logits;  // N x c diagnostic; empty for losses without logits
};

// Value/gradient pair for the trainable-classifier variant used when the
// teacher itself is being fit (centers receive gradients there).
struct TrainableLossOutput {
    LossOutput loss;
    Mat grad_centers;  // c x d
};

// One unit-norm direction per class, refined by EMA updates from teacher
// features. Single writer: mutation requires exclusive access.
class CenterBank {
public:
    CenterBank(Mat centers) : centers_(std::move(centers)) {
        if (centers_.rows == 0 || centers_.cols == 0) {
            throw InvalidSpecError("CenterBank: empty center matrix");
        }
        for (std::size_t j = 0; j < centers_.rows; ++j) {
            l2_normalize_inplace(centers_.row(j));
        }
    }

    std::size_t class_count() const { return centers_.rows; }
    std::size_t dim() const { return centers_.cols; }
    const Mat& centers() const { return centers_; }
    std::span<const double> center(std::size_t label) const { return centers_.row(label); }
    std::uint64_t iteration() const { return k_; }

    // EMA blend toward the normalized teacher feature, then re-normalize.
    // alpha == 1 is an exact fixed point: the row is left bitwise alone.
    // A cancelled blend (near-zero sum) throws ZeroNorm with the row
    // untouched; callers treat that as "skip this update".
    void update_center(std::size_t label, std::span<const double> teacher_feature, double alpha) {
        if (label >= centers_.rows) {
            throw LabelOutOfRangeError("update_center: label " + std::to_string(label) +
                                       " out of range (c=" + std::to_string(centers_.rows) + ")");
        }
        if (!std::isfinite(alpha)) {
            throw NonFiniteError("update_center: alpha is not finite");
        }
        if (alpha < 0.0 || alpha > 1.0) {
            throw Error("update_center: alpha " + std::to_string(alpha) + " outside [0,1]");
        }
        const Vec that = l2_normalize(teacher_feature);
        if (alpha == 1.0) {
            return;
        }
        std::span<double> row = centers_.row(label);
        Vec blended(row.size());
        for (std::size_t i = 0; i < row.size(); ++i) {
            blended[i] = alpha * row[i] + (1.0 - alpha) * that[i];
        }
        l2_normalize_inplace(blended);  // may throw; row is untouched then
        std::copy(blended.begin(), blended.end(), row.begin());
    }

    void advance_iteration() { ++k_; }

private:
    Mat centers_;
    std::uint64_t k_ = 0;
};

namespace detail {

inline void check_batch(const Mat& features, std::span<const std::size_t> labels,
                        const Mat& centers) {
    if (features.rows == 0) {
        throw InvalidBatchSizeError("loss: empty feature batch");
    }
    if (labels.size() != features.rows) {
        throw DimensionMismatchError("loss: " + std::to_string(labels.size()) + " labels for " +
                                     std::to_string(features.rows) + " feature rows");
    }
    if (centers.cols != features.cols) {
        throw DimensionMismatchError("loss: feature dim " + std::to_string(features.cols) +
                                     " vs center dim " + std::to_string(centers.cols));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= centers.rows) {
            throw LabelOutOfRangeError("loss: label " + std::to_string(labels[i]) +
                                       " out of range (c=" + std::to_string(centers.rows) + ")");
        }
    }
}

// Shared margin-softmax kernel. Feature gradients always; center gradients
// only when grad_centers is non-null (the trainable-classifier path, which
// also normalizes center rows internally instead of assuming unit norm).
inline LossOutput margin_softmax(const Mat& features, std::span<const std::size_t> labels,
                                 const Mat& centers, const MarginConfig& cfg,
                                 Mat* grad_centers) {
    cfg.validate();
    check_batch(features, labels, centers);

    const std::size_t n = features.rows;
    const std::size_t d = features.cols;
    const std::size_t c = centers.rows;
    const double cos_m1 = std::cos(cfg.m1);
    const double sin_m1 = std::sin(cfg.m1);
    const bool trainable = grad_centers != nullptr;

    // Normalized centers. The frozen path trusts the caller's unit rows and
    // uses them as-is so that results match the bank's stored state exactly.
    Mat unit_centers;
    std::vector<double> center_norms;
    if (trainable) {
        unit_centers = centers;
        center_norms.resize(c);
        for (std::size_t j = 0; j < c; ++j) {
            auto row = unit_centers.row(j);
            center_norms[j] = norm(row);
            l2_normalize_inplace(row);
        }
        *grad_centers = Mat(c, d);
    }
    const Mat& w = trainable ? unit_centers : centers;

    LossOutput out;
    out.grad_features = Mat(n, d);
    out.per_sample_logits = Mat(n, c);

    double total = 0.0;
    Vec u(d), cosines(c), logits(c), probs(c);
    for (std::size_t i = 0; i < n; ++i) {
        auto f = features.row(i);
        const double nf = norm(f);
        if (nf <= kNormEpsilon) {
            throw ZeroNormError("margin softmax: feature row " + std::to_string(i) +
                                " has near-zero norm");
        }
        for (std::size_t t = 0; t < d; ++t) u[t] = f[t] / nf;

        const std::size_t y = labels[i];
        for (std::size_t j = 0; j < c; ++j) cosines[j] = dot(u, w.row(j));

        const double cy = cosines[y];
        const double sy = std::sqrt(std::max(0.0, 1.0 - cy * cy));
        for (std::size_t j = 0; j < c; ++j) logits[j] = cfg.s * cosines[j];
        logits[y] = cfg.s * (cy * cos_m1 - sy * sin_m1 - cfg.m2);

        // log-sum-exp with max subtraction; s=64 exponents overflow otherwise
        double zmax = logits[0];
        for (std::size_t j = 1; j < c; ++j) zmax = std::max(zmax, logits[j]);
        double expsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) expsum += std::exp(logits[j] - zmax);
        const double lse = zmax + std::log(expsum);
        total += lse - logits[y];
        for (std::size_t j = 0; j < c; ++j) probs[j] = std::exp(logits[j] - lse);

        std::copy(logits.begin(), logits.end(), out.per_sample_logits.row(i).begin());

        // dL/dcos_j = (p_j - [j==y]) * dlogit_j/dcos_j. The target's margin
        // factor d cos(theta+m1)/d cos(theta) = cos m1 + sin m1 * cy / sy is
        // singular at sy=0 (feature exactly on the center axis); fall back
        // to cos m1 there rather than emit a NaN.
        auto gf = out.grad_features.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            double dlogit = cfg.s;
            if (j == y) {
                dlogit = (sy > 0.0) ? cfg.s * (cos_m1 + sin_m1 * cy / sy) : cfg.s * cos_m1;
            }
            const double coef = (probs[j] - (j == y ? 1.0 : 0.0)) * dlogit;
            if (coef == 0.0) continue;
            auto wj = w.row(j);
            // d cos_j / d f = (w_j - cos_j * u) / ||f||
            for (std::size_t t = 0; t < d; ++t) {
                gf[t] += coef * (wj[t] - cosines[j] * u[t]) / nf;
            }
            if (trainable) {
                // d cos_j / d w_j = (u - cos_j * w_hat_j) / ||w_j||
                auto gw = grad_centers->row(j);
                for (std::size_t t = 0; t < d; ++t) {
                    gw[t] += coef * (u[t] - cosines[j] * wj[t]) / center_norms[j];
                }
            }
        }
    }

    const double inv_n = 1.0 / double(n);
    out.value = total * inv_n;
    for (double& g : out.grad_features.data) g *= inv_n;
    if (trainable) {
        for (double& g : grad_centers->data) g *= inv_n;
    }
    if (!std::isfinite(out.value)) {
        throw NonFiniteError("margin softmax: loss value is not finite");
    }
    return out;
}

} // namespace detail

// Margin-penalty softmax cross-entropy over scaled cosine logits. Centers
// are treated as constants; callers must pass unit-norm rows.
inline LossOutput aml_loss(const Mat& features, std::span<const std::size_t> labels,
                           const Mat& centers, const MarginConfig& cfg) {
    return detail::margin_softmax(features, labels, centers, cfg, nullptr);
}

// Same formula with gradients for the classifier rows too; used to fit the
// teacher. Center rows are normalized internally, so inputs may drift off
// the unit sphere between projected SGD steps.
inline TrainableLossOutput aml_loss_trainable(const Mat& features,
                                              std::span<const std::size_t> labels,
                                              const Mat& centers, const MarginConfig& cfg) {
    TrainableLossOutput out;
    out.loss = detail::margin_softmax(features, labels, centers, cfg, &out.grad_centers);
    return out;
}

// Distillation flavor of the margin softmax: identical arithmetic, but the
// centers come from the teacher and stay frozen, so gradients flow only to
// the student features.
inline LossOutput amldistill_loss(const Mat& student_features, std::span<const std::size_t> labels,
                                  const Mat& teacher_centers, const MarginConfig& cfg) {
    return aml_loss(student_features, labels, teacher_centers, cfg);
}

// Mean squared distance between student and teacher feature rows.
inline LossOutput mse_kd_loss(const Mat& student_features, const Mat& teacher_features) {
    if (student_features.rows != teacher_features.rows ||
        student_features.cols != teacher_features.cols) {
        throw DimensionMismatchError("mse_kd_loss: student " +
                                     std::to_string(student_features.rows) + "x" +
                                     std::to_string(student_features.cols) + " vs teacher " +
                                     std::to_string(teacher_features.rows) + "x" +
                                     std::to_string(teacher_features.cols));
    }
    if (student_features.rows == 0) {
        throw InvalidBatchSizeError("mse_kd_loss: empty batch");
    }
    const double inv_n = 1.0 / double(student_features.rows);
    LossOutput out;
    out.grad_features = Mat(student_features.rows, student_features.cols);
    double total = 0.0;
    for (std::size_t i = 0; i < student_features.data.size(); ++i) {
        const double diff = student_features.data[i] - teacher_features.data[i];
        total += diff * diff;
        out.grad_features.data[i] = 2.0 * inv_n * diff;
    }
    out.value = total * inv_n;
    return out;
}

// lambda * main + beta * kd, values and gradients alike.
inline LossOutput combined_loss(const LossOutput& main, const LossOutput& kd,
                                const CombinedLossConfig& cfg) {
    cfg.validate();
    if (main.grad_features.rows != kd.grad_features.rows ||
        main.grad_features.cols != kd.grad_features.cols) {
        throw DimensionMismatchError("combined_loss: gradient shapes differ");
    }
    LossOutput out;
    out.value = cfg.lambda * main.value + cfg.beta * kd.value;
    out.grad_features = Mat(main.grad_features.rows, main.grad_features.cols);
    for (std::size_t i = 0; i < out.grad_features.data.size(); ++i) {
        out.grad_features.data[i] =
            cfg.lambda * main.grad_features.data[i] + cfg.beta * kd.grad_features.data[i];
    }
    out.per_sample_logits = main.per_sample_logits;
    return out;
}

// All-zero loss with the gradient shape of a feature batch; stands in for
// the unused term when lambda or beta is zero.
inline LossOutput zero_loss(std::size_t rows, std::size_t cols) {
    LossOutput out;
    out.grad_features = Mat(rows, cols);
    return out;
}

// Student-capability momentum: clipped cosine between student and teacher
// features of one sample.
inline double compute_alpha(std::span<const double> student_feature,
                            std::span<const double> teacher_feature) {
    return clip01(cosine(student_feature, teacher_feature));
}

// Hard-sample-weighted momentum: the plain capability cosine scaled by how
// close the teacher feature sits to the previous class center.
inline double compute_alpha_prime(std::span<const double> student_feature,
                                  std::span<const double> teacher_feature,
                                  std::span<const double> prev_center) {
    return clip01(cosine(student_feature, teacher_feature) *
                  cosine(prev_center, teacher_feature));
}

struct AdaStepResult {
    LossOutput loss;
    Vec alphas;  // per-sample momentum actually used, in batch order
};

// One adaptive-distillation iteration: walk the batch in index order,
// compute each sample's momentum (alpha-prime reads the center as already
// updated by earlier same-batch samples), fold the teacher feature into the
// class center, then score the whole batch against the refreshed bank.
inline AdaStepResult adadistill_step(const Mat& student_features, const Mat& teacher_features,
                                     std::span<const std::size_t> labels, CenterBank& bank,
                                     const MarginConfig& cfg, AlphaMode mode) {
    if (student_features.rows != teacher_features.rows ||
        student_features.cols != teacher_features.cols) {
        throw DimensionMismatchError("adadistill_step: student/teacher feature shapes differ");
    }
    detail::check_batch(student_features, labels, bank.centers());

    AdaStepResult result;
    result.alphas.resize(student_features.rows);
    for (std::size_t i = 0; i < student_features.rows; ++i) {
        auto fs = student_features.row(i);
        auto ft = teacher_features.row(i);
        const double alpha = (mode == AlphaMode::Plain)
                                 ? compute_alpha(fs, ft)
                                 : compute_alpha_prime(fs, ft, bank.center(labels[i]));
        result.alphas[i] = alpha;
        try {
            bank.update_center(labels[i], ft, alpha);
        } catch (const ZeroNormError&) {
            // blend cancelled to zero; keep the previous center
        }
    }
    result.loss = amldistill_loss(student_features, labels, bank.centers(), cfg);
    bank.advance_iteration();
    return result;
}

} // namespace adadistill
