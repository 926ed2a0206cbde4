#include "ttalab/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ttalab::losses {

namespace {

double clamped_log(double p) { return std::log(std::max(p, kProbClamp)); }

void require_same_shape(const Matrix& q, const Matrix& p, const char* context) {
    if (!q.same_shape(p)) throw ShapeError(std::string(context) + ": target/prediction shape mismatch");
    if (p.rows() == 0) throw EmptyBatchError(std::string(context) + ": empty batch");
}

}  // namespace

Matrix softmax(const Matrix& logits) {
    if (logits.rows() == 0 || logits.cols() == 0) throw EmptyBatchError("softmax on empty matrix");
    logits.check_finite("softmax input");
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const double* z = logits.row_ptr(i);
        double m = z[0];
        for (std::size_t j = 1; j < logits.cols(); ++j) m = std::max(m, z[j]);
        double sum = 0.0;
        double* out = p.row_ptr(i);
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            out[j] = std::exp(z[j] - m);
            sum += out[j];
        }
        for (std::size_t j = 0; j < logits.cols(); ++j) out[j] /= sum;
    }
    return p;
}

void validate_probs(const Matrix& p, const char* context) {
    if (p.rows() == 0 || p.cols() == 0) throw EmptyBatchError(std::string(context) + ": empty batch");
    p.check_finite(context);
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
            double v = p(i, j);
            if (v < 0.0 || v > 1.0 + 1e-12)
                throw NumericError(std::string(context) + ": probability outside [0, 1]");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw NumericError(std::string(context) + ": probability row does not sum to 1");
    }
}

double cross_entropy(const Matrix& q, const Matrix& p) {
    require_same_shape(q, p, "cross_entropy");
    validate_probs(q, "cross_entropy target");
    validate_probs(p, "cross_entropy prediction");
    double total = 0.0;
    for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < q.cols(); ++j)
            total -= q(i, j) * clamped_log(p(i, j));
    return total / static_cast<double>(q.rows());
}

double reverse_cross_entropy(const Matrix& q, const Matrix& p) {
    return cross_entropy(p, q);
}

double symmetric_cross_entropy(const Matrix& q, const Matrix& p) {
    return cross_entropy(q, p) + reverse_cross_entropy(q, p);
}

double entropy(const Matrix& p) {
    validate_probs(p, "entropy");
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = 0; j < p.cols(); ++j) {
            double v = p(i, j);
            if (v > 0.0) total -= v * clamped_log(v);
        }
    return total / static_cast<double>(p.rows());
}

double binary_ce_grad(double p, double q) {
    if (p <= 0.0 || p >= 1.0 || q <= 0.0 || q >= 1.0)
        throw DomainError("binary_ce_grad requires p, q strictly inside (0, 1)");
    return (p - q) / (p - p * p);
}

double binary_sce_grad(double p, double q) {
    return binary_ce_grad(p, q) + std::log(1.0 / q - 1.0);
}

Matrix rce_logit_grad(const Matrix& p, const Matrix& q) {
    require_same_shape(q, p, "rce_logit_grad");
    validate_probs(p, "rce_logit_grad prediction");
    validate_probs(q, "rce_logit_grad target");
    Matrix g(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) inner += p(i, j) * clamped_log(q(i, j));
        for (std::size_t j = 0; j < p.cols(); ++j)
            g(i, j) = p(i, j) * (inner - clamped_log(q(i, j)));
    }
    return g;
}

Matrix ce_logit_grad(const Matrix& q, const Matrix& p) {
    require_same_shape(q, p, "ce_logit_grad");
    return p - q;
}

Matrix sce_logit_grad(const Matrix& q, const Matrix& p) {
    Matrix g = ce_logit_grad(q, p);
    g += rce_logit_grad(p, q);
    return g;
}

Matrix entropy_logit_grad(const Matrix& p) {
    validate_probs(p, "entropy_logit_grad");
    Matrix g(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double h = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
            double v = p(i, j);
            if (v > 0.0) h -= v * clamped_log(v);
        }
        for (std::size_t j = 0; j < p.cols(); ++j) {
            double v = std::max(p(i, j), kProbClamp);
            g(i, j) = -p(i, j) * (std::log(v) + h);
        }
    }
    return g;
}

double self_training_loss(const Matrix& q, const Matrix& p, const Matrix& p_aug) {
    require_same_shape(q, p, "self_training_loss");
    require_same_shape(q, p_aug, "self_training_loss");
    return 0.25 * (symmetric_cross_entropy(q, p) + symmetric_cross_entropy(q, p_aug));
}

double label_cross_entropy(const Matrix& p, const std::vector<int>& labels) {
    validate_probs(p, "label_cross_entropy");
    if (labels.size() != p.rows()) throw ShapeError("label_cross_entropy: label count mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= p.cols())
            throw DomainError("label_cross_entropy: label out of range");
        total -= clamped_log(p(i, static_cast<std::size_t>(y)));
    }
    return total / static_cast<double>(p.rows());
}

Matrix label_ce_logit_grad(const Matrix& p, const std::vector<int>& labels) {
    validate_probs(p, "label_ce_logit_grad");
    if (labels.size() != p.rows()) throw ShapeError("label_ce_logit_grad: label count mismatch");
    Matrix g = p;
    for (std::size_t i = 0; i < p.rows(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= p.cols())
            throw DomainError("label_ce_logit_grad: label out of range");
        g(i, static_cast<std::size_t>(y)) -= 1.0;
    }
    return g;
}

ContrastiveResult contrastive_loss(const Matrix& embeddings,
                                   const std::vector<std::array<int, 3>>& triples,
                                   double tau) {
    if (tau <= 0.0) throw DomainError("contrastive_loss requires tau > 0");
    const std::size_t n = embeddings.rows();
    const std::size_t d = embeddings.cols();
    if (n == 0) throw EmptyBatchError("contrastive_loss on empty batch");
    if (n != 3 * triples.size() || n < 3)
        throw ShapeError("contrastive_loss: rows must form complete triples");
    embeddings.check_finite("contrastive embeddings");

    // The triples must partition the row indices exactly.
    std::vector<int> seen(n, 0);
    std::vector<int> partner_a(n), partner_b(n);
    for (const auto& t : triples) {
        for (int k = 0; k < 3; ++k) {
            int idx = t[static_cast<std::size_t>(k)];
            if (idx < 0 || static_cast<std::size_t>(idx) >= n)
                throw ShapeError("contrastive_loss: triple index out of range");
            if (seen[static_cast<std::size_t>(idx)]++)
                throw ShapeError("contrastive_loss: triple indices must be a partition");
            partner_a[static_cast<std::size_t>(idx)] = t[static_cast<std::size_t>((k + 1) % 3)];
            partner_b[static_cast<std::size_t>(idx)] = t[static_cast<std::size_t>((k + 2) % 3)];
        }
    }

    std::vector<double> norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        norm[i] = l2_norm(embeddings.row_ptr(i), d);
        if (norm[i] == 0.0) throw NumericError("contrastive_loss: zero embedding");
    }

    // Cosine similarities, symmetric; the diagonal is never read.
    Matrix sim(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double c = dot(embeddings.row_ptr(i), embeddings.row_ptr(j), d) / (norm[i] * norm[j]);
            sim(i, j) = c;
            sim(j, i) = c;
        }

    double value = 0.0;
    Matrix dsim(n, n);  // dL/dsim for ordered (i, j), j != i
    for (std::size_t i = 0; i < n; ++i) {
        double m = -1e300;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) m = std::max(m, sim(i, j) / tau);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) z += std::exp(sim(i, j) / tau - m);
        double lse = m + std::log(z);
        const int va = partner_a[i];
        const int vb = partner_b[i];
        value += 2.0 * lse - (sim(i, static_cast<std::size_t>(va)) + sim(i, static_cast<std::size_t>(vb))) / tau;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double soft = std::exp(sim(i, j) / tau - lse);
            double g = 2.0 * soft / tau;
            if (static_cast<int>(j) == va || static_cast<int>(j) == vb) g -= 1.0 / tau;
            dsim(i, j) = g;
        }
    }

    ContrastiveResult out;
    out.value = value;
    out.grad = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* zi = embeddings.row_ptr(i);
        double* gi = out.grad.row_ptr(i);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double g = dsim(i, j);
            if (g == 0.0) continue;
            const double* zj = embeddings.row_ptr(j);
            double* gj = out.grad.row_ptr(j);
            const double inv_ij = 1.0 / (norm[i] * norm[j]);
            const double c = sim(i, j);
            const double si = c / (norm[i] * norm[i]);
            const double sj = c / (norm[j] * norm[j]);
            for (std::size_t k = 0; k < d; ++k) {
                gi[k] += g * (zj[k] * inv_ij - si * zi[k]);
                gj[k] += g * (zi[k] * inv_ij - sj * zj[k]);
            }
        }
    }
    return out;
}

double total_loss(double st, double cl, double ce_source,
                  double lambda_cl, double lambda_ce, bool source_free) {
    if (lambda_cl < 0.0 || lambda_ce < 0.0)
        throw ConfigError("total_loss: loss weights must be non-negative");
    double total = st + lambda_cl * cl;
    if (!source_free) total += lambda_ce * ce_source;
    return total;
}

}  // namespace ttalab::losses
