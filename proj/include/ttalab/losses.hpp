#pragma once

#include <array>
#include <vector>

#include "ttalab/matrix.hpp"

namespace ttalab::losses {

// Floor applied to probabilities before any logarithm.
inline constexpr double kProbClamp = 1e-7;

// Row-wise softmax. Max-shifted, rows sum to 1, entries in (0, 1].
Matrix softmax(const Matrix& logits);

// Validates a probability batch: finite, entries in [0, 1], rows summing to
// 1 within 1e-9 before clamping. Throws NumericError otherwise.
void validate_probs(const Matrix& p, const char* context);

// Mean over rows of -sum_c q_c log p_c. p entries are clamped from below.
double cross_entropy(const Matrix& q, const Matrix& p);

// cross_entropy with the roles of prediction and target swapped.
double reverse_cross_entropy(const Matrix& q, const Matrix& p);

// cross_entropy(q, p) + reverse_cross_entropy(q, p).
double symmetric_cross_entropy(const Matrix& q, const Matrix& p);

// Mean over rows of -sum_c p_c log p_c.
double entropy(const Matrix& p);

// Closed-form derivative of the two-class cross entropy with respect to the
// predicted probability p of the first class: (p - q) / (p - p^2).
// Both arguments must lie strictly inside (0, 1).
double binary_ce_grad(double p, double q);

// Two-class symmetric cross entropy derivative: binary_ce_grad plus the
// constant reverse term log(1/q - 1).
double binary_sce_grad(double p, double q);

// Per-row logit-space gradient of the reverse term when p = softmax(z):
// component j is p_j * (sum_c p_c log q_c - log q_j). Rows sum to zero.
// q is clamped from below before the logs; no batch scaling is applied.
Matrix rce_logit_grad(const Matrix& p, const Matrix& q);

// Per-row logit-space gradient of cross entropy under softmax: p - q.
Matrix ce_logit_grad(const Matrix& q, const Matrix& p);

// Per-row logit-space gradient of the symmetric loss:
// (p - q) + rce_logit_grad(p, q).
Matrix sce_logit_grad(const Matrix& q, const Matrix& p);

// Per-row logit-space gradient of entropy: -p_j * (log p_j + H(p)).
Matrix entropy_logit_grad(const Matrix& p);

// Consistency loss between a fixed target q and the predictions on the
// clean and augmented views: (SCE(q, p) + SCE(q, p_aug)) / 4.
double self_training_loss(const Matrix& q, const Matrix& p, const Matrix& p_aug);

// Mean cross entropy against integer labels.
double label_cross_entropy(const Matrix& p, const std::vector<int>& labels);

// Per-row softmax gradient against integer labels: p - onehot(label).
Matrix label_ce_logit_grad(const Matrix& p, const std::vector<int>& labels);

struct ContrastiveResult {
    double value = 0.0;
    Matrix grad;  // same shape as the embeddings
};

// Contrastive loss over triples of embeddings. triples must partition the
// row indices into groups of three; within a triple each member treats the
// other two as positive views, and every other row in the batch acts as a
// negative. Similarity is cosine with temperature tau. The value is the
// plain double sum over anchors and views, with no normalisation.
ContrastiveResult contrastive_loss(const Matrix& embeddings,
                                   const std::vector<std::array<int, 3>>& triples,
                                   double tau);

// st + lambda_cl * cl, plus lambda_ce * ce_source unless source_free is set,
// in which case the source term is dropped entirely.
double total_loss(double st, double cl, double ce_source,
                  double lambda_cl, double lambda_ce, bool source_free);

}  // namespace ttalab::losses
