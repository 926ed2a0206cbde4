#pragma once

#include <array>
#include <string>
#include <vector>

#include "ttalab/network.hpp"

namespace ttalab {

// Per-class mean feature vectors, frozen after extraction. Classes that had
// no samples carry count 0 and never win a nearest lookup.
struct PrototypeBank {
    Matrix features;            // classes x feature_dim
    std::vector<long> counts;   // samples per class

    std::size_t num_classes() const { return counts.size(); }
    std::size_t dim() const { return features.cols(); }
};

// Runs the encoder in Eval mode over the labelled set and averages features
// per class. The per-dimension mean is formed by sorting the addends and
// reducing pairwise, so the result does not depend on sample order.
PrototypeBank extract_prototypes(Network& net, const Matrix& x, const std::vector<int>& y,
                                 int num_classes);

// Nearest prototype under cosine similarity; ties resolve to the lowest
// class index. A zero query vector falls back to Euclidean distance.
int nearest_prototype(const PrototypeBank& bank, const double* feat, std::size_t d);
std::vector<int> nearest_prototypes(const PrototypeBank& bank, const Matrix& feats);

// Contrastive batch of N triples (test_i, aug_i, proto_i), projected through
// the network's projection head in one pass. Row layout is interleaved:
// rows 3i, 3i+1, 3i+2 belong to triple i. The prototype rows are constant
// features; their feature gradients are discarded by the caller, but the
// projection-head gradient still flows through proj_trace.
struct ContrastiveBatch {
    Matrix embeddings;                        // 3N x proj_dim
    std::vector<std::array<int, 3>> triples;  // row indices per triple
    std::vector<int> proto_class;             // nearest class per triple
    ProjTrace proj_trace;
};

ContrastiveBatch build_contrastive_batch(Network& net, const Matrix& test_feats,
                                         const Matrix& aug_feats, const PrototypeBank& bank);

// CSV persistence, header "class,count,f0,...,f{d-1}". Round trips exactly.
void export_prototypes_csv(const PrototypeBank& bank, const std::string& path);
PrototypeBank import_prototypes_csv(const std::string& path);

}  // namespace ttalab
