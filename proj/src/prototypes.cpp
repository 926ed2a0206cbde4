#include "ttalab/prototypes.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ttalab {

PrototypeBank extract_prototypes(Network& net, const Matrix& x, const std::vector<int>& y,
                                 int num_classes) {
    if (x.rows() == 0) throw EmptyBatchError("extract_prototypes on empty set");
    if (y.size() != x.rows()) throw ShapeError("extract_prototypes label count mismatch");
    if (num_classes < 1) throw DomainError("extract_prototypes needs num_classes >= 1");

    ForwardTrace trace = net.forward(x, BnMode::Eval);
    const Matrix& feats = trace.features;
    const std::size_t d = feats.cols();
    const std::size_t c = static_cast<std::size_t>(num_classes);

    PrototypeBank bank;
    bank.features = Matrix(c, d);
    bank.counts.assign(c, 0);

    std::vector<std::vector<std::size_t>> members(c);
    for (std::size_t i = 0; i < feats.rows(); ++i) {
        if (y[i] < 0 || y[i] >= num_classes)
            throw DomainError("extract_prototypes label out of range");
        members[static_cast<std::size_t>(y[i])].push_back(i);
    }

    std::vector<double> column;
    for (std::size_t k = 0; k < c; ++k) {
        bank.counts[k] = static_cast<long>(members[k].size());
        if (members[k].empty()) continue;
        for (std::size_t j = 0; j < d; ++j) {
            column.clear();
            column.reserve(members[k].size());
            for (std::size_t i : members[k]) column.push_back(feats(i, j));
            bank.features(k, j) = stable_sum(column) / static_cast<double>(members[k].size());
        }
    }
    return bank;
}

int nearest_prototype(const PrototypeBank& bank, const double* feat, std::size_t d) {
    if (bank.num_classes() == 0) throw StateError("nearest_prototype on empty bank");
    if (d != bank.dim()) throw ShapeError("nearest_prototype feature width mismatch");

    const double qnorm = l2_norm(feat, d);
    int best = -1;
    double best_score = 0.0;
    if (qnorm == 0.0) {
        // Cosine is undefined for a zero query; fall back to distance.
        for (std::size_t k = 0; k < bank.num_classes(); ++k) {
            if (bank.counts[k] == 0) continue;
            double dist2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = bank.features(k, j) - feat[j];
                dist2 += diff * diff;
            }
            if (best < 0 || dist2 < best_score) {
                best = static_cast<int>(k);
                best_score = dist2;
            }
        }
    } else {
        for (std::size_t k = 0; k < bank.num_classes(); ++k) {
            if (bank.counts[k] == 0) continue;
            const double pnorm = l2_norm(bank.features.row_ptr(k), d);
            const double sim = pnorm == 0.0
                                   ? -2.0
                                   : dot(feat, bank.features.row_ptr(k), d) / (qnorm * pnorm);
            if (best < 0 || sim > best_score) {
                best = static_cast<int>(k);
                best_score = sim;
            }
        }
    }
    if (best < 0) throw StateError("nearest_prototype: no class has samples");
    return best;
}

std::vector<int> nearest_prototypes(const PrototypeBank& bank, const Matrix& feats) {
    std::vector<int> out(feats.rows());
    for (std::size_t i = 0; i < feats.rows(); ++i)
        out[i] = nearest_prototype(bank, feats.row_ptr(i), feats.cols());
    return out;
}

ContrastiveBatch build_contrastive_batch(Network& net, const Matrix& test_feats,
                                         const Matrix& aug_feats, const PrototypeBank& bank) {
    if (!test_feats.same_shape(aug_feats))
        throw ShapeError("build_contrastive_batch: test/aug feature shape mismatch");
    if (test_feats.rows() == 0) throw EmptyBatchError("build_contrastive_batch on empty batch");
    if (test_feats.cols() != bank.dim())
        throw ShapeError("build_contrastive_batch: bank feature width mismatch");

    const std::size_t n = test_feats.rows();
    const std::size_t d = test_feats.cols();

    ContrastiveBatch batch;
    batch.proto_class.resize(n);
    batch.triples.resize(n);

    Matrix stacked(3 * n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = nearest_prototype(bank, test_feats.row_ptr(i), d);
        batch.proto_class[i] = cls;
        const std::size_t base = 3 * i;
        std::copy(test_feats.row_ptr(i), test_feats.row_ptr(i) + d, stacked.row_ptr(base));
        std::copy(aug_feats.row_ptr(i), aug_feats.row_ptr(i) + d, stacked.row_ptr(base + 1));
        std::copy(bank.features.row_ptr(static_cast<std::size_t>(cls)),
                  bank.features.row_ptr(static_cast<std::size_t>(cls)) + d,
                  stacked.row_ptr(base + 2));
        batch.triples[i] = {static_cast<int>(base), static_cast<int>(base + 1),
                            static_cast<int>(base + 2)};
    }

    batch.proj_trace = net.project(stacked);
    batch.embeddings = batch.proj_trace.out;
    return batch;
}

void export_prototypes_csv(const PrototypeBank& bank, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    std::fprintf(f, "class,count");
    for (std::size_t j = 0; j < bank.dim(); ++j) std::fprintf(f, ",f%zu", j);
    std::fprintf(f, "\n");
    for (std::size_t k = 0; k < bank.num_classes(); ++k) {
        std::fprintf(f, "%zu,%ld", k, bank.counts[k]);
        for (std::size_t j = 0; j < bank.dim(); ++j)
            std::fprintf(f, ",%.17g", bank.features(k, j));
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

PrototypeBank import_prototypes_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty prototype file");

    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) header.push_back(tok);
    }
    if (header.size() < 3 || header[0] != "class" || header[1] != "count")
        throw IoError(path + ": line 1: bad prototype header");
    const std::size_t d = header.size() - 2;
    for (std::size_t j = 0; j < d; ++j)
        if (header[j + 2] != "f" + std::to_string(j))
            throw IoError(path + ": line 1: bad feature column name");

    PrototypeBank bank;
    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<double> vals;
        while (std::getline(ss, tok, ',')) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw IoError(path + ": line " + std::to_string(lineno) + ": bad number '" + tok + "'");
            }
        }
        if (vals.size() != d + 2)
            throw IoError(path + ": line " + std::to_string(lineno) + ": wrong field count");
        if (vals[0] != static_cast<double>(rows.size()))
            throw IoError(path + ": line " + std::to_string(lineno) + ": classes must appear in order");
        rows.push_back(vals);
    }
    if (rows.empty()) throw IoError(path + ": no prototype rows");

    bank.features = Matrix(rows.size(), d);
    bank.counts.resize(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const double cnt = rows[k][1];
        if (cnt < 0.0) throw IoError(path + ": negative count");
        bank.counts[k] = static_cast<long>(cnt);
        for (std::size_t j = 0; j < d; ++j) bank.features(k, j) = rows[k][j + 2];
    }
    return bank;
}

}  // namespace ttalab
