#include "ttalab/streams.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ttalab/losses.hpp"

namespace ttalab {

namespace {

// Sub-seed tags so that one dataset seed fans out into independent streams.
constexpr std::uint64_t kMeansTag = 0x6d65616e73ULL;
constexpr std::uint64_t kSourceTag = 0x736f7572ULL;
constexpr std::uint64_t kProbeTag = 0x70726f62ULL;

void validate_spec(const DatasetSpec& spec) {
    if (spec.classes < 1) throw ConfigError("dataset classes must be >= 1");
    if (spec.dim < 1) throw ConfigError("dataset dim must be >= 1");
    if (spec.samples_per_class < 1) throw ConfigError("dataset samples_per_class must be >= 1");
    if (spec.sigma < 0.0) throw ConfigError("dataset sigma must be non-negative");
    if (spec.imbalance < 1.0) throw ConfigError("dataset imbalance must be >= 1");
    if (!spec.means.empty() &&
        (spec.means.rows() != static_cast<std::size_t>(spec.classes) ||
         spec.means.cols() != static_cast<std::size_t>(spec.dim)))
        throw ShapeError("explicit dataset means have the wrong shape");
}

}  // namespace

ClusterModel::ClusterModel(const DatasetSpec& spec, std::uint64_t dataset_seed) : spec_(spec) {
    validate_spec(spec);
    const std::size_t c = static_cast<std::size_t>(spec.classes);
    const std::size_t d = static_cast<std::size_t>(spec.dim);
    if (!spec.means.empty()) {
        means_ = spec.means;
    } else {
        Rng rng(derive_seed(dataset_seed, kMeansTag));
        means_ = Matrix(c, d);
        for (std::size_t k = 0; k < c; ++k) {
            double* row = means_.row_ptr(k);
            for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
            const double norm = l2_norm(row, d);
            const double scale = norm > 0.0 ? spec.mean_radius / norm : 0.0;
            for (std::size_t j = 0; j < d; ++j) row[j] *= scale;
        }
    }
    // Geometric interpolation between 1 and 1/imbalance, normalised.
    priors_.resize(c);
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        const double t = c > 1 ? static_cast<double>(k) / static_cast<double>(c - 1) : 0.0;
        priors_[k] = std::pow(1.0 / spec.imbalance, t);
        total += priors_[k];
    }
    for (double& p : priors_) p /= total;
}

void ClusterModel::sample_features(int cls, Rng& rng, double* out) const {
    const std::size_t d = static_cast<std::size_t>(spec_.dim);
    const double* mean = means_.row_ptr(static_cast<std::size_t>(cls));
    for (std::size_t j = 0; j < d; ++j) out[j] = mean[j] + spec_.sigma * rng.normal();
    if (spec_.warp != 0.0) {
        for (std::size_t j = 0; j < d; ++j)
            out[j] += spec_.warp * std::sin(out[(j + 1) % d]);
    }
}

void ClusterModel::sample(std::size_t n, Rng& rng, Matrix& x, std::vector<int>& y) const {
    x = Matrix(n, static_cast<std::size_t>(spec_.dim));
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double u = rng.uniform01();
        int cls = spec_.classes - 1;
        double acc = 0.0;
        for (std::size_t k = 0; k < priors_.size(); ++k) {
            acc += priors_[k];
            if (u < acc) {
                cls = static_cast<int>(k);
                break;
            }
        }
        y[i] = cls;
        sample_features(cls, rng, x.row_ptr(i));
    }
}

Dataset generate_source(const DatasetSpec& spec, std::uint64_t dataset_seed) {
    ClusterModel model(spec, dataset_seed);
    Rng rng(derive_seed(dataset_seed, kSourceTag));

    const std::size_t c = static_cast<std::size_t>(spec.classes);
    const std::size_t total = c * static_cast<std::size_t>(spec.samples_per_class);
    // Per-class counts follow the priors, at least one sample each.
    std::vector<std::size_t> counts(c);
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < c; ++k) {
        counts[k] = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(model.priors()[k] * static_cast<double>(total))));
        assigned += counts[k];
    }
    // Trim or pad the most frequent class so the total stays fixed.
    while (assigned > total && counts[0] > 1) {
        --counts[0];
        --assigned;
    }
    while (assigned < total) {
        ++counts[0];
        ++assigned;
    }

    Dataset data;
    data.classes = spec.classes;
    data.x = Matrix(total, static_cast<std::size_t>(spec.dim));
    data.y.resize(total);
    std::size_t row = 0;
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < counts[k]; ++i) {
            data.y[row] = static_cast<int>(k);
            model.sample_features(static_cast<int>(k), rng, data.x.row_ptr(row));
            ++row;
        }

    // Deterministic shuffle so class blocks do not survive into batches.
    for (std::size_t i = total; i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(data.y[i - 1], data.y[j]);
        for (std::size_t col = 0; col < data.x.cols(); ++col)
            std::swap(data.x(i - 1, col), data.x(j, col));
    }
    return data;
}

namespace {

struct KindInfo {
    CorruptionKind kind;
    const char* name;
    std::array<double, 5> magnitude;
};

// Severity tables. The magnitude column is the scalar that must rise
// strictly with severity: noise sigma, corruption probability, window size,
// contrast reduction, shift, dropout probability, gain minus one, angle.
constexpr std::array<KindInfo, 9> kKinds = {{
    {CorruptionKind::None, "none", {0.0, 0.0, 0.0, 0.0, 0.0}},
    {CorruptionKind::GaussianNoise, "gaussian_noise", {0.1, 0.2, 0.4, 0.6, 0.8}},
    {CorruptionKind::Impulse, "impulse", {0.02, 0.04, 0.07, 0.11, 0.15}},
    {CorruptionKind::Smoothing, "smoothing", {1, 3, 5, 7, 9}},
    {CorruptionKind::Contrast, "contrast", {0.2, 0.35, 0.5, 0.65, 0.8}},
    {CorruptionKind::BrightnessShift, "brightness_shift", {0.25, 0.5, 0.9, 1.4, 2.0}},
    {CorruptionKind::FeatureDropout, "feature_dropout", {0.05, 0.10, 0.18, 0.28, 0.40}},
    {CorruptionKind::Scaling, "scaling", {0.2, 0.5, 1.0, 1.6, 2.5}},
    {CorruptionKind::Rotation2dSubspace, "rotation_2d_subspace", {0.2, 0.4, 0.6, 0.85, 1.2}},
}};

const KindInfo& info_for(CorruptionKind kind) {
    for (const KindInfo& k : kKinds)
        if (k.kind == kind) return k;
    throw DomainError("unknown corruption kind");
}

constexpr double kImpulseAmplitude = 3.0;

}  // namespace

const char* kind_name(CorruptionKind kind) { return info_for(kind).name; }

CorruptionKind kind_from_name(const std::string& name) {
    for (const KindInfo& k : kKinds)
        if (name == k.name) return k.kind;
    throw ConfigError("unknown corruption kind '" + name + "'");
}

const std::vector<CorruptionKind>& all_corruption_kinds() {
    static const std::vector<CorruptionKind> kinds = {
        CorruptionKind::GaussianNoise,   CorruptionKind::Impulse,
        CorruptionKind::Smoothing,       CorruptionKind::Contrast,
        CorruptionKind::BrightnessShift, CorruptionKind::FeatureDropout,
        CorruptionKind::Scaling,         CorruptionKind::Rotation2dSubspace,
    };
    return kinds;
}

double corruption_magnitude(CorruptionKind kind, int severity) {
    if (kind == CorruptionKind::None) return 0.0;
    if (severity < 1 || severity > 5) throw DomainError("severity must lie in 1..5");
    return info_for(kind).magnitude[static_cast<std::size_t>(severity - 1)];
}

Matrix corrupt(const Matrix& x, const CorruptionOp& op, Rng& rng) {
    if (x.rows() == 0) throw EmptyBatchError("corrupt on empty batch");
    x.check_finite("corrupt input");
    if (op.kind == CorruptionKind::None) return x;
    const double mag = corruption_magnitude(op.kind, op.severity);
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    Matrix out = x;

    switch (op.kind) {
        case CorruptionKind::GaussianNoise:
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j) row[j] += mag * rng.normal();
            }
            break;
        case CorruptionKind::Impulse:
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j)
                    if (rng.uniform01() < mag)
                        row[j] = rng.uniform(-kImpulseAmplitude, kImpulseAmplitude);
            }
            break;
        case CorruptionKind::Smoothing: {
            const long w = static_cast<long>(mag);
            const long h = w / 2;
            const long dd = static_cast<long>(d);
            std::vector<double> buf(d);
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (long j = 0; j < dd; ++j) {
                    double acc = 0.0;
                    for (long k = -h; k <= h; ++k) {
                        long idx = j + k;
                        if (idx < 0) idx = -idx;                    // reflect
                        if (idx >= dd) idx = 2 * dd - 2 - idx;
                        acc += row[idx];
                    }
                    buf[static_cast<std::size_t>(j)] = acc / static_cast<double>(w);
                }
                std::copy(buf.begin(), buf.end(), row);
            }
            break;
        }
        case CorruptionKind::Contrast: {
            const double keep = 1.0 - mag;
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                double m = 0.0;
                for (std::size_t j = 0; j < d; ++j) m += row[j];
                m /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) row[j] = m + keep * (row[j] - m);
            }
            break;
        }
        case CorruptionKind::BrightnessShift:
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j) row[j] += mag;
            }
            break;
        case CorruptionKind::FeatureDropout:
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j)
                    if (rng.uniform01() < mag) row[j] = 0.0;
            }
            break;
        case CorruptionKind::Scaling: {
            const double gain = 1.0 + mag;
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j < d; ++j) row[j] *= gain;
            }
            break;
        }
        case CorruptionKind::Rotation2dSubspace: {
            const double c = std::cos(mag);
            const double s = std::sin(mag);
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.row_ptr(i);
                for (std::size_t j = 0; j + 1 < d; j += 2) {
                    const double a = row[j];
                    const double b = row[j + 1];
                    row[j] = c * a - s * b;
                    row[j + 1] = s * a + c * b;
                }
            }
            break;
        }
        case CorruptionKind::None:
            break;
    }
    return out;
}

Matrix augment(const Matrix& x, double strength, Rng& rng) {
    if (strength < 0.0 || strength >= 1.0)
        throw ConfigError("augment strength must lie in [0, 1)");
    if (x.rows() == 0) throw EmptyBatchError("augment on empty batch");
    Matrix out = x;
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double* row = out.row_ptr(i);
        // Mild draws from the same transform families the stream corruptions
        // use: gain, additive noise, paired-coordinate rotation, dropout.
        const double scale = rng.uniform(1.0 - strength, 1.0 + strength);
        const double angle = rng.uniform(-strength, strength);
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        for (std::size_t j = 0; j + 1 < d; j += 2) {
            const double a = row[j];
            const double b = row[j + 1];
            row[j] = c * a - s * b;
            row[j + 1] = s * a + c * b;
        }
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = scale * row[j] + strength * rng.normal();
            if (rng.uniform01() < 0.2 * strength) row[j] = 0.0;
        }
    }
    return out;
}

std::vector<Segment> build_continual(const std::vector<CorruptionKind>& kinds, int severity,
                                     int batches_per_segment) {
    if (batches_per_segment < 1) throw ConfigError("batches_per_segment must be >= 1");
    std::vector<Segment> segments;
    for (CorruptionKind kind : kinds) {
        corruption_magnitude(kind, severity);  // validates severity
        segments.push_back({{kind, severity}, batches_per_segment});
    }
    return segments;
}

std::vector<Segment> build_gradual(const std::vector<CorruptionKind>& kinds,
                                   int batches_per_level) {
    if (batches_per_level < 1) throw ConfigError("batches_per_level must be >= 1");
    static const int walk[] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
    std::vector<Segment> segments;
    for (CorruptionKind kind : kinds)
        for (int severity : walk) segments.push_back({{kind, severity}, batches_per_level});
    return segments;
}

std::vector<CorruptionKind> order_by_source_error(Network& net, const DatasetSpec& dspec,
                                                  const std::vector<CorruptionKind>& kinds,
                                                  int severity, int probe_samples,
                                                  std::uint64_t dataset_seed, bool easy_first) {
    if (probe_samples < 1) throw ConfigError("probe_samples must be >= 1");
    ClusterModel model(dspec, dataset_seed);
    Rng sample_rng(derive_seed(dataset_seed, kProbeTag));
    Matrix clean;
    std::vector<int> labels;
    model.sample(static_cast<std::size_t>(probe_samples), sample_rng, clean, labels);

    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t idx = 0; idx < kinds.size(); ++idx) {
        Rng corrupt_rng(derive_seed(dataset_seed, kProbeTag ^ (0x1000 + idx)));
        Matrix probe = corrupt(clean, {kinds[idx], severity}, corrupt_rng);
        ForwardTrace trace = net.forward(probe, BnMode::Eval);
        std::size_t wrong = 0;
        for (std::size_t i = 0; i < probe.rows(); ++i)
            if (static_cast<int>(argmax_row(trace.logits, i)) != labels[i]) ++wrong;
        scored.emplace_back(static_cast<double>(wrong) / static_cast<double>(probe.rows()), idx);
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [easy_first](const auto& a, const auto& b) {
                         return easy_first ? a.first < b.first : a.first > b.first;
                     });
    std::vector<CorruptionKind> ordered;
    for (const auto& [err, idx] : scored) ordered.push_back(kinds[idx]);
    return ordered;
}

Stream::Stream(const DatasetSpec& dspec, StreamSpec sspec, std::uint64_t dataset_seed,
               std::uint64_t stream_seed)
    : model_(dspec, dataset_seed), sspec_(std::move(sspec)), rng_(stream_seed) {
    if (sspec_.batch_size < 1) throw ConfigError("stream batch_size must be >= 1");
    for (const Segment& s : sspec_.segments) {
        if (s.batches < 1) throw ConfigError("stream segment batch count must be >= 1");
        corruption_magnitude(s.op.kind, s.op.kind == CorruptionKind::None ? 1 : s.op.severity);
    }
}

int Stream::total_batches() const {
    int total = 0;
    for (const Segment& s : sspec_.segments) total += s.batches;
    return total;
}

bool Stream::next(Batch& out) {
    while (segment_ < sspec_.segments.size() &&
           batch_in_segment_ >= sspec_.segments[segment_].batches) {
        ++segment_;
        batch_in_segment_ = 0;
    }
    if (segment_ >= sspec_.segments.size()) return false;

    const Segment& seg = sspec_.segments[segment_];
    Matrix clean;
    model_.sample(static_cast<std::size_t>(sspec_.batch_size), rng_, clean, out.y);
    out.x = corrupt(clean, seg.op, rng_);
    out.segment = static_cast<int>(segment_);
    out.op = seg.op;
    ++batch_in_segment_;
    return true;
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    std::fprintf(f, "y");
    for (std::size_t j = 0; j < data.x.cols(); ++j) std::fprintf(f, ",f%zu", j);
    std::fprintf(f, "\n");
    for (std::size_t i = 0; i < data.x.rows(); ++i) {
        std::fprintf(f, "%d", data.y[i]);
        for (std::size_t j = 0; j < data.x.cols(); ++j)
            std::fprintf(f, ",%.17g", data.x(i, j));
        std::fprintf(f, "\n");
    }
    std::fclose(f);
}

Dataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty dataset file");

    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) header.push_back(tok);
    }
    if (header.size() < 2 || header[0] != "y")
        throw IoError(path + ": line 1: bad dataset header");
    const std::size_t d = header.size() - 1;
    for (std::size_t j = 0; j < d; ++j)
        if (header[j + 1] != "f" + std::to_string(j))
            throw IoError(path + ": line 1: bad feature column name");

    std::vector<int> labels;
    std::vector<double> values;
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
        if (vals.size() != d + 1)
            throw IoError(path + ": line " + std::to_string(lineno) + ": wrong field count");
        const int y = static_cast<int>(vals[0]);
        if (vals[0] != static_cast<double>(y) || y < 0)
            throw IoError(path + ": line " + std::to_string(lineno) + ": bad label");
        labels.push_back(y);
        values.insert(values.end(), vals.begin() + 1, vals.end());
    }
    if (labels.empty()) throw IoError(path + ": no samples");

    Dataset data;
    data.x = Matrix(labels.size(), d, std::move(values));
    data.y = std::move(labels);
    data.classes = *std::max_element(data.y.begin(), data.y.end()) + 1;
    return data;
}

std::string manifest_csv(const std::vector<Segment>& segments) {
    std::string out = "segment,kind,severity,batches\n";
    char buf[128];
    for (std::size_t i = 0; i < segments.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%d,%d\n", i, kind_name(segments[i].op.kind),
                      segments[i].op.severity, segments[i].batches);
        out += buf;
    }
    return out;
}

void write_manifest_csv(const std::string& path, const std::vector<Segment>& segments) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    const std::string text = manifest_csv(segments);
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
}

}  // namespace ttalab
