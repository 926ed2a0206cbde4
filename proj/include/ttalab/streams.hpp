#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ttalab/network.hpp"

namespace ttalab {

struct Dataset {
    Matrix x;
    std::vector<int> y;
    int classes = 0;
};

// Gaussian class-cluster generator. Means are sampled on a sphere of radius
// mean_radius unless explicit means are provided. imbalance is the ratio of
// most to least frequent class prior; warp adds a smooth nonlinear
// distortion after the Gaussian draw.
struct DatasetSpec {
    int classes = 10;
    int dim = 32;
    int samples_per_class = 500;
    double sigma = 0.5;
    double mean_radius = 2.5;
    double warp = 0.0;
    double imbalance = 1.0;
    Matrix means;  // optional, classes x dim
};

// Fixes the class geometry of a DatasetSpec. The same dataset seed always
// yields the same means, so a source set and a test stream built from one
// seed share their classes.
class ClusterModel {
public:
    ClusterModel(const DatasetSpec& spec, std::uint64_t dataset_seed);
    const Matrix& means() const { return means_; }
    const std::vector<double>& priors() const { return priors_; }
    const DatasetSpec& spec() const { return spec_; }
    // Draws one sample of class cls.
    void sample_features(int cls, Rng& rng, double* out) const;
    // Draws n labelled samples, labels following the class priors.
    void sample(std::size_t n, Rng& rng, Matrix& x, std::vector<int>& y) const;

private:
    DatasetSpec spec_;
    Matrix means_;
    std::vector<double> priors_;
};

Dataset generate_source(const DatasetSpec& spec, std::uint64_t dataset_seed);

enum class CorruptionKind {
    None,
    GaussianNoise,
    Impulse,
    Smoothing,
    Contrast,
    BrightnessShift,
    FeatureDropout,
    Scaling,
    Rotation2dSubspace,
};

const char* kind_name(CorruptionKind kind);
CorruptionKind kind_from_name(const std::string& name);
// The eight real corruption kinds, excluding None.
const std::vector<CorruptionKind>& all_corruption_kinds();

struct CorruptionOp {
    CorruptionKind kind = CorruptionKind::None;
    int severity = 1;  // 1..5; ignored for None
};

// Scalar strength of a kind at a severity; strictly increasing in severity
// for every real kind, and 0 for None.
double corruption_magnitude(CorruptionKind kind, int severity);

// Applies the corruption sample-wise. Shapes and labels are untouched; all
// randomness comes from rng.
Matrix corrupt(const Matrix& x, const CorruptionOp& op, Rng& rng);

// Per-sample scaling drawn from [1-strength, 1+strength] followed by
// Gaussian jitter with sigma = strength.
Matrix augment(const Matrix& x, double strength, Rng& rng);

struct Segment {
    CorruptionOp op;
    int batches = 0;
};

struct StreamSpec {
    std::vector<Segment> segments;
    int batch_size = 64;
};

// One segment per kind at the given severity, in the given order.
std::vector<Segment> build_continual(const std::vector<CorruptionKind>& kinds, int severity,
                                     int batches_per_segment);

// Per kind, severities walk 1..5 and back down to 1 (nine segments of
// batches_per_level each). Kind boundaries are disjoint; the walk restarts
// at severity 1 for each kind.
std::vector<Segment> build_gradual(const std::vector<CorruptionKind>& kinds,
                                   int batches_per_level);

// Sorts kinds by the Eval-mode error of net on a severity-corrupted probe
// set drawn from the dataset geometry. Ties keep the enum order.
std::vector<CorruptionKind> order_by_source_error(Network& net, const DatasetSpec& dspec,
                                                  const std::vector<CorruptionKind>& kinds,
                                                  int severity, int probe_samples,
                                                  std::uint64_t dataset_seed, bool easy_first);

// Lazily generates the labelled, corrupted test batches of a stream.
// Deterministic for a fixed (dataset_seed, stream_seed) pair; batches are
// produced strictly in order, so consuming a prefix never depends on what
// comes later.
class Stream {
public:
    struct Batch {
        Matrix x;
        std::vector<int> y;
        int segment = 0;
        CorruptionOp op;
    };

    Stream(const DatasetSpec& dspec, StreamSpec sspec, std::uint64_t dataset_seed,
           std::uint64_t stream_seed);
    bool next(Batch& out);
    const StreamSpec& spec() const { return sspec_; }
    int total_batches() const;

private:
    ClusterModel model_;
    StreamSpec sspec_;
    Rng rng_;
    std::size_t segment_ = 0;
    int batch_in_segment_ = 0;
};

// Dataset CSV, header "y,f0,...,f{d-1}". Values round trip exactly.
void write_dataset_csv(const std::string& path, const Dataset& data);
Dataset read_dataset_csv(const std::string& path);

// Stream manifest CSV, header "segment,kind,severity,batches".
std::string manifest_csv(const std::vector<Segment>& segments);
void write_manifest_csv(const std::string& path, const std::vector<Segment>& segments);

}  // namespace ttalab
