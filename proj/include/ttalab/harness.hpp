#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ttalab/adapters.hpp"
#include "ttalab/streams.hpp"

namespace ttalab {

enum class StreamOrder { Continual, Gradual, EasyToHard, HardToEasy };

const char* order_name(StreamOrder order);
StreamOrder order_from_name(const std::string& name);

const char* activation_name(Activation act);
Activation activation_from_name(const std::string& name);

// Full description of one benchmark run. Parsed from a flat text file of
// `section.key = value` lines (sections dataset, model, stream, adapter,
// run; `#` starts a comment). Unknown and duplicate keys are rejected with
// line numbers. The initialisers below are the documented defaults.
struct RunConfig {
    // dataset.*
    int classes = 10;
    int dim = 32;
    int samples_per_class = 500;
    double sigma = 0.5;
    double mean_radius = 2.5;
    double warp = 0.0;
    double imbalance = 1.0;
    double val_fraction = 0.1;

    // model.*
    std::vector<int> hidden = {64};
    int proj_dim = 0;  // 0 selects min(feature_dim, 32)
    Activation activation = Activation::ReLU;

    // stream.*
    std::vector<CorruptionKind> kinds = all_corruption_kinds();
    StreamOrder order = StreamOrder::Continual;
    int severity = 5;  // ignored by the gradual order, which walks 1..5..1
    int batches_per_segment = 20;
    int batches_per_level = 4;
    int batch_size = 64;
    int probe_samples = 512;

    // adapter.*
    Method method = Method::Rmt;
    double lr = 0.01;
    double momentum = 0.9;
    int updates = 1;
    double alpha = 0.999;
    double tau = 0.1;
    double lambda_cl = 1.0;
    double lambda_ce = 1.0;
    double replay_fraction = 1.0;
    double augment_strength = 0.1;
    bool predict_after_updates = true;
    bool teacher_bn_recompute = true;
    int window = 0;  // 0 = batch mode; >= 2 runs the sliding window

    // run.*
    std::uint64_t seed = 1;
    bool warmup = true;
    double warmup_lr = 0.0;  // 0 falls back to adapter.lr
    int pretrain_epochs = 20;
    double pretrain_lr = 0.01;
    std::string out = "out";

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Canonical text form: every key in a fixed order, doubles printed with the
// shortest representation that parses back to the same value. parse after
// serialize is the identity.
std::string serialize_config(const RunConfig& cfg);

// Sets a single `section.key` from its text form; shared by the parser and
// the sweep tool. Throws ConfigError on unknown keys or bad values.
void assign_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

// FNV-1a over the serialized config, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Shortest decimal form of v that strtod parses back to exactly v.
std::string format_double(double v);

struct SegmentMetric {
    CorruptionKind kind = CorruptionKind::None;
    int severity = 0;
    int batches = 0;
    double error_pct = 0.0;
};

struct MetricsRecord {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::vector<SegmentMetric> segments;
    double mean_error_pct = 0.0;  // arithmetic mean over segments
    double source_val_error_pct = 0.0;
    double wall_seconds = 0.0;  // never written to files
};

// All file bodies a run produces, so callers can compare outputs byte for
// byte without touching the filesystem.
struct RunArtifacts {
    MetricsRecord record;
    std::string metrics_csv;
    std::string batches_csv;
    std::string manifest_csv;
    std::string config_resolved;
};

// The whole pipeline: generate the source set, pre-train, optional warm-up,
// build the stream, adapt online, aggregate per-segment errors. The model
// is never reset between segments.
RunArtifacts run(const RunConfig& cfg);

// run() plus writing metrics.csv, batches.csv, manifest.csv and
// config.resolved into out_dir (created if missing).
MetricsRecord run_to_dir(const RunConfig& cfg, const std::string& out_dir);

MetricsRecord read_metrics_csv(const std::string& path);

// Plain SGD fit on labelled data, shuffled each epoch, Train-mode batch
// norm. Returns the last epoch's mean loss.
double pretrain(Network& net, const Matrix& x, const std::vector<int>& y, int epochs,
                std::size_t batch_size, double lr, double momentum, Rng& rng);

// Eval-mode error percentage of net on a labelled set.
double eval_error_pct(Network& net, const Matrix& x, const std::vector<int>& y);

// Two-class loss or gradient surface over the open grid p,q = step, 2*step,
// ... < 1. loss is "ce" or "sce", what is "value" or "grad"; rows "p,q,v".
std::string emit_surface(const std::string& loss, const std::string& what, double step);

struct TableResult {
    std::string text;  // aligned, human-readable
    std::string csv;   // byte-stable
};

// One row per metrics file, one column per segment plus Mean, columns in
// the files' shared segment order.
TableResult emit_table(const std::vector<std::string>& metrics_paths);

struct SweepResult {
    std::string key;
    std::string value;
    MetricsRecord record;
};

// Runs base once per value with `key` overridden, each into its own
// subdirectory of out_dir, and writes out_dir/sweep.csv.
std::vector<SweepResult> sweep(const RunConfig& base, const std::string& key,
                               const std::vector<std::string>& values,
                               const std::string& out_dir);

}  // namespace ttalab
