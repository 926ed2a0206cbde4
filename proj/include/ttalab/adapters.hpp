#pragma once

#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttalab/meanteacher.hpp"
#include "ttalab/prototypes.hpp"
#include "ttalab/streams.hpp"

namespace ttalab {

enum class Method { SourceOnly, Bn1, Tent, MtCe, MtSce, Rmt };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct AdapterConfig {
    Method method = Method::Rmt;
    double lr = 0.01;
    double momentum = 0.9;
    int updates = 1;
    double alpha = 0.999;
    double tau = 0.1;
    double lambda_cl = 1.0;
    double lambda_ce = 1.0;
    double replay_fraction = 1.0;  // 0 drops the source term entirely
    double augment_strength = 0.1;
    bool predict_after_updates = true;
    bool teacher_bn_recompute = true;
    int window = 0;  // 0 = batch mode; >= 2 enables the sliding window
    int original_batch_size = 64;
    std::uint64_t seed = 1;

    bool source_free() const { return replay_fraction == 0.0; }
    void validate() const;
};

// Frozen uniform subsample of the source set; sampling at adaptation time is
// uniform with replacement and never mutates the buffer.
class ReplayBuffer {
public:
    ReplayBuffer() = default;
    ReplayBuffer(const Dataset& source, double fraction, std::uint64_t seed);

    bool empty() const { return y_.empty(); }
    std::size_t size() const { return y_.size(); }
    void sample(std::size_t n, Rng& rng, Matrix& x, std::vector<int>& y) const;
    std::size_t draw_count() const { return draws_; }

private:
    Matrix x_;
    std::vector<int> y_;
    mutable std::size_t draws_ = 0;
};

struct StepLog {
    std::vector<int> predictions;
    double loss_st = 0.0;    // self-training / consistency / entropy term
    double loss_cl = 0.0;    // contrastive term
    double loss_ce_s = 0.0;  // source replay term
    double ema_distance = 0.0;
    std::size_t updates = 0;
};

// One test-time adaptation strategy bound to its own model state. predict
// never changes any state; adapt consumes one test batch, returns the
// predictions the method emits for it, and may update the model. lr_scale
// multiplies the configured learning rate for this call only.
class Adapter {
public:
    virtual ~Adapter() = default;
    virtual std::vector<int> predict(const Matrix& x) = 0;
    virtual StepLog adapt(const Matrix& x, double lr_scale = 1.0) = 0;
    virtual const char* name() const = 0;
    // Offline warm-up before the stream starts; a no-op for methods without
    // a teacher.
    virtual void warm_up(const Matrix& x_source, std::size_t batch_size, double lr_peak,
                         Rng& rng) {
        (void)x_source;
        (void)batch_size;
        (void)lr_peak;
        (void)rng;
    }
    virtual std::size_t replay_draws() const { return 0; }
};

// source_model is copied, never aliased. bank is required for Rmt; source
// data is required for Rmt unless the config is source-free.
std::unique_ptr<Adapter> make_adapter(const AdapterConfig& cfg, const Network& source_model,
                                      const PrototypeBank* bank, const Dataset* source_data);

// Single-sample deployment: a ring buffer of the last `window` samples.
// Every push forwards the whole buffer to predict the newest sample; every
// window-th push runs one adaptation step on the buffer with the learning
// rate scaled by window / original_batch_size.
class WindowRunner {
public:
    WindowRunner(std::unique_ptr<Adapter> inner, int window, int original_batch_size);

    int push(const double* features, std::size_t dim);
    Adapter& inner() { return *inner_; }
    const StepLog& last_log() const { return last_log_; }
    std::size_t pushes() const { return pushes_; }

private:
    std::unique_ptr<Adapter> inner_;
    std::size_t window_;
    double lr_scale_;
    std::deque<std::vector<double>> buffer_;
    std::size_t pushes_ = 0;
    StepLog last_log_;
};

}  // namespace ttalab
