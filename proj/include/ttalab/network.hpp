#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ttalab/matrix.hpp"

namespace ttalab {

// Batch-norm statistics source for a forward pass.
//   Train:     batch statistics, running statistics updated.
//   Eval:      running statistics, nothing updated.
//   Recompute: batch statistics, running statistics untouched.
enum class BnMode { Train, Eval, Recompute };

enum class Activation { ReLU, Tanh, Identity };

struct AffineLayer {
    Matrix weight;  // out x in
    std::vector<double> bias;
    Matrix grad_weight;
    std::vector<double> grad_bias;
    Matrix vel_weight;
    std::vector<double> vel_bias;
    // Layers feeding batch norm drop the bias: the mean subtraction makes it
    // unidentifiable, and beta already provides the shift.
    bool has_bias = true;

    void init(std::size_t out, std::size_t in, Rng& rng, bool with_bias = true);
    Matrix forward(const Matrix& x) const;
    // Accumulates parameter gradients and returns the input gradient.
    Matrix backward(const Matrix& x, const Matrix& dy);
};

struct BatchNormLayer {
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    std::vector<double> grad_gamma, grad_beta;
    std::vector<double> vel_gamma, vel_beta;
    double eps = 1e-5;
    double stat_momentum = 0.1;

    struct Cache {
        Matrix xhat;
        std::vector<double> inv_std;
        bool batch_stats = false;
    };

    void init(std::size_t dim);
    // A batch of one row cannot define batch statistics; Train and Recompute
    // fall back to the running statistics in that case.
    Matrix forward(const Matrix& x, BnMode mode, Cache& cache);
    Matrix backward(const Cache& cache, const Matrix& dy);
};

struct NetworkConfig {
    int input_dim = 32;
    std::vector<int> hidden = {64};
    int classes = 10;
    Activation activation = Activation::ReLU;
    bool batch_norm = true;
    int proj_dim = 0;  // 0 selects min(feature_dim, 32)
    std::uint64_t seed = 1;
};

struct BlockTrace {
    Matrix input;     // into the affine
    BatchNormLayer::Cache bn;
    Matrix pre_act;   // into the activation
    Matrix act_out;
};

struct ProjTrace {
    bool valid = false;
    Matrix input;
    Matrix hidden_pre;
    Matrix hidden_act;
    Matrix out;
};

struct ForwardTrace {
    bool valid = false;
    BnMode mode = BnMode::Eval;
    std::vector<BlockTrace> blocks;
    Matrix features;  // encoder output
    Matrix logits;    // classifier output
    Matrix proj;      // projection head output
};

// Encoder of affine(+BN)+activation blocks, an affine classifier on the
// features, and a detachable two-affine projection head. Forward passes
// return value-type traces so several passes can coexist before one
// backward/step cycle; backward accumulates into the gradient buffers.
class Network {
public:
    Network() = default;
    explicit Network(const NetworkConfig& cfg);

    const NetworkConfig& config() const { return cfg_; }
    std::size_t feature_dim() const { return static_cast<std::size_t>(cfg_.hidden.back()); }
    std::size_t proj_dim() const { return proj_dim_; }
    std::size_t num_classes() const { return static_cast<std::size_t>(cfg_.classes); }

    ForwardTrace forward(const Matrix& x, BnMode mode);

    // d_features_extra adds a gradient arriving directly at the features
    // (besides the classifier path); pass an empty matrix when unused.
    void backward(const ForwardTrace& trace, const Matrix& d_logits,
                  const Matrix& d_features_extra = Matrix());

    ProjTrace project(const Matrix& features);
    // Accumulates projection-head gradients; returns the feature gradient.
    Matrix project_backward(const ProjTrace& trace, const Matrix& d_out);

    void zero_grads();
    // Clears optimizer momentum buffers; gradients and parameters stay.
    void zero_velocity();
    void sgd_step(double lr, double momentum);
    void sgd_step_bn_only(double lr, double momentum);
    std::size_t sgd_step_count() const { return sgd_steps_; }

    struct ParamBlock {
        std::string name;
        double* value;
        double* grad;
        double* vel;
        std::size_t n;
        bool is_bn;
    };
    std::vector<ParamBlock> param_blocks();
    std::vector<std::pair<const double*, std::size_t>> param_views() const;
    // BN running statistics; blended alongside parameters in EMA updates.
    std::vector<std::pair<double*, std::size_t>> stat_blocks();
    std::vector<std::pair<const double*, std::size_t>> stat_views() const;

    std::size_t param_count();
    void ema_from(const Network& src, double alpha);
    double param_distance(const Network& other) const;

private:
    NetworkConfig cfg_;
    std::size_t proj_dim_ = 0;
    std::vector<AffineLayer> enc_affine_;
    std::vector<BatchNormLayer> enc_bn_;
    AffineLayer classifier_;
    AffineLayer proj1_;
    AffineLayer proj2_;
    std::size_t sgd_steps_ = 0;

    Matrix activate(const Matrix& pre) const;
    Matrix activate_backward(const BlockTrace& t, const Matrix& dy) const;
    void step_blocks(bool bn_only, double lr, double momentum);
};

// Compares the network's current analytic gradient buffers against central
// finite differences of loss_fn over every parameter. loss_fn must be a
// deterministic pure function of the parameters. Returns the maximum of
// |analytic - numeric| / (|numeric| + 1e-8).
double finite_diff_check(Network& net, const std::function<double(Network&)>& loss_fn,
                         double epsilon);

}  // namespace ttalab
