#include "ttalab/network.hpp"

#include <algorithm>
#include <cmath>

namespace ttalab {

void AffineLayer::init(std::size_t out, std::size_t in, Rng& rng, bool with_bias) {
    weight = Matrix(out, in);
    // Uniform with variance 2/fan_in.
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < in; ++j) weight(i, j) = rng.uniform(-limit, limit);
    has_bias = with_bias;
    const std::size_t bias_len = with_bias ? out : 0;
    bias.assign(bias_len, 0.0);
    grad_weight = Matrix(out, in);
    grad_bias.assign(bias_len, 0.0);
    vel_weight = Matrix(out, in);
    vel_bias.assign(bias_len, 0.0);
}

Matrix AffineLayer::forward(const Matrix& x) const {
    if (x.cols() != weight.cols()) throw ShapeError("affine forward input width mismatch");
    Matrix y = matmul_bt(x, weight);
    if (has_bias) {
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double* row = y.row_ptr(i);
            for (std::size_t j = 0; j < y.cols(); ++j) row[j] += bias[j];
        }
    }
    return y;
}

Matrix AffineLayer::backward(const Matrix& x, const Matrix& dy) {
    if (dy.rows() != x.rows() || dy.cols() != weight.rows())
        throw ShapeError("affine backward gradient shape mismatch");
    grad_weight += matmul_at(dy, x);
    if (has_bias) {
        for (std::size_t i = 0; i < dy.rows(); ++i) {
            const double* row = dy.row_ptr(i);
            for (std::size_t j = 0; j < dy.cols(); ++j) grad_bias[j] += row[j];
        }
    }
    return matmul(dy, weight);
}

void BatchNormLayer::init(std::size_t dim) {
    gamma.assign(dim, 1.0);
    beta.assign(dim, 0.0);
    running_mean.assign(dim, 0.0);
    running_var.assign(dim, 1.0);
    grad_gamma.assign(dim, 0.0);
    grad_beta.assign(dim, 0.0);
    vel_gamma.assign(dim, 0.0);
    vel_beta.assign(dim, 0.0);
}

Matrix BatchNormLayer::forward(const Matrix& x, BnMode mode, Cache& cache) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (d != gamma.size()) throw ShapeError("batchnorm width mismatch");
    if (n == 0) throw EmptyBatchError("batchnorm forward on empty batch");

    cache.batch_stats = (mode != BnMode::Eval) && n >= 2;
    cache.inv_std.assign(d, 0.0);
    cache.xhat = Matrix(n, d);

    std::vector<double> mean(d, 0.0);
    if (cache.batch_stats) {
        std::vector<double> var(d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.row_ptr(i);
            for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
        }
        for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = x.row_ptr(i);
            for (std::size_t j = 0; j < d; ++j) {
                const double c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            var[j] /= static_cast<double>(n);
            cache.inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
        }
        if (mode == BnMode::Train) {
            for (std::size_t j = 0; j < d; ++j) {
                running_mean[j] = (1.0 - stat_momentum) * running_mean[j] + stat_momentum * mean[j];
                running_var[j] = (1.0 - stat_momentum) * running_var[j] + stat_momentum * var[j];
            }
        }
    } else {
        mean = running_mean;
        for (std::size_t j = 0; j < d; ++j) cache.inv_std[j] = 1.0 / std::sqrt(running_var[j] + eps);
    }

    Matrix y(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.row_ptr(i);
        double* xh = cache.xhat.row_ptr(i);
        double* out = y.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mean[j]) * cache.inv_std[j];
            out[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    return y;
}

Matrix BatchNormLayer::backward(const Cache& cache, const Matrix& dy) {
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    if (!cache.xhat.same_shape(dy)) throw ShapeError("batchnorm backward shape mismatch");

    std::vector<double> sum_dy(d, 0.0), sum_dy_xhat(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* dyr = dy.row_ptr(i);
        const double* xh = cache.xhat.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            sum_dy[j] += dyr[j];
            sum_dy_xhat[j] += dyr[j] * xh[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        grad_gamma[j] += sum_dy_xhat[j];
        grad_beta[j] += sum_dy[j];
    }

    Matrix dx(n, d);
    if (cache.batch_stats) {
        // Gradient through the batch statistics themselves.
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* dyr = dy.row_ptr(i);
            const double* xh = cache.xhat.row_ptr(i);
            double* out = dx.row_ptr(i);
            for (std::size_t j = 0; j < d; ++j) {
                const double dxhat = dyr[j] * gamma[j];
                out[j] = cache.inv_std[j] *
                         (dxhat - inv_n * gamma[j] * (sum_dy[j] + xh[j] * sum_dy_xhat[j]));
            }
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double* dyr = dy.row_ptr(i);
            double* out = dx.row_ptr(i);
            for (std::size_t j = 0; j < d; ++j) out[j] = dyr[j] * gamma[j] * cache.inv_std[j];
        }
    }
    return dx;
}

namespace {

void validate_config(const NetworkConfig& cfg) {
    if (cfg.input_dim < 1) throw ArchitectureError("input_dim must be >= 1");
    if (cfg.classes < 2) throw ArchitectureError("classes must be >= 2");
    if (cfg.hidden.empty()) throw ArchitectureError("at least one hidden layer is required");
    for (int h : cfg.hidden)
        if (h < 1) throw ArchitectureError("hidden widths must be >= 1");
    if (cfg.proj_dim < 0) throw ArchitectureError("proj_dim must be >= 0");
}

}  // namespace

Network::Network(const NetworkConfig& cfg) : cfg_(cfg) {
    validate_config(cfg);
    Rng rng(cfg.seed);
    std::size_t in = static_cast<std::size_t>(cfg.input_dim);
    for (int h : cfg.hidden) {
        AffineLayer a;
        a.init(static_cast<std::size_t>(h), in, rng, !cfg.batch_norm);
        enc_affine_.push_back(std::move(a));
        if (cfg.batch_norm) {
            BatchNormLayer bn;
            bn.init(static_cast<std::size_t>(h));
            enc_bn_.push_back(std::move(bn));
        }
        in = static_cast<std::size_t>(h);
    }
    classifier_.init(static_cast<std::size_t>(cfg.classes), in, rng);
    proj_dim_ = cfg.proj_dim > 0 ? static_cast<std::size_t>(cfg.proj_dim)
                                 : std::min<std::size_t>(in, 32);
    proj1_.init(in, in, rng);
    proj2_.init(proj_dim_, in, rng);
}

Matrix Network::activate(const Matrix& pre) const {
    Matrix y = pre;
    switch (cfg_.activation) {
        case Activation::ReLU:
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double* row = y.row_ptr(i);
                for (std::size_t j = 0; j < y.cols(); ++j) row[j] = std::max(0.0, row[j]);
            }
            break;
        case Activation::Tanh:
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double* row = y.row_ptr(i);
                for (std::size_t j = 0; j < y.cols(); ++j) row[j] = std::tanh(row[j]);
            }
            break;
        case Activation::Identity:
            break;
    }
    return y;
}

Matrix Network::activate_backward(const BlockTrace& t, const Matrix& dy) const {
    Matrix dx = dy;
    switch (cfg_.activation) {
        case Activation::ReLU:
            for (std::size_t i = 0; i < dx.rows(); ++i) {
                double* row = dx.row_ptr(i);
                const double* pre = t.pre_act.row_ptr(i);
                for (std::size_t j = 0; j < dx.cols(); ++j)
                    if (pre[j] <= 0.0) row[j] = 0.0;
            }
            break;
        case Activation::Tanh:
            for (std::size_t i = 0; i < dx.rows(); ++i) {
                double* row = dx.row_ptr(i);
                const double* out = t.act_out.row_ptr(i);
                for (std::size_t j = 0; j < dx.cols(); ++j) row[j] *= 1.0 - out[j] * out[j];
            }
            break;
        case Activation::Identity:
            break;
    }
    return dx;
}

ForwardTrace Network::forward(const Matrix& x, BnMode mode) {
    if (enc_affine_.empty()) throw StateError("forward on default-constructed network");
    if (x.rows() == 0) throw EmptyBatchError("forward on empty batch");
    if (x.cols() != static_cast<std::size_t>(cfg_.input_dim))
        throw ShapeError("forward input width mismatch");
    x.check_finite("forward input");

    ForwardTrace trace;
    trace.mode = mode;
    Matrix cur = x;
    for (std::size_t b = 0; b < enc_affine_.size(); ++b) {
        BlockTrace bt;
        bt.input = cur;
        Matrix pre = enc_affine_[b].forward(cur);
        if (cfg_.batch_norm) pre = enc_bn_[b].forward(pre, mode, bt.bn);
        bt.pre_act = pre;
        bt.act_out = activate(pre);
        cur = bt.act_out;
        trace.blocks.push_back(std::move(bt));
    }
    trace.features = cur;
    trace.logits = classifier_.forward(cur);
    trace.logits.check_finite("logits");
    ProjTrace pt = project(cur);
    trace.proj = pt.out;
    trace.valid = true;
    return trace;
}

void Network::backward(const ForwardTrace& trace, const Matrix& d_logits,
                       const Matrix& d_features_extra) {
    if (!trace.valid) throw StateError("backward without a cached forward");
    if (!d_logits.same_shape(trace.logits)) throw ShapeError("backward logit gradient shape mismatch");

    Matrix d_feat = classifier_.backward(trace.features, d_logits);
    if (!d_features_extra.empty()) {
        if (!d_features_extra.same_shape(trace.features))
            throw ShapeError("backward feature gradient shape mismatch");
        d_feat += d_features_extra;
    }

    Matrix cur = std::move(d_feat);
    for (std::size_t b = trace.blocks.size(); b-- > 0;) {
        const BlockTrace& bt = trace.blocks[b];
        cur = activate_backward(bt, cur);
        if (cfg_.batch_norm) cur = enc_bn_[b].backward(bt.bn, cur);
        cur = enc_affine_[b].backward(bt.input, cur);
    }
}

ProjTrace Network::project(const Matrix& features) {
    if (enc_affine_.empty()) throw StateError("project on default-constructed network");
    if (features.rows() == 0) throw EmptyBatchError("project on empty batch");
    if (features.cols() != feature_dim()) throw ShapeError("project input width mismatch");
    ProjTrace t;
    t.input = features;
    t.hidden_pre = proj1_.forward(features);
    // The projection head reuses the network activation but never batch norm.
    t.hidden_act = activate(t.hidden_pre);
    t.out = proj2_.forward(t.hidden_act);
    t.valid = true;
    return t;
}

Matrix Network::project_backward(const ProjTrace& trace, const Matrix& d_out) {
    if (!trace.valid) throw StateError("project_backward without a cached projection");
    if (!d_out.same_shape(trace.out)) throw ShapeError("project_backward gradient shape mismatch");
    Matrix d_hidden = proj2_.backward(trace.hidden_act, d_out);
    BlockTrace helper;
    helper.pre_act = trace.hidden_pre;
    helper.act_out = trace.hidden_act;
    d_hidden = activate_backward(helper, d_hidden);
    return proj1_.backward(trace.input, d_hidden);
}

std::vector<Network::ParamBlock> Network::param_blocks() {
    std::vector<ParamBlock> blocks;
    auto add_affine = [&blocks](const std::string& name, AffineLayer& a) {
        blocks.push_back({name + ".weight", a.weight.data(), a.grad_weight.data(),
                          a.vel_weight.data(), a.weight.size(), false});
        if (a.has_bias)
            blocks.push_back({name + ".bias", a.bias.data(), a.grad_bias.data(),
                              a.vel_bias.data(), a.bias.size(), false});
    };
    for (std::size_t b = 0; b < enc_affine_.size(); ++b) {
        add_affine("enc" + std::to_string(b), enc_affine_[b]);
        if (cfg_.batch_norm) {
            BatchNormLayer& bn = enc_bn_[b];
            blocks.push_back({"enc" + std::to_string(b) + ".gamma", bn.gamma.data(),
                              bn.grad_gamma.data(), bn.vel_gamma.data(), bn.gamma.size(), true});
            blocks.push_back({"enc" + std::to_string(b) + ".beta", bn.beta.data(),
                              bn.grad_beta.data(), bn.vel_beta.data(), bn.beta.size(), true});
        }
    }
    add_affine("cls", classifier_);
    add_affine("proj1", proj1_);
    add_affine("proj2", proj2_);
    return blocks;
}

std::vector<std::pair<const double*, std::size_t>> Network::param_views() const {
    std::vector<std::pair<const double*, std::size_t>> views;
    auto add_affine = [&views](const AffineLayer& a) {
        views.emplace_back(a.weight.data(), a.weight.size());
        if (a.has_bias) views.emplace_back(a.bias.data(), a.bias.size());
    };
    for (std::size_t b = 0; b < enc_affine_.size(); ++b) {
        add_affine(enc_affine_[b]);
        if (cfg_.batch_norm) {
            views.emplace_back(enc_bn_[b].gamma.data(), enc_bn_[b].gamma.size());
            views.emplace_back(enc_bn_[b].beta.data(), enc_bn_[b].beta.size());
        }
    }
    add_affine(classifier_);
    add_affine(proj1_);
    add_affine(proj2_);
    return views;
}

std::vector<std::pair<double*, std::size_t>> Network::stat_blocks() {
    std::vector<std::pair<double*, std::size_t>> blocks;
    for (BatchNormLayer& bn : enc_bn_) {
        blocks.emplace_back(bn.running_mean.data(), bn.running_mean.size());
        blocks.emplace_back(bn.running_var.data(), bn.running_var.size());
    }
    return blocks;
}

std::vector<std::pair<const double*, std::size_t>> Network::stat_views() const {
    std::vector<std::pair<const double*, std::size_t>> views;
    for (const BatchNormLayer& bn : enc_bn_) {
        views.emplace_back(bn.running_mean.data(), bn.running_mean.size());
        views.emplace_back(bn.running_var.data(), bn.running_var.size());
    }
    return views;
}

std::size_t Network::param_count() {
    std::size_t n = 0;
    for (const auto& b : param_blocks()) n += b.n;
    return n;
}

void Network::zero_grads() {
    for (auto& b : param_blocks()) std::fill(b.grad, b.grad + b.n, 0.0);
}

void Network::zero_velocity() {
    for (auto& b : param_blocks()) std::fill(b.vel, b.vel + b.n, 0.0);
}

namespace {

void check_step_args(double lr, double momentum) {
    if (lr < 0.0) throw ConfigError("sgd step learning rate must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd momentum must lie in [0, 1)");
}

}  // namespace

void Network::step_blocks(bool bn_only, double lr, double momentum) {
    for (auto& blk : param_blocks()) {
        if (!bn_only || blk.is_bn) {
            for (std::size_t i = 0; i < blk.n; ++i) {
                blk.vel[i] = momentum * blk.vel[i] + blk.grad[i];
                blk.value[i] -= lr * blk.vel[i];
            }
        }
        std::fill(blk.grad, blk.grad + blk.n, 0.0);
    }
    ++sgd_steps_;
}

void Network::sgd_step(double lr, double momentum) {
    check_step_args(lr, momentum);
    step_blocks(false, lr, momentum);
}

void Network::sgd_step_bn_only(double lr, double momentum) {
    check_step_args(lr, momentum);
    if (!cfg_.batch_norm) throw StateError("sgd_step_bn_only on a network without batch norm");
    step_blocks(true, lr, momentum);
}

void Network::ema_from(const Network& src, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("ema alpha must lie in [0, 1]");
    auto mine = param_blocks();
    auto theirs = src.param_views();
    if (mine.size() != theirs.size()) throw ArchitectureError("ema between different architectures");
    // Increment form of alpha*old + (1-alpha)*src: exact when both sides
    // already agree, which keeps an idle teacher bit-identical.
    for (std::size_t k = 0; k < mine.size(); ++k) {
        if (mine[k].n != theirs[k].second) throw ArchitectureError("ema between different architectures");
        for (std::size_t i = 0; i < mine[k].n; ++i)
            mine[k].value[i] += (1.0 - alpha) * (theirs[k].first[i] - mine[k].value[i]);
    }
    auto my_stats = stat_blocks();
    auto their_stats = src.stat_views();
    for (std::size_t k = 0; k < my_stats.size(); ++k)
        for (std::size_t i = 0; i < my_stats[k].second; ++i)
            my_stats[k].first[i] +=
                (1.0 - alpha) * (their_stats[k].first[i] - my_stats[k].first[i]);
}

double Network::param_distance(const Network& other) const {
    auto mine = param_views();
    auto theirs = other.param_views();
    if (mine.size() != theirs.size()) throw ArchitectureError("distance between different architectures");
    double s = 0.0;
    for (std::size_t k = 0; k < mine.size(); ++k) {
        if (mine[k].second != theirs[k].second)
            throw ArchitectureError("distance between different architectures");
        for (std::size_t i = 0; i < mine[k].second; ++i) {
            const double d = mine[k].first[i] - theirs[k].first[i];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

double finite_diff_check(Network& net, const std::function<double(Network&)>& loss_fn,
                         double epsilon) {
    if (epsilon <= 0.0) throw ConfigError("finite_diff_check requires epsilon > 0");
    double worst = 0.0;
    for (auto& blk : net.param_blocks()) {
        for (std::size_t i = 0; i < blk.n; ++i) {
            const double saved = blk.value[i];
            blk.value[i] = saved + epsilon;
            const double up = loss_fn(net);
            blk.value[i] = saved - epsilon;
            const double down = loss_fn(net);
            blk.value[i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double rel = std::abs(blk.grad[i] - numeric) / (std::abs(numeric) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace ttalab
