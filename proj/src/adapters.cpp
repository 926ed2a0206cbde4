#include "ttalab/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ttalab/losses.hpp"

namespace ttalab {

const char* method_name(Method m) {
    switch (m) {
        case Method::SourceOnly: return "source_only";
        case Method::Bn1: return "bn1";
        case Method::Tent: return "tent";
        case Method::MtCe: return "mt_ce";
        case Method::MtSce: return "mt_sce";
        case Method::Rmt: return "rmt";
    }
    throw DomainError("unknown method");
}

Method method_from_name(const std::string& name) {
    if (name == "source_only") return Method::SourceOnly;
    if (name == "bn1") return Method::Bn1;
    if (name == "tent") return Method::Tent;
    if (name == "mt_ce") return Method::MtCe;
    if (name == "mt_sce") return Method::MtSce;
    if (name == "rmt") return Method::Rmt;
    throw ConfigError("unknown method '" + name + "'");
}

void AdapterConfig::validate() const {
    if (lr < 0.0) throw ConfigError("adapter lr must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("adapter momentum must lie in [0, 1)");
    if (updates < 1) throw ConfigError("adapter updates must be >= 1");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("adapter alpha must lie in [0, 1]");
    if (tau <= 0.0) throw ConfigError("adapter tau must be > 0");
    if (lambda_cl < 0.0 || lambda_ce < 0.0)
        throw ConfigError("adapter loss weights must be non-negative");
    if (replay_fraction < 0.0 || replay_fraction > 1.0)
        throw ConfigError("adapter replay_fraction must lie in [0, 1]");
    if (augment_strength < 0.0 || augment_strength >= 1.0)
        throw ConfigError("adapter augment_strength must lie in [0, 1)");
    if (window != 0 && window < 2) throw ConfigError("adapter window must be 0 or >= 2");
    if (original_batch_size < 1) throw ConfigError("adapter original_batch_size must be >= 1");
}

ReplayBuffer::ReplayBuffer(const Dataset& source, double fraction, std::uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) throw ConfigError("replay fraction must lie in [0, 1]");
    if (fraction == 0.0) return;
    if (source.x.rows() == 0) throw EmptyBatchError("replay buffer from empty source set");

    const std::size_t n = source.x.rows();
    std::size_t keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    keep = std::max<std::size_t>(1, std::min(keep, n));

    // Uniform subsample without replacement via a partial shuffle.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < keep; ++i)
        std::swap(order[i], order[i + rng.uniform_index(n - i)]);

    x_ = Matrix(keep, source.x.cols());
    y_.resize(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        std::copy(source.x.row_ptr(order[i]), source.x.row_ptr(order[i]) + source.x.cols(),
                  x_.row_ptr(i));
        y_[i] = source.y[order[i]];
    }
}

void ReplayBuffer::sample(std::size_t n, Rng& rng, Matrix& x, std::vector<int>& y) const {
    if (empty()) throw StateError("sample from empty replay buffer");
    if (n == 0) throw EmptyBatchError("replay sample of size zero");
    x = Matrix(n, x_.cols());
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = rng.uniform_index(size());
        std::copy(x_.row_ptr(idx), x_.row_ptr(idx) + x_.cols(), x.row_ptr(i));
        y[i] = y_[idx];
    }
    draws_ += n;
}

namespace {

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> preds(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i)
        preds[i] = static_cast<int>(argmax_row(logits, i));
    return preds;
}

class SourceOnlyAdapter final : public Adapter {
public:
    explicit SourceOnlyAdapter(const Network& source_model) : net_(source_model) {}
    std::vector<int> predict(const Matrix& x) override {
        return argmax_rows(net_.forward(x, BnMode::Eval).logits);
    }
    StepLog adapt(const Matrix& x, double) override {
        StepLog log;
        log.predictions = predict(x);
        return log;
    }
    const char* name() const override { return "source_only"; }

private:
    Network net_;
};

class Bn1Adapter final : public Adapter {
public:
    explicit Bn1Adapter(const Network& source_model) : net_(source_model) {}
    std::vector<int> predict(const Matrix& x) override {
        return argmax_rows(net_.forward(x, BnMode::Recompute).logits);
    }
    StepLog adapt(const Matrix& x, double) override {
        StepLog log;
        log.predictions = predict(x);
        return log;
    }
    const char* name() const override { return "bn1"; }

private:
    Network net_;
};

class TentAdapter final : public Adapter {
public:
    TentAdapter(const AdapterConfig& cfg, const Network& source_model)
        : cfg_(cfg), net_(source_model) {
        net_.zero_velocity();
    }

    std::vector<int> predict(const Matrix& x) override {
        return argmax_rows(net_.forward(x, BnMode::Recompute).logits);
    }

    StepLog adapt(const Matrix& x, double lr_scale) override {
        StepLog log;
        if (!net_.config().batch_norm) {
            // Nothing to tune without batch norm; degrade to inference.
            ForwardTrace trace = net_.forward(x, BnMode::Recompute);
            log.loss_st = losses::entropy(losses::softmax(trace.logits));
            log.predictions = argmax_rows(trace.logits);
            return log;
        }
        for (int u = 0; u < cfg_.updates; ++u) {
            ForwardTrace trace = net_.forward(x, BnMode::Recompute);
            Matrix p = losses::softmax(trace.logits);
            log.loss_st = losses::entropy(p);
            Matrix d_logits = losses::entropy_logit_grad(p);
            d_logits *= 1.0 / static_cast<double>(x.rows());
            net_.backward(trace, d_logits);
            net_.sgd_step_bn_only(cfg_.lr * lr_scale, cfg_.momentum);
            ++log.updates;
            if (u == 0 || cfg_.predict_after_updates) log.predictions = argmax_rows(trace.logits);
        }
        return log;
    }
    const char* name() const override { return "tent"; }

private:
    AdapterConfig cfg_;
    Network net_;
};

// Plain mean teacher: consistency loss between teacher and student on the
// clean batch only, teacher prediction emitted. Covers both the cross
// entropy and the symmetric variant.
class MtAdapter final : public Adapter {
public:
    MtAdapter(const AdapterConfig& cfg, const Network& source_model, bool symmetric)
        : cfg_(cfg), pair_(make_model_pair(source_model, cfg.teacher_bn_recompute)),
          symmetric_(symmetric) {}

    std::vector<int> predict(const Matrix& x) override {
        return argmax_rows(pair_.teacher.forward(x, teacher_mode()).logits);
    }

    StepLog adapt(const Matrix& x, double lr_scale) override {
        StepLog log;
        for (int u = 0; u < cfg_.updates; ++u) {
            ForwardTrace teacher_trace = pair_.teacher.forward(x, teacher_mode());
            ForwardTrace student_trace = pair_.student.forward(x, BnMode::Recompute);
            Matrix q = losses::softmax(teacher_trace.logits);
            Matrix p = losses::softmax(student_trace.logits);

            Matrix d_logits = symmetric_ ? losses::sce_logit_grad(q, p)
                                         : losses::ce_logit_grad(q, p);
            d_logits *= 1.0 / static_cast<double>(x.rows());
            log.loss_st = symmetric_ ? losses::symmetric_cross_entropy(q, p)
                                     : losses::cross_entropy(q, p);

            pair_.student.backward(student_trace, d_logits);
            pair_.student.sgd_step(cfg_.lr * lr_scale, cfg_.momentum);
            ema_update(pair_, cfg_.alpha);
            ++log.updates;
            if (u == 0 || cfg_.predict_after_updates)
                log.predictions = argmax_rows(teacher_trace.logits);
        }
        log.ema_distance = pair_.student.param_distance(pair_.teacher);
        return log;
    }

    void warm_up(const Matrix& x_source, std::size_t batch_size, double lr_peak,
                 Rng& rng) override {
        const std::size_t steps = (x_source.rows() + batch_size - 1) / batch_size;
        warmup(pair_, x_source, batch_size, steps, lr_peak, cfg_.momentum, cfg_.alpha, rng);
    }

    const char* name() const override { return symmetric_ ? "mt_sce" : "mt_ce"; }

private:
    BnMode teacher_mode() const {
        return cfg_.teacher_bn_recompute ? BnMode::Recompute : BnMode::Eval;
    }

    AdapterConfig cfg_;
    ModelPair pair_;
    bool symmetric_;
};

class RmtAdapter final : public Adapter {
public:
    RmtAdapter(const AdapterConfig& cfg, const Network& source_model, const PrototypeBank& bank,
               const Dataset* source_data)
        : cfg_(cfg), pair_(make_model_pair(source_model, cfg.teacher_bn_recompute)), bank_(bank),
          rng_(cfg.seed) {
        if (!cfg.source_free()) {
            if (!source_data) throw StateError("rmt with replay needs the source set");
            replay_ = ReplayBuffer(*source_data, cfg.replay_fraction,
                                   derive_seed(cfg.seed, 0x7265706cULL));
        }
    }

    std::vector<int> predict(const Matrix& x) override {
        Matrix logits = pair_.student.forward(x, BnMode::Recompute).logits;
        logits += pair_.teacher.forward(x, teacher_mode()).logits;
        return argmax_rows(logits);
    }

    StepLog adapt(const Matrix& x, double lr_scale) override {
        const std::size_t n = x.rows();
        if (n == 0) throw EmptyBatchError("rmt adapt on empty batch");
        StepLog log;
        for (int u = 0; u < cfg_.updates; ++u) {
            // Fresh augmentation on every update.
            Matrix x_aug = augment(x, cfg_.augment_strength, rng_);

            ForwardTrace trace_clean = pair_.student.forward(x, BnMode::Recompute);
            ForwardTrace trace_aug = pair_.student.forward(x_aug, BnMode::Recompute);
            ForwardTrace trace_teacher = pair_.teacher.forward(x, teacher_mode());

            Matrix q = losses::softmax(trace_teacher.logits);  // fixed target, no gradient
            Matrix p = losses::softmax(trace_clean.logits);
            Matrix p_aug = losses::softmax(trace_aug.logits);

            log.loss_st = losses::self_training_loss(q, p, p_aug);
            const double st_scale = 0.25 / static_cast<double>(n);
            Matrix d_clean = losses::sce_logit_grad(q, p);
            d_clean *= st_scale;
            Matrix d_aug = losses::sce_logit_grad(q, p_aug);
            d_aug *= st_scale;

            // Contrastive pull of features toward their source prototypes.
            ContrastiveBatch cb = build_contrastive_batch(pair_.student, trace_clean.features,
                                                          trace_aug.features, bank_);
            losses::ContrastiveResult cl =
                losses::contrastive_loss(cb.embeddings, cb.triples, cfg_.tau);
            log.loss_cl = cl.value;
            Matrix d_emb = cl.grad;
            d_emb *= cfg_.lambda_cl;
            Matrix d_stacked = pair_.student.project_backward(cb.proj_trace, d_emb);
            // Rows 3i / 3i+1 / 3i+2 hold the clean, augmented, and prototype
            // member of triple i; prototype features are constants.
            Matrix d_feat_clean(n, d_stacked.cols());
            Matrix d_feat_aug(n, d_stacked.cols());
            for (std::size_t i = 0; i < n; ++i) {
                std::copy(d_stacked.row_ptr(3 * i), d_stacked.row_ptr(3 * i) + d_stacked.cols(),
                          d_feat_clean.row_ptr(i));
                std::copy(d_stacked.row_ptr(3 * i + 1),
                          d_stacked.row_ptr(3 * i + 1) + d_stacked.cols(), d_feat_aug.row_ptr(i));
            }

            if (!cfg_.source_free()) {
                Matrix xs;
                std::vector<int> ys;
                replay_.sample(n, rng_, xs, ys);
                ForwardTrace trace_src = pair_.student.forward(xs, BnMode::Recompute);
                Matrix ps = losses::softmax(trace_src.logits);
                log.loss_ce_s = losses::label_cross_entropy(ps, ys);
                Matrix d_src = losses::label_ce_logit_grad(ps, ys);
                d_src *= cfg_.lambda_ce / static_cast<double>(n);
                pair_.student.backward(trace_src, d_src);
            }

            pair_.student.backward(trace_clean, d_clean, d_feat_clean);
            pair_.student.backward(trace_aug, d_aug, d_feat_aug);
            pair_.student.sgd_step(cfg_.lr * lr_scale, cfg_.momentum);
            ema_update(pair_, cfg_.alpha);
            ++log.updates;

            if (u == 0 || cfg_.predict_after_updates) {
                Matrix ensemble = trace_clean.logits;
                ensemble += trace_teacher.logits;
                log.predictions = argmax_rows(ensemble);
            }
        }
        log.ema_distance = pair_.student.param_distance(pair_.teacher);
        return log;
    }

    void warm_up(const Matrix& x_source, std::size_t batch_size, double lr_peak,
                 Rng& rng) override {
        const std::size_t steps = (x_source.rows() + batch_size - 1) / batch_size;
        warmup(pair_, x_source, batch_size, steps, lr_peak, cfg_.momentum, cfg_.alpha, rng);
    }

    std::size_t replay_draws() const override { return replay_.draw_count(); }
    const char* name() const override { return "rmt"; }

private:
    BnMode teacher_mode() const {
        return cfg_.teacher_bn_recompute ? BnMode::Recompute : BnMode::Eval;
    }

    AdapterConfig cfg_;
    ModelPair pair_;
    PrototypeBank bank_;
    ReplayBuffer replay_;
    Rng rng_;
};

}  // namespace

std::unique_ptr<Adapter> make_adapter(const AdapterConfig& cfg, const Network& source_model,
                                      const PrototypeBank* bank, const Dataset* source_data) {
    cfg.validate();
    switch (cfg.method) {
        case Method::SourceOnly:
            return std::make_unique<SourceOnlyAdapter>(source_model);
        case Method::Bn1:
            return std::make_unique<Bn1Adapter>(source_model);
        case Method::Tent:
            return std::make_unique<TentAdapter>(cfg, source_model);
        case Method::MtCe:
            return std::make_unique<MtAdapter>(cfg, source_model, false);
        case Method::MtSce:
            return std::make_unique<MtAdapter>(cfg, source_model, true);
        case Method::Rmt:
            if (!bank) throw StateError("rmt needs a prototype bank");
            return std::make_unique<RmtAdapter>(cfg, source_model, *bank, source_data);
    }
    throw DomainError("unknown method");
}

WindowRunner::WindowRunner(std::unique_ptr<Adapter> inner, int window, int original_batch_size)
    : inner_(std::move(inner)), window_(static_cast<std::size_t>(window)) {
    if (window < 2) throw ConfigError("window must be >= 2");
    if (original_batch_size < 1) throw ConfigError("original_batch_size must be >= 1");
    lr_scale_ = static_cast<double>(window) / static_cast<double>(original_batch_size);
}

int WindowRunner::push(const double* features, std::size_t dim) {
    buffer_.emplace_back(features, features + dim);
    if (buffer_.size() > window_) buffer_.pop_front();
    ++pushes_;

    Matrix batch(buffer_.size(), dim);
    for (std::size_t i = 0; i < buffer_.size(); ++i) batch.set_row(i, buffer_[i]);

    // Predict first, then (on every window-th sample) adapt on the buffer.
    const std::vector<int> preds = inner_->predict(batch);
    const int prediction = preds.back();
    if (pushes_ % window_ == 0) last_log_ = inner_->adapt(batch, lr_scale_);
    return prediction;
}

}  // namespace ttalab
