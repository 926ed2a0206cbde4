#include "ttalab/meanteacher.hpp"

#include <algorithm>
#include <numeric>

#include "ttalab/losses.hpp"

namespace ttalab {

ModelPair make_model_pair(const Network& source_model, bool teacher_bn_recompute) {
    ModelPair pair;
    pair.student = source_model;
    pair.teacher = source_model;
    // Optimizer momentum from pretraining must not bleed into the pair's
    // own training session: a zero gradient has to mean a standstill.
    pair.student.zero_velocity();
    pair.teacher.zero_velocity();
    pair.teacher_bn_recompute = teacher_bn_recompute;
    return pair;
}

void ema_update(ModelPair& pair, double alpha) {
    pair.teacher.ema_from(pair.student, alpha);
    ++pair.step_counter;
}

Matrix ensemble_logits(ModelPair& pair, const Matrix& x, BnMode student_mode,
                       BnMode teacher_mode) {
    Matrix logits = pair.student.forward(x, student_mode).logits;
    logits += pair.teacher.forward(x, teacher_mode).logits;
    return logits;
}

Matrix ensemble_logits(ModelPair& pair, const Matrix& x) {
    return ensemble_logits(pair, x, BnMode::Recompute,
                           pair.teacher_bn_recompute ? BnMode::Recompute : BnMode::Eval);
}

WarmupReport warmup(ModelPair& pair, const Matrix& x_source, std::size_t batch_size,
                    std::size_t steps_per_epoch, double lr_peak, double momentum,
                    double alpha, Rng& rng) {
    if (x_source.rows() == 0) throw EmptyBatchError("warmup on empty source set");
    if (batch_size == 0) throw ConfigError("warmup batch_size must be >= 1");
    if (lr_peak < 0.0) throw ConfigError("warmup lr_peak must be non-negative");

    WarmupReport report;
    if (steps_per_epoch == 0) return report;

    std::vector<std::size_t> order(x_source.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(i)]);

    const std::size_t n = x_source.rows();
    const std::size_t d = x_source.cols();
    double loss_sum = 0.0;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
        const std::size_t take = std::min(batch_size, n - cursor);
        Matrix batch(take, d);
        for (std::size_t i = 0; i < take; ++i)
            std::copy(x_source.row_ptr(order[cursor + i]),
                      x_source.row_ptr(order[cursor + i]) + d, batch.row_ptr(i));
        cursor += take;
        if (cursor >= n) cursor = 0;

        ForwardTrace teacher_trace = pair.teacher.forward(batch, BnMode::Eval);
        ForwardTrace student_trace = pair.student.forward(batch, BnMode::Train);
        Matrix q = losses::softmax(teacher_trace.logits);
        Matrix p = losses::softmax(student_trace.logits);
        loss_sum += losses::symmetric_cross_entropy(q, p);

        Matrix d_logits = losses::sce_logit_grad(q, p);
        d_logits *= 1.0 / static_cast<double>(take);
        pair.student.backward(student_trace, d_logits);

        const double lr = lr_peak * static_cast<double>(step + 1) /
                          static_cast<double>(steps_per_epoch);
        pair.student.sgd_step(lr, momentum);
        ema_update(pair, alpha);
        ++report.steps;
    }
    report.mean_loss = loss_sum / static_cast<double>(report.steps);
    return report;
}

}  // namespace ttalab
