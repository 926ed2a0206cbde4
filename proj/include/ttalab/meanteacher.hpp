#pragma once

#include <cstdint>

#include "ttalab/network.hpp"

namespace ttalab {

// Student/teacher pair. The teacher starts as an exact copy of the student
// and is only ever moved by EMA blending; it is never trained directly.
struct ModelPair {
    Network student;
    Network teacher;
    // Statistics source for teacher forwards at test time: batch statistics
    // when set, running statistics otherwise.
    bool teacher_bn_recompute = true;
    std::size_t step_counter = 0;
};

ModelPair make_model_pair(const Network& source_model, bool teacher_bn_recompute = true);

// teacher <- alpha * teacher + (1 - alpha) * student, over every parameter
// and every BN running statistic. Increments the pair's step counter.
void ema_update(ModelPair& pair, double alpha);

// Student logits plus teacher logits on the same batch. Argmax over these
// with ties resolved to the lowest class index is the ensemble prediction.
Matrix ensemble_logits(ModelPair& pair, const Matrix& x, BnMode student_mode,
                       BnMode teacher_mode);
Matrix ensemble_logits(ModelPair& pair, const Matrix& x);

struct WarmupReport {
    std::size_t steps = 0;
    double mean_loss = 0.0;
};

// Offline warm-up on source data before deployment: for steps_per_epoch
// batches of batch_size (cycling through a shuffle of the set, without
// augmentation), minimise SCE(teacher, student) with the learning rate
// ramping linearly from zero up to lr_peak, stepping the student and EMA
// blending the teacher after every batch. The student runs in Train mode,
// the teacher provides targets from its running statistics.
WarmupReport warmup(ModelPair& pair, const Matrix& x_source, std::size_t batch_size,
                    std::size_t steps_per_epoch, double lr_peak, double momentum,
                    double alpha, Rng& rng);

}  // namespace ttalab
