#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "ttalab/common.hpp"
#include "ttalab/losses.hpp"
#include "ttalab/network.hpp"

using namespace ttalab;

namespace {

NetworkConfig small_config(std::uint64_t seed, Activation act = Activation::Tanh,
                           bool batch_norm = true) {
    NetworkConfig cfg;
    cfg.input_dim = 5;
    cfg.hidden = {7, 6};
    cfg.classes = 4;
    cfg.activation = act;
    cfg.batch_norm = batch_norm;
    cfg.proj_dim = 3;
    cfg.seed = seed;
    return cfg;
}

Matrix random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) x(i, j) = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("construction validates the architecture") {
    NetworkConfig cfg = small_config(1);
    cfg.hidden = {};
    CHECK_THROWS_AS(Network{cfg}, ArchitectureError);
    cfg = small_config(1);
    cfg.classes = 1;
    CHECK_THROWS_AS(Network{cfg}, ArchitectureError);
    cfg = small_config(1);
    cfg.input_dim = 0;
    CHECK_THROWS_AS(Network{cfg}, ArchitectureError);
    cfg = small_config(1);
    cfg.hidden = {8, 0};
    CHECK_THROWS_AS(Network{cfg}, ArchitectureError);
    cfg = small_config(1);
    cfg.proj_dim = -1;
    CHECK_THROWS_AS(Network{cfg}, ArchitectureError);
}

TEST_CASE("projection head dimension defaults to min(feature_dim, 32)") {
    NetworkConfig cfg = small_config(1);
    cfg.proj_dim = 0;
    cfg.hidden = {6};
    CHECK(Network{cfg}.proj_dim() == 6);
    cfg.hidden = {64};
    CHECK(Network{cfg}.proj_dim() == 32);
    cfg.proj_dim = 5;
    CHECK(Network{cfg}.proj_dim() == 5);
}

TEST_CASE("initialisation is seeded and He-uniform bounded") {
    Network a(small_config(3));
    Network b(small_config(3));
    Network c(small_config(4));
    CHECK(a.param_distance(b) == 0.0);
    CHECK(a.param_distance(c) > 0.0);

    // Weight entries stay inside +-sqrt(6 / fan_in); biases start at zero.
    const double bound = std::sqrt(6.0 / 5.0) + 1e-12;
    bool saw_nonzero = false;
    bool saw_enc_bias = false;
    for (const auto& blk : a.param_blocks()) {
        if (blk.name == "enc0.weight") {
            for (std::size_t i = 0; i < blk.n; ++i) {
                CHECK(std::abs(blk.value[i]) <= bound);
                if (blk.value[i] != 0.0) saw_nonzero = true;
            }
        }
        if (blk.name == "enc0.bias") saw_enc_bias = true;
        if (blk.name == "cls.bias")
            for (std::size_t i = 0; i < blk.n; ++i) CHECK(blk.value[i] == 0.0);
    }
    CHECK(saw_nonzero);
    // Encoder affines feeding batch norm carry no bias; without batch norm they do.
    CHECK_FALSE(saw_enc_bias);
    NetworkConfig plain = small_config(3);
    plain.batch_norm = false;
    Network d(plain);
    bool plain_enc_bias = false;
    for (const auto& blk : d.param_blocks())
        if (blk.name == "enc0.bias") plain_enc_bias = true;
    CHECK(plain_enc_bias);
}

TEST_CASE("forward validates state and shapes") {
    Network empty;
    Matrix x = random_batch(2, 5, 9);
    CHECK_THROWS_AS(empty.forward(x, BnMode::Eval), StateError);

    Network net(small_config(5));
    CHECK_THROWS_AS(net.forward(Matrix(), BnMode::Eval), EmptyBatchError);
    CHECK_THROWS_AS(net.forward(random_batch(2, 4, 9), BnMode::Eval), ShapeError);

    ForwardTrace t = net.forward(x, BnMode::Eval);
    CHECK(t.valid);
    CHECK(t.features.rows() == 2);
    CHECK(t.features.cols() == 6);
    CHECK(t.logits.cols() == 4);
    CHECK(t.proj.cols() == 3);
}

TEST_CASE("eval forwards are pure and repeatable") {
    Network net(small_config(6));
    Matrix x = random_batch(4, 5, 10);
    ForwardTrace t1 = net.forward(x, BnMode::Eval);
    ForwardTrace t2 = net.forward(x, BnMode::Eval);
    for (std::size_t i = 0; i < t1.logits.rows(); ++i)
        for (std::size_t j = 0; j < t1.logits.cols(); ++j)
            CHECK(t1.logits(i, j) == t2.logits(i, j));
}

TEST_CASE("train mode blends batch statistics into running statistics") {
    Network net(small_config(7));
    Matrix x = random_batch(8, 5, 11);

    // Fresh BN starts at running mean 0, running var 1.
    auto stats0 = net.stat_blocks();
    for (std::size_t i = 0; i < stats0[0].second; ++i) CHECK(stats0[0].first[i] == 0.0);
    for (std::size_t i = 0; i < stats0[1].second; ++i) CHECK(stats0[1].first[i] == 1.0);

    ForwardTrace t = net.forward(x, BnMode::Train);
    (void)t;
    // After one train step: running = 0.9 * init + 0.1 * batch, so the mean
    // moved away from zero for at least one dimension.
    bool moved = false;
    for (std::size_t i = 0; i < stats0[0].second; ++i)
        if (stats0[0].first[i] != 0.0) moved = true;
    CHECK(moved);
}

TEST_CASE("recompute mode uses batch statistics without touching state") {
    Network net(small_config(8));
    Matrix x = random_batch(8, 5, 12);
    Matrix x2 = random_batch(8, 5, 13);

    ForwardTrace eval_before = net.forward(x, BnMode::Eval);
    ForwardTrace rec1 = net.forward(x2, BnMode::Recompute);
    ForwardTrace eval_after = net.forward(x, BnMode::Eval);

    // Recompute differs from Eval on shifted data but leaves no trace.
    bool differs = false;
    ForwardTrace eval_x2 = net.forward(x2, BnMode::Eval);
    for (std::size_t i = 0; i < rec1.logits.rows(); ++i)
        for (std::size_t j = 0; j < rec1.logits.cols(); ++j) {
            if (rec1.logits(i, j) != eval_x2.logits(i, j)) differs = true;
            CHECK(eval_before.logits(i, j) == eval_after.logits(i, j));
        }
    CHECK(differs);
}

TEST_CASE("single-row batches fall back to running statistics") {
    Network net(small_config(9));
    // Move the running stats off their initial values first.
    (void)net.forward(random_batch(8, 5, 14), BnMode::Train);
    auto stats = net.stat_blocks();
    std::vector<double> before;
    for (const auto& [ptr, n] : stats) before.insert(before.end(), ptr, ptr + n);

    Matrix one = random_batch(1, 5, 15);
    ForwardTrace train1 = net.forward(one, BnMode::Train);
    ForwardTrace eval1 = net.forward(one, BnMode::Eval);
    for (std::size_t j = 0; j < train1.logits.cols(); ++j)
        CHECK(train1.logits(0, j) == eval1.logits(0, j));

    // And the single-row pass must not update the running statistics.
    std::vector<double> after;
    for (const auto& [ptr, n] : stats) after.insert(after.end(), ptr, ptr + n);
    CHECK(before == after);
}

TEST_CASE("backward needs a valid trace and matching shapes") {
    Network net(small_config(10));
    Matrix x = random_batch(3, 5, 16);
    ForwardTrace t = net.forward(x, BnMode::Train);
    CHECK_THROWS_AS(net.backward(ForwardTrace{}, Matrix(3, 4)), StateError);
    CHECK_THROWS_AS(net.backward(t, Matrix(3, 3)), ShapeError);
    CHECK_THROWS_AS(net.backward(t, Matrix(3, 4), Matrix(3, 5)), ShapeError);
    net.backward(t, Matrix(3, 4, 0.1));
}

namespace {

// Mean label cross entropy of the net on a fixed batch, as a pure function
// of the parameters, for finite-difference checks.
std::function<double(Network&)> ce_loss_fn(const Matrix& x, const std::vector<int>& y,
                                           BnMode mode) {
    return [&x, &y, mode](Network& net) {
        ForwardTrace t = net.forward(x, mode);
        return losses::label_cross_entropy(losses::softmax(t.logits), y);
    };
}

}  // namespace

TEST_CASE("backward matches finite differences through batch norm") {
    for (std::uint64_t seed : {21, 22, 23}) {
        Network net(small_config(seed));
        Matrix x = random_batch(4, 5, 100 + seed);
        std::vector<int> y = {0, 1, 2, 3};

        ForwardTrace t = net.forward(x, BnMode::Train);
        Matrix p = losses::softmax(t.logits);
        Matrix d = losses::label_ce_logit_grad(p, y);
        d *= 1.0 / 4.0;
        net.zero_grads();
        net.backward(t, d);

        const double err = finite_diff_check(net, ce_loss_fn(x, y, BnMode::Train), 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("backward matches finite differences without batch norm") {
    Network net(small_config(24, Activation::Tanh, false));
    Matrix x = random_batch(4, 5, 124);
    std::vector<int> y = {1, 0, 3, 2};

    ForwardTrace t = net.forward(x, BnMode::Train);
    Matrix p = losses::softmax(t.logits);
    Matrix d = losses::label_ce_logit_grad(p, y);
    d *= 1.0 / 4.0;
    net.zero_grads();
    net.backward(t, d);

    CHECK(finite_diff_check(net, ce_loss_fn(x, y, BnMode::Train), 1e-5) < 1e-4);
}

TEST_CASE("projection head backward matches finite differences") {
    Network net(small_config(25));
    Matrix x = random_batch(4, 5, 125);

    // Loss: sum of squared projection outputs through a Recompute forward.
    auto loss_fn = [&x](Network& net_ref) {
        ForwardTrace t = net_ref.forward(x, BnMode::Recompute);
        double s = 0.0;
        for (std::size_t i = 0; i < t.proj.rows(); ++i)
            for (std::size_t j = 0; j < t.proj.cols(); ++j) s += t.proj(i, j) * t.proj(i, j);
        return 0.5 * s;
    };

    ForwardTrace t = net.forward(x, BnMode::Recompute);
    ProjTrace pt = net.project(t.features);
    Matrix d_feat = net.project_backward(pt, pt.out);
    net.zero_grads();
    // No classifier-path gradient; everything arrives through the features.
    net.backward(t, Matrix(4, 4, 0.0), d_feat);
    // project() gradients were zeroed above, so recompute them.
    ProjTrace pt2 = net.project(t.features);
    (void)net.project_backward(pt2, pt2.out);

    CHECK(finite_diff_check(net, loss_fn, 1e-5) < 1e-4);
}

TEST_CASE("gradients accumulate across backward calls") {
    Network net(small_config(26));
    Matrix x = random_batch(3, 5, 126);
    std::vector<int> y = {0, 1, 2};

    ForwardTrace t1 = net.forward(x, BnMode::Train);
    Matrix d1 = losses::label_ce_logit_grad(losses::softmax(t1.logits), y);
    net.zero_grads();
    net.backward(t1, d1);
    std::vector<double> once;
    for (const auto& blk : net.param_blocks()) once.insert(once.end(), blk.grad, blk.grad + blk.n);

    net.zero_grads();
    ForwardTrace t2 = net.forward(x, BnMode::Train);
    net.backward(t2, d1);
    net.backward(t2, d1);
    std::size_t k = 0;
    for (const auto& blk : net.param_blocks())
        for (std::size_t i = 0; i < blk.n; ++i, ++k)
            CHECK(blk.grad[i] == doctest::Approx(2.0 * once[k]).epsilon(1e-12));
}

TEST_CASE("sgd_step applies momentum and clears gradients") {
    Network net(small_config(27));
    auto blocks = net.param_blocks();
    // Plant a known gradient on one scalar and watch two steps.
    double* w = blocks[0].value;
    double* g = blocks[0].grad;
    const double w0 = *w;
    *g = 2.0;
    net.sgd_step(0.1, 0.5);
    CHECK(*w == doctest::Approx(w0 - 0.1 * 2.0).epsilon(1e-15));
    CHECK(*g == 0.0);
    CHECK(net.sgd_step_count() == 1);

    // Velocity persists: with zero fresh gradient the second step still moves.
    net.sgd_step(0.1, 0.5);
    CHECK(*w == doctest::Approx(w0 - 0.2 - 0.1 * 0.5 * 2.0).epsilon(1e-14));

    CHECK_THROWS_AS(net.sgd_step(-0.1, 0.5), ConfigError);
    CHECK_THROWS_AS(net.sgd_step(0.1, 1.0), ConfigError);
}

TEST_CASE("sgd_step_bn_only freezes everything except batch norm") {
    Network net(small_config(28));
    Matrix x = random_batch(4, 5, 128);
    std::vector<int> y = {0, 1, 2, 3};
    ForwardTrace t = net.forward(x, BnMode::Train);
    net.zero_grads();
    net.backward(t, losses::label_ce_logit_grad(losses::softmax(t.logits), y));

    std::vector<double> non_bn_before;
    for (const auto& blk : net.param_blocks())
        if (!blk.is_bn) non_bn_before.insert(non_bn_before.end(), blk.value, blk.value + blk.n);

    net.sgd_step_bn_only(0.05, 0.9);

    std::vector<double> non_bn_after;
    bool bn_moved = false;
    for (const auto& blk : net.param_blocks()) {
        if (!blk.is_bn)
            non_bn_after.insert(non_bn_after.end(), blk.value, blk.value + blk.n);
        else
            for (std::size_t i = 0; i < blk.n; ++i)
                if (blk.value[i] != (blk.name.find("gamma") != std::string::npos ? 1.0 : 0.0))
                    bn_moved = true;
    }
    CHECK(non_bn_before == non_bn_after);
    CHECK(bn_moved);
}

TEST_CASE("ema_from contracts the parameter gap geometrically") {
    Network student(small_config(29));
    Network teacher(small_config(30));
    const double alpha = 0.95;
    const double initial = teacher.param_distance(student);
    REQUIRE(initial > 0.0);

    teacher.ema_from(student, alpha);
    CHECK(teacher.param_distance(student) == doctest::Approx(alpha * initial).epsilon(1e-10));
    for (int k = 2; k <= 20; ++k) teacher.ema_from(student, alpha);
    CHECK(teacher.param_distance(student) ==
          doctest::Approx(std::pow(alpha, 20) * initial).epsilon(1e-9));

    CHECK_THROWS_AS(teacher.ema_from(student, -0.1), ConfigError);
    CHECK_THROWS_AS(teacher.ema_from(student, 1.5), ConfigError);
    Network other_shape{[] {
        NetworkConfig c = small_config(31);
        c.hidden = {9};
        return c;
    }()};
    CHECK_THROWS_AS(teacher.ema_from(other_shape, 0.5), ArchitectureError);
}

TEST_CASE("ema_from blends batch norm running statistics too") {
    Network student(small_config(32));
    Network teacher = student;
    // Push the student's running stats away from initialisation.
    (void)student.forward(random_batch(16, 5, 132), BnMode::Train);

    teacher.ema_from(student, 0.5);
    auto t_stats = teacher.stat_views();
    auto s_stats = student.stat_views();
    bool stats_moved = false;
    for (std::size_t b = 0; b < t_stats.size(); ++b)
        for (std::size_t i = 0; i < t_stats[b].second; ++i) {
            const double init = (b % 2 == 0) ? 0.0 : 1.0;  // mean blocks, then var blocks
            const double expect = 0.5 * init + 0.5 * s_stats[b].first[i];
            CHECK(t_stats[b].first[i] == doctest::Approx(expect).epsilon(1e-12));
            if (t_stats[b].first[i] != init) stats_moved = true;
        }
    CHECK(stats_moved);
}

TEST_CASE("finite_diff_check validates epsilon") {
    Network net(small_config(33));
    CHECK_THROWS_AS(finite_diff_check(
                        net, [](Network&) { return 0.0; }, 0.0),
                    ConfigError);
}
