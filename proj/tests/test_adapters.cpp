#include "doctest.h"

#include <cmath>
#include <set>

#include "ttalab/adapters.hpp"
#include "ttalab/harness.hpp"

using namespace ttalab;

namespace {

DatasetSpec adapter_spec() {
    DatasetSpec spec;
    spec.classes = 3;
    spec.dim = 6;
    spec.samples_per_class = 60;
    spec.sigma = 0.5;
    spec.mean_radius = 2.5;
    return spec;
}

// One trained source model shared by the cases; the fixture keeps runtime
// down and every test copies it before adapting.
struct SourceFixture {
    DatasetSpec spec = adapter_spec();
    Dataset data;
    Network net;
    PrototypeBank bank;

    SourceFixture() {
        data = generate_source(spec, 301);
        NetworkConfig cfg;
        cfg.input_dim = spec.dim;
        cfg.hidden = {16};
        cfg.classes = spec.classes;
        cfg.activation = Activation::ReLU;
        cfg.batch_norm = true;
        cfg.proj_dim = 8;
        cfg.seed = 302;
        net = Network(cfg);
        Rng rng(303);
        pretrain(net, data.x, data.y, 8, 32, 0.05, 0.9, rng);
        bank = extract_prototypes(net, data.x, data.y, spec.classes);
    }
};

const SourceFixture& fixture() {
    static SourceFixture f;
    return f;
}

AdapterConfig base_config(Method method) {
    AdapterConfig cfg;
    cfg.method = method;
    cfg.lr = 0.01;
    cfg.seed = 304;
    return cfg;
}

Matrix corrupted_batch(std::size_t n, std::uint64_t seed) {
    const SourceFixture& f = fixture();
    ClusterModel model(f.spec, 301);
    Rng rng(seed);
    Matrix x;
    std::vector<int> y;
    model.sample(n, rng, x, y);
    return corrupt(x, {CorruptionKind::GaussianNoise, 3}, rng);
}

}  // namespace

TEST_CASE("method names round trip") {
    for (Method m : {Method::SourceOnly, Method::Bn1, Method::Tent, Method::MtCe, Method::MtSce,
                     Method::Rmt})
        CHECK(method_from_name(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_name("cotta"), ConfigError);
}

TEST_CASE("adapter config validation") {
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.updates = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.alpha = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.lambda_cl = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.replay_fraction = 1.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.augment_strength = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.window = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config(Method::Rmt);
    cfg.original_batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    base_config(Method::Rmt).validate();
}

TEST_CASE("replay buffer subsamples the source set") {
    const SourceFixture& f = fixture();
    const std::size_t n = f.data.x.rows();

    ReplayBuffer full(f.data, 1.0, 11);
    CHECK(full.size() == n);
    ReplayBuffer one_percent(f.data, 0.01, 11);
    CHECK(one_percent.size() == std::max<std::size_t>(1, n / 100));
    ReplayBuffer tiny(f.data, 1e-9, 11);
    CHECK(tiny.size() == 1);

    ReplayBuffer none(f.data, 0.0, 11);
    CHECK(none.empty());
    Rng rng(12);
    Matrix x;
    std::vector<int> y;
    CHECK_THROWS_AS(none.sample(4, rng, x, y), StateError);
    CHECK_THROWS_AS(ReplayBuffer(f.data, -0.1, 11), ConfigError);
    Dataset empty;
    CHECK_THROWS_AS(ReplayBuffer(empty, 0.5, 11), EmptyBatchError);
}

TEST_CASE("replay samples come from the buffer and count draws") {
    const SourceFixture& f = fixture();
    ReplayBuffer buf(f.data, 0.25, 13);
    CHECK(buf.draw_count() == 0);

    Rng rng(14);
    Matrix x;
    std::vector<int> y;
    buf.sample(10, rng, x, y);
    CHECK(buf.draw_count() == 10);
    buf.sample(5, rng, x, y);
    CHECK(buf.draw_count() == 15);
    CHECK_THROWS_AS(buf.sample(0, rng, x, y), EmptyBatchError);

    // Every sampled row must be one of the original source rows, labels
    // attached to the right features.
    buf.sample(20, rng, x, y);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        bool found = false;
        for (std::size_t s = 0; s < f.data.x.rows() && !found; ++s) {
            if (f.data.y[s] != y[i]) continue;
            bool same = true;
            for (std::size_t j = 0; j < x.cols(); ++j)
                if (x(i, j) != f.data.x(s, j)) {
                    same = false;
                    break;
                }
            found = same;
        }
        CHECK(found);
    }

    // The buffer itself never mutates: identical generator, identical batch.
    Rng r1(15);
    Rng r2(15);
    Matrix a;
    Matrix b;
    std::vector<int> ya;
    std::vector<int> yb;
    buf.sample(8, r1, a, ya);
    buf.sample(8, r2, b, yb);
    CHECK(ya == yb);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) CHECK(a(i, j) == b(i, j));
}

TEST_CASE("source_only never adapts") {
    const SourceFixture& f = fixture();
    auto adapter = make_adapter(base_config(Method::SourceOnly), f.net, nullptr, nullptr);
    CHECK(std::string(adapter->name()) == "source_only");

    Matrix x = corrupted_batch(16, 401);
    std::vector<int> before = adapter->predict(x);
    StepLog log = adapter->adapt(x);
    CHECK(log.predictions == before);
    CHECK(log.updates == 0);
    CHECK(log.loss_st == 0.0);
    CHECK(adapter->adapt(x).predictions == before);

    // Predictions are the frozen source model's eval argmax.
    Network copy = f.net;
    ForwardTrace t = copy.forward(x, BnMode::Eval);
    for (std::size_t i = 0; i < x.rows(); ++i)
        CHECK(before[i] == static_cast<int>(argmax_row(t.logits, i)));
}

TEST_CASE("bn1 recomputes statistics statelessly") {
    const SourceFixture& f = fixture();
    auto adapter = make_adapter(base_config(Method::Bn1), f.net, nullptr, nullptr);
    CHECK(std::string(adapter->name()) == "bn1");

    Matrix x = corrupted_batch(16, 402);
    std::vector<int> first = adapter->adapt(x).predictions;
    std::vector<int> second = adapter->adapt(x).predictions;
    CHECK(first == second);

    Network copy = f.net;
    ForwardTrace t = copy.forward(x, BnMode::Recompute);
    for (std::size_t i = 0; i < x.rows(); ++i)
        CHECK(first[i] == static_cast<int>(argmax_row(t.logits, i)));
}

TEST_CASE("tent minimises entropy over batch norm parameters only") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Tent);
    cfg.lr = 0.05;
    cfg.updates = 2;
    auto adapter = make_adapter(cfg, f.net, nullptr, nullptr);
    CHECK(std::string(adapter->name()) == "tent");

    Matrix x = corrupted_batch(32, 403);
    StepLog log = adapter->adapt(x);
    CHECK(log.updates == 2);
    CHECK(log.loss_st > 0.0);

    // Adapting moved gamma/beta, so repeating the same batch shifts logits.
    StepLog again = adapter->adapt(x);
    CHECK(again.loss_st < log.loss_st);
}

TEST_CASE("tent without batch norm degenerates to a no-op") {
    const SourceFixture& f = fixture();
    NetworkConfig cfg;
    cfg.input_dim = f.spec.dim;
    cfg.hidden = {16};
    cfg.classes = f.spec.classes;
    cfg.batch_norm = false;
    cfg.seed = 404;
    Network plain(cfg);

    AdapterConfig acfg = base_config(Method::Tent);
    acfg.lr = 0.5;
    auto adapter = make_adapter(acfg, plain, nullptr, nullptr);
    Matrix x = corrupted_batch(16, 405);
    std::vector<int> first = adapter->adapt(x).predictions;
    std::vector<int> second = adapter->adapt(x).predictions;
    CHECK(first == second);
}

TEST_CASE("tent with zero learning rate matches bn1 predictions") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Tent);
    cfg.lr = 0.0;
    auto tent = make_adapter(cfg, f.net, nullptr, nullptr);
    auto bn1 = make_adapter(base_config(Method::Bn1), f.net, nullptr, nullptr);

    Matrix x = corrupted_batch(16, 406);
    CHECK(tent->adapt(x).predictions == bn1->adapt(x).predictions);
    CHECK(tent->adapt(x).predictions == bn1->adapt(x).predictions);
}

TEST_CASE("mean teacher with cross entropy sits still at exact agreement") {
    // Teacher equals student at t=0 and both forward with batch statistics,
    // so q = p and the cross-entropy logit gradient vanishes identically.
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::MtCe);
    cfg.lr = 0.5;
    auto adapter = make_adapter(cfg, f.net, nullptr, nullptr);
    CHECK(std::string(adapter->name()) == "mt_ce");

    Matrix x = corrupted_batch(16, 407);
    std::vector<int> before = adapter->predict(x);
    for (int i = 0; i < 3; ++i) {
        StepLog log = adapter->adapt(x);
        CHECK(log.predictions == before);
        CHECK(log.ema_distance == 0.0);
        CHECK(log.updates == 1);
    }
}

TEST_CASE("mean teacher with symmetric loss moves even at agreement") {
    // The reverse term pushes toward higher confidence although q = p.
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::MtSce);
    cfg.lr = 0.05;
    cfg.alpha = 0.9;
    auto adapter = make_adapter(cfg, f.net, nullptr, nullptr);
    CHECK(std::string(adapter->name()) == "mt_sce");

    Matrix x = corrupted_batch(16, 408);
    StepLog log = adapter->adapt(x);
    CHECK(log.loss_st > 0.0);
    CHECK(log.ema_distance > 0.0);
}

TEST_CASE("predict_after_updates false reports the pre-update prediction") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::MtSce);
    cfg.lr = 0.1;
    cfg.updates = 3;
    cfg.predict_after_updates = false;
    auto adapter = make_adapter(cfg, f.net, nullptr, nullptr);

    Matrix x = corrupted_batch(16, 409);
    std::vector<int> before = adapter->predict(x);
    StepLog log = adapter->adapt(x);
    CHECK(log.predictions == before);
    CHECK(log.updates == 3);
}

TEST_CASE("rmt requires a bank, and source data unless source-free") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    CHECK_THROWS_AS(make_adapter(cfg, f.net, nullptr, &f.data), StateError);
    CHECK_THROWS_AS(make_adapter(cfg, f.net, &f.bank, nullptr), StateError);

    cfg.replay_fraction = 0.0;
    CHECK(cfg.source_free());
    auto adapter = make_adapter(cfg, f.net, &f.bank, nullptr);
    CHECK(std::string(adapter->name()) == "rmt");
}

TEST_CASE("rmt with zero learning rate emits the frozen ensemble prediction") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.lr = 0.0;
    auto adapter = make_adapter(cfg, f.net, &f.bank, &f.data);

    Matrix x = corrupted_batch(16, 410);
    std::vector<int> before = adapter->predict(x);
    StepLog log = adapter->adapt(x);
    CHECK(log.predictions == before);
    CHECK(log.loss_st > 0.0);
    CHECK(log.loss_cl > 0.0);
    CHECK(log.loss_ce_s > 0.0);
    CHECK(log.ema_distance == 0.0);
    // Still frozen on the next batch.
    Matrix x2 = corrupted_batch(16, 411);
    CHECK(adapter->adapt(x2).predictions == adapter->predict(x2));
}

TEST_CASE("source-free rmt never touches replay and drops the source term") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.replay_fraction = 0.0;
    auto adapter = make_adapter(cfg, f.net, &f.bank, &f.data);

    for (int b = 0; b < 3; ++b) {
        StepLog log = adapter->adapt(corrupted_batch(16, 412 + static_cast<std::uint64_t>(b)));
        CHECK(log.loss_ce_s == 0.0);
    }
    CHECK(adapter->replay_draws() == 0);
}

TEST_CASE("rmt replay draws one source batch per update") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.updates = 2;
    auto adapter = make_adapter(cfg, f.net, &f.bank, &f.data);

    Matrix x = corrupted_batch(8, 413);
    StepLog log = adapter->adapt(x);
    CHECK(log.updates == 2);
    CHECK(adapter->replay_draws() == 16);
    adapter->adapt(x);
    CHECK(adapter->replay_draws() == 32);
}

TEST_CASE("rmt adapts the pair and reports a growing teacher gap") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.lr = 0.05;
    cfg.alpha = 0.99;
    auto adapter = make_adapter(cfg, f.net, &f.bank, &f.data);

    Matrix x = corrupted_batch(16, 414);
    StepLog log1 = adapter->adapt(x);
    CHECK(log1.ema_distance > 0.0);
    CHECK(log1.loss_st > 0.0);
    CHECK(log1.loss_cl > 0.0);
    CHECK(log1.loss_ce_s > 0.0);
    CHECK_THROWS_AS(adapter->adapt(Matrix()), EmptyBatchError);
}

TEST_CASE("rmt is deterministic for a fixed adapter seed") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.lr = 0.02;
    auto a = make_adapter(cfg, f.net, &f.bank, &f.data);
    auto b = make_adapter(cfg, f.net, &f.bank, &f.data);

    for (int step = 0; step < 3; ++step) {
        Matrix x = corrupted_batch(12, 420 + static_cast<std::uint64_t>(step));
        StepLog la = a->adapt(x);
        StepLog lb = b->adapt(x);
        CHECK(la.predictions == lb.predictions);
        CHECK(la.loss_st == lb.loss_st);
        CHECK(la.loss_cl == lb.loss_cl);
        CHECK(la.loss_ce_s == lb.loss_ce_s);
        CHECK(la.ema_distance == lb.ema_distance);
    }
}

TEST_CASE("warm-up is a no-op for methods without a teacher") {
    const SourceFixture& f = fixture();
    Matrix x = corrupted_batch(16, 430);
    for (Method m : {Method::SourceOnly, Method::Bn1, Method::Tent}) {
        auto adapter = make_adapter(base_config(m), f.net, nullptr, nullptr);
        std::vector<int> before = adapter->predict(x);
        Rng rng(31);
        adapter->warm_up(f.data.x, 32, 0.05, rng);
        CHECK(adapter->predict(x) == before);
    }
}

TEST_CASE("warm-up trains teacher methods on source data") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::Rmt);
    cfg.alpha = 0.9;
    auto warmed = make_adapter(cfg, f.net, &f.bank, &f.data);
    auto cold = make_adapter(cfg, f.net, &f.bank, &f.data);

    Rng rng(32);
    warmed->warm_up(f.data.x, 32, 0.05, rng);
    Matrix x = corrupted_batch(16, 431);

    // The warmed pair left its starting point, so the first step log of the
    // two adapters cannot agree bit for bit.
    StepLog lw = warmed->adapt(x);
    StepLog lc = cold->adapt(x);
    CHECK(lw.loss_st != lc.loss_st);
}

TEST_CASE("window runner validates its arguments") {
    const SourceFixture& f = fixture();
    CHECK_THROWS_AS(
        WindowRunner(make_adapter(base_config(Method::Bn1), f.net, nullptr, nullptr), 1, 64),
        ConfigError);
    CHECK_THROWS_AS(
        WindowRunner(make_adapter(base_config(Method::Bn1), f.net, nullptr, nullptr), 8, 0),
        ConfigError);
}

TEST_CASE("window runner predicts each sample and adapts every window-th push") {
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::MtSce);
    cfg.lr = 0.05;
    WindowRunner runner(make_adapter(cfg, f.net, nullptr, nullptr), 8, 64);

    Matrix x = corrupted_batch(24, 432);
    for (std::size_t i = 0; i < 24; ++i) {
        const int pred = runner.push(x.row_ptr(i), x.cols());
        CHECK(pred >= 0);
        CHECK(pred < f.spec.classes);
        const std::size_t expected_updates = ((i + 1) / 8) == 0 ? 0 : 1;
        CHECK(runner.last_log().updates == expected_updates);
    }
    CHECK(runner.pushes() == 24);
}

TEST_CASE("a window the size of the batch reproduces batch-mode adaptation") {
    // Pushing whole batches row by row through a window of the same size
    // funnels exactly the original batches into adapt, so the model follows
    // the same trajectory and the logged steps agree bit for bit.
    const SourceFixture& f = fixture();
    AdapterConfig cfg = base_config(Method::MtSce);
    cfg.lr = 0.05;
    cfg.original_batch_size = 12;

    auto batch_mode = make_adapter(cfg, f.net, nullptr, nullptr);
    WindowRunner window(make_adapter(cfg, f.net, nullptr, nullptr), 12, 12);

    for (int b = 0; b < 4; ++b) {
        Matrix x = corrupted_batch(12, 440 + static_cast<std::uint64_t>(b));
        StepLog expect = batch_mode->adapt(x);
        for (std::size_t i = 0; i < 12; ++i) window.push(x.row_ptr(i), x.cols());
        CHECK(window.last_log().predictions == expect.predictions);
        CHECK(window.last_log().loss_st == expect.loss_st);
        CHECK(window.last_log().ema_distance == expect.ema_distance);
    }
}
