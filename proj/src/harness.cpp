#include "ttalab/harness.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include "ttalab/losses.hpp"
#include "ttalab/meanteacher.hpp"
#include "ttalab/prototypes.hpp"

namespace ttalab {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            parts.push_back(s.substr(start));
            return parts;
        }
        parts.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

bool parse_int_value(const std::string& s, int& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    errno = 0;
    long v = std::strtol(s.c_str(), &end, 10);
    if (errno != 0 || end != s.c_str() + s.size()) return false;
    if (v < INT_MIN || v > INT_MAX) return false;
    out = static_cast<int>(v);
    return true;
}

bool parse_u64_value(const std::string& s, std::uint64_t& out) {
    if (s.empty() || s[0] == '-') return false;
    char* end = nullptr;
    errno = 0;
    unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (errno != 0 || end != s.c_str() + s.size()) return false;
    out = static_cast<std::uint64_t>(v);
    return true;
}

bool parse_double_value(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    errno = 0;
    double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return false;
    out = v;
    return true;
}

bool parse_bool_value(const std::string& s, bool& out) {
    if (s == "true") {
        out = true;
        return true;
    }
    if (s == "false") {
        out = false;
        return true;
    }
    return false;
}

bool parse_int_list(const std::string& s, std::vector<int>& out) {
    std::vector<int> parsed;
    for (const std::string& part : split(s, ',')) {
        int v = 0;
        if (!parse_int_value(trim(part), v)) return false;
        parsed.push_back(v);
    }
    if (parsed.empty()) return false;
    out = std::move(parsed);
    return true;
}

bool parse_kind_list(const std::string& s, std::vector<CorruptionKind>& out) {
    std::vector<CorruptionKind> parsed;
    for (const std::string& part : split(s, ',')) {
        try {
            parsed.push_back(kind_from_name(trim(part)));
        } catch (const ConfigError&) {
            return false;
        }
    }
    if (parsed.empty()) return false;
    out = std::move(parsed);
    return true;
}

// Empty string on success, a description of the problem otherwise. The
// parser and assign_config_key wrap the message with their own context.
std::string try_assign(RunConfig& c, const std::string& key, const std::string& value) {
    auto bad = [&](const char* expected) {
        return "invalid value '" + value + "' for " + key + " (expected " + expected + ")";
    };

    if (key == "dataset.classes")
        return parse_int_value(value, c.classes) ? "" : bad("an integer");
    if (key == "dataset.dim") return parse_int_value(value, c.dim) ? "" : bad("an integer");
    if (key == "dataset.samples_per_class")
        return parse_int_value(value, c.samples_per_class) ? "" : bad("an integer");
    if (key == "dataset.sigma") return parse_double_value(value, c.sigma) ? "" : bad("a number");
    if (key == "dataset.mean_radius")
        return parse_double_value(value, c.mean_radius) ? "" : bad("a number");
    if (key == "dataset.warp") return parse_double_value(value, c.warp) ? "" : bad("a number");
    if (key == "dataset.imbalance")
        return parse_double_value(value, c.imbalance) ? "" : bad("a number");
    if (key == "dataset.val_fraction")
        return parse_double_value(value, c.val_fraction) ? "" : bad("a number");

    if (key == "model.hidden")
        return parse_int_list(value, c.hidden) ? "" : bad("a comma list of integers");
    if (key == "model.proj_dim") return parse_int_value(value, c.proj_dim) ? "" : bad("an integer");
    if (key == "model.activation") {
        try {
            c.activation = activation_from_name(value);
            return "";
        } catch (const ConfigError&) {
            return bad("relu, tanh or identity");
        }
    }

    if (key == "stream.kinds")
        return parse_kind_list(value, c.kinds) ? "" : bad("a comma list of corruption kinds");
    if (key == "stream.order") {
        try {
            c.order = order_from_name(value);
            return "";
        } catch (const ConfigError&) {
            return bad("continual, gradual, easy_to_hard or hard_to_easy");
        }
    }
    if (key == "stream.severity")
        return parse_int_value(value, c.severity) ? "" : bad("an integer");
    if (key == "stream.batches_per_segment")
        return parse_int_value(value, c.batches_per_segment) ? "" : bad("an integer");
    if (key == "stream.batches_per_level")
        return parse_int_value(value, c.batches_per_level) ? "" : bad("an integer");
    if (key == "stream.batch_size")
        return parse_int_value(value, c.batch_size) ? "" : bad("an integer");
    if (key == "stream.probe_samples")
        return parse_int_value(value, c.probe_samples) ? "" : bad("an integer");

    if (key == "adapter.method") {
        try {
            c.method = method_from_name(value);
            return "";
        } catch (const ConfigError&) {
            return bad("a method name");
        }
    }
    if (key == "adapter.lr") return parse_double_value(value, c.lr) ? "" : bad("a number");
    if (key == "adapter.momentum")
        return parse_double_value(value, c.momentum) ? "" : bad("a number");
    if (key == "adapter.updates") return parse_int_value(value, c.updates) ? "" : bad("an integer");
    if (key == "adapter.alpha") return parse_double_value(value, c.alpha) ? "" : bad("a number");
    if (key == "adapter.tau") return parse_double_value(value, c.tau) ? "" : bad("a number");
    if (key == "adapter.lambda_cl")
        return parse_double_value(value, c.lambda_cl) ? "" : bad("a number");
    if (key == "adapter.lambda_ce")
        return parse_double_value(value, c.lambda_ce) ? "" : bad("a number");
    if (key == "adapter.replay_fraction")
        return parse_double_value(value, c.replay_fraction) ? "" : bad("a number");
    if (key == "adapter.augment_strength")
        return parse_double_value(value, c.augment_strength) ? "" : bad("a number");
    if (key == "adapter.predict_after_updates")
        return parse_bool_value(value, c.predict_after_updates) ? "" : bad("true or false");
    if (key == "adapter.teacher_bn_recompute")
        return parse_bool_value(value, c.teacher_bn_recompute) ? "" : bad("true or false");
    if (key == "adapter.window") return parse_int_value(value, c.window) ? "" : bad("an integer");

    if (key == "run.seed") return parse_u64_value(value, c.seed) ? "" : bad("a non-negative integer");
    if (key == "run.warmup") return parse_bool_value(value, c.warmup) ? "" : bad("true or false");
    if (key == "run.warmup_lr")
        return parse_double_value(value, c.warmup_lr) ? "" : bad("a number");
    if (key == "run.pretrain_epochs")
        return parse_int_value(value, c.pretrain_epochs) ? "" : bad("an integer");
    if (key == "run.pretrain_lr")
        return parse_double_value(value, c.pretrain_lr) ? "" : bad("a number");
    if (key == "run.out") {
        if (value.empty()) return bad("a path");
        c.out = value;
        return "";
    }

    return "unknown key '" + key + "'";
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

std::string join_kinds(const std::vector<CorruptionKind>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += kind_name(v[i]);
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    if (std::fwrite(text.data(), 1, text.size(), f) != text.size()) {
        std::fclose(f);
        throw IoError("short write to " + path);
    }
    std::fclose(f);
}

AdapterConfig adapter_config_from(const RunConfig& cfg, std::uint64_t adapter_seed) {
    AdapterConfig a;
    a.method = cfg.method;
    a.lr = cfg.lr;
    a.momentum = cfg.momentum;
    a.updates = cfg.updates;
    a.alpha = cfg.alpha;
    a.tau = cfg.tau;
    a.lambda_cl = cfg.lambda_cl;
    a.lambda_ce = cfg.lambda_ce;
    a.replay_fraction = cfg.replay_fraction;
    a.augment_strength = cfg.augment_strength;
    a.predict_after_updates = cfg.predict_after_updates;
    a.teacher_bn_recompute = cfg.teacher_bn_recompute;
    a.window = cfg.window;
    a.original_batch_size = cfg.batch_size;
    a.seed = adapter_seed;
    return a;
}

void validate_run_config(const RunConfig& cfg) {
    if (cfg.classes < 2) throw ConfigError("dataset.classes must be >= 2");
    if (cfg.dim < 1) throw ConfigError("dataset.dim must be >= 1");
    if (cfg.samples_per_class < 1) throw ConfigError("dataset.samples_per_class must be >= 1");
    if (!(cfg.sigma > 0.0)) throw ConfigError("dataset.sigma must be positive");
    if (cfg.mean_radius < 0.0) throw ConfigError("dataset.mean_radius must be non-negative");
    if (cfg.imbalance < 1.0) throw ConfigError("dataset.imbalance must be >= 1");
    if (cfg.val_fraction < 0.0 || cfg.val_fraction > 0.9)
        throw ConfigError("dataset.val_fraction must lie in [0, 0.9]");
    if (cfg.hidden.empty()) throw ConfigError("model.hidden must name at least one width");
    for (int w : cfg.hidden)
        if (w < 1) throw ConfigError("model.hidden widths must be >= 1");
    if (cfg.proj_dim < 0) throw ConfigError("model.proj_dim must be >= 0");
    if (cfg.kinds.empty()) throw ConfigError("stream.kinds must name at least one corruption");
    if (cfg.severity < 1 || cfg.severity > 5)
        throw ConfigError("stream.severity must lie in 1..5");
    if (cfg.batches_per_segment < 1)
        throw ConfigError("stream.batches_per_segment must be >= 1");
    if (cfg.batches_per_level < 1) throw ConfigError("stream.batches_per_level must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("stream.batch_size must be >= 1");
    if (cfg.probe_samples < 1) throw ConfigError("stream.probe_samples must be >= 1");
    if (cfg.pretrain_epochs < 0) throw ConfigError("run.pretrain_epochs must be >= 0");
    if (cfg.pretrain_lr < 0.0) throw ConfigError("run.pretrain_lr must be non-negative");
    if (cfg.warmup_lr < 0.0) throw ConfigError("run.warmup_lr must be non-negative");
    if (cfg.out.empty()) throw ConfigError("run.out must not be empty");
    adapter_config_from(cfg, 0).validate();
}

Dataset slice_dataset(const Dataset& src, std::size_t begin, std::size_t end) {
    Dataset out;
    out.classes = src.classes;
    out.x = Matrix(end - begin, src.x.cols());
    out.y.assign(src.y.begin() + static_cast<std::ptrdiff_t>(begin),
                 src.y.begin() + static_cast<std::ptrdiff_t>(end));
    for (std::size_t i = begin; i < end; ++i)
        out.x.set_row(i - begin, src.x.row_ptr(i), src.x.cols());
    return out;
}

// Sub-seed tags, ASCII for readability in a debugger.
constexpr std::uint64_t kDataTag = 0x64617461ULL;
constexpr std::uint64_t kInitTag = 0x696e6974ULL;
constexpr std::uint64_t kPretrainTag = 0x70726574ULL;
constexpr std::uint64_t kWarmupTag = 0x7761726dULL;
constexpr std::uint64_t kStreamTag = 0x73747265ULL;
constexpr std::uint64_t kAdapterTag = 0x61646170ULL;

}  // namespace

const char* order_name(StreamOrder order) {
    switch (order) {
        case StreamOrder::Continual: return "continual";
        case StreamOrder::Gradual: return "gradual";
        case StreamOrder::EasyToHard: return "easy_to_hard";
        case StreamOrder::HardToEasy: return "hard_to_easy";
    }
    throw ConfigError("unknown stream order");
}

StreamOrder order_from_name(const std::string& name) {
    if (name == "continual") return StreamOrder::Continual;
    if (name == "gradual") return StreamOrder::Gradual;
    if (name == "easy_to_hard") return StreamOrder::EasyToHard;
    if (name == "hard_to_easy") return StreamOrder::HardToEasy;
    throw ConfigError("unknown stream order '" + name + "'");
}

const char* activation_name(Activation act) {
    switch (act) {
        case Activation::ReLU: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Identity: return "identity";
    }
    throw ConfigError("unknown activation");
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::ReLU;
    if (name == "tanh") return Activation::Tanh;
    if (name == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + name + "'");
}

void assign_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    std::string err = try_assign(cfg, key, value);
    if (!err.empty()) throw ConfigError(err);
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected `key = value`");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        if (!seen.insert(key).second)
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        std::string err = try_assign(cfg, key, value);
        if (!err.empty()) throw ConfigError("line " + std::to_string(line_no) + ": " + err);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string format_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string serialize_config(const RunConfig& c) {
    std::string out;
    auto kv = [&out](const char* key, const std::string& value) {
        out += key;
        out += " = ";
        out += value;
        out += '\n';
    };
    kv("dataset.classes", std::to_string(c.classes));
    kv("dataset.dim", std::to_string(c.dim));
    kv("dataset.imbalance", format_double(c.imbalance));
    kv("dataset.mean_radius", format_double(c.mean_radius));
    kv("dataset.samples_per_class", std::to_string(c.samples_per_class));
    kv("dataset.sigma", format_double(c.sigma));
    kv("dataset.val_fraction", format_double(c.val_fraction));
    kv("dataset.warp", format_double(c.warp));
    kv("model.activation", activation_name(c.activation));
    kv("model.hidden", join_ints(c.hidden));
    kv("model.proj_dim", std::to_string(c.proj_dim));
    kv("stream.batch_size", std::to_string(c.batch_size));
    kv("stream.batches_per_level", std::to_string(c.batches_per_level));
    kv("stream.batches_per_segment", std::to_string(c.batches_per_segment));
    kv("stream.kinds", join_kinds(c.kinds));
    kv("stream.order", order_name(c.order));
    kv("stream.probe_samples", std::to_string(c.probe_samples));
    kv("stream.severity", std::to_string(c.severity));
    kv("adapter.alpha", format_double(c.alpha));
    kv("adapter.augment_strength", format_double(c.augment_strength));
    kv("adapter.lambda_ce", format_double(c.lambda_ce));
    kv("adapter.lambda_cl", format_double(c.lambda_cl));
    kv("adapter.lr", format_double(c.lr));
    kv("adapter.method", method_name(c.method));
    kv("adapter.momentum", format_double(c.momentum));
    kv("adapter.predict_after_updates", c.predict_after_updates ? "true" : "false");
    kv("adapter.replay_fraction", format_double(c.replay_fraction));
    kv("adapter.tau", format_double(c.tau));
    kv("adapter.teacher_bn_recompute", c.teacher_bn_recompute ? "true" : "false");
    kv("adapter.updates", std::to_string(c.updates));
    kv("adapter.window", std::to_string(c.window));
    kv("run.out", c.out);
    kv("run.pretrain_epochs", std::to_string(c.pretrain_epochs));
    kv("run.pretrain_lr", format_double(c.pretrain_lr));
    kv("run.seed", std::to_string(c.seed));
    kv("run.warmup", c.warmup ? "true" : "false");
    kv("run.warmup_lr", format_double(c.warmup_lr));
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    const std::string text = serialize_config(cfg);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double pretrain(Network& net, const Matrix& x, const std::vector<int>& y, int epochs,
                std::size_t batch_size, double lr, double momentum, Rng& rng) {
    if (epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
    if (batch_size == 0) throw ConfigError("pretrain batch size must be >= 1");
    if (x.rows() == 0) throw EmptyBatchError("pretrain on an empty set");
    if (x.rows() != y.size()) throw ShapeError("pretrain: label count mismatch");

    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double last_epoch_mean = 0.0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch_size) {
            const std::size_t take = std::min(batch_size, n - start);
            Matrix xb(take, d);
            std::vector<int> yb(take);
            for (std::size_t i = 0; i < take; ++i) {
                xb.set_row(i, x.row_ptr(order[start + i]), d);
                yb[i] = y[order[start + i]];
            }
            ForwardTrace trace = net.forward(xb, BnMode::Train);
            Matrix p = losses::softmax(trace.logits);
            loss_sum += losses::label_cross_entropy(p, yb);
            Matrix d_logits = losses::label_ce_logit_grad(p, yb);
            d_logits *= 1.0 / static_cast<double>(take);
            net.backward(trace, d_logits);
            net.sgd_step(lr, momentum);
            ++batches;
        }
        last_epoch_mean = loss_sum / static_cast<double>(batches);
    }
    return last_epoch_mean;
}

double eval_error_pct(Network& net, const Matrix& x, const std::vector<int>& y) {
    if (x.rows() == 0) throw EmptyBatchError("eval_error_pct on an empty set");
    if (x.rows() != y.size()) throw ShapeError("eval_error_pct: label count mismatch");
    ForwardTrace trace = net.forward(x, BnMode::Eval);
    long wrong = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        if (static_cast<int>(argmax_row(trace.logits, i)) != y[i]) ++wrong;
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(x.rows());
}

RunArtifacts run(const RunConfig& cfg) {
    validate_run_config(cfg);
    const auto t0 = std::chrono::steady_clock::now();

    const std::uint64_t dataset_seed = derive_seed(cfg.seed, kDataTag);
    const std::uint64_t init_seed = derive_seed(cfg.seed, kInitTag);
    const std::uint64_t pretrain_seed = derive_seed(cfg.seed, kPretrainTag);
    const std::uint64_t warmup_seed = derive_seed(cfg.seed, kWarmupTag);
    const std::uint64_t stream_seed = derive_seed(cfg.seed, kStreamTag);
    const std::uint64_t adapter_seed = derive_seed(cfg.seed, kAdapterTag);

    DatasetSpec dspec;
    dspec.classes = cfg.classes;
    dspec.dim = cfg.dim;
    dspec.samples_per_class = cfg.samples_per_class;
    dspec.sigma = cfg.sigma;
    dspec.mean_radius = cfg.mean_radius;
    dspec.warp = cfg.warp;
    dspec.imbalance = cfg.imbalance;

    const Dataset source = generate_source(dspec, dataset_seed);
    const std::size_t n = source.y.size();
    const std::size_t val_n = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(n));
    const Dataset train = slice_dataset(source, 0, n - val_n);
    const Dataset val = val_n > 0 ? slice_dataset(source, n - val_n, n) : Dataset{};

    NetworkConfig ncfg;
    ncfg.input_dim = cfg.dim;
    ncfg.hidden = cfg.hidden;
    ncfg.classes = cfg.classes;
    ncfg.activation = cfg.activation;
    ncfg.batch_norm = true;
    ncfg.proj_dim = cfg.proj_dim;
    ncfg.seed = init_seed;
    Network net(ncfg);

    {
        // Pre-training momentum is fixed so that adapter.momentum ablations
        // keep the source model identical.
        Rng prng(pretrain_seed);
        pretrain(net, train.x, train.y, cfg.pretrain_epochs,
                 static_cast<std::size_t>(cfg.batch_size), cfg.pretrain_lr, 0.9, prng);
    }
    const double src_val_err = val_n > 0 ? eval_error_pct(net, val.x, val.y)
                                         : eval_error_pct(net, train.x, train.y);

    std::vector<CorruptionKind> kinds = cfg.kinds;
    if (cfg.order == StreamOrder::EasyToHard || cfg.order == StreamOrder::HardToEasy)
        kinds = order_by_source_error(net, dspec, kinds, cfg.severity, cfg.probe_samples,
                                      dataset_seed, cfg.order == StreamOrder::EasyToHard);
    const std::vector<Segment> segments =
        cfg.order == StreamOrder::Gradual
            ? build_gradual(kinds, cfg.batches_per_level)
            : build_continual(kinds, cfg.severity, cfg.batches_per_segment);

    const AdapterConfig acfg = adapter_config_from(cfg, adapter_seed);
    PrototypeBank bank;
    if (cfg.method == Method::Rmt)
        bank = extract_prototypes(net, train.x, train.y, cfg.classes);
    std::unique_ptr<Adapter> adapter =
        make_adapter(acfg, net, cfg.method == Method::Rmt ? &bank : nullptr, &train);

    if (cfg.warmup) {
        Rng wrng(warmup_seed);
        const double lr_peak = cfg.warmup_lr > 0.0 ? cfg.warmup_lr : cfg.lr;
        adapter->warm_up(train.x, static_cast<std::size_t>(cfg.batch_size), lr_peak, wrng);
    }

    Stream stream(dspec, StreamSpec{segments, cfg.batch_size}, dataset_seed, stream_seed);
    std::vector<long> seg_wrong(segments.size(), 0);
    std::vector<long> seg_total(segments.size(), 0);
    std::string batches_csv =
        "batch,segment,kind,severity,error_pct,loss_st,loss_cl,loss_ce_s,ema_dist\n";
    char buf[256];
    int batch_index = 0;

    std::unique_ptr<WindowRunner> runner;
    if (cfg.window >= 2)
        runner = std::make_unique<WindowRunner>(std::move(adapter), cfg.window, cfg.batch_size);

    Stream::Batch b;
    while (stream.next(b)) {
        long wrong = 0;
        StepLog log;
        if (runner) {
            for (std::size_t i = 0; i < b.y.size(); ++i) {
                const int pred = runner->push(b.x.row_ptr(i), b.x.cols());
                if (pred != b.y[i]) ++wrong;
            }
            log = runner->last_log();
        } else {
            log = adapter->adapt(b.x);
            for (std::size_t i = 0; i < b.y.size(); ++i)
                if (log.predictions[i] != b.y[i]) ++wrong;
        }
        seg_wrong[static_cast<std::size_t>(b.segment)] += wrong;
        seg_total[static_cast<std::size_t>(b.segment)] += static_cast<long>(b.y.size());
        const double err = 100.0 * static_cast<double>(wrong) / static_cast<double>(b.y.size());
        std::snprintf(buf, sizeof(buf), "%d,%d,%s,%d,%.4f,%.6f,%.6f,%.6f,%.6f\n", batch_index,
                      b.segment, kind_name(b.op.kind), b.op.severity, err, log.loss_st,
                      log.loss_cl, log.loss_ce_s, log.ema_distance);
        batches_csv += buf;
        ++batch_index;
    }

    RunArtifacts art;
    MetricsRecord& rec = art.record;
    rec.method = method_name(cfg.method);
    rec.seed = cfg.seed;
    rec.config_hash = config_hash(cfg);
    rec.source_val_error_pct = src_val_err;
    double err_sum = 0.0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        SegmentMetric m;
        m.kind = segments[i].op.kind;
        m.severity = segments[i].op.severity;
        m.batches = segments[i].batches;
        m.error_pct = seg_total[i] > 0
                          ? 100.0 * static_cast<double>(seg_wrong[i]) /
                                static_cast<double>(seg_total[i])
                          : 0.0;
        err_sum += m.error_pct;
        rec.segments.push_back(m);
    }
    rec.mean_error_pct = err_sum / static_cast<double>(rec.segments.size());

    std::string metrics = "segment,kind,severity,error_pct\n";
    for (std::size_t i = 0; i < rec.segments.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%s,%d,%.4f\n", i, kind_name(rec.segments[i].kind),
                      rec.segments[i].severity, rec.segments[i].error_pct);
        metrics += buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,,,%.4f\n", rec.mean_error_pct);
    metrics += buf;
    std::snprintf(buf, sizeof(buf), "# method=%s seed=%llu config_hash=%s\n", rec.method.c_str(),
                  static_cast<unsigned long long>(rec.seed), rec.config_hash.c_str());
    metrics += buf;

    art.metrics_csv = std::move(metrics);
    art.batches_csv = std::move(batches_csv);
    art.manifest_csv = manifest_csv(segments);
    art.config_resolved = serialize_config(cfg);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return art;
}

MetricsRecord run_to_dir(const RunConfig& cfg, const std::string& out_dir) {
    RunArtifacts art = run(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    write_text_file(out_dir + "/metrics.csv", art.metrics_csv);
    write_text_file(out_dir + "/batches.csv", art.batches_csv);
    write_text_file(out_dir + "/manifest.csv", art.manifest_csv);
    write_text_file(out_dir + "/config.resolved", art.config_resolved);
    return art.record;
}

MetricsRecord read_metrics_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    MetricsRecord rec;
    std::string line;
    int line_no = 0;
    bool saw_mean = false;
    auto fail = [&](const std::string& msg) {
        return IoError(path + ":" + std::to_string(line_no) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "segment,kind,severity,error_pct") throw fail("bad metrics header");
            continue;
        }
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ts(line.substr(1));
            std::string tok;
            while (ts >> tok) {
                const std::size_t eq = tok.find('=');
                if (eq == std::string::npos) continue;
                const std::string k = tok.substr(0, eq);
                const std::string v = tok.substr(eq + 1);
                if (k == "method") rec.method = v;
                else if (k == "seed" && !parse_u64_value(v, rec.seed))
                    throw fail("bad seed in trailer");
                else if (k == "config_hash") rec.config_hash = v;
            }
            continue;
        }
        const std::vector<std::string> fields = split(line, ',');
        if (fields.size() != 4) throw fail("expected 4 fields");
        if (fields[0] == "mean") {
            if (!parse_double_value(fields[3], rec.mean_error_pct))
                throw fail("bad mean value");
            saw_mean = true;
            continue;
        }
        SegmentMetric m;
        try {
            m.kind = kind_from_name(fields[1]);
        } catch (const ConfigError&) {
            throw fail("unknown corruption kind '" + fields[1] + "'");
        }
        if (!parse_int_value(fields[2], m.severity)) throw fail("bad severity");
        if (!parse_double_value(fields[3], m.error_pct)) throw fail("bad error value");
        rec.segments.push_back(m);
    }
    if (!saw_mean) throw fail("missing mean row");
    return rec;
}

std::string emit_surface(const std::string& loss, const std::string& what, double step) {
    if (loss != "ce" && loss != "sce")
        throw ConfigError("surface loss must be 'ce' or 'sce'");
    if (what != "value" && what != "grad")
        throw ConfigError("surface quantity must be 'value' or 'grad'");
    if (!(step > 0.0 && step < 0.5))
        throw ConfigError("surface step must lie in (0, 0.5)");

    std::vector<double> grid;
    for (int i = 1; static_cast<double>(i) * step < 1.0; ++i) {
        grid.push_back(static_cast<double>(i) * step);
        if (grid.size() > 8192) throw ConfigError("surface step is too small (over 8192 points per axis)");
    }

    const bool sce = loss == "sce";
    const bool grad = what == "grad";
    auto ce_value = [](double p, double q) {
        return -(q * std::log(p) + (1.0 - q) * std::log(1.0 - p));
    };
    std::string out = "p,q,v\n";
    for (double p : grid) {
        for (double q : grid) {
            double v;
            if (grad)
                v = sce ? losses::binary_sce_grad(p, q) : losses::binary_ce_grad(p, q);
            else
                v = sce ? ce_value(p, q) + ce_value(q, p) : ce_value(p, q);
            out += format_double(p);
            out += ',';
            out += format_double(q);
            out += ',';
            out += format_double(v);
            out += '\n';
        }
    }
    return out;
}

TableResult emit_table(const std::vector<std::string>& metrics_paths) {
    if (metrics_paths.empty()) throw ConfigError("emit_table needs at least one metrics file");
    std::vector<MetricsRecord> recs;
    recs.reserve(metrics_paths.size());
    for (const std::string& p : metrics_paths) recs.push_back(read_metrics_csv(p));

    const std::vector<SegmentMetric>& base = recs.front().segments;
    for (const MetricsRecord& r : recs) {
        if (r.segments.size() != base.size())
            throw ConfigError("metrics files disagree on segment count");
        for (std::size_t i = 0; i < base.size(); ++i)
            if (r.segments[i].kind != base[i].kind || r.segments[i].severity != base[i].severity)
                throw ConfigError("metrics files disagree on segment layout");
    }

    std::vector<std::string> headers;
    headers.emplace_back("method");
    for (const SegmentMetric& s : base)
        headers.push_back(std::string(kind_name(s.kind)) + "@" + std::to_string(s.severity));
    headers.emplace_back("mean");

    std::map<std::string, int> method_count;
    for (const MetricsRecord& r : recs) ++method_count[r.method];

    char buf[64];
    std::vector<std::vector<std::string>> rows;
    for (const MetricsRecord& r : recs) {
        std::vector<std::string> row;
        std::string label = r.method;
        if (method_count[r.method] > 1) label += "@" + std::to_string(r.seed);
        row.push_back(label);
        for (const SegmentMetric& s : r.segments) {
            std::snprintf(buf, sizeof(buf), "%.4f", s.error_pct);
            row.emplace_back(buf);
        }
        std::snprintf(buf, sizeof(buf), "%.4f", r.mean_error_pct);
        row.emplace_back(buf);
        rows.push_back(std::move(row));
    }

    TableResult result;
    for (std::size_t j = 0; j < headers.size(); ++j) {
        if (j) result.csv += ',';
        result.csv += headers[j];
    }
    result.csv += '\n';
    for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) result.csv += ',';
            result.csv += row[j];
        }
        result.csv += '\n';
    }

    std::vector<std::size_t> width(headers.size());
    for (std::size_t j = 0; j < headers.size(); ++j) {
        width[j] = headers[j].size();
        for (const auto& row : rows) width[j] = std::max(width[j], row[j].size());
    }
    auto pad = [](const std::string& s, std::size_t w, bool left) {
        std::string padding(w - s.size(), ' ');
        return left ? s + padding : padding + s;
    };
    for (std::size_t j = 0; j < headers.size(); ++j) {
        if (j) result.text += "  ";
        result.text += pad(headers[j], width[j], j == 0);
    }
    result.text += '\n';
    for (std::size_t j = 0; j < headers.size(); ++j) {
        if (j) result.text += "  ";
        result.text += std::string(width[j], '-');
    }
    result.text += '\n';
    for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) result.text += "  ";
            result.text += pad(row[j], width[j], j == 0);
        }
        result.text += '\n';
    }
    return result;
}

namespace {

std::string sanitize_component(const std::string& s) {
    std::string out;
    for (char c : s) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-' || c == '=';
        out += ok ? c : '_';
    }
    return out;
}

}  // namespace

std::vector<SweepResult> sweep(const RunConfig& base, const std::string& key,
                               const std::vector<std::string>& values,
                               const std::string& out_dir) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<SweepResult> results;
    std::string summary = "key,value,mean_error_pct,config_hash\n";
    char buf[256];
    for (const std::string& v : values) {
        RunConfig c = base;
        assign_config_key(c, key, v);
        const std::string sub = out_dir + "/" + sanitize_component(key + "=" + v);
        c.out = sub;
        const MetricsRecord r = run_to_dir(c, sub);
        std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%s\n", key.c_str(), v.c_str(),
                      r.mean_error_pct, r.config_hash.c_str());
        summary += buf;
        results.push_back({key, v, r});
    }
    write_text_file(out_dir + "/sweep.csv", summary);
    return results;
}

}  // namespace ttalab
