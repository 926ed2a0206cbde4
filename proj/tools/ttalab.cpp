// Command line front end: run one benchmark, emit loss/gradient surfaces,
// render metrics tables, or sweep one config key over several values.
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ttalab/harness.hpp"

namespace {

void print_record(const ttalab::MetricsRecord& rec, const std::string& out_dir) {
    std::printf("method=%s seed=%llu source_val_error=%.4f\n", rec.method.c_str(),
                static_cast<unsigned long long>(rec.seed), rec.source_val_error_pct);
    for (std::size_t i = 0; i < rec.segments.size(); ++i)
        std::printf("segment %zu  %-20s s%d  error=%.4f\n", i,
                    ttalab::kind_name(rec.segments[i].kind), rec.segments[i].severity,
                    rec.segments[i].error_pct);
    std::printf("mean_error=%.4f wall=%.2fs out=%s\n", rec.mean_error_pct, rec.wall_seconds,
                out_dir.c_str());
}

void write_file(const std::string& path, const std::string& text) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw ttalab::IoError("cannot open " + path + " for writing");
    if (std::fwrite(text.data(), 1, text.size(), f) != text.size()) {
        std::fclose(f);
        throw ttalab::IoError("short write to " + path);
    }
    std::fclose(f);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale continual test-time adaptation lab"};
    app.require_subcommand(1);

    std::string run_config;
    std::string run_out;
    std::uint64_t run_seed = 0;
    CLI::App* cmd_run = app.add_subcommand("run", "execute one benchmark run");
    cmd_run->add_option("--config", run_config, "run configuration file")->required();
    CLI::Option* run_seed_opt = cmd_run->add_option("--seed", run_seed, "override run.seed");
    cmd_run->add_option("--out", run_out, "override run.out");

    std::string surf_loss = "ce";
    std::string surf_what = "value";
    double surf_step = 0.01;
    std::string surf_out;
    CLI::App* cmd_surface = app.add_subcommand("surface", "emit a two-class loss or gradient grid");
    cmd_surface->add_option("--loss", surf_loss, "ce or sce")->required();
    cmd_surface->add_option("--what", surf_what, "value or grad")->required();
    cmd_surface->add_option("--step", surf_step, "grid step in (0, 0.5), default 0.01");
    cmd_surface->add_option("--out", surf_out, "output CSV path")->required();

    std::vector<std::string> table_inputs;
    std::string table_out;
    CLI::App* cmd_table = app.add_subcommand("table", "render metrics files as a table");
    cmd_table->add_option("inputs", table_inputs, "metrics.csv files")->required();
    cmd_table->add_option("--out", table_out, "also write the CSV form here");

    std::string sweep_config;
    std::string sweep_vary;
    std::string sweep_out;
    std::uint64_t sweep_seed = 0;
    CLI::App* cmd_sweep = app.add_subcommand("sweep", "run one config key over several values");
    cmd_sweep->add_option("--config", sweep_config, "run configuration file")->required();
    cmd_sweep->add_option("--vary", sweep_vary, "key=v1,v2,... to sweep")->required();
    CLI::Option* sweep_seed_opt = cmd_sweep->add_option("--seed", sweep_seed, "override run.seed");
    cmd_sweep->add_option("--out", sweep_out, "output directory, default run.out");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cmd_run->parsed()) {
            ttalab::RunConfig cfg = ttalab::parse_config_file(run_config);
            if (run_seed_opt->count() > 0)
                ttalab::assign_config_key(cfg, "run.seed", std::to_string(run_seed));
            if (!run_out.empty()) ttalab::assign_config_key(cfg, "run.out", run_out);
            const ttalab::MetricsRecord rec = ttalab::run_to_dir(cfg, cfg.out);
            print_record(rec, cfg.out);
        } else if (cmd_surface->parsed()) {
            write_file(surf_out, ttalab::emit_surface(surf_loss, surf_what, surf_step));
            std::printf("surface loss=%s what=%s step=%s out=%s\n", surf_loss.c_str(),
                        surf_what.c_str(), ttalab::format_double(surf_step).c_str(),
                        surf_out.c_str());
        } else if (cmd_table->parsed()) {
            const ttalab::TableResult table = ttalab::emit_table(table_inputs);
            std::fputs(table.text.c_str(), stdout);
            if (!table_out.empty()) write_file(table_out, table.csv);
        } else if (cmd_sweep->parsed()) {
            ttalab::RunConfig cfg = ttalab::parse_config_file(sweep_config);
            if (sweep_seed_opt->count() > 0)
                ttalab::assign_config_key(cfg, "run.seed", std::to_string(sweep_seed));
            const std::size_t eq = sweep_vary.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ttalab::ConfigError("--vary must look like key=v1,v2,...");
            const std::string key = sweep_vary.substr(0, eq);
            std::vector<std::string> values;
            std::string rest = sweep_vary.substr(eq + 1);
            std::size_t start = 0;
            while (true) {
                const std::size_t pos = rest.find(',', start);
                values.push_back(rest.substr(start, pos - start));
                if (pos == std::string::npos) break;
                start = pos + 1;
            }
            const std::string out_dir = sweep_out.empty() ? cfg.out : sweep_out;
            const auto results = ttalab::sweep(cfg, key, values, out_dir);
            for (const auto& r : results)
                std::printf("%s=%s mean_error=%.4f\n", r.key.c_str(), r.value.c_str(),
                            r.record.mean_error_pct);
            std::printf("summary: %s/sweep.csv\n", out_dir.c_str());
        }
        return 0;
    } catch (const ttalab::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    }
}
