// SPDX-License-Identifier: Apache-2.0
//
// dynakv calibrate|train|eval|analyze|bench --config <path> [--seed N] [--out DIR]

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dynakv/error.hpp"
#include "dynakv/harness.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

}  // namespace

int main(int argc, char** argv) {
    using namespace dynakv;

    CLI::App app{"Token-adaptive low-rank KV cache experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> evict_budget, obs_window;
    bool dump_cache = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "Override the configured seed");
        sub->add_option("--out", out_dir, "Output directory");
    };
    auto* calibrate = app.add_subcommand("calibrate", "Fit PCA bases on the training corpus");
    auto* train = app.add_subcommand("train", "Train and write a checkpoint plus step log");
    auto* eval = app.add_subcommand("eval", "Perplexity and retain rates in full/soft/hard modes");
    auto* analyze = app.add_subcommand("analyze", "Per-token and per-layer retention report");
    auto* bench = app.add_subcommand("bench", "Decode throughput, full cache vs compressed");
    for (auto* s : {calibrate, train, eval, analyze, bench}) common(s);
    eval->add_option("--evict-budget", evict_budget, "Tokens kept per layer after prefill eviction");
    eval->add_option("--obs-window", obs_window, "Trailing queries used to score tokens");
    eval->add_flag("--dump-cache", dump_cache, "Write the first window's cache as JSON lines");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        auto cfg = harness::RunConfig::load(config_path);
        harness::apply_overrides(cfg, {seed, out_dir, evict_budget, obs_window, dump_cache});
        nlohmann::json report;
        if (*calibrate) report = harness::cmd_calibrate(cfg);
        else if (*train) report = harness::cmd_train(cfg);
        else if (*eval) report = harness::cmd_eval(cfg);
        else if (*analyze) report = harness::cmd_analyze(cfg);
        else report = harness::cmd_bench(cfg);
        std::cout << report.dump(2) << '\n';
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const InsufficientDataError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const InvertibilityError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
}
