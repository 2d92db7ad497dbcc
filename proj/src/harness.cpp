// SPDX-License-Identifier: Apache-2.0

#include "dynakv/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <numeric>

#include "dynakv/error.hpp"
#include "dynakv/serialize.hpp"
#include "dynakv/tokenizer.hpp"

namespace dynakv::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using model::Mode;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError(section + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(section + "." + key + ": " + e.what());
    }
}

void require_positive(std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
}

void check_tau(double tau, const char* what) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError(std::string(what) + " must lie in (0, 1)");
}

json memory_json(const kv::MemoryReport& m) {
    return {{"total_floats", m.total_floats},
            {"key_floats", m.key_floats},
            {"value_floats", m.value_floats},
            {"clamped_tokens", m.clamped},
            {"tokens_per_layer", m.tokens_per_layer},
            {"floats_per_layer", m.floats_per_layer},
            {"rate_overall", m.rate_overall},
            {"rate_key", m.rate_key},
            {"rate_value", m.rate_value},
            {"rate_per_layer", m.rate_per_layer}};
}

json stamp(const RunConfig& cfg) { return {{"config_hash", cfg.hash()}, {"seed", cfg.seed}}; }

void write_manifest(const fs::path& dir, const RunConfig& cfg, std::size_t step, const json& metrics) {
    json m = stamp(cfg);
    m["step"] = step;
    m["metrics"] = metrics;
    m["config"] = cfg.to_json();
    io::write_json(dir / "manifest.json", m);
}

std::vector<model::Example> eval_examples(const RunConfig& cfg) {
    if (cfg.data.eval.empty()) throw ConfigError("data.eval is required for this subcommand");
    const auto corpus = load_corpus(cfg.resolve(cfg.data.eval));
    return model::split_examples(corpus, cfg.data.seq_len, cfg.data.max_eval_windows);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p);
    if (!f) throw IoError("cannot open " + p.string() + " for writing");
    return f;
}

}  // namespace

// ---------------------------------------------------------------- config

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
    check_keys(j, {"schema_version", "seed", "model", "checkpoint", "data", "train", "eval", "analyze", "bench", "out_dir"},
               "config");
    RunConfig c;
    c.base_dir = base_dir;
    if (!j.contains("schema_version")) throw ConfigError("config: schema_version is required");
    get(j, "schema_version", c.schema_version, "config");
    if (c.schema_version != kSchemaVersion) {
        throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
    }
    get(j, "seed", c.seed, "config");
    get(j, "checkpoint", c.checkpoint, "config");
    get(j, "out_dir", c.out_dir, "config");
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j.at("model"));
    c.model.validate();

    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"train", "eval", "seq_len", "max_eval_windows", "max_calib_windows"}, "data");
        get(d, "train", c.data.train, "data");
        get(d, "eval", c.data.eval, "data");
        get(d, "seq_len", c.data.seq_len, "data");
        get(d, "max_eval_windows", c.data.max_eval_windows, "data");
        get(d, "max_calib_windows", c.data.max_calib_windows, "data");
    }
    require_positive(c.data.seq_len, "data.seq_len");
    if (c.data.seq_len > c.model.max_seq_len) throw ConfigError("data.seq_len exceeds model.max_seq_len");

    if (j.contains("train")) {
        json t = j.at("train");
        if (t.is_object() && t.contains("seed")) throw ConfigError("train.seed: use the top-level seed");
        c.train = model::TrainConfig::from_json(t);
    }
    c.train.seed = c.seed;
    if (c.train.seq_len > c.model.max_seq_len) throw ConfigError("train.seq_len exceeds model.max_seq_len");

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, {"tau", "modes", "eviction", "dump_cache"}, "eval");
        get(e, "tau", c.eval.tau, "eval");
        get(e, "dump_cache", c.eval.dump_cache, "eval");
        if (e.contains("modes")) {
            std::vector<std::string> names;
            get(e, "modes", names, "eval");
            c.eval.modes.clear();
            for (const auto& n : names) c.eval.modes.push_back(model::parse_mode(n));
            if (c.eval.modes.empty()) throw ConfigError("eval.modes must not be empty");
        }
        if (e.contains("eviction")) {
            const json& v = e.at("eviction");
            check_keys(v, {"keep_budget", "observation_window", "pooling_width", "prefill"}, "eval.eviction");
            get(v, "keep_budget", c.eval.eviction.keep_budget, "eval.eviction");
            get(v, "observation_window", c.eval.eviction.observation_window, "eval.eviction");
            get(v, "pooling_width", c.eval.eviction.pooling_width, "eval.eviction");
            get(v, "prefill", c.eval.eviction.prefill, "eval.eviction");
        }
    }
    check_tau(c.eval.tau, "eval.tau");

    if (j.contains("analyze")) {
        const json& a = j.at("analyze");
        check_keys(a, {"sentence", "tau", "alpha_curve"}, "analyze");
        get(a, "sentence", c.analyze.sentence, "analyze");
        get(a, "tau", c.analyze.tau, "analyze");
        if (a.contains("alpha_curve")) {
            const json& arr = a.at("alpha_curve");
            if (!arr.is_array()) throw ConfigError("analyze.alpha_curve must be an array");
            for (const auto& p : arr) {
                check_keys(p, {"alpha", "checkpoint"}, "analyze.alpha_curve[]");
                AlphaPoint pt;
                get(p, "alpha", pt.alpha, "analyze.alpha_curve[]");
                get(p, "checkpoint", pt.checkpoint, "analyze.alpha_curve[]");
                if (pt.checkpoint.empty()) throw ConfigError("analyze.alpha_curve[]: checkpoint is required");
                c.analyze.alpha_curve.push_back(pt);
            }
        }
    }
    check_tau(c.analyze.tau, "analyze.tau");

    if (j.contains("bench")) {
        const json& b = j.at("bench");
        check_keys(b, {"prompt_len", "decode_tokens", "repeats", "tau"}, "bench");
        get(b, "prompt_len", c.bench.prompt_len, "bench");
        get(b, "decode_tokens", c.bench.decode_tokens, "bench");
        get(b, "repeats", c.bench.repeats, "bench");
        get(b, "tau", c.bench.tau, "bench");
    }
    require_positive(c.bench.prompt_len, "bench.prompt_len");
    require_positive(c.bench.decode_tokens, "bench.decode_tokens");
    require_positive(c.bench.repeats, "bench.repeats");
    check_tau(c.bench.tau, "bench.tau");
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    return from_json(io::read_json(path), path.parent_path());
}

json RunConfig::to_json() const {
    json modes = json::array();
    for (Mode m : eval.modes) modes.push_back(model::mode_name(m));
    json curve = json::array();
    for (const auto& p : analyze.alpha_curve) curve.push_back({{"alpha", p.alpha}, {"checkpoint", p.checkpoint}});
    json t = train.to_json();
    t.erase("seed");
    return {{"schema_version", schema_version},
            {"seed", seed},
            {"model", model.to_json()},
            {"checkpoint", checkpoint},
            {"data",
             {{"train", data.train},
              {"eval", data.eval},
              {"seq_len", data.seq_len},
              {"max_eval_windows", data.max_eval_windows},
              {"max_calib_windows", data.max_calib_windows}}},
            {"train", t},
            {"eval",
             {{"tau", eval.tau},
              {"modes", modes},
              {"dump_cache", eval.dump_cache},
              {"eviction",
               {{"keep_budget", eval.eviction.keep_budget},
                {"observation_window", eval.eviction.observation_window},
                {"pooling_width", eval.eviction.pooling_width},
                {"prefill", eval.eviction.prefill}}}}},
            {"analyze", {{"sentence", analyze.sentence}, {"tau", analyze.tau}, {"alpha_curve", curve}}},
            {"bench",
             {{"prompt_len", bench.prompt_len},
              {"decode_tokens", bench.decode_tokens},
              {"repeats", bench.repeats},
              {"tau", bench.tau}}},
            {"out_dir", out_dir}};
}

std::string RunConfig::hash() const { return io::config_hash(to_json()); }

fs::path RunConfig::resolve(const std::string& p) const {
    const fs::path path(p);
    if (path.is_absolute() || base_dir.empty()) return path;
    return base_dir / path;
}

void apply_overrides(RunConfig& cfg, const Overrides& o) {
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.train.seed = *o.seed;
    }
    if (o.out_dir) {
        // Command-line paths are relative to the working directory, not the config.
        cfg.out_dir = fs::absolute(*o.out_dir).string();
    }
    if (o.evict_budget) cfg.eval.eviction.keep_budget = *o.evict_budget;
    if (o.obs_window) cfg.eval.eviction.observation_window = *o.obs_window;
    if (o.dump_cache) cfg.eval.dump_cache = true;
}

model::Model load_or_init(const RunConfig& cfg) {
    if (!cfg.checkpoint.empty()) return model::Model::load(cfg.resolve(cfg.checkpoint));
    return model::Model::init(cfg.model, cfg.seed);
}

std::vector<int> load_corpus(const fs::path& path) {
    const std::string text = io::read_text(path);
    if (text.empty()) throw InsufficientDataError("corpus " + path.string() + " is empty");
    return text::bytes_of(text);
}

// ---------------------------------------------------------------- analyses

EvictionEval evaluate_with_eviction(const model::Model& m, std::span<const model::Example> examples, double tau,
                                    const evict::EvictionConfig& ecfg, std::size_t prefill) {
    ecfg.validate();
    if (examples.empty()) throw InsufficientDataError("evaluate_with_eviction: no examples");
    EvictionEval out;
    double nll = 0.0;
    std::vector<kv::MemoryReport> before, after;
    for (const auto& ex : examples) {
        const std::size_t n = ex.input.size();
        if (prefill == 0 || prefill >= n) throw ConfigError("eviction prefill must lie in [1, window length)");
        model::InferenceSession session(
            m, model::SessionOptions{.mode = Mode::Hard, .tau = tau, .attention_window = ecfg.observation_window});
        session.forward(std::span<const int>(ex.input).first(prefill));
        std::string warning;
        kv::RaggedKVCache pruned = evict::evict(session.cache(), session.window_attention(), ecfg, &warning);
        if (!warning.empty()) out.warning = warning;
        before.push_back(kv::memory_report(session.cache()));
        after.push_back(kv::memory_report(pruned));
        session.replace_cache(std::move(pruned));
        for (std::size_t i = prefill; i < n; ++i) {
            const Tensor logits = session.forward(std::span<const int>(ex.input).subspan(i, 1));
            ad::NoGradGuard guard;
            const int target = ex.target[i];
            nll += ad::cross_entropy(ad::Var::constant(logits), std::span<const int>(&target, 1)).value().item();
            ++out.scored_tokens;
        }
    }
    const double mean = nll / static_cast<double>(out.scored_tokens);
    if (!std::isfinite(mean)) throw NumericError("evaluate_with_eviction: non-finite NLL");
    out.ppl = std::exp(mean);
    out.budget = evict::budget_report(kv::combine_reports(before), kv::combine_reports(after));
    return out;
}

RetentionAnalysis analyze_retention(const model::Model& m, std::span<const int> tokens, double tau) {
    model::InferenceSession session(m, model::SessionOptions{.mode = Mode::Hard, .tau = tau, .collect_rates = true});
    session.forward(tokens);
    const auto stats = gate::aggregate_stats(session.rate_samples(), true);
    const std::size_t T = tokens.size();
    const std::size_t L = m.config().n_layers;

    RetentionAnalysis a;
    a.tokens.assign(tokens.begin(), tokens.end());
    a.trace = stats.trace;
    a.token_hard.assign(T, 0.0);
    a.token_soft.assign(T, 0.0);
    for (const auto& [t, sum] : stats.per_token) {
        a.token_hard.at(t) = sum.mean_hard();
        a.token_soft.at(t) = sum.mean_soft();
    }
    a.layer_token.assign(L, std::vector<double>(T, 0.0));
    for (const auto& s : stats.trace) a.layer_token.at(s.layer).at(s.token) += 0.5 * s.hard;

    std::size_t bos = T;
    for (std::size_t t = 0; t < T; ++t)
        if (tokens[t] == text::kBos) {
            bos = t;
            break;
        }
    if (bos < T) {
        a.bos_rank = 1;
        for (std::size_t t = 0; t < T; ++t)
            if (a.token_hard[t] > a.token_hard[bos]) ++a.bos_rank;
    }
    return a;
}

// ---------------------------------------------------------------- subcommands

json cmd_calibrate(const RunConfig& cfg) {
    if (cfg.data.train.empty()) throw ConfigError("data.train is required for calibrate");
    model::Model m = load_or_init(cfg);
    const auto corpus = load_corpus(cfg.resolve(cfg.data.train));
    const auto examples = model::split_examples(corpus, cfg.data.seq_len, cfg.data.max_calib_windows);
    const auto stats = model::calibrate(m, examples);

    const fs::path out = cfg.out();
    fs::create_directories(out / "bases");
    for (std::size_t l = 0; l < m.layers.size(); ++l)
        for (Stream s : {Stream::Key, Stream::Value})
            spectral::save_basis(out / "bases", "L" + std::to_string(l) + "_" + std::string(stream_name(s)),
                                 m.layers[l].basis(s));
    const fs::path ckpt = out / "checkpoint";
    m.save(ckpt);

    json report = stamp(cfg);
    report["tokens"] = stats.tokens;
    report["windows"] = examples.size();
    report["eigenvalues_k"] = stats.eigenvalues_k;
    report["eigenvalues_v"] = stats.eigenvalues_v;
    write_manifest(ckpt, cfg, 0, {{"calibration_tokens", stats.tokens}});
    io::write_json(out / "calibration.json", report);
    return report;
}

json cmd_train(const RunConfig& cfg) {
    if (cfg.data.train.empty()) throw ConfigError("data.train is required for train");
    model::Model m = load_or_init(cfg);
    const auto corpus = load_corpus(cfg.resolve(cfg.data.train));

    const fs::path out = cfg.out();
    fs::create_directories(out);
    std::ofstream log = open_out(out / "steps.jsonl");
    log << json{{"config_hash", cfg.hash()}, {"seed", cfg.seed}}.dump() << '\n';
    const auto logs = model::train(m, corpus, cfg.train, [&](const model::StepLog& s) {
        log << model::step_log_line(s) << '\n';
    });
    log.flush();
    if (!log) throw IoError("failed writing " + (out / "steps.jsonl").string());

    const auto& last = logs.back();
    const json metrics{{"ce", last.ce}, {"r_soft", last.r_soft}, {"total", last.total}};
    const fs::path ckpt = out / "checkpoint";
    m.save(ckpt);
    write_manifest(ckpt, cfg, last.step, metrics);

    json report = stamp(cfg);
    report["steps"] = last.step;
    report["final"] = metrics;
    report["checkpoint"] = ckpt.string();
    return report;
}

json cmd_eval(const RunConfig& cfg) {
    const model::Model m = load_or_init(cfg);
    const auto examples = eval_examples(cfg);
    const std::size_t threads = model::thread_budget();

    json report = stamp(cfg);
    report["tau"] = cfg.eval.tau;
    report["windows"] = examples.size();
    json modes = json::object();
    for (Mode mode : cfg.eval.modes) {
        const auto r = model::evaluate_ppl(m, examples, mode, cfg.eval.tau, threads);
        json row{{"ppl", r.ppl}, {"mean_nll", r.mean_nll}, {"tokens", r.tokens}};
        if (mode == Mode::Soft) row["soft_retain_rate"] = r.soft_retain_rate;
        if (mode == Mode::Hard) {
            row["hard_retain_rate"] = r.hard_retain_rate;
            row["memory"] = memory_json(r.memory);
        }
        modes[model::mode_name(mode)] = row;
    }
    report["modes"] = modes;

    const auto& ev = cfg.eval.eviction;
    if (ev.keep_budget > 0) {
        const evict::EvictionConfig ecfg{ev.keep_budget, ev.observation_window, ev.pooling_width};
        const std::size_t prefill = ev.prefill ? ev.prefill : (cfg.data.seq_len * 3) / 4;
        const auto base = evaluate_with_eviction(m, examples, cfg.eval.tau,
                                                 evict::EvictionConfig{prefill, std::min(ev.observation_window, prefill),
                                                                       ev.pooling_width},
                                                 prefill);
        const auto res = evaluate_with_eviction(m, examples, cfg.eval.tau, ecfg, prefill);
        if (!res.warning.empty()) std::cerr << "warning: " << res.warning << '\n';
        report["eviction"] = {{"keep_budget", ev.keep_budget},
                              {"observation_window", ev.observation_window},
                              {"pooling_width", ev.pooling_width},
                              {"prefill", prefill},
                              {"scored_tokens", res.scored_tokens},
                              {"ppl", res.ppl},
                              {"ppl_no_eviction", base.ppl},
                              {"keep_ratio", res.budget.keep_ratio},
                              {"survivor_retain_rate", res.budget.survivor_rate},
                              {"prefill_retain_rate", res.budget.prior_rate},
                              {"effective_rate", res.budget.effective},
                              {"estimated_rate", res.budget.estimated},
                              {"warning", res.warning}};
    }

    const fs::path out = cfg.out();
    fs::create_directories(out);
    if (cfg.eval.dump_cache) {
        model::InferenceSession s(m, model::SessionOptions{.mode = Mode::Hard, .tau = cfg.eval.tau});
        s.forward(examples.front().input);
        kv::dump_jsonl(s.cache(), out / "cache.jsonl");
        report["cache_dump"] = (out / "cache.jsonl").string();
    }
    io::write_json(out / "metrics.json", report);
    return report;
}

json cmd_analyze(const RunConfig& cfg) {
    if (cfg.analyze.sentence.empty()) throw ConfigError("analyze.sentence is required");
    const model::Model m = load_or_init(cfg);
    const auto tokens = text::tokenize(cfg.analyze.sentence);
    if (tokens.size() > m.config().max_seq_len) throw ConfigError("analyze.sentence is longer than max_seq_len");
    const auto a = analyze_retention(m, tokens, cfg.analyze.tau);

    std::vector<std::string> labels;
    for (int t : tokens) labels.push_back(text::token_label(t));

    const fs::path out = cfg.out();
    fs::create_directories(out);
    {
        auto f = open_out(out / "token_retention.csv");
        f << "token_index,token_text,mean_hard_rate,mean_soft_rate\n";
        f.precision(17);
        for (std::size_t t = 0; t < tokens.size(); ++t)
            f << t << ',' << csv_escape(labels[t]) << ',' << a.token_hard[t] << ',' << a.token_soft[t] << '\n';
    }
    {
        auto f = open_out(out / "layer_token_retention.csv");
        f.precision(17);
        f << "layer";
        for (std::size_t t = 0; t < tokens.size(); ++t) f << ",t" << t;
        f << '\n';
        for (std::size_t l = 0; l < a.layer_token.size(); ++l) {
            f << l;
            for (double v : a.layer_token[l]) f << ',' << v;
            f << '\n';
        }
    }
    gate::write_trace_csv(out / "trace.csv", a.trace, labels);

    std::vector<std::size_t> order(tokens.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a.token_hard[x] > a.token_hard[y]; });
    json top = json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i)
        top.push_back({{"token_index", order[i]}, {"token_text", labels[order[i]]}, {"mean_hard_rate", a.token_hard[order[i]]}});

    json report = stamp(cfg);
    report["n_layers"] = a.layer_token.size();
    report["n_tokens"] = tokens.size();
    report["tau"] = cfg.analyze.tau;
    report["bos_rank"] = a.bos_rank;
    report["bos_mean_hard_rate"] = a.token_hard.front();
    report["mean_hard_rate"] = std::accumulate(a.token_hard.begin(), a.token_hard.end(), 0.0) /
                               static_cast<double>(tokens.size());
    report["top_tokens"] = top;

    if (!cfg.analyze.alpha_curve.empty()) {
        const auto examples = eval_examples(cfg);
        const std::size_t threads = model::thread_budget();
        json curve = json::array();
        for (const auto& p : cfg.analyze.alpha_curve) {
            const auto cm = model::Model::load(cfg.resolve(p.checkpoint));
            const auto r = model::evaluate_ppl(cm, examples, Mode::Hard, cfg.analyze.tau, threads);
            curve.push_back({{"alpha", p.alpha}, {"ppl", r.ppl}, {"hard_retain_rate", r.hard_retain_rate}});
        }
        report["alpha_curve"] = curve;
        auto f = open_out(out / "alpha_curve.csv");
        f.precision(17);
        f << "alpha,ppl,hard_retain_rate\n";
        for (const auto& row : curve) f << row["alpha"].get<double>() << ',' << row["ppl"].get<double>() << ',' << row["hard_retain_rate"].get<double>() << '\n';
    }
    io::write_json(out / "report.json", report);
    return report;
}

json cmd_bench(const RunConfig& cfg) {
    const model::Model m = load_or_init(cfg);
    const auto& b = cfg.bench;
    if (b.prompt_len + b.decode_tokens > m.config().max_seq_len) {
        throw ConfigError("bench: prompt_len + decode_tokens exceeds model.max_seq_len");
    }
    std::vector<int> stream;
    if (!cfg.data.eval.empty() || !cfg.data.train.empty()) {
        const auto corpus = load_corpus(cfg.resolve(cfg.data.eval.empty() ? cfg.data.train : cfg.data.eval));
        stream.push_back(text::kBos);
        stream.insert(stream.end(), corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(
                                                                         std::min(corpus.size(), b.prompt_len + b.decode_tokens)));
    }
    if (stream.size() < b.prompt_len + b.decode_tokens) {
        throw InsufficientDataError("bench: corpus shorter than prompt_len + decode_tokens");
    }

    auto run = [&](Mode mode, kv::MemoryReport* mem) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < b.repeats; ++r) {
            model::InferenceSession s(m, model::SessionOptions{.mode = mode, .tau = b.tau});
            s.forward(std::span<const int>(stream).first(b.prompt_len));
            const auto t0 = std::chrono::steady_clock::now();
            for (std::size_t i = 0; i < b.decode_tokens; ++i)
                s.forward(std::span<const int>(stream).subspan(b.prompt_len + i, 1));
            const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            best = std::min(best, dt);
            if (mem) *mem = kv::memory_report(s.cache());
        }
        return static_cast<double>(b.decode_tokens) / best;
    };
    kv::MemoryReport hard_mem;
    const double full_tps = run(Mode::Full, nullptr);
    const double hard_tps = run(Mode::Hard, &hard_mem);

    json report = stamp(cfg);
    report["prompt_len"] = b.prompt_len;
    report["decode_tokens"] = b.decode_tokens;
    report["repeats"] = b.repeats;
    report["hard_retain_rate"] = hard_mem.rate_overall;
    report["wall_clock"] = {{"full_tokens_per_sec", full_tps},
                            {"hard_tokens_per_sec", hard_tps},
                            {"throughput_ratio", hard_tps / full_tps}};
    const fs::path out = cfg.out();
    fs::create_directories(out);
    io::write_json(out / "bench.json", report);
    return report;
}

}  // namespace dynakv::harness
