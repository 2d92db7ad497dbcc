// SPDX-License-Identifier: Apache-2.0

#include "dynakv/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <thread>

#include "dynakv/error.hpp"
#include "dynakv/tokenizer.hpp"

namespace dynakv::model {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train.") + key + ": " + e.what());
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("train.alpha must be a finite value >= 0");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("train.tau must lie in (0, 1)");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be positive");
    if (steps == 0) throw ConfigError("train.steps must be positive");
    if (batch == 0) throw ConfigError("train.batch must be positive");
    if (seq_len < 2) throw ConfigError("train.seq_len must be at least 2");
    if (mode == Mode::Hard) throw ConfigError("train.mode: hard masks are not differentiable; use soft or full");
    if (mode == Mode::Full && alpha != 0.0) throw ConfigError("train.alpha must be 0 in full mode");
    if (mode == Mode::Full && freeze_base) throw ConfigError("train.freeze_base leaves nothing to train in full mode");
    if (!std::isfinite(grad_clip)) throw ConfigError("train.grad_clip must be finite");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"alpha", alpha},
            {"tau", tau},
            {"lr", lr},
            {"steps", steps},
            {"batch", batch},
            {"seq_len", seq_len},
            {"seed", seed},
            {"mode", mode_name(mode)},
            {"trainable_basis", trainable_basis},
            {"freeze_base", freeze_base},
            {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train section must be an object");
    static const char* known[] = {"alpha", "tau",  "lr",   "steps",           "batch",       "seq_len",
                                  "seed",  "mode", "trainable_basis", "freeze_base", "grad_clip"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("train: unknown key '" + key + "'");
    }
    TrainConfig c;
    read_key(j, "alpha", c.alpha);
    read_key(j, "tau", c.tau);
    read_key(j, "lr", c.lr);
    read_key(j, "steps", c.steps);
    read_key(j, "batch", c.batch);
    read_key(j, "seq_len", c.seq_len);
    read_key(j, "seed", c.seed);
    read_key(j, "trainable_basis", c.trainable_basis);
    read_key(j, "freeze_base", c.freeze_base);
    read_key(j, "grad_clip", c.grad_clip);
    if (j.contains("mode")) {
        std::string m;
        read_key(j, "mode", m);
        c.mode = parse_mode(m);
    }
    c.validate();
    return c;
}

std::string step_log_line(const StepLog& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, R"({"step":%zu,"ce":%.17g,"r_soft":%.17g,"total":%.17g})", s.step, s.ce, s.r_soft,
                  s.total);
    return buf;
}

ad::Var composite_loss(const ad::Var& ce, const ad::Var& retain_rate, double alpha) {
    if (alpha == 0.0) return ce;
    return ad::add(ce, ad::scale(ad::mul(retain_rate, retain_rate), alpha));
}

Example make_example(std::span<const int> window) {
    if (window.empty()) throw DimensionError("make_example: empty window");
    Example ex;
    ex.input.reserve(window.size());
    ex.input.push_back(text::kBos);
    ex.input.insert(ex.input.end(), window.begin(), window.end() - 1);
    ex.target.assign(window.begin(), window.end());
    return ex;
}

BatchSampler::BatchSampler(std::span<const int> corpus, std::size_t seq_len, std::uint64_t seed)
    : corpus_(corpus), seq_len_(seq_len), state_(seed) {
    if (seq_len == 0) throw ConfigError("BatchSampler: zero sequence length");
    if (corpus.size() < seq_len) {
        throw InsufficientDataError("corpus has " + std::to_string(corpus.size()) + " tokens, need at least " +
                                    std::to_string(seq_len));
    }
}

std::vector<Example> BatchSampler::next(std::size_t batch) {
    std::vector<Example> out;
    out.reserve(batch);
    const std::uint64_t span = corpus_.size() - seq_len_ + 1;
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t start = splitmix64(state_) % span;
        out.push_back(make_example(corpus_.subspan(start, seq_len_)));
    }
    return out;
}

std::vector<Example> split_examples(std::span<const int> corpus, std::size_t seq_len, std::size_t max_examples) {
    if (seq_len == 0) throw ConfigError("split_examples: zero sequence length");
    std::vector<Example> out;
    for (std::size_t s = 0; s + seq_len <= corpus.size(); s += seq_len) {
        if (max_examples && out.size() == max_examples) break;
        out.push_back(make_example(corpus.subspan(s, seq_len)));
    }
    if (out.empty()) throw InsufficientDataError("split_examples: corpus shorter than one window");
    return out;
}

namespace {

std::vector<ad::Var> trainable(const Model& m, const TrainConfig& cfg) {
    std::vector<ad::Var> ps;
    auto add = [&](std::vector<ad::Var> v) { ps.insert(ps.end(), v.begin(), v.end()); };
    if (!cfg.freeze_base) add(m.base_params());
    if (cfg.mode == Mode::Soft) {
        add(m.gate_params());
        if (cfg.trainable_basis) add(m.basis_params());
    }
    return ps;
}

}  // namespace

Trainer::Trainer(Model& model, TrainConfig cfg)
    : model_(model), cfg_((cfg.validate(), cfg)), opt_(trainable(model, cfg_), ad::AdamConfig{.lr = cfg_.lr}) {}

StepLog Trainer::step(std::span<const Example> batch) {
    if (batch.empty()) throw DimensionError("train step: empty batch");
    ForwardOptions fo;
    fo.mode = cfg_.mode;
    fo.tau = cfg_.tau;
    fo.trainable_basis = cfg_.trainable_basis;
    const GraphContext ctx = prepare_graph(model_, fo);

    std::vector<ad::Var> ces, rates;
    std::size_t rate_terms = 0;
    for (const auto& ex : batch) {
        GraphOutput out = forward_graph(model_, ctx, ex.input, fo);
        ces.push_back(ad::cross_entropy(out.logits, ex.target));
        if (cfg_.mode == Mode::Soft) {
            rates.push_back(out.soft_rate_sum);
            rate_terms += out.rate_terms;
        }
    }
    auto total = [](const std::vector<ad::Var>& xs) {
        ad::Var acc = xs.front();
        for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
        return acc;
    };
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    ad::Var ce = ad::scale(total(ces), inv_b);
    ad::Var loss = ce;
    double r_soft = 1.0;
    if (cfg_.mode == Mode::Soft) {
        ad::Var R = ad::scale(total(rates), 1.0 / static_cast<double>(rate_terms));
        r_soft = R.value().item();
        loss = composite_loss(ce, R, cfg_.alpha);
    }

    StepLog log{++step_, ce.value().item(), r_soft, loss.value().item()};
    if (!std::isfinite(log.total) || !std::isfinite(log.ce)) {
        throw NumericError("non-finite loss at step " + std::to_string(log.step));
    }

    opt_.zero_grad();
    loss.backward();
    std::vector<ad::Var> ps = opt_.params();
    if (cfg_.grad_clip > 0.0) {
        const double norm = ad::clip_grad_norm(ps, cfg_.grad_clip);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(log.step));
    }
    opt_.step();
    if (cfg_.mode == Mode::Soft && cfg_.trainable_basis) model_.refresh_bases();
    return log;
}

std::vector<StepLog> train(Model& model, std::span<const int> corpus, const TrainConfig& cfg,
                           const std::function<void(const StepLog&)>& on_step) {
    Trainer trainer(model, cfg);
    BatchSampler sampler(corpus, cfg.seq_len, cfg.seed);
    std::vector<StepLog> logs;
    logs.reserve(cfg.steps);
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const auto batch = sampler.next(cfg.batch);
        logs.push_back(trainer.step(batch));
        if (on_step) on_step(logs.back());
    }
    return logs;
}

std::size_t thread_budget() {
    const char* env = std::getenv("DYNAKV_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (*end != '\0' || v == 0) throw ConfigError(std::string("DYNAKV_THREADS must be a positive integer, got '") + env + "'");
    return v;
}

namespace {

struct SeqResult {
    double nll = 0.0;
    std::size_t tokens = 0;
    double soft_sum = 0.0;
    std::size_t soft_terms = 0;
    kv::MemoryReport memory;
};

SeqResult eval_one(const Model& model, const Example& ex, Mode mode, double tau) {
    SeqResult r;
    r.tokens = ex.target.size();
    Tensor logits;
    if (mode == Mode::Hard) {
        InferenceSession session(model, SessionOptions{.mode = Mode::Hard, .tau = tau});
        logits = session.forward(ex.input);
        r.memory = kv::memory_report(session.cache());
    } else {
        ad::NoGradGuard guard;
        ForwardOptions fo{.mode = mode, .tau = tau, .trainable_basis = false};
        const GraphContext ctx = prepare_graph(model, fo);
        GraphOutput out = forward_graph(model, ctx, ex.input, fo);
        logits = out.logits.value();
        if (mode == Mode::Soft) {
            r.soft_sum = out.soft_rate_sum.value().item();
            r.soft_terms = out.rate_terms;
        }
    }
    {
        ad::NoGradGuard guard;
        r.nll = ad::cross_entropy(ad::Var::constant(std::move(logits)), ex.target).value().item() *
                static_cast<double>(r.tokens);
    }
    return r;
}

}  // namespace

EvalResult evaluate_ppl(const Model& model, std::span<const Example> examples, Mode mode, double tau,
                        std::size_t threads) {
    if (examples.empty()) throw InsufficientDataError("evaluate_ppl: no examples");
    std::vector<SeqResult> results(examples.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, examples.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < examples.size(); ++i) results[i] = eval_one(model, examples[i], mode, tau);
    } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < examples.size(); i += workers)
                        results[i] = eval_one(model, examples[i], mode, tau);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    EvalResult out;
    double nll = 0.0, soft = 0.0;
    std::size_t soft_terms = 0;
    std::vector<kv::MemoryReport> reports;
    for (const auto& r : results) {
        nll += r.nll;
        out.tokens += r.tokens;
        soft += r.soft_sum;
        soft_terms += r.soft_terms;
        if (mode == Mode::Hard) reports.push_back(r.memory);
    }
    out.mean_nll = nll / static_cast<double>(out.tokens);
    if (!std::isfinite(out.mean_nll)) throw NumericError("evaluate_ppl: non-finite NLL");
    out.ppl = std::exp(out.mean_nll);
    if (mode == Mode::Hard) {
        out.memory = kv::combine_reports(reports);
        out.hard_retain_rate = out.memory.rate_overall;
    }
    if (mode == Mode::Soft && soft_terms) out.soft_retain_rate = soft / static_cast<double>(soft_terms);
    return out;
}

CalibrationStats calibrate(Model& model, std::span<const Example> examples) {
    const auto& cfg = model.config();
    const std::size_t d = cfg.d_kv();
    std::vector<spectral::CovarianceAccumulator> acc_k, acc_v;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        acc_k.emplace_back(d);
        acc_v.emplace_back(d);
    }
    CalibrationStats stats;
    for (const auto& ex : examples) {
        InferenceSession session(model, SessionOptions{.mode = Mode::Full});
        session.forward(ex.input);
        const auto& cache = session.cache();
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            for (std::size_t t = 0; t < cache.tokens(l); ++t) {
                acc_k[l].accumulate_row(cache.entry(l, Stream::Key, t));
                acc_v[l].accumulate_row(cache.entry(l, Stream::Value, t));
            }
        }
        stats.tokens += ex.input.size();
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto bk = spectral::compute_basis(acc_k[l], l, Stream::Key);
        auto bv = spectral::compute_basis(acc_v[l], l, Stream::Value);
        stats.eigenvalues_k.push_back(bk.eigenvalues);
        stats.eigenvalues_v.push_back(bv.eigenvalues);
        model.set_basis(l, Stream::Key, std::move(bk));
        model.set_basis(l, Stream::Value, std::move(bv));
    }
    return stats;
}

}  // namespace dynakv::model
