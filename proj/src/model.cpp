// SPDX-License-Identifier: Apache-2.0

#include "dynakv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dynakv/error.hpp"
#include "dynakv/linalg.hpp"
#include "dynakv/serialize.hpp"

namespace dynakv::model {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || head_dim == 0 || d_model == 0 || vocab_size == 0 || max_seq_len == 0 ||
        mlp_mult == 0) {
        throw ConfigError("model: all sizes must be positive");
    }
    if (head_dim % 2 != 0) throw ConfigError("model: head_dim must be even for rotary embeddings");
    if (!(rope_base > 1.0)) throw ConfigError("model: rope_base must exceed 1");
    if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
    if (!(gate_init_slope >= 0.0) || !std::isfinite(gate_init_slope)) {
        throw ConfigError("model: gate_init_slope must be finite and non-negative");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layers", n_layers},     {"n_heads", n_heads},         {"head_dim", head_dim},
            {"d_model", d_model},       {"vocab_size", vocab_size},   {"max_seq_len", max_seq_len},
            {"mlp_mult", mlp_mult},     {"rope_base", rope_base},     {"init_std", init_std},
            {"gate_init_slope", gate_init_slope}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model section must be an object");
    ModelConfig c;
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "n_layers") c.n_layers = val.get<std::size_t>();
            else if (key == "n_heads") c.n_heads = val.get<std::size_t>();
            else if (key == "head_dim") c.head_dim = val.get<std::size_t>();
            else if (key == "d_model") c.d_model = val.get<std::size_t>();
            else if (key == "vocab_size") c.vocab_size = val.get<std::size_t>();
            else if (key == "max_seq_len") c.max_seq_len = val.get<std::size_t>();
            else if (key == "mlp_mult") c.mlp_mult = val.get<std::size_t>();
            else if (key == "rope_base") c.rope_base = val.get<double>();
            else if (key == "init_std") c.init_std = val.get<double>();
            else if (key == "gate_init_slope") c.gate_init_slope = val.get<double>();
            else throw ConfigError("model: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    c.validate();
    return c;
}

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::Full: return "full";
        case Mode::Soft: return "soft";
        case Mode::Hard: return "hard";
    }
    return "?";
}

Mode parse_mode(const std::string& s) {
    if (s == "full") return Mode::Full;
    if (s == "soft") return Mode::Soft;
    if (s == "hard") return Mode::Hard;
    throw ConfigError("unknown mode '" + s + "' (expected full|soft|hard)");
}

// ---------------------------------------------------------------- parameters

namespace {

Tensor randn(Shape shape, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std);
    Tensor t(std::move(shape));
    for (double& v : t.span()) v = dist(rng);
    return t;
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }
std::string basis_stem(std::size_t l, Stream s) { return "L" + std::to_string(l) + "_" + std::string(stream_name(s)); }

}  // namespace

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const double sd = cfg.init_std;
    const std::size_t dm = cfg.d_model, dkv = cfg.d_kv(), dff = cfg.mlp_mult * cfg.d_model;

    Model m;
    m.cfg_ = cfg;
    m.embed = ad::Var::param(randn({cfg.vocab_size, dm}, sd, rng));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const int li = static_cast<int>(l);
        LayerParams p{
            ad::Var::param(Tensor({dm}, 1.0)), ad::Var::param(Tensor({dm})),
            ad::Var::param(randn({dm, dkv}, sd, rng)), ad::Var::param(randn({dm, dkv}, sd, rng)),
            ad::Var::param(randn({dm, dkv}, sd, rng)), ad::Var::param(randn({dkv, dm}, sd, rng)),
            ad::Var::param(Tensor({dm}, 1.0)), ad::Var::param(Tensor({dm})),
            ad::Var::param(randn({dm, dff}, sd, rng)), ad::Var::param(Tensor({dff})),
            ad::Var::param(randn({dff, dm}, sd, rng)), ad::Var::param(Tensor({dm})),
            ad::Var::param(Tensor::identity(dkv)), ad::Var::param(Tensor::identity(dkv)),
            gate::GateParams::initial(dkv, li, Stream::Key, cfg.gate_init_slope),
            gate::GateParams::initial(dkv, li, Stream::Value, cfg.gate_init_slope),
            spectral::identity_basis(dkv, li, Stream::Key), spectral::identity_basis(dkv, li, Stream::Value),
        };
        m.layers.push_back(std::move(p));
    }
    m.lnf_g = ad::Var::param(Tensor({dm}, 1.0));
    m.lnf_b = ad::Var::param(Tensor({dm}));
    m.w_out = ad::Var::param(randn({dm, cfg.vocab_size}, sd, rng));
    return m;
}

std::vector<std::pair<std::string, ad::Var>> Model::named_params() const {
    std::vector<std::pair<std::string, ad::Var>> out{{"embed", embed}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& p = layers[l];
        const auto pre = layer_prefix(l);
        out.insert(out.end(), {{pre + "ln1_g", p.ln1_g}, {pre + "ln1_b", p.ln1_b}, {pre + "wq", p.wq},
                               {pre + "wk", p.wk},       {pre + "wv", p.wv},       {pre + "wo", p.wo},
                               {pre + "ln2_g", p.ln2_g}, {pre + "ln2_b", p.ln2_b}, {pre + "w1", p.w1},
                               {pre + "b1", p.b1},       {pre + "w2", p.w2},       {pre + "b2", p.b2},
                               {pre + "u_k", p.u_k},     {pre + "u_v", p.u_v},     {pre + "gate_k.W", p.gate_k.W},
                               {pre + "gate_k.b", p.gate_k.b}, {pre + "gate_v.W", p.gate_v.W},
                               {pre + "gate_v.b", p.gate_v.b}});
    }
    out.insert(out.end(), {{"lnf_g", lnf_g}, {"lnf_b", lnf_b}, {"w_out", w_out}});
    return out;
}

std::vector<ad::Var> Model::base_params() const {
    std::vector<ad::Var> out{embed};
    for (const auto& p : layers)
        out.insert(out.end(), {p.ln1_g, p.ln1_b, p.wq, p.wk, p.wv, p.wo, p.ln2_g, p.ln2_b, p.w1, p.b1, p.w2, p.b2});
    out.insert(out.end(), {lnf_g, lnf_b, w_out});
    return out;
}

std::vector<ad::Var> Model::gate_params() const {
    std::vector<ad::Var> out;
    for (const auto& p : layers) out.insert(out.end(), {p.gate_k.W, p.gate_k.b, p.gate_v.W, p.gate_v.b});
    return out;
}

std::vector<ad::Var> Model::basis_params() const {
    std::vector<ad::Var> out;
    for (const auto& p : layers) out.insert(out.end(), {p.u_k, p.u_v});
    return out;
}

Model Model::clone() const {
    Model m = Model::init(cfg_, 0);
    const auto src = named_params();
    auto dst = m.named_params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second.mutable_value() = src[i].second.value();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        m.layers[l].basis_k = layers[l].basis_k;
        m.layers[l].basis_v = layers[l].basis_v;
    }
    return m;
}

void Model::set_basis(std::size_t layer, Stream stream, spectral::SpectralBasis basis) {
    if (layer >= layers.size()) throw DimensionError("set_basis: layer out of range");
    if (basis.dim() != cfg_.d_kv()) throw DimensionError("set_basis: basis width does not match d_kv");
    auto& p = layers[layer];
    basis.layer = static_cast<int>(layer);
    basis.stream = stream;
    ad::Var& u = stream == Stream::Key ? p.u_k : p.u_v;
    u.mutable_value() = basis.U;
    (stream == Stream::Key ? p.basis_k : p.basis_v) = std::move(basis);
}

void Model::refresh_bases() {
    for (auto& p : layers) {
        for (Stream s : {Stream::Key, Stream::Value}) {
            auto& b = s == Stream::Key ? p.basis_k : p.basis_v;
            b.U = p.u(s).value();
            b = spectral::refresh_inverse(std::move(b));
        }
    }
}

void Model::save(const fs::path& dir) const {
    fs::create_directories(dir / "tensors");
    fs::create_directories(dir / "bases");
    io::write_json(dir / "config.json", cfg_.to_json());
    for (const auto& [name, var] : named_params()) io::write_dkvt(dir / "tensors" / (name + ".dkvt"), var.value());
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (Stream s : {Stream::Key, Stream::Value})
            spectral::save_basis(dir / "bases", basis_stem(l, s), layers[l].basis(s));
}

Model Model::load(const fs::path& dir) {
    const auto cfg = ModelConfig::from_json(io::read_json(dir / "config.json"));
    Model m = Model::init(cfg, 0);
    for (auto& [name, var] : m.named_params()) {
        Tensor t = io::read_dkvt(dir / "tensors" / (name + ".dkvt"));
        if (t.shape() != var.shape()) {
            throw IoError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(var.shape()));
        }
        // Vars are shared handles, so this writes through to the model.
        ad::Var handle = var;
        handle.mutable_value() = std::move(t);
    }
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        for (Stream s : {Stream::Key, Stream::Value}) {
            auto b = spectral::load_basis(dir / "bases", basis_stem(l, s));
            auto& dst = s == Stream::Key ? m.layers[l].basis_k : m.layers[l].basis_v;
            b.U = m.layers[l].u(s).value();
            dst = std::move(b);
        }
    }
    return m;
}

// ---------------------------------------------------------------- graph forward

namespace {

ad::Var rope(const ad::Var& x, std::span<const std::size_t> positions, const ModelConfig& cfg) {
    Tensor out = x.value();
    kv::apply_rope(out, positions, cfg.n_heads, cfg.head_dim, cfg.rope_base);
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    return ad::make_result(std::move(out), {x}, [pos = std::move(pos), cfg](ad::Node& self) {
        // Rotation adjoint is the inverse rotation.
        Tensor g = self.grad;
        kv::apply_rope(g, pos, cfg.n_heads, cfg.head_dim, cfg.rope_base, /*inverse=*/true);
        self.parents[0]->accumulate(g);
    }, "rope");
}

ad::Var attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, std::span<const std::size_t> pos,
                  const ModelConfig& cfg) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    std::vector<ad::Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * cfg.head_dim;
        auto qh = ad::slice(q, 1, off, cfg.head_dim);
        auto kh = ad::slice(k, 1, off, cfg.head_dim);
        auto vh = ad::slice(v, 1, off, cfg.head_dim);
        auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        heads.push_back(ad::matmul(ad::causal_softmax(scores, pos, pos), vh));
    }
    return ad::concat(heads, 1);
}

}  // namespace

GraphContext prepare_graph(const Model& model, const ForwardOptions& opts) {
    GraphContext ctx;
    if (opts.mode != Mode::Soft) return ctx;
    for (const auto& p : model.layers) {
        if (opts.trainable_basis) {
            ctx.u_inv_k.push_back(ad::matinv(p.u_k));
            ctx.u_inv_v.push_back(ad::matinv(p.u_v));
        } else {
            ctx.u_inv_k.push_back(ad::Var::constant(p.basis_k.U_inv));
            ctx.u_inv_v.push_back(ad::Var::constant(p.basis_v.U_inv));
        }
    }
    return ctx;
}

GraphOutput forward_graph(const Model& model, const GraphContext& ctx, std::span<const int> tokens,
                          const ForwardOptions& opts) {
    const auto& cfg = model.config();
    if (opts.mode == Mode::Hard) throw ConfigError("forward_graph: hard mode runs through InferenceSession");
    if (tokens.empty()) throw DimensionError("forward: empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
        throw ConfigError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    if (opts.mode == Mode::Soft && ctx.u_inv_k.size() != model.layers.size()) {
        throw ConfigError("forward: graph context not prepared for soft mode");
    }
    const std::size_t T = tokens.size();
    std::vector<std::size_t> pos(T);
    std::iota(pos.begin(), pos.end(), std::size_t{0});

    GraphOutput out;
    std::vector<ad::Var> rate_terms;
    auto h = ad::embedding_lookup(model.embed, tokens);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& p = model.layers[l];
        auto a = ad::layer_norm(h, p.ln1_g, p.ln1_b);
        auto q = ad::matmul(a, p.wq);
        auto k = ad::matmul(a, p.wk);
        auto v = ad::matmul(a, p.wv);
        if (opts.mode == Mode::Soft) {
            auto compress = [&](const ad::Var& x, Stream s, const ad::Var& u_inv) {
                auto xt = ad::matmul(x, p.u(s));
                auto m = gate::soft_mask(gate::cutoff_distribution(p.gate(s), xt));
                rate_terms.push_back(ad::scale(ad::sum(m), 1.0 / static_cast<double>(cfg.d_kv())));
                return ad::matmul(ad::mul(xt, m), u_inv);
            };
            k = compress(k, Stream::Key, ctx.u_inv_k[l]);
            v = compress(v, Stream::Value, ctx.u_inv_v[l]);
            out.rate_terms += 2 * T;
        }
        q = rope(q, pos, cfg);
        k = rope(k, pos, cfg);
        h = ad::add(h, ad::matmul(attention(q, k, v, pos, cfg), p.wo));
        auto b = ad::layer_norm(h, p.ln2_g, p.ln2_b);
        auto f = ad::add_bias(ad::matmul(ad::gelu(ad::add_bias(ad::matmul(b, p.w1), p.b1)), p.w2), p.b2);
        h = ad::add(h, f);
    }
    out.logits = ad::matmul(ad::layer_norm(h, model.lnf_g, model.lnf_b), model.w_out);
    if (!rate_terms.empty()) {
        auto acc = rate_terms.front();
        for (std::size_t i = 1; i < rate_terms.size(); ++i) acc = ad::add(acc, rate_terms[i]);
        out.soft_rate_sum = acc;
    } else {
        out.soft_rate_sum = ad::Var::constant(Tensor::scalar(0.0));
    }
    return out;
}

// ---------------------------------------------------------------- inference session

namespace {

void layer_norm_rows(Tensor& x, const Tensor& g, const Tensor& b, double eps = 1e-5) {
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) row[j] = (row[j] - mu) * rstd * g[j] + b[j];
    }
}

void add_row_bias(Tensor& x, const Tensor& b) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    }
}

void gelu_inplace(Tensor& x) {
    const double c = std::sqrt(2.0 / 3.14159265358979323846);
    for (double& v : x.span()) v = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

}  // namespace

InferenceSession::InferenceSession(const Model& model, SessionOptions opts)
    : model_(model), opts_(opts), cache_(model.config().geometry()) {
    if (opts_.mode == Mode::Soft) throw ConfigError("InferenceSession: soft mode has no physical cache");
    attn_.resize(model.config().n_layers);
}

void InferenceSession::replace_cache(kv::RaggedKVCache cache) {
    if (cache.geometry().n_layers != cache_.geometry().n_layers || cache.geometry().d_kv() != cache_.geometry().d_kv()) {
        throw DimensionError("replace_cache: geometry mismatch");
    }
    cache_ = std::move(cache);
}

Tensor InferenceSession::forward(std::span<const int> tokens) {
    const auto& cfg = model_.config();
    const std::size_t n = tokens.size();
    if (n == 0) throw DimensionError("session forward: no tokens");
    if (next_pos_ + n > cfg.max_seq_len) throw ConfigError("session forward: sequence exceeds max_seq_len");
    const std::size_t d = cfg.d_kv();
    const std::size_t hd = cfg.head_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<std::size_t> qpos(n);
    std::iota(qpos.begin(), qpos.end(), next_pos_);

    Tensor h({n, cfg.d_model});
    for (std::size_t t = 0; t < n; ++t) {
        if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cfg.vocab_size) {
            throw DimensionError("session forward: token outside vocabulary");
        }
        auto src = model_.embed.value().row(static_cast<std::size_t>(tokens[t]));
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }

    for (std::size_t l = 0; l < model_.layers.size(); ++l) {
        const auto& p = model_.layers[l];
        Tensor a = h;
        layer_norm_rows(a, p.ln1_g.value(), p.ln1_b.value());
        Tensor q = linalg::matmul(a, p.wq.value());
        Tensor k = linalg::matmul(a, p.wk.value());
        Tensor v = linalg::matmul(a, p.wv.value());

        if (opts_.mode == Mode::Hard) {
            const Tensor kt = spectral::project(p.basis_k, k);
            const Tensor vt = spectral::project(p.basis_v, v);
            const Tensor mk = gate::soft_mask_values(p.gate_k, kt);
            const Tensor mv = gate::soft_mask_values(p.gate_v, vt);
            for (std::size_t t = 0; t < n; ++t) {
                std::size_t r[2];
                const Tensor* masks[2] = {&mk, &mv};
                for (int s = 0; s < 2; ++s) {
                    r[s] = opts_.force_full_rank ? d : gate::harden(masks[s]->row(t), opts_.tau).retained;
                    if (r[s] == 0) {
                        r[s] = 1;
                        cache_.record_clamp();
                    }
                    if (opts_.collect_rates) {
                        rates_.push_back({0, l, s == 0 ? Stream::Key : Stream::Value, qpos[t],
                                          gate::retain_rate(masks[s]->row(t)),
                                          static_cast<double>(r[s]) / static_cast<double>(d)});
                    }
                }
                cache_.append(l, kt.row(t).first(r[0]), vt.row(t).first(r[1]), qpos[t]);
            }
        } else {
            for (std::size_t t = 0; t < n; ++t) cache_.append(l, k.row(t), v.row(t), qpos[t]);
        }

        const bool hard = opts_.mode == Mode::Hard;
        Tensor keys = kv::reconstruct_stream(cache_, l, Stream::Key, hard ? &p.basis_k : nullptr);
        Tensor vals = kv::reconstruct_stream(cache_, l, Stream::Value, hard ? &p.basis_v : nullptr);
        const auto kpos = cache_.positions(l);
        kv::apply_rope(q, qpos, cfg.n_heads, hd, cfg.rope_base);
        kv::apply_rope(keys, kpos, cfg.n_heads, hd, cfg.rope_base);

        const std::size_t T = keys.rows();
        const std::size_t w = std::min(opts_.attention_window, n);
        if (opts_.attention_window) attn_[l] = Tensor({cfg.n_heads, w, T});

        Tensor o({n, d});
        std::vector<double> scores(T);
        for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
            const std::size_t off = hh * hd;
            for (std::size_t i = 0; i < n; ++i) {
                const double* qi = q.data() + i * d + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < T; ++j) {
                    if (kpos[j] > qpos[i]) {
                        scores[j] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    const double* kj = keys.data() + j * d + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    scores[j] = s * inv_sqrt;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    scores[j] = kpos[j] > qpos[i] ? 0.0 : std::exp(scores[j] - mx);
                    z += scores[j];
                }
                double* oi = o.data() + i * d + off;
                for (std::size_t j = 0; j < T; ++j) {
                    const double pj = scores[j] / z;
                    if (pj == 0.0) continue;
                    const double* vj = vals.data() + j * d + off;
                    for (std::size_t c = 0; c < hd; ++c) oi[c] += pj * vj[c];
                }
                if (w && i >= n - w) {
                    double* dst = attn_[l].data() + (hh * w + (i - (n - w))) * T;
                    for (std::size_t j = 0; j < T; ++j) dst[j] = scores[j] / z;
                }
            }
        }
        h.add_inplace(linalg::matmul(o, p.wo.value()));

        Tensor b = h;
        layer_norm_rows(b, p.ln2_g.value(), p.ln2_b.value());
        Tensor f = linalg::matmul(b, p.w1.value());
        add_row_bias(f, p.b1.value());
        gelu_inplace(f);
        Tensor f2 = linalg::matmul(f, p.w2.value());
        add_row_bias(f2, p.b2.value());
        h.add_inplace(f2);
    }
    layer_norm_rows(h, model_.lnf_g.value(), model_.lnf_b.value());
    next_pos_ += n;
    return linalg::matmul(h, model_.w_out.value());
}

Tensor forward(const Model& model, std::span<const int> tokens, const ForwardOptions& opts) {
    if (opts.mode == Mode::Hard) {
        InferenceSession s(model, {Mode::Hard, opts.tau, opts.force_full_rank, 0, false});
        return s.forward(tokens);
    }
    ad::NoGradGuard guard;
    const auto ctx = prepare_graph(model, opts);
    return forward_graph(model, ctx, tokens, opts).logits.value();
}

}  // namespace dynakv::model
