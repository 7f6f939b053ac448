#include "lc/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace lc {

namespace {

Tensor detach(const Tensor& t) {
    Tensor out = t;
    out.tape = nullptr;
    out.node = -1;
    return out;
}

void write_u16(std::ostream& os, uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint16_t read_u16(std::istream& is) {
    uint16_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 2);
    return v;
}
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw ValidationError("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

void ModelConfig::validate() const {
    if (depth < 2) throw ValidationError("model: depth must be >= 2");
    if (width < 1 || heads < 1 || width % heads != 0)
        throw ValidationError("model: width must be divisible by heads");
    if (long_skip && depth % 2 != 0)
        throw ValidationError("model: long_skip requires even depth");
    if (tokens < 1 || in_dim < 1) throw ValidationError("model: bad token/input dims");
    if (num_classes < 1) throw ValidationError("model: num_classes must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ValidationError("model: time_embed_dim must be even and >= 2");
}

int DenoiserModel::add_param(const std::string& name, Tensor t) {
    names_.push_back(name);
    params_.push_back(std::move(t));
    return static_cast<int>(params_.size()) - 1;
}

DenoiserModel::DenoiserModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    int w = cfg_.width, te = cfg_.time_embed_dim, ffn = cfg_.resolved_ffn_dim();
    auto winit = [&](int rows, int cols) {
        return randn({rows, cols}, rng, 1.0f / std::sqrt(static_cast<float>(rows)));
    };

    w_in_ = add_param("embed.w", winit(cfg_.in_dim, w));
    b_in_ = add_param("embed.b", zeros({w}));
    pos_ = add_param("embed.pos", randn({cfg_.tokens, w}, rng, 0.02f));
    t_w1_ = add_param("time.w1", winit(te, te));
    t_b1_ = add_param("time.b1", zeros({te}));
    t_w2_ = add_param("time.w2", winit(te, te));
    t_b2_ = add_param("time.b2", zeros({te}));
    cls_ = add_param("class.embed", randn({cfg_.num_classes + 1, te}, rng, 0.02f));

    sub_.resize(static_cast<size_t>(cfg_.sublayers()));
    for (int j = 0; j < cfg_.sublayers(); ++j) {
        std::string base = "block" + std::to_string(j / 2) +
                           (sublayer_kind(j) == SublayerKind::Mhsa ? ".attn" : ".ffn");
        SublayerParams& s = sub_[static_cast<size_t>(j)];
        if (sublayer_kind(j) == SublayerKind::Mhsa) {
            s.wq = add_param(base + ".wq", winit(w, w));
            s.bq = add_param(base + ".bq", zeros({w}));
            s.wk = add_param(base + ".wk", winit(w, w));
            s.bk = add_param(base + ".bk", zeros({w}));
            s.wv = add_param(base + ".wv", winit(w, w));
            s.bv = add_param(base + ".bv", zeros({w}));
            s.wo = add_param(base + ".wo", winit(w, w));
            s.bo = add_param(base + ".bo", zeros({w}));
        } else {
            s.w1 = add_param(base + ".w1", winit(w, ffn));
            s.b1 = add_param(base + ".b1", zeros({ffn}));
            s.w2 = add_param(base + ".w2", winit(ffn, w));
            s.b2 = add_param(base + ".b2", zeros({w}));
        }
        // Zero-initialized so every sublayer starts as the identity (g = 0).
        s.w_mod = add_param(base + ".mod.w", zeros({te, 2 * w + 1}));
        s.b_mod = add_param(base + ".mod.b", zeros({2 * w + 1}));
    }

    if (cfg_.long_skip) {
        for (int m = 0; m < cfg_.depth / 2; ++m) {
            merge_w_.push_back(add_param("merge" + std::to_string(m) + ".w", zeros({2 * w, w})));
            merge_b_.push_back(add_param("merge" + std::to_string(m) + ".b", zeros({w})));
        }
    }

    head_w_ = add_param("head.w", zeros({w, cfg_.in_dim}));
    head_b_ = add_param("head.b", zeros({cfg_.in_dim}));
}

uint64_t DenoiserModel::param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const Tensor& p : params_)
        h = fnv1a(p.data.data(), p.data.size() * sizeof(float), h);
    return h;
}

void DenoiserModel::randomize_all(Rng& rng, float stddev) {
    for (Tensor& p : params_)
        for (auto& x : p.data) x = static_cast<float>(rng.normal()) * stddev;
}

std::vector<Tensor> DenoiserModel::leaf_params(Tape& tape) const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const Tensor& p : params_) out.push_back(tape.leaf(p));
    return out;
}

Tensor DenoiserModel::time_embedding(int t) const {
    int te = cfg_.time_embed_dim;
    int half = te / 2;
    Tensor emb = zeros({1, te});
    for (int k = 0; k < half; ++k) {
        double freq = std::exp(-std::log(10000.0) * k / half);
        emb.data[static_cast<size_t>(k)] = static_cast<float>(std::cos(t * freq));
        emb.data[static_cast<size_t>(half + k)] = static_cast<float>(std::sin(t * freq));
    }
    return emb;
}

DenoiserModel::SublayerEval DenoiserModel::make_sublayer_eval(const std::vector<Tensor>& p, int j,
                                                              const Tensor& cond, const Tensor& h,
                                                              const ForwardCtx& ctx) const {
    const SublayerParams& s = sub_[static_cast<size_t>(j)];
    int w = cfg_.width;
    Tensor mod = add(matmul(cond, p[static_cast<size_t>(s.w_mod)]), p[static_cast<size_t>(s.b_mod)]);
    Tensor shift = slice(mod, 1, 0, w);
    Tensor scale_row = slice(mod, 1, w, w);
    Tensor gate = slice(mod, 1, 2 * w, 1);

    SublayerEval ev;
    ev.gate = gate;
    ev.f = [this, &p, j, shift, scale_row, h, ctx]() {
        Tensor modulated = add(mul(layernorm(h), add(scale_row, scalar(1.0f))), shift);
        return kernel_with(p, j, modulated, ctx);
    };
    return ev;
}

Tensor DenoiserModel::sublayer_kernel(int j, const Tensor& h_norm, const ForwardCtx& ctx) const {
    return kernel_with(params_, j, h_norm, ctx);
}

Tensor DenoiserModel::kernel_with(const std::vector<Tensor>& p, int j, const Tensor& hn,
                                  const ForwardCtx& ctx) const {
    if (j < 0 || j >= cfg_.sublayers()) throw ShapeError("sublayer index out of range");
    const SublayerParams& s = sub_[static_cast<size_t>(j)];
    if (sublayer_kind(j) == SublayerKind::Mhsa) {
        if (ctx.counter) ++ctx.counter->mhsa;
        int hd = cfg_.width / cfg_.heads;
        Tensor q = add(matmul(hn, p[static_cast<size_t>(s.wq)]), p[static_cast<size_t>(s.bq)]);
        Tensor k = add(matmul(hn, p[static_cast<size_t>(s.wk)]), p[static_cast<size_t>(s.bk)]);
        Tensor v = add(matmul(hn, p[static_cast<size_t>(s.wv)]), p[static_cast<size_t>(s.bv)]);
        Tensor heads_out;
        for (int head = 0; head < cfg_.heads; ++head) {
            Tensor qh = slice(q, 1, head * hd, hd);
            Tensor kh = slice(k, 1, head * hd, hd);
            Tensor vh = slice(v, 1, head * hd, hd);
            Tensor scores = scale(matmul(qh, transpose(kh)), 1.0f / std::sqrt(static_cast<float>(hd)));
            Tensor oh = matmul(softmax(scores), vh);
            heads_out = head == 0 ? oh : concat(heads_out, oh);
        }
        return add(matmul(heads_out, p[static_cast<size_t>(s.wo)]), p[static_cast<size_t>(s.bo)]);
    }
    if (ctx.counter) ++ctx.counter->ffn;
    Tensor hid = gelu(add(matmul(hn, p[static_cast<size_t>(s.w1)]), p[static_cast<size_t>(s.b1)]));
    return add(matmul(hid, p[static_cast<size_t>(s.w2)]), p[static_cast<size_t>(s.b2)]);
}

template <class LayerFn>
ForwardResult DenoiserModel::run_stack(const std::vector<Tensor>& p, const Tensor& x, int t, int y,
                                       const ForwardCtx& ctx, LayerFn&& layer) const {
    if (x.shape != std::vector<int>{cfg_.tokens, cfg_.in_dim})
        throw ShapeError("forward: input shape " + shape_str(x.shape) + ", expected (" +
                         std::to_string(cfg_.tokens) + "," + std::to_string(cfg_.in_dim) + ")");
    if (y < 0 || y > cfg_.num_classes)
        throw ShapeError("forward: class id " + std::to_string(y) + " outside [0," +
                         std::to_string(cfg_.num_classes) + "]");
    if (p.size() != params_.size()) throw ShapeError("forward: wrong parameter set");

    Tensor sinus = time_embedding(t);
    Tensor e1 = gelu(add(matmul(sinus, p[static_cast<size_t>(t_w1_)]), p[static_cast<size_t>(t_b1_)]));
    Tensor t_emb = add(matmul(e1, p[static_cast<size_t>(t_w2_)]), p[static_cast<size_t>(t_b2_)]);
    Tensor cond = add(t_emb, slice(p[static_cast<size_t>(cls_)], 0, y, 1));

    Tensor h = add(add(matmul(x, p[static_cast<size_t>(w_in_)]), p[static_cast<size_t>(b_in_)]),
                   p[static_cast<size_t>(pos_)]);

    ForwardResult result;
    Trace* trace = nullptr;
    if (ctx.want_trace) {
        result.trace.emplace();
        result.trace->t = t;
        result.trace->y = y;
        result.trace->entries.reserve(static_cast<size_t>(cfg_.sublayers()));
        trace = &*result.trace;
    }

    std::vector<Tensor> skips;
    int half = cfg_.depth / 2;
    for (int block = 0; block < cfg_.depth; ++block) {
        if (cfg_.long_skip) {
            if (block < half) {
                skips.push_back(h);
            } else {
                const Tensor& src = skips[static_cast<size_t>(cfg_.depth - 1 - block)];
                int m = block - half;
                Tensor merged = add(matmul(concat(h, src), p[static_cast<size_t>(merge_w_[static_cast<size_t>(m)])]),
                                    p[static_cast<size_t>(merge_b_[static_cast<size_t>(m)])]);
                h = add(h, merged);
            }
        }
        for (int k = 0; k < 2; ++k) {
            int j = 2 * block + k;
            SublayerEval ev = make_sublayer_eval(p, j, cond, h, ctx);
            h = layer(j, h, ev, trace);
        }
    }

    result.final_hidden = h;
    result.eps = add(matmul(layernorm(h), p[static_cast<size_t>(head_w_)]),
                     p[static_cast<size_t>(head_b_)]);
    return result;
}

ForwardResult DenoiserModel::forward(const Tensor& x, int t, int y, const ForwardCtx& ctx) const {
    return forward_with(params_, x, t, y, ctx);
}

ForwardResult DenoiserModel::forward_with(const std::vector<Tensor>& params, const Tensor& x,
                                          int t, int y, const ForwardCtx& ctx) const {
    return run_stack(params, x, t, y, ctx,
                     [](int, const Tensor& h, SublayerEval& ev, Trace* trace) {
                         Tensor f = ev.f();
                         if (trace)
                             trace->entries.push_back({detach(h), detach(f), ev.gate.data[0]});
                         return add(h, mul(f, ev.gate));
                     });
}

Tensor DenoiserModel::forward_cfg(const Tensor& x, int t, int y, float w,
                                  const ForwardCtx& ctx) const {
    if (w < 0.0f) throw ShapeError("forward_cfg: guidance weight must be >= 0");
    Tensor eps_null = forward(x, t, cfg_.null_class(), ctx).eps;
    if (w == 0.0f || y == cfg_.null_class()) return eps_null;
    Tensor eps_y = forward(x, t, y, ctx).eps;
    return add(eps_null, scale(sub(eps_y, eps_null), w));
}

ForwardResult DenoiserModel::forward_interp(const Tensor& x, int t, int y, const CacheStore& cache,
                                            const Tensor& beta_row, const InterpSettings& settings,
                                            const ForwardCtx& ctx) const {
    if (static_cast<int>(beta_row.numel()) != cfg_.sublayers())
        throw ShapeError("forward_interp: beta row size " + shape_str(beta_row.shape) +
                         ", expected " + std::to_string(cfg_.sublayers()) + " entries");
    if (!settings.drop && cache.sublayers() != cfg_.sublayers())
        throw ShapeError("forward_interp: cache store has wrong sublayer count");

    return run_stack(
        params_, x, t, y, ctx,
        [&](int j, const Tensor& h, SublayerEval& ev, Trace*) {
            Tensor beta_j = beta_row.shape.size() == 2 ? slice(slice(beta_row, 0, 0, 1), 1, j, 1)
                                                       : slice(beta_row, 0, j, 1);
            bool binary = !beta_j.on_tape();
            float bv = beta_j.data[0];
            if (settings.drop) {
                if (binary && bv == 0.0f) return h;
                if (binary && bv == 1.0f) return add(h, mul(ev.f(), ev.gate));
                return add(h, mul(ev.f(), mul(ev.gate, beta_j)));
            }
            float alpha_eff = settings.alpha;
            if (binary && bv == 1.0f && !settings.alpha_on_computed) alpha_eff = 1.0f;
            return interp_layer(h, ev.f, ev.gate, cache.entries[static_cast<size_t>(j)],
                                settings.mode, beta_j, alpha_eff);
        });
}

void DenoiserModel::fill_cache(const Trace& trace, CacheStore& store) const {
    if (static_cast<int>(trace.entries.size()) != cfg_.sublayers())
        throw ShapeError("fill_cache: trace has wrong sublayer count");
    if (store.sublayers() != cfg_.sublayers())
        store.entries.assign(static_cast<size_t>(cfg_.sublayers()), {});
    for (int j = 0; j < cfg_.sublayers(); ++j) {
        const TraceEntry& e = trace.entries[static_cast<size_t>(j)];
        CacheEntry& c = store.entries[static_cast<size_t>(j)];
        c.h = e.h_in;
        c.f = e.f_out;
        c.gated = scale(e.f_out, e.gate);
        c.provenance = trace.t;
    }
}

// ---- checkpoint ------------------------------------------------------------

void DenoiserModel::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("checkpoint: cannot write " + path);
    os.write("L2C1", 4);
    write_u16(os, 1);

    std::vector<std::pair<std::string, int64_t>> fields = {
        {"depth", cfg_.depth},
        {"width", cfg_.width},
        {"heads", cfg_.heads},
        {"tokens", cfg_.tokens},
        {"num_classes", cfg_.num_classes},
        {"long_skip", cfg_.long_skip ? 1 : 0},
        {"time_embed_dim", cfg_.time_embed_dim},
        {"ffn_dim", cfg_.ffn_dim},
        {"in_dim", cfg_.in_dim},
        {"schedule_kind", schedule_kind == ScheduleKind::VpLinear ? 0 : 1},
        {"schedule_t_train", schedule_t_train},
    };
    write_u32(os, static_cast<uint32_t>(fields.size()));
    for (auto& [name, value] : fields) {
        write_str(os, name);
        write_i64(os, value);
    }

    write_u32(os, static_cast<uint32_t>(params_.size()));
    for (size_t i = 0; i < params_.size(); ++i) {
        write_str(os, names_[i]);
        write_u32(os, static_cast<uint32_t>(params_[i].shape.size()));
        for (int d : params_[i].shape) write_u32(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(params_[i].data.data()),
                 static_cast<std::streamsize>(params_[i].data.size() * sizeof(float)));
    }
    if (!os) throw ValidationError("checkpoint: write failed for " + path);
}

DenoiserModel DenoiserModel::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("checkpoint: cannot read " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "L2C1", 4) != 0)
        throw ValidationError("checkpoint: bad magic in " + path);
    uint16_t version = read_u16(is);
    if (version != 1)
        throw ValidationError("checkpoint: unsupported version " + std::to_string(version));

    std::unordered_map<std::string, int64_t> fields;
    uint32_t nfields = read_u32(is);
    for (uint32_t i = 0; i < nfields; ++i) {
        std::string name = read_str(is);
        fields[name] = read_i64(is);
    }
    auto get = [&](const char* name) {
        auto it = fields.find(name);
        if (it == fields.end())
            throw ValidationError(std::string("checkpoint: missing config field ") + name);
        return it->second;
    };
    ModelConfig cfg;
    cfg.depth = static_cast<int>(get("depth"));
    cfg.width = static_cast<int>(get("width"));
    cfg.heads = static_cast<int>(get("heads"));
    cfg.tokens = static_cast<int>(get("tokens"));
    cfg.num_classes = static_cast<int>(get("num_classes"));
    cfg.long_skip = get("long_skip") != 0;
    cfg.time_embed_dim = static_cast<int>(get("time_embed_dim"));
    cfg.ffn_dim = static_cast<int>(get("ffn_dim"));
    cfg.in_dim = static_cast<int>(get("in_dim"));

    DenoiserModel model(cfg, 0);
    model.schedule_kind = get("schedule_kind") == 0 ? ScheduleKind::VpLinear : ScheduleKind::VpCosine;
    model.schedule_t_train = static_cast<int>(get("schedule_t_train"));

    std::unordered_map<std::string, size_t> index;
    for (size_t i = 0; i < model.names_.size(); ++i) index[model.names_[i]] = i;

    uint32_t ntensors = read_u32(is);
    if (ntensors != model.params_.size())
        throw ValidationError("checkpoint: tensor count does not match config");
    for (uint32_t i = 0; i < ntensors; ++i) {
        std::string name = read_str(is);
        auto it = index.find(name);
        if (it == index.end()) throw ValidationError("checkpoint: unknown tensor " + name);
        Tensor& dst = model.params_[it->second];
        uint32_t rank = read_u32(is);
        std::vector<int> shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(is));
        if (shape != dst.shape)
            throw ValidationError("checkpoint: tensor " + name + " has shape mismatch");
        is.read(reinterpret_cast<char*>(dst.data.data()),
                static_cast<std::streamsize>(dst.data.size() * sizeof(float)));
    }
    if (!is) throw ValidationError("checkpoint: truncated file " + path);
    return model;
}

}  // namespace lc
