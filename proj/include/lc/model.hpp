#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lc/cache.hpp"
#include "lc/schedule.hpp"
#include "lc/tape.hpp"
#include "lc/tensor.hpp"

namespace lc {

struct ModelConfig {
    int depth = 4;  // residual blocks; each holds an MHSA and an FFN sublayer
    int width = 32;
    int heads = 4;
    int tokens = 4;
    int num_classes = 8;  // class ids 0..num_classes-1; num_classes is the null token
    bool long_skip = false;
    int time_embed_dim = 32;
    int ffn_dim = 0;  // 0 -> 4 * width
    int in_dim = 2;

    int sublayers() const { return 2 * depth; }
    int resolved_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * width; }
    int null_class() const { return num_classes; }
    void validate() const;
};

enum class SublayerKind : uint8_t { Mhsa, Ffn };

inline SublayerKind sublayer_kind(int j) { return j % 2 == 0 ? SublayerKind::Mhsa : SublayerKind::Ffn; }

struct KernelCounter {
    uint64_t mhsa = 0;
    uint64_t ffn = 0;
    uint64_t total() const { return mhsa + ffn; }
};

struct TraceEntry {
    Tensor h_in;   // sublayer input (pre-norm)
    Tensor f_out;  // non-residual output
    float gate = 0.0f;
};

struct Trace {
    int t = -1;
    int y = -1;
    std::vector<TraceEntry> entries;
};

struct ForwardResult {
    Tensor eps;
    Tensor final_hidden;  // hidden state entering the output head
    std::optional<Trace> trace;
};

struct ForwardCtx {
    Tape* tape = nullptr;
    KernelCounter* counter = nullptr;
    bool want_trace = false;
};

/// Settings for an interpolated (cache-step) evaluation.
struct InterpSettings {
    float alpha = 0.0f;
    CacheMode mode = CacheMode::PaperLiteral;
    /// When true, sublayers with beta = 1 also blend their skip path with the
    /// cached input (the literal reading of the layer interpolation). The
    /// default runs computed sublayers as standard layers.
    bool alpha_on_computed = false;
    /// Drop variant: out = h + beta * g * f(h), no cached substitute.
    bool drop = false;
};

/// Toy denoising transformer: token embedding of 2-D points, `depth` blocks
/// of MHSA + FFN sublayers with adaLN shift/scale conditioning and a
/// zero-initialized scalar gate per sublayer, optional long skips pairing
/// block i with block depth+1-i, class conditioning with a null token, and
/// an unconditioned LayerNorm + linear output head.
class DenoiserModel {
public:
    DenoiserModel(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // -- parameters ---------------------------------------------------------
    size_t param_count() const { return params_.size(); }
    const std::string& param_name(size_t i) const { return names_[i]; }
    Tensor& param(size_t i) { return params_[i]; }
    const Tensor& param(size_t i) const { return params_[i]; }
    uint64_t param_hash() const;
    /// Re-randomizes every parameter, including the normally zero-initialized
    /// gate heads and output head. Test helper for nontrivial gates.
    void randomize_all(Rng& rng, float stddev = 0.5f);

    /// Leafed copies of all parameters on `tape`, in registry order.
    std::vector<Tensor> leaf_params(Tape& tape) const;

    // -- evaluation ----------------------------------------------------------
    ForwardResult forward(const Tensor& x, int t, int y, const ForwardCtx& ctx = {}) const;
    /// Same as forward() but reading parameters from `params` (e.g. leafed
    /// copies) instead of the model's own.
    ForwardResult forward_with(const std::vector<Tensor>& params, const Tensor& x, int t, int y,
                               const ForwardCtx& ctx = {}) const;

    /// Classifier-free guidance: eps(null) + w (eps(y) - eps(null)).
    /// w = 0 evaluates only the unconditional branch.
    Tensor forward_cfg(const Tensor& x, int t, int y, float w, const ForwardCtx& ctx = {}) const;

    /// Cache-step evaluation. `beta_row` holds one scalar per sublayer in
    /// [0,1]; it may be a tape-linked row for router training or a plain 0/1
    /// row for discrete sampling (where beta = 0 skips the kernel).
    ForwardResult forward_interp(const Tensor& x, int t, int y, const CacheStore& cache,
                                 const Tensor& beta_row, const InterpSettings& settings,
                                 const ForwardCtx& ctx = {}) const;

    /// Applies sublayer j's kernel (attention or feedforward) to an already
    /// normalized/modulated input. Exposed for oracle tests.
    Tensor sublayer_kernel(int j, const Tensor& h_norm, const ForwardCtx& ctx = {}) const;

    /// Populates `store` from a full-step trace.
    void fill_cache(const Trace& trace, CacheStore& store) const;

    // -- persistence ---------------------------------------------------------
    ScheduleKind schedule_kind = ScheduleKind::VpLinear;
    int schedule_t_train = 1000;

    void save_checkpoint(const std::string& path) const;
    static DenoiserModel load_checkpoint(const std::string& path);

private:
    struct SublayerParams {
        // attention
        int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
        // feedforward
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
        // adaLN modulation head -> [shift | scale | gate]
        int w_mod = -1, b_mod = -1;
    };

    int add_param(const std::string& name, Tensor t);
    Tensor time_embedding(int t) const;

    struct SublayerEval {
        Tensor gate;          // (1,1)
        std::function<Tensor()> f;  // kernel on the modulated input of `h`
    };
    SublayerEval make_sublayer_eval(const std::vector<Tensor>& p, int j, const Tensor& cond,
                                    const Tensor& h, const ForwardCtx& ctx) const;
    Tensor kernel_with(const std::vector<Tensor>& p, int j, const Tensor& hn,
                       const ForwardCtx& ctx) const;

    template <class LayerFn>
    ForwardResult run_stack(const std::vector<Tensor>& p, const Tensor& x, int t, int y,
                            const ForwardCtx& ctx, LayerFn&& layer) const;

    ModelConfig cfg_;
    std::vector<Tensor> params_;
    std::vector<std::string> names_;
    // registry indices
    int w_in_ = -1, b_in_ = -1, pos_ = -1;
    int t_w1_ = -1, t_b1_ = -1, t_w2_ = -1, t_b2_ = -1;
    int cls_ = -1;
    int head_w_ = -1, head_b_ = -1;
    std::vector<int> merge_w_, merge_b_;
    std::vector<SublayerParams> sub_;
};

}  // namespace lc
