#include "lc/tape.hpp"

#include <cmath>
#include <cstring>

namespace lc {

namespace {

[[noreturn]] void shape_fail(const char* kind, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(kind) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

[[noreturn]] void shape_fail(const char* kind, const Tensor& a) {
    throw ShapeError(std::string(kind) + ": bad shape " + shape_str(a.shape));
}

Tape* merged_tape(const Tensor& a, const Tensor& b) {
    if (a.on_tape() && b.on_tape() && a.tape != b.tape)
        throw ShapeError("op: inputs live on two different tapes");
    if (a.on_tape()) return a.tape;
    if (b.on_tape()) return b.tape;
    return nullptr;
}

// Broadcast category of b against a: 0 same shape, 1 scalar, 2 row vector.
int bcast_kind(const Tensor& a, const Tensor& b) {
    if (same_shape(a, b)) return 0;
    if (b.is_scalar()) return 1;
    if (b.rows() == 1 && b.cols() == a.cols()) return 2;
    return -1;
}

// Accumulates grad `g` (shaped like `out`) into the buffer of an operand that
// was broadcast with kind `k` against `out`.
void reduce_into(const float* g, int out_rows, int out_cols, int k, float* dst) {
    if (!dst) return;
    int64_t n = static_cast<int64_t>(out_rows) * out_cols;
    if (k == 0) {
        for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
    } else if (k == 1) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += g[i];
        dst[0] += static_cast<float>(acc);
    } else {
        for (int c = 0; c < out_cols; ++c) {
            double acc = 0.0;
            for (int r = 0; r < out_rows; ++r) acc += g[static_cast<size_t>(r) * out_cols + c];
            dst[c] += static_cast<float>(acc);
        }
    }
}

}  // namespace

Tensor Tape::leaf(const Tensor& value) {
    Tensor t = value;
    t.tape = this;
    t.node = record(t.shape, -1, -1, nullptr);
    leaf_marks_.insert(t.node);
    return t;
}

int Tape::record(const std::vector<int>& shape, int parent0, int parent1, BackFn back) {
    nodes_.push_back(Node{shape, parent0, parent1, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

float* Tape::grad_buf(int id) {
    if (id < 0) return nullptr;
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (g.empty()) {
        int64_t n = 1;
        for (int d : nodes_[id].shape) n *= d;
        g.assign(static_cast<size_t>(n), 0.0f);
    }
    return g.data();
}

std::unordered_map<int, Tensor> backward(Tape& tape, const Tensor& loss) {
    if (!loss.on_tape() || loss.tape != &tape)
        throw ShapeError("backward: loss is not a node of this tape");
    if (!loss.is_scalar())
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape));

    tape.grads_.assign(tape.nodes_.size(), {});
    *tape.grad_buf(loss.node) = 1.0f;

    for (int id = loss.node; id >= 0; --id) {
        auto& node = tape.nodes_[static_cast<size_t>(id)];
        if (!node.back) continue;                 // leaf or constant-backed node
        if (tape.grads_[static_cast<size_t>(id)].empty()) continue;  // unreachable
        node.back(tape.grads_[static_cast<size_t>(id)].data(), tape);
    }

    std::unordered_map<int, Tensor> out;
    for (int leaf_id : tape.leaf_marks_) {
        Tensor g;
        g.shape = tape.nodes_[static_cast<size_t>(leaf_id)].shape;
        auto& buf = tape.grads_[static_cast<size_t>(leaf_id)];
        if (buf.empty()) {
            g.data.assign(static_cast<size_t>(g.numel()), 0.0f);
        } else {
            g.data = buf;
        }
        out.emplace(leaf_id, std::move(g));
    }
    return out;
}

// ---- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        shape_fail("matmul", a, b);
    int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = zeros({m, n});
    for (int i = 0; i < m; ++i) {
        const float* arow = &a.data[static_cast<size_t>(i) * k];
        float* orow = &out.data[static_cast<size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            float av = arow[p];
            const float* brow = &b.data[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (Tape* tp = merged_tape(a, b)) {
        auto adata = a.data;
        auto bdata = b.data;
        int pa = a.node, pb = b.node;
        out.tape = tp;
        out.node = tp->record(out.shape, pa, pb, [=](const float* g, Tape& t) {
            if (float* da = t.grad_buf(pa)) {
                // da += g @ b^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(g[static_cast<size_t>(i) * n + j]) *
                                   bdata[static_cast<size_t>(p) * n + j];
                        da[static_cast<size_t>(i) * k + p] += static_cast<float>(acc);
                    }
            }
            if (float* db = t.grad_buf(pb)) {
                // db += a^T @ g
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(adata[static_cast<size_t>(i) * k + p]) *
                                   g[static_cast<size_t>(i) * n + j];
                        db[static_cast<size_t>(p) * n + j] += static_cast<float>(acc);
                    }
            }
        });
    }
    return out;
}

namespace {

enum class EwKind { Add, Mul };

Tensor elementwise(const char* name, EwKind kind, const Tensor& a, const Tensor& b) {
    // Either operand may be the broadcast one; output takes the larger shape.
    int kb = bcast_kind(a, b);
    if (kb < 0) {
        int ka = bcast_kind(b, a);
        if (ka < 0) shape_fail(name, a, b);
        return elementwise(name, kind, b, a);  // commutative for add/mul
    }
    int rows = a.rows(), cols = a.cols();
    Tensor out = zeros(a.shape);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            size_t i = static_cast<size_t>(r) * cols + c;
            float bv = kb == 0 ? b.data[i] : (kb == 1 ? b.data[0] : b.data[c]);
            out.data[i] = kind == EwKind::Add ? a.data[i] + bv : a.data[i] * bv;
        }
    if (Tape* tp = merged_tape(a, b)) {
        int pa = a.node, pb = b.node;
        out.tape = tp;
        if (kind == EwKind::Add) {
            out.node = tp->record(out.shape, pa, pb, [=](const float* g, Tape& t) {
                reduce_into(g, rows, cols, 0, t.grad_buf(pa));
                reduce_into(g, rows, cols, kb, t.grad_buf(pb));
            });
        } else {
            auto adata = a.data;
            auto bdata = b.data;
            out.node = tp->record(out.shape, pa, pb, [=](const float* g, Tape& t) {
                int64_t n = static_cast<int64_t>(rows) * cols;
                if (float* da = t.grad_buf(pa)) {
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) {
                            size_t i = static_cast<size_t>(r) * cols + c;
                            float bv = kb == 0 ? bdata[i] : (kb == 1 ? bdata[0] : bdata[c]);
                            da[i] += g[i] * bv;
                        }
                }
                if (float* db = t.grad_buf(pb)) {
                    std::vector<float> ga(static_cast<size_t>(n));
                    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] = g[i] * adata[static_cast<size_t>(i)];
                    reduce_into(ga.data(), rows, cols, kb, db);
                }
            });
        }
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise("add", EwKind::Add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise("mul", EwKind::Mul, a, b); }

Tensor scale(const Tensor& a, float c) {
    Tensor out = a;
    out.tape = nullptr;
    out.node = -1;
    for (auto& x : out.data) x *= c;
    if (a.on_tape()) {
        int pa = a.node;
        int64_t n = a.numel();
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            if (float* da = t.grad_buf(pa))
                for (int64_t i = 0; i < n; ++i) da[i] += c * g[i];
        });
    }
    return out;
}

Tensor softmax(const Tensor& a) {
    if (a.shape.empty()) shape_fail("softmax", a);
    int rows = a.rows(), cols = a.cols();
    Tensor out = zeros(a.shape);
    for (int r = 0; r < rows; ++r) {
        const float* x = &a.data[static_cast<size_t>(r) * cols];
        float* y = &out.data[static_cast<size_t>(r) * cols];
        float mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(x[c]) - mx);
        for (int c = 0; c < cols; ++c)
            y[c] = static_cast<float>(std::exp(static_cast<double>(x[c]) - mx) / denom);
    }
    if (a.on_tape()) {
        auto ydata = out.data;
        int pa = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            float* da = t.grad_buf(pa);
            if (!da) return;
            for (int r = 0; r < rows; ++r) {
                const float* y = &ydata[static_cast<size_t>(r) * cols];
                const float* gr = &g[static_cast<size_t>(r) * cols];
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * y[c];
                float* dr = &da[static_cast<size_t>(r) * cols];
                for (int c = 0; c < cols; ++c)
                    dr[c] += y[c] * (gr[c] - static_cast<float>(dot));
            }
        });
    }
    return out;
}

Tensor layernorm(const Tensor& a) {
    if (a.shape.empty()) shape_fail("layernorm", a);
    constexpr double kEps = 1e-5;
    int rows = a.rows(), cols = a.cols();
    Tensor out = zeros(a.shape);
    std::vector<float> inv_sigma(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const float* x = &a.data[static_cast<size_t>(r) * cols];
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += x[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= cols;
        double is = 1.0 / std::sqrt(var + kEps);
        inv_sigma[static_cast<size_t>(r)] = static_cast<float>(is);
        float* y = &out.data[static_cast<size_t>(r) * cols];
        for (int c = 0; c < cols; ++c) y[c] = static_cast<float>((x[c] - mu) * is);
    }
    if (a.on_tape()) {
        auto ydata = out.data;
        int pa = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            float* da = t.grad_buf(pa);
            if (!da) return;
            for (int r = 0; r < rows; ++r) {
                const float* y = &ydata[static_cast<size_t>(r) * cols];
                const float* gr = &g[static_cast<size_t>(r) * cols];
                double gmean = 0.0, gymean = 0.0;
                for (int c = 0; c < cols; ++c) {
                    gmean += gr[c];
                    gymean += static_cast<double>(gr[c]) * y[c];
                }
                gmean /= cols;
                gymean /= cols;
                float is = inv_sigma[static_cast<size_t>(r)];
                float* dr = &da[static_cast<size_t>(r) * cols];
                for (int c = 0; c < cols; ++c)
                    dr[c] += is * (gr[c] - static_cast<float>(gmean) -
                                   y[c] * static_cast<float>(gymean));
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = zeros(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) {
        double x = a.data[i];
        out.data[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    if (a.on_tape()) {
        auto adata = a.data;
        int pa = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            float* da = t.grad_buf(pa);
            if (!da) return;
            for (size_t i = 0; i < adata.size(); ++i) {
                double x = adata[i];
                double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
                da[i] += static_cast<float>(d) * g[i];
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = zeros(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i)
        out.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(a.data[i]))));
    if (a.on_tape()) {
        auto ydata = out.data;
        int pa = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            float* da = t.grad_buf(pa);
            if (!da) return;
            for (size_t i = 0; i < ydata.size(); ++i)
                da[i] += ydata[i] * (1.0f - ydata[i]) * g[i];
        });
    }
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) shape_fail("concat", a, b);
    int rows = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor out = zeros(a.shape.size() == 2 ? std::vector<int>{rows, ca + cb}
                                           : std::vector<int>{ca + cb});
    for (int r = 0; r < rows; ++r) {
        std::memcpy(&out.data[static_cast<size_t>(r) * (ca + cb)],
                    &a.data[static_cast<size_t>(r) * ca], sizeof(float) * ca);
        std::memcpy(&out.data[static_cast<size_t>(r) * (ca + cb) + ca],
                    &b.data[static_cast<size_t>(r) * cb], sizeof(float) * cb);
    }
    if (Tape* tp = merged_tape(a, b)) {
        int pa = a.node, pb = b.node;
        out.tape = tp;
        out.node = tp->record(out.shape, pa, pb, [=](const float* g, Tape& t) {
            if (float* da = t.grad_buf(pa))
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < ca; ++c)
                        da[static_cast<size_t>(r) * ca + c] +=
                            g[static_cast<size_t>(r) * (ca + cb) + c];
            if (float* db = t.grad_buf(pb))
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cb; ++c)
                        db[static_cast<size_t>(r) * cb + c] +=
                            g[static_cast<size_t>(r) * (ca + cb) + ca + c];
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int dim, int start, int len) {
    if (a.shape.empty() || dim < 0 || dim >= static_cast<int>(std::max<size_t>(a.shape.size(), 1)))
        shape_fail("slice", a);
    int rows = a.rows(), cols = a.cols();
    int extent = dim == 0 && a.shape.size() == 2 ? rows : (a.shape.size() == 1 ? static_cast<int>(a.numel()) : cols);
    if (start < 0 || len <= 0 || start + len > extent)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape));
    Tensor out;
    bool row_slice = a.shape.size() == 2 && dim == 0;
    if (a.shape.size() == 1) {
        out = zeros({len});
        std::memcpy(out.data.data(), &a.data[static_cast<size_t>(start)], sizeof(float) * len);
    } else if (row_slice) {
        out = zeros({len, cols});
        std::memcpy(out.data.data(), &a.data[static_cast<size_t>(start) * cols],
                    sizeof(float) * static_cast<size_t>(len) * cols);
    } else {
        out = zeros({rows, len});
        for (int r = 0; r < rows; ++r)
            std::memcpy(&out.data[static_cast<size_t>(r) * len],
                        &a.data[static_cast<size_t>(r) * cols + start], sizeof(float) * len);
    }
    if (a.on_tape()) {
        int pa = a.node;
        size_t rank = a.shape.size();
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            float* da = t.grad_buf(pa);
            if (!da) return;
            if (rank == 1) {
                for (int i = 0; i < len; ++i) da[start + i] += g[i];
            } else if (row_slice) {
                for (int i = 0; i < len * cols; ++i)
                    da[static_cast<size_t>(start) * cols + i] += g[i];
            } else {
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < len; ++c)
                        da[static_cast<size_t>(r) * cols + start + c] +=
                            g[static_cast<size_t>(r) * len + c];
            }
        });
    }
    return out;
}

namespace {

Tensor reduce_all(const char* name, const Tensor& a, bool take_mean) {
    int64_t n = a.numel();
    if (n == 0) throw ShapeError(std::string(name) + ": empty tensor");
    double acc = 0.0;
    for (float x : a.data) acc += x;
    if (take_mean) acc /= static_cast<double>(n);
    Tensor out = scalar(static_cast<float>(acc));
    if (a.on_tape()) {
        int pa = a.node;
        float w = take_mean ? 1.0f / static_cast<float>(n) : 1.0f;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            if (float* da = t.grad_buf(pa))
                for (int64_t i = 0; i < n; ++i) da[i] += w * g[0];
        });
    }
    return out;
}

}  // namespace

Tensor mean(const Tensor& a) { return reduce_all("mean", a, true); }
Tensor sum(const Tensor& a) { return reduce_all("sum", a, false); }

Tensor mse(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) shape_fail("mse", a, b);
    int64_t n = a.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a.data[static_cast<size_t>(i)]) - b.data[static_cast<size_t>(i)];
        acc += d * d;
    }
    Tensor out = scalar(static_cast<float>(acc / static_cast<double>(n)));
    if (Tape* tp = merged_tape(a, b)) {
        auto adata = a.data;
        auto bdata = b.data;
        int pa = a.node, pb = b.node;
        out.tape = tp;
        out.node = tp->record(out.shape, pa, pb, [=](const float* g, Tape& t) {
            float w = 2.0f / static_cast<float>(n) * g[0];
            if (float* da = t.grad_buf(pa))
                for (int64_t i = 0; i < n; ++i)
                    da[i] += w * (adata[static_cast<size_t>(i)] - bdata[static_cast<size_t>(i)]);
            if (float* db = t.grad_buf(pb))
                for (int64_t i = 0; i < n; ++i)
                    db[i] -= w * (adata[static_cast<size_t>(i)] - bdata[static_cast<size_t>(i)]);
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.shape.size() != 2) shape_fail("transpose", a);
    int m = a.shape[0], n = a.shape[1];
    Tensor out = zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data[static_cast<size_t>(j) * m + i] = a.data[static_cast<size_t>(i) * n + j];
    if (a.on_tape()) {
        int pa = a.node;
        out.tape = a.tape;
        out.node = a.tape->record(out.shape, pa, -1, [=](const float* g, Tape& t) {
            if (float* da = t.grad_buf(pa))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        da[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
        });
    }
    return out;
}

}  // namespace lc
