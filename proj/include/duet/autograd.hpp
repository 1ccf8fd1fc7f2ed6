#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duet/tensor.hpp"

namespace duet::ag {

// ─── Reverse-mode autodiff over Tensor ───────────────────────────────────────
// Define-by-run tape: every op returns a Var holding a Node whose backward
// closure scatters the node's gradient into its parents. Parameters are leaf
// nodes updated in place by the optimizer between steps; the graph is rebuilt
// each forward pass and freed when the root goes out of scope.

struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily, same shape as val
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.numel() == 0) grad = Tensor::zeros(val.shape);
    }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
  public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->val = std::move(t);
        n->requires_grad = requires_grad;
        return Var(n);
    }

    bool defined() const { return bool(n_); }
    const Tensor& val() const { return n_->val; }
    Tensor& mutable_val() { return n_->val; }
    const Tensor& grad() const { return n_->grad; }
    Tensor& mutable_grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    void zero_grad() {
        if (n_->grad.numel() != 0) std::fill(n_->grad.data.begin(), n_->grad.data.end(), 0.0);
    }
    const NodePtr& node() const { return n_; }

    std::int64_t numel() const { return n_->val.numel(); }
    const std::vector<std::int64_t>& shape() const { return n_->val.shape; }

  private:
    NodePtr n_;
};

inline Var constant(Tensor t) { return Var::leaf(std::move(t), false); }

inline Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p.node()->requires_grad;
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(bw);
    }
    return Var(n);
}

inline void accumulate(const NodePtr& p, const Tensor& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
}

// Runs backprop from a scalar root. Topological order via iterative DFS.
inline void backward(const Var& root) {
    if (root.numel() != 1) throw config_error("backward() root must be scalar");
    Node* r = root.node().get();
    if (!r->requires_grad) return;

    std::vector<Node*> topo;
    std::unordered_set<Node*> done;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(r, 0);
    std::unordered_set<Node*> on_stack{r};
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !done.count(p) && !on_stack.count(p)) {
                stack.emplace_back(p, 0);
                on_stack.insert(p);
            }
        } else {
            topo.push_back(node);
            done.insert(node);
            on_stack.erase(node);
            stack.pop_back();
        }
    }

    r->ensure_grad();
    r->grad.data[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ─── Elementwise and broadcast arithmetic ────────────────────────────────────

// b must have the same shape as a, or a shape that is a suffix of a's
// (trailing broadcast: bias [D] onto [B,S,D], positions [S,D] onto [B,S,D]).
inline Var add(const Var& a, const Var& b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    bool suffix = tb.ndim() < ta.ndim() &&
                  std::equal(tb.shape.begin(), tb.shape.end(), ta.shape.end() - tb.ndim());
    if (!suffix && !ta.same_shape(tb)) throw config_error("add: incompatible shapes");
    Tensor out = ta;
    if (suffix) {
        std::int64_t inner = tb.numel();
        for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] += tb[i % inner];
    } else {
        for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] += tb[i];
    }
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, suffix](Node& self) {
        if (pa->requires_grad) accumulate(pa, self.grad);
        if (pb->requires_grad) {
            pb->ensure_grad();
            if (suffix) {
                std::int64_t inner = pb->val.numel();
                for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                    pb->grad[i % inner] += self.grad[i];
            } else {
                for (std::int64_t i = 0; i < self.grad.numel(); ++i) pb->grad[i] += self.grad[i];
            }
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) throw config_error("mul: shape mismatch");
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                pa->grad[i] += self.grad[i] * pb->val[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                pb->grad[i] += self.grad[i] * pa->val[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.val();
    for (auto& v : out.data) v *= s;
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, s](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i] * s;
    });
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

// ─── Matrix products ─────────────────────────────────────────────────────────

// a: [.., m, k]; b: [k, n] (shared weight) or [.., k, n] (batched, leading
// dims equal). Accumulation order is fixed for determinism.
inline Var matmul(const Var& a, const Var& b) {
    const Tensor& ta = a.val();
    const Tensor& tb = b.val();
    if (ta.ndim() < 2 || tb.ndim() < 2) throw config_error("matmul: rank < 2");
    std::int64_t m = ta.shape[size_t(ta.ndim() - 2)];
    std::int64_t k = ta.shape[size_t(ta.ndim() - 1)];
    bool weight = tb.ndim() == 2 && ta.ndim() > 2;
    if (!weight && tb.ndim() != ta.ndim()) throw config_error("matmul: rank mismatch");
    if (!weight) {
        for (int i = 0; i + 2 < ta.ndim(); ++i)
            if (ta.shape[size_t(i)] != tb.shape[size_t(i)]) throw config_error("matmul: batch dims differ");
    }
    std::int64_t kb = tb.shape[size_t(tb.ndim() - 2)];
    std::int64_t n = tb.shape[size_t(tb.ndim() - 1)];
    if (k != kb) throw config_error("matmul: inner dims differ");
    std::int64_t batches = ta.numel() / (m * k);

    std::vector<std::int64_t> out_shape(ta.shape.begin(), ta.shape.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(std::move(out_shape));

    for (std::int64_t bidx = 0; bidx < batches; ++bidx) {
        const double* A = ta.data.data() + bidx * m * k;
        const double* B = tb.data.data() + (weight ? 0 : bidx * k * n);
        double* C = out.data.data() + bidx * m * n;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) {
                double av = A[i * k + kk];
                if (av == 0.0) continue;
                const double* Br = B + kk * n;
                double* Cr = C + i * n;
                for (std::int64_t j = 0; j < n; ++j) Cr[j] += av * Br[j];
            }
    }

    auto pa = a.node(), pb = b.node();
    return make_op(std::move(out), {a, b}, [pa, pb, m, k, n, batches, weight](Node& self) {
        const Tensor& g = self.grad;
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::int64_t bidx = 0; bidx < batches; ++bidx) {
                const double* G = g.data.data() + bidx * m * n;
                const double* B = pb->val.data.data() + (weight ? 0 : bidx * k * n);
                double* GA = pa->grad.data.data() + bidx * m * k;
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        double gv = G[i * n + j];
                        if (gv == 0.0) continue;
                        for (std::int64_t kk = 0; kk < k; ++kk) GA[i * k + kk] += gv * B[kk * n + j];
                    }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::int64_t bidx = 0; bidx < batches; ++bidx) {
                const double* G = g.data.data() + bidx * m * n;
                const double* A = pa->val.data.data() + bidx * m * k;
                double* GB = pb->grad.data.data() + (weight ? 0 : bidx * k * n);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        double av = A[i * k + kk];
                        if (av == 0.0) continue;
                        for (std::int64_t j = 0; j < n; ++j) GB[kk * n + j] += av * G[i * n + j];
                    }
            }
        }
    });
}

// ─── Shape manipulation ──────────────────────────────────────────────────────

inline Var reshape(const Var& a, std::vector<std::int64_t> shape) {
    if (Tensor::count(shape) != a.numel()) throw config_error("reshape: element count mismatch");
    Tensor out(shape, a.val().data);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) pa->grad[i] += self.grad[i];
    });
}

inline Var transpose_last2(const Var& a) {
    const Tensor& t = a.val();
    if (t.ndim() < 2) throw config_error("transpose_last2: rank < 2");
    std::int64_t m = t.shape[size_t(t.ndim() - 2)];
    std::int64_t n = t.shape[size_t(t.ndim() - 1)];
    std::int64_t batches = t.numel() / (m * n);
    std::vector<std::int64_t> shape(t.shape);
    std::swap(shape[size_t(t.ndim() - 2)], shape[size_t(t.ndim() - 1)]);
    Tensor out(std::move(shape));
    for (std::int64_t b = 0; b < batches; ++b)
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                out[b * m * n + j * m + i] = t[b * m * n + i * n + j];
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, m, n, batches](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t b = 0; b < batches; ++b)
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j)
                    pa->grad[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
    });
}

// Swap dims 1 and 2 of a 4D tensor ([B,S,H,D] <-> [B,H,S,D]); used to split
// and merge attention heads.
inline Var transpose_12(const Var& a) {
    const Tensor& t = a.val();
    if (t.ndim() != 4) throw config_error("transpose_12: rank must be 4");
    std::int64_t B = t.shape[0], X = t.shape[1], Y = t.shape[2], D = t.shape[3];
    Tensor out({B, Y, X, D});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t x = 0; x < X; ++x)
            for (std::int64_t y = 0; y < Y; ++y)
                for (std::int64_t d = 0; d < D; ++d)
                    out.at(b, y, x, d) = t.at(b, x, y, d);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, B, X, Y, D](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        Tensor& g = pa->grad;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t x = 0; x < X; ++x)
                for (std::int64_t y = 0; y < Y; ++y)
                    for (std::int64_t d = 0; d < D; ++d)
                        g.at(b, x, y, d) += self.grad.at(b, y, x, d);
    });
}

// Repeat a tensor along a new leading batch dimension.
inline Var expand_batch(const Var& a, std::int64_t batch) {
    const Tensor& t = a.val();
    std::vector<std::int64_t> shape;
    shape.push_back(batch);
    shape.insert(shape.end(), t.shape.begin(), t.shape.end());
    Tensor out(std::move(shape));
    std::int64_t inner = t.numel();
    for (std::int64_t b = 0; b < batch; ++b)
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + b * inner);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, batch, inner](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < inner; ++i) pa->grad[i] += self.grad[b * inner + i];
    });
}

namespace detail {
inline void axis_strides(const std::vector<std::int64_t>& shape, int axis, std::int64_t& outer,
                         std::int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[size_t(i)];
    for (size_t i = size_t(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}
}  // namespace detail

inline Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw config_error("concat: no inputs");
    const auto& s0 = parts[0].shape();
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != s0.size()) throw config_error("concat: rank mismatch");
        for (size_t i = 0; i < s0.size(); ++i)
            if (int(i) != axis && p.shape()[i] != s0[i]) throw config_error("concat: shape mismatch");
        axis_total += p.shape()[size_t(axis)];
    }
    std::vector<std::int64_t> shape(s0);
    shape[size_t(axis)] = axis_total;
    Tensor out(shape);
    std::int64_t outer, inner;
    detail::axis_strides(shape, axis, outer, inner);

    std::vector<std::int64_t> offsets;  // start of each part along axis
    std::int64_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        off += p.shape()[size_t(axis)];
    }
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& t = parts[pi].val();
        std::int64_t len = t.shape[size_t(axis)];
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(t.data.begin() + o * len * inner, t.data.begin() + (o + 1) * len * inner,
                      out.data.begin() + (o * axis_total + offsets[pi]) * inner);
    }
    std::vector<NodePtr> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    return make_op(std::move(out), parts,
                   [pnodes, offsets, axis, outer, inner, axis_total](Node& self) {
                       for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                           const NodePtr& p = pnodes[pi];
                           if (!p->requires_grad) continue;
                           p->ensure_grad();
                           std::int64_t len = p->val.shape[size_t(axis)];
                           for (std::int64_t o = 0; o < outer; ++o) {
                               const double* src =
                                   self.grad.data.data() + (o * axis_total + offsets[pi]) * inner;
                               double* dst = p->grad.data.data() + o * len * inner;
                               for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                           }
                       }
                   });
}

inline Var slice(const Var& a, int axis, std::int64_t start, std::int64_t len) {
    const Tensor& t = a.val();
    if (axis < 0 || axis >= t.ndim()) throw config_error("slice: bad axis");
    std::int64_t axis_dim = t.shape[size_t(axis)];
    if (start < 0 || len < 0 || start + len > axis_dim) throw config_error("slice: out of range");
    std::vector<std::int64_t> shape(t.shape);
    shape[size_t(axis)] = len;
    Tensor out(shape);
    std::int64_t outer, inner;
    detail::axis_strides(t.shape, axis, outer, inner);
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(t.data.begin() + (o * axis_dim + start) * inner,
                  t.data.begin() + (o * axis_dim + start + len) * inner,
                  out.data.begin() + o * len * inner);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, axis_dim, start, len, outer, inner](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data.data() + o * len * inner;
            double* dst = pa->grad.data.data() + (o * axis_dim + start) * inner;
            for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
}

// ─── Row-wise nonlinearities ─────────────────────────────────────────────────

// Softmax over the last dim. mask (same shape, 1=keep / 0=drop) applies hard
// exclusion: dropped entries get probability exactly 0 and zero gradient.
inline Var softmax_lastdim(const Var& a, const Tensor* mask = nullptr) {
    const Tensor& t = a.val();
    if (mask && !mask->same_shape(t)) throw config_error("softmax: mask shape mismatch");
    std::int64_t K = t.shape[size_t(t.ndim() - 1)];
    std::int64_t rows = t.numel() / K;
    Tensor out(t.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = t.data.data() + r * K;
        const double* m = mask ? mask->data.data() + r * K : nullptr;
        double hi = -1e300;
        bool any = false;
        for (std::int64_t i = 0; i < K; ++i)
            if (!m || m[i] != 0.0) {
                any = true;
                if (!std::isfinite(x[i])) throw numeric_error("softmax over non-finite scores");
                hi = std::max(hi, x[i]);
            }
        if (!any) throw input_error("softmax: fully masked row");
        double z = 0.0;
        double* y = out.data.data() + r * K;
        for (std::int64_t i = 0; i < K; ++i) {
            y[i] = (!m || m[i] != 0.0) ? std::exp(x[i] - hi) : 0.0;
            z += y[i];
        }
        for (std::int64_t i = 0; i < K; ++i) y[i] /= z;
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, K, rows](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.val.data.data() + r * K;
            const double* g = self.grad.data.data() + r * K;
            double s = 0.0;
            for (std::int64_t i = 0; i < K; ++i) s += g[i] * y[i];
            double* gx = pa->grad.data.data() + r * K;
            for (std::int64_t i = 0; i < K; ++i) gx[i] += y[i] * (g[i] - s);
        }
    });
}

inline Var log_softmax_lastdim(const Var& a) {
    const Tensor& t = a.val();
    std::int64_t K = t.shape[size_t(t.ndim() - 1)];
    std::int64_t rows = t.numel() / K;
    Tensor out(t.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = t.data.data() + r * K;
        double hi = x[0];
        for (std::int64_t i = 1; i < K; ++i) hi = std::max(hi, x[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < K; ++i) z += std::exp(x[i] - hi);
        double lz = hi + std::log(z);
        double* y = out.data.data() + r * K;
        for (std::int64_t i = 0; i < K; ++i) y[i] = x[i] - lz;
    }
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, K, rows](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.val.data.data() + r * K;
            const double* g = self.grad.data.data() + r * K;
            double s = 0.0;
            for (std::int64_t i = 0; i < K; ++i) s += g[i];
            double* gx = pa->grad.data.data() + r * K;
            for (std::int64_t i = 0; i < K; ++i) gx[i] += g[i] - std::exp(y[i]) * s;
        }
    });
}

inline Var exp(const Var& a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::exp(v);
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i)
            pa->grad[i] += self.grad[i] * self.val[i];
    });
}

// log(max(x, floor)). Entries below the floor get zero gradient; used for the
// epsilon-floored KL terms.
inline Var log_floor(const Var& a, double floor) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::log(std::max(v, floor));
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa, floor](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i)
            if (pa->val[i] >= floor) pa->grad[i] += self.grad[i] / pa->val[i];
    });
}

inline Var gelu(const Var& a) {
    static const double inv_sqrt2 = 0.7071067811865475244;
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    Tensor out = a.val();
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    auto pa = a.node();
    return make_op(std::move(out), {a}, [pa](Node& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
            double x = pa->val[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            pa->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ─── Normalization ───────────────────────────────────────────────────────────

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Tensor& t = x.val();
    std::int64_t D = t.shape[size_t(t.ndim() - 1)];
    if (gamma.numel() != D || beta.numel() != D) throw config_error("layer_norm: affine size mismatch");
    std::int64_t rows = t.numel() / D;
    Tensor out(t.shape);
    Tensor xhat(t.shape);
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = t.data.data() + r * D;
        double mu = 0.0;
        for (std::int64_t i = 0; i < D; ++i) mu += xr[i];
        mu /= double(D);
        double var = 0.0;
        for (std::int64_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= double(D);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[size_t(r)] = is;
        double* xh = xhat.data.data() + r * D;
        double* y = out.data.data() + r * D;
        for (std::int64_t i = 0; i < D; ++i) {
            xh[i] = (xr[i] - mu) * is;
            y[i] = xh[i] * gamma.val()[i] + beta.val()[i];
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make_op(std::move(out), {x, gamma, beta},
                   [px, pg, pb, D, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       for (std::int64_t r = 0; r < rows; ++r) {
                           const double* g = self.grad.data.data() + r * D;
                           const double* xh = xhat.data.data() + r * D;
                           if (pg->requires_grad) {
                               pg->ensure_grad();
                               for (std::int64_t i = 0; i < D; ++i) pg->grad[i] += g[i] * xh[i];
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               for (std::int64_t i = 0; i < D; ++i) pb->grad[i] += g[i];
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               double mean_h = 0.0, mean_hx = 0.0;
                               for (std::int64_t i = 0; i < D; ++i) {
                                   double h = g[i] * pg->val[i];
                                   mean_h += h;
                                   mean_hx += h * xh[i];
                               }
                               mean_h /= double(D);
                               mean_hx /= double(D);
                               double* gx = px->grad.data.data() + r * D;
                               for (std::int64_t i = 0; i < D; ++i) {
                                   double h = g[i] * pg->val[i];
                                   gx[i] += (h - mean_h - xh[i] * mean_hx) * inv_std[size_t(r)];
                               }
                           }
                       }
                   });
}

// Rows scaled to unit L2 norm (last dim).
inline Var l2_normalize(const Var& x) {
    const Tensor& t = x.val();
    std::int64_t D = t.shape[size_t(t.ndim() - 1)];
    std::int64_t rows = t.numel() / D;
    Tensor out(t.shape);
    std::vector<double> norms(static_cast<size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = t.data.data() + r * D;
        double s = 0.0;
        for (std::int64_t i = 0; i < D; ++i) s += xr[i] * xr[i];
        double nrm = std::max(std::sqrt(s), 1e-12);
        norms[size_t(r)] = nrm;
        double* y = out.data.data() + r * D;
        for (std::int64_t i = 0; i < D; ++i) y[i] = xr[i] / nrm;
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, D, rows, norms = std::move(norms)](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.val.data.data() + r * D;
            const double* g = self.grad.data.data() + r * D;
            double dot = 0.0;
            for (std::int64_t i = 0; i < D; ++i) dot += g[i] * y[i];
            double* gx = px->grad.data.data() + r * D;
            for (std::int64_t i = 0; i < D; ++i) gx[i] += (g[i] - y[i] * dot) / norms[size_t(r)];
        }
    });
}

// ─── Gather / reduce ─────────────────────────────────────────────────────────

// Row lookup: weight [V,D] indexed by ids [B,L] -> [B,L,D].
inline Var embedding(const Var& weight, const std::vector<std::vector<std::int64_t>>& ids) {
    const Tensor& w = weight.val();
    std::int64_t V = w.shape[0], D = w.shape[1];
    std::int64_t B = std::int64_t(ids.size());
    std::int64_t L = B > 0 ? std::int64_t(ids[0].size()) : 0;
    Tensor out({B, L, D});
    for (std::int64_t b = 0; b < B; ++b) {
        if (std::int64_t(ids[size_t(b)].size()) != L) throw input_error("embedding: ragged id batch");
        for (std::int64_t l = 0; l < L; ++l) {
            std::int64_t id = ids[size_t(b)][size_t(l)];
            if (id < 0 || id >= V) throw input_error("embedding: id out of range");
            std::copy(w.data.begin() + id * D, w.data.begin() + (id + 1) * D,
                      out.data.begin() + (b * L + l) * D);
        }
    }
    auto pw = weight.node();
    return make_op(std::move(out), {weight}, [pw, ids, D, B, L](Node& self) {
        if (!pw->requires_grad) return;
        pw->ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t l = 0; l < L; ++l) {
                std::int64_t id = ids[size_t(b)][size_t(l)];
                const double* g = self.grad.data.data() + (b * L + l) * D;
                double* dst = pw->grad.data.data() + id * D;
                for (std::int64_t i = 0; i < D; ++i) dst[i] += g[i];
            }
    });
}

// Per-row position pick: x [B,S,D], idx [B] -> [B,D].
inline Var gather_dim1(const Var& x, const std::vector<std::int64_t>& idx) {
    const Tensor& t = x.val();
    if (t.ndim() != 3) throw config_error("gather_dim1: rank must be 3");
    std::int64_t B = t.shape[0], S = t.shape[1], D = t.shape[2];
    if (std::int64_t(idx.size()) != B) throw input_error("gather_dim1: index count mismatch");
    Tensor out({B, D});
    for (std::int64_t b = 0; b < B; ++b) {
        std::int64_t i = idx[size_t(b)];
        if (i < 0 || i >= S) throw input_error("gather_dim1: index out of range");
        std::copy(t.data.begin() + (b * S + i) * D, t.data.begin() + (b * S + i + 1) * D,
                  out.data.begin() + b * D);
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, idx, S, D](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        std::int64_t B = self.val.shape[0];
        for (std::int64_t b = 0; b < B; ++b) {
            std::int64_t i = idx[size_t(b)];
            const double* g = self.grad.data.data() + b * D;
            double* dst = px->grad.data.data() + (b * S + i) * D;
            for (std::int64_t d = 0; d < D; ++d) dst[d] += g[d];
        }
    });
}

inline Var diag(const Var& x) {
    const Tensor& t = x.val();
    if (t.ndim() != 2 || t.shape[0] != t.shape[1]) throw config_error("diag: square matrix required");
    std::int64_t N = t.shape[0];
    Tensor out({N});
    for (std::int64_t i = 0; i < N; ++i) out[i] = t.at(i, i);
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, N](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::int64_t i = 0; i < N; ++i) px->grad[i * N + i] += self.grad[i];
    });
}

inline Var sum_lastdim(const Var& x) {
    const Tensor& t = x.val();
    std::int64_t K = t.shape[size_t(t.ndim() - 1)];
    std::int64_t rows = t.numel() / K;
    std::vector<std::int64_t> shape(t.shape.begin(), t.shape.end() - 1);
    if (shape.empty()) shape.push_back(1);
    Tensor out(shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t i = 0; i < K; ++i) s += t[r * K + i];
        out[r] = s;
    }
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, K, rows](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < K; ++i) px->grad[r * K + i] += self.grad[r];
    });
}

inline Var mean_all(const Var& x) {
    std::int64_t n = x.numel();
    double s = 0.0;
    for (double v : x.val().data) s += v;
    Tensor out = Tensor::scalar(s / double(n));
    auto px = x.node();
    return make_op(std::move(out), {x}, [px, n](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        double g = self.grad[0] / double(n);
        for (std::int64_t i = 0; i < n; ++i) px->grad[i] += g;
    });
}

inline Var sum_all(const Var& x) {
    double s = 0.0;
    for (double v : x.val().data) s += v;
    Tensor out = Tensor::scalar(s);
    auto px = x.node();
    return make_op(std::move(out), {x}, [px](Node& self) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (std::int64_t i = 0; i < px->grad.numel(); ++i) px->grad[i] += self.grad[0];
    });
}

// Detached copy of the current value.
inline Tensor detach(const Var& x) { return x.val(); }

}  // namespace duet::ag
