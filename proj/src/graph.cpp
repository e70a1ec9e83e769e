#include "symseg/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "symseg/errors.hpp"

namespace symseg::ag {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// Elementwise loops below this size stay serial.
#define SYMSEG_PAR_FOR(n) _Pragma("omp parallel for simd schedule(static)")
constexpr int64_t kParThreshold = 1 << 16;

namespace {

thread_local bool g_grad_enabled = true;

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void check_rank(const Var& v, size_t rank, const char* what) {
    if (v->value.rank() != rank)
        throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) +
                              ", got shape " + shape_str(v->value.shape()));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor& Node::ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate(const float* g, int64_t n) {
    Tensor& dst = ensure_grad();
    float* d = dst.data();
    if (n >= kParThreshold) {
SYMSEG_PAR_FOR(n)
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
    } else {
        for (int64_t i = 0; i < n; ++i) d[i] += g[i];
    }
}

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var parameter(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    bool track = g_grad_enabled;
    if (track) {
        track = false;
        for (const auto& p : parents)
            if (p->requires_grad) {
                track = true;
                break;
            }
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(fn);
    }
    return n;
}

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw ValidationError("backward() expects a scalar root, got " +
                              shape_str(root->value.shape()));
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each(int64_t n, const Fn& fn) {
    if (n >= kParThreshold) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) fn(i);
    } else {
        for (int64_t i = 0; i < n; ++i) fn(i);
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value))
        throw ValidationError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                              shape_str(b->value.shape()));
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] + pb[i]; });
    return make(std::move(out), {a, b}, [n](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
        if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.data(), n);
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ValidationError("sub: shape mismatch");
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] - pb[i]; });
    return make(std::move(out), {a, b}, [n](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
        if (self.parents[1]->requires_grad) {
            float* g = self.parents[1]->ensure_grad().data();
            const float* sg = self.grad.data();
            for_each(n, [=](int64_t i) { g[i] -= sg[i]; });
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ValidationError("mul: shape mismatch");
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    const float* pb = b->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] * pb[i]; });
    return make(std::move(out), {a, b}, [n](Node& self) {
        Node* pa_ = self.parents[0].get();
        Node* pb_ = self.parents[1].get();
        const float* sg = self.grad.data();
        if (pa_->requires_grad) {
            float* g = pa_->ensure_grad().data();
            const float* vb = pb_->value.data();
            for_each(n, [=](int64_t i) { g[i] += sg[i] * vb[i]; });
        }
        if (pb_->requires_grad) {
            float* g = pb_->ensure_grad().data();
            const float* va = pa_->value.data();
            for_each(n, [=](int64_t i) { g[i] += sg[i] * va[i]; });
        }
    });
}

Var scale(const Var& a, float s) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] * s; });
    return make(std::move(out), {a}, [n, s](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) { g[i] += sg[i] * s; });
    });
}

Var add_const(const Var& a, const Tensor& c) {
    if (!a->value.same_shape(c)) throw ValidationError("add_const: shape mismatch");
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    const float* pc = c.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] + pc[i]; });
    return make(std::move(out), {a}, [n](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
    });
}

Var relu(const Var& a) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = pa[i] > 0.0f ? pa[i] : 0.0f; });
    return make(std::move(out), {a}, [n](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* x = self.parents[0]->value.data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) { g[i] += x[i] > 0.0f ? sg[i] : 0.0f; });
    });
}

Var sigmoid(const Var& a, float clamp_eps) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    auto raw = std::make_shared<Tensor>(Tensor::uninit(a->value.shape()));
    const float* pa = a->value.data();
    float* po = out.data();
    float* pr = raw->data();
    for_each(n, [=](int64_t i) {
        const float s = 1.0f / (1.0f + std::exp(-pa[i]));
        pr[i] = s;
        po[i] = clamp_eps > 0.0f ? std::min(1.0f - clamp_eps, std::max(clamp_eps, s)) : s;
    });
    return make(std::move(out), {a}, [n, raw](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* pr = raw->data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) { g[i] += sg[i] * pr[i] * (1.0f - pr[i]); });
    });
}

Var tanh_op(const Var& a) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = std::tanh(pa[i]); });
    return make(std::move(out), {a}, [n](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* y = self.value.data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) { g[i] += sg[i] * (1.0f - y[i] * y[i]); });
    });
}

Var log_floor(const Var& a, float floor) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = std::log(std::max(pa[i], floor)); });
    return make(std::move(out), {a}, [n, floor](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* x = self.parents[0]->value.data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) {
            if (x[i] > floor) g[i] += sg[i] / x[i];
        });
    });
}

Var clamp(const Var& a, float lo, float hi) {
    const int64_t n = a->value.numel();
    Tensor out = Tensor::uninit(a->value.shape());
    const float* pa = a->value.data();
    float* po = out.data();
    for_each(n, [=](int64_t i) { po[i] = std::min(hi, std::max(lo, pa[i])); });
    return make(std::move(out), {a}, [n, lo, hi](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* x = self.parents[0]->value.data();
        const float* sg = self.grad.data();
        for_each(n, [=](int64_t i) {
            if (x[i] >= lo && x[i] <= hi) g[i] += sg[i];
        });
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a->value.reshaped(std::move(shape));
    const int64_t n = out.numel();
    return make(std::move(out), {a}, [n](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
    Tensor out({1});
    out[0] = static_cast<float>(a->value.sum());
    const int64_t n = a->value.numel();
    return make(std::move(out), {a}, [n](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float s = self.grad[0];
        for_each(n, [=](int64_t i) { g[i] += s; });
    });
}

Var mean_all(const Var& a) {
    const int64_t n = a->value.numel();
    Tensor out({1});
    out[0] = static_cast<float>(a->value.sum() / static_cast<double>(n));
    return make(std::move(out), {a}, [n](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float s = self.grad[0] / static_cast<float>(n);
        for_each(n, [=](int64_t i) { g[i] += s; });
    });
}

Var global_avg_pool(const Var& a) {
    check_rank(a, 4, "global_avg_pool");
    const int64_t N = a->value.dim(0), C = a->value.dim(1), HW = a->value.dim(2) * a->value.dim(3);
    Tensor out = Tensor::uninit({N, C});
    const float* src0 = a->value.data();
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* src = src0 + nc * HW;
        double s = 0.0;
        for (int64_t i = 0; i < HW; ++i) s += src[i];
        po[nc] = static_cast<float>(s / static_cast<double>(HW));
    }
    return make(std::move(out), {a}, [N, C, HW](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g0 = self.parents[0]->ensure_grad().data();
        const float* sg = self.grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const float s = sg[nc] / static_cast<float>(HW);
            float* dst = g0 + nc * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] += s;
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    check_rank(a, 2, "matmul lhs");
    check_rank(b, 2, "matmul rhs");
    const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    if (b->value.dim(0) != k)
        throw ValidationError("matmul: inner dims " + shape_str(a->value.shape()) + " x " +
                              shape_str(b->value.shape()));
    Tensor out = Tensor::uninit({m, n});
    CMapM A(a->value.data(), m, k), B(b->value.data(), k, n);
    MapM O(out.data(), m, n);
    O.noalias() = A * B;
    return make(std::move(out), {a, b}, [m, k, n](Node& self) {
        CMapM G(self.grad.data(), m, n);
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
            MapM GA(pa->ensure_grad().data(), m, k);
            CMapM B(pb->value.data(), k, n);
            GA.noalias() += G * B.transpose();
        }
        if (pb->requires_grad) {
            MapM GB(pb->ensure_grad().data(), k, n);
            CMapM A(pa->value.data(), m, k);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    check_rank(x, 2, "linear input");
    check_rank(w, 2, "linear weight");
    const int64_t N = x->value.dim(0), I = x->value.dim(1), O = w->value.dim(0);
    if (w->value.dim(1) != I || b->value.numel() != O)
        throw ValidationError("linear: weight " + shape_str(w->value.shape()) + " bias " +
                              shape_str(b->value.shape()) + " vs input " +
                              shape_str(x->value.shape()));
    Tensor out = Tensor::uninit({N, O});
    CMapM X(x->value.data(), N, I), W(w->value.data(), O, I);
    MapM Y(out.data(), N, O);
    Y.noalias() = X * W.transpose();
    const float* pb = b->value.data();
    float* po = out.data();
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < O; ++c) po[r * O + c] += pb[c];
    return make(std::move(out), {x, w, b}, [N, I, O](Node& self) {
        CMapM G(self.grad.data(), N, O);
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents[2].get();
        if (px->requires_grad) {
            MapM GX(px->ensure_grad().data(), N, I);
            CMapM W(pw->value.data(), O, I);
            GX.noalias() += G * W;
        }
        if (pw->requires_grad) {
            MapM GW(pw->ensure_grad().data(), O, I);
            CMapM X(px->value.data(), N, I);
            GW.noalias() += G.transpose() * X;
        }
        if (pb->requires_grad) {
            float* gb = pb->ensure_grad().data();
            const float* sg = self.grad.data();
            for (int64_t r = 0; r < N; ++r)
                for (int64_t c = 0; c < O; ++c) gb[c] += sg[r * O + c];
        }
    });
}

Var rows_lookup(const Var& table, const std::vector<int>& idx) {
    check_rank(table, 2, "rows_lookup table");
    const int64_t V = table->value.dim(0), D = table->value.dim(1);
    const int64_t N = static_cast<int64_t>(idx.size());
    for (int i : idx)
        if (i < 0 || i >= V)
            throw ValidationError("rows_lookup: index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(V) + ")");
    Tensor out = Tensor::uninit({N, D});
    for (int64_t r = 0; r < N; ++r)
        std::memcpy(out.data() + r * D, table->value.data() + int64_t(idx[r]) * D,
                    sizeof(float) * D);
    return make(std::move(out), {table}, [idx, D, N](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& g = self.parents[0]->ensure_grad();
        for (int64_t r = 0; r < N; ++r) {
            float* dst = g.data() + int64_t(idx[r]) * D;
            const float* src = self.grad.data() + r * D;
            for (int64_t c = 0; c < D; ++c) dst[c] += src[c];
        }
    });
}

Var slice_cols(const Var& x, int64_t start, int64_t len) {
    check_rank(x, 2, "slice_cols");
    const int64_t N = x->value.dim(0), F = x->value.dim(1);
    if (start < 0 || start + len > F) throw ValidationError("slice_cols: out of range");
    Tensor out = Tensor::uninit({N, len});
    for (int64_t r = 0; r < N; ++r)
        std::memcpy(out.data() + r * len, x->value.data() + r * F + start, sizeof(float) * len);
    return make(std::move(out), {x}, [N, F, start, len](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        Tensor& g = self.parents[0]->ensure_grad();
        for (int64_t r = 0; r < N; ++r) {
            float* dst = g.data() + r * F + start;
            const float* src = self.grad.data() + r * len;
            for (int64_t c = 0; c < len; ++c) dst[c] += src[c];
        }
    });
}

Var softmax_rows(const Var& x) {
    check_rank(x, 2, "softmax_rows");
    const int64_t N = x->value.dim(0), V = x->value.dim(1);
    Tensor out = Tensor::uninit({N, V});
    const float* pin = x->value.data();
    float* pout = out.data();
#pragma omp parallel for schedule(static) if (N > 1)
    for (int64_t r = 0; r < N; ++r) {
        const float* in = pin + r * V;
        float* o = pout + r * V;
        float mx = in[0];
        for (int64_t c = 1; c < V; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (int64_t c = 0; c < V; ++c) {
            o[c] = std::exp(in[c] - mx);
            z += o[c];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int64_t c = 0; c < V; ++c) o[c] *= inv;
    }
    return make(std::move(out), {x}, [N, V](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g0 = self.parents[0]->ensure_grad().data();
        const float* y0 = self.value.data();
        const float* dy0 = self.grad.data();
#pragma omp parallel for schedule(static) if (N > 1)
        for (int64_t r = 0; r < N; ++r) {
            const float* y = y0 + r * V;
            const float* dy = dy0 + r * V;
            float* dx = g0 + r * V;
            double dot = 0.0;
            for (int64_t c = 0; c < V; ++c) dot += double(dy[c]) * y[c];
            for (int64_t c = 0; c < V; ++c) dx[c] += y[c] * (dy[c] - static_cast<float>(dot));
        }
    });
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

namespace {

// im2col into [Ci*k*k, H*W]; zero padding, stride 1.
void im2col(const float* x, int64_t C, int64_t H, int64_t W, int k, int pad, float* cols) {
    const int64_t HW = H * W;
    int64_t row = 0;
    for (int64_t c = 0; c < C; ++c) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx, ++row) {
                float* dst = cols + row * HW;
                const int64_t sy0 = dy - pad, sx0 = dx - pad;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + sy0;
                    float* out_row = dst + y * W;
                    if (sy < 0 || sy >= H) {
                        std::memset(out_row, 0, sizeof(float) * W);
                        continue;
                    }
                    const float* src_row = x + c * HW + sy * W;
                    const int64_t lo = std::max<int64_t>(0, -sx0);
                    const int64_t hi = std::min<int64_t>(W, W - sx0);
                    if (lo > 0) std::memset(out_row, 0, sizeof(float) * lo);
                    if (hi > lo)
                        std::memcpy(out_row + lo, src_row + lo + sx0, sizeof(float) * (hi - lo));
                    if (hi < W) std::memset(out_row + hi, 0, sizeof(float) * (W - hi));
                }
            }
        }
    }
}

void col2im_add(const float* cols, int64_t C, int64_t H, int64_t W, int k, int pad, float* dx) {
    const int64_t HW = H * W;
    int64_t row = 0;
    for (int64_t c = 0; c < C; ++c) {
        for (int dy = 0; dy < k; ++dy) {
            for (int dxo = 0; dxo < k; ++dxo, ++row) {
                const float* src = cols + row * HW;
                const int64_t sy0 = dy - pad, sx0 = dxo - pad;
                for (int64_t y = 0; y < H; ++y) {
                    const int64_t sy = y + sy0;
                    if (sy < 0 || sy >= H) continue;
                    float* dst_row = dx + c * HW + sy * W;
                    const float* src_row = src + y * W;
                    const int64_t lo = std::max<int64_t>(0, -sx0);
                    const int64_t hi = std::min<int64_t>(W, W - sx0);
                    for (int64_t xcol = lo; xcol < hi; ++xcol) dst_row[xcol + sx0] += src_row[xcol];
                }
            }
        }
    }
}

thread_local Tensor::Storage tl_cols;

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
    check_rank(x, 4, "conv2d input");
    check_rank(w, 4, "conv2d weight");
    const int64_t N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2),
                  W = x->value.dim(3);
    const int64_t Co = w->value.dim(0);
    const int k = static_cast<int>(w->value.dim(2));
    if (w->value.dim(1) != Ci || w->value.dim(3) != k || b->value.numel() != Co)
        throw ValidationError("conv2d: weight " + shape_str(w->value.shape()) +
                              " incompatible with input " + shape_str(x->value.shape()));
    const int64_t HW = H * W, K = Ci * k * k;
    Tensor out = Tensor::uninit({N, Co, H, W});

#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        tl_cols.resize(static_cast<size_t>(K * HW));
        im2col(x->value.data() + n * Ci * HW, Ci, H, W, k, pad, tl_cols.data());
        CMapM Wm(w->value.data(), Co, K);
        CMapM Cm(tl_cols.data(), K, HW);
        MapM Om(out.data() + n * Co * HW, Co, HW);
        Om.noalias() = Wm * Cm;
        for (int64_t c = 0; c < Co; ++c) Om.row(c).array() += b->value[c];
    }

    return make(std::move(out), {x, w, b}, [N, Ci, Co, H, W, k, pad, K, HW](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents[2].get();
        const bool need_x = px->requires_grad;
        const bool need_w = pw->requires_grad;
        const bool need_b = pb->requires_grad;
        if (need_x) px->ensure_grad();

        const int nt = max_threads();
        std::vector<Tensor> w_acc, b_acc;
        if (need_w) w_acc.assign(nt, Tensor(pw->value.shape()));
        if (need_b) b_acc.assign(nt, Tensor({Co}));

#pragma omp parallel num_threads(nt)
        {
#ifdef _OPENMP
            const int tid = omp_get_thread_num();
#else
            const int tid = 0;
#endif
            Tensor::Storage dcols(static_cast<size_t>(K * HW));
#pragma omp for schedule(static)
            for (int64_t n = 0; n < N; ++n) {
                CMapM G(self.grad.data() + n * Co * HW, Co, HW);
                tl_cols.resize(static_cast<size_t>(K * HW));
                if (need_w || need_x)
                    im2col(px->value.data() + n * Ci * HW, Ci, H, W, k, pad, tl_cols.data());
                if (need_w) {
                    MapM GW(w_acc[tid].data(), Co, K);
                    CMapM Cm(tl_cols.data(), K, HW);
                    GW.noalias() += G * Cm.transpose();
                }
                if (need_b) {
                    float* gb = b_acc[tid].data();
                    for (int64_t c = 0; c < Co; ++c) gb[c] += G.row(c).sum();
                }
                if (need_x) {
                    CMapM Wm(pw->value.data(), Co, K);
                    MapM DC(dcols.data(), K, HW);
                    DC.noalias() = Wm.transpose() * G;
                    col2im_add(dcols.data(), Ci, H, W, k, pad, px->grad.data() + n * Ci * HW);
                }
            }
        }
        // Combine per-thread partials in fixed order for run-to-run determinism.
        if (need_w) {
            Tensor& gw = pw->ensure_grad();
            for (int t = 0; t < nt; ++t)
                for (int64_t i = 0; i < gw.numel(); ++i) gw[i] += w_acc[t][i];
        }
        if (need_b) {
            Tensor& gb = pb->ensure_grad();
            for (int t = 0; t < nt; ++t)
                for (int64_t i = 0; i < Co; ++i) gb[i] += b_acc[t][i];
        }
    });
}

Var maxpool2d(const Var& x) {
    check_rank(x, 4, "maxpool2d");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                  W = x->value.dim(3);
    if (H % 2 || W % 2) throw ValidationError("maxpool2d: spatial dims must be even");
    const int64_t OH = H / 2, OW = W / 2;
    Tensor out = Tensor::uninit({N, C, OH, OW});
    auto indices = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(N * C * OH * OW));
    const int64_t planes = N * C;
    const float* src0 = x->value.data();
    float* dst0 = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        const float* src = src0 + p * H * W;
        float* dst = dst0 + p * OH * OW;
        int32_t* idx = indices->data() + p * OH * OW;
        for (int64_t y = 0; y < OH; ++y) {
            for (int64_t xo = 0; xo < OW; ++xo) {
                const int64_t base = (2 * y) * W + 2 * xo;
                int32_t best = static_cast<int32_t>(base);
                float bv = src[base];
                const int32_t cand[3] = {static_cast<int32_t>(base + 1),
                                         static_cast<int32_t>(base + W),
                                         static_cast<int32_t>(base + W + 1)};
                for (int32_t c : cand)
                    if (src[c] > bv) {
                        bv = src[c];
                        best = c;
                    }
                dst[y * OW + xo] = bv;
                idx[y * OW + xo] = best;
            }
        }
    }
    return make(std::move(out), {x}, [planes, H, W, OH, OW, indices](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g0 = self.parents[0]->ensure_grad().data();
        const float* sg = self.grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < planes; ++p) {
            float* dst = g0 + p * H * W;
            const float* src = sg + p * OH * OW;
            const int32_t* idx = indices->data() + p * OH * OW;
            for (int64_t i = 0; i < OH * OW; ++i) dst[idx[i]] += src[i];
        }
    });
}

void bilinear_resize_plane(const float* src, int64_t sh, int64_t sw, float* dst, int64_t dh,
                           int64_t dw) {
    const double sy_scale = static_cast<double>(sh) / dh;
    const double sx_scale = static_cast<double>(sw) / dw;
    for (int64_t y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy_scale - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(sh - 1)));
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, sh - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int64_t x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx_scale - 0.5;
            fx = std::max(0.0, std::min(fx, static_cast<double>(sw - 1)));
            const int64_t x0 = static_cast<int64_t>(fx);
            const int64_t x1 = std::min(x0 + 1, sw - 1);
            const float wx = static_cast<float>(fx - x0);
            const float v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                            wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
            dst[y * dw + x] = v;
        }
    }
}

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
    check_rank(x, 4, "upsample_bilinear");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                  W = x->value.dim(3);
    Tensor out = Tensor::uninit({N, C, out_h, out_w});
    const int64_t planes = N * C;
    const float* src0 = x->value.data();
    float* dst0 = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < planes; ++p)
        bilinear_resize_plane(src0 + p * H * W, H, W, dst0 + p * out_h * out_w, out_h, out_w);
    return make(std::move(out), {x}, [planes, H, W, out_h, out_w](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g0 = self.parents[0]->ensure_grad().data();
        const float* sg0 = self.grad.data();
        const double sy_scale = static_cast<double>(H) / out_h;
        const double sx_scale = static_cast<double>(W) / out_w;
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < planes; ++p) {
            float* dst = g0 + p * H * W;
            const float* src = sg0 + p * out_h * out_w;
            for (int64_t y = 0; y < out_h; ++y) {
                double fy = (y + 0.5) * sy_scale - 0.5;
                fy = std::max(0.0, std::min(fy, static_cast<double>(H - 1)));
                const int64_t y0 = static_cast<int64_t>(fy);
                const int64_t y1 = std::min(y0 + 1, H - 1);
                const float wy = static_cast<float>(fy - y0);
                for (int64_t x = 0; x < out_w; ++x) {
                    double fx = (x + 0.5) * sx_scale - 0.5;
                    fx = std::max(0.0, std::min(fx, static_cast<double>(W - 1)));
                    const int64_t x0 = static_cast<int64_t>(fx);
                    const int64_t x1 = std::min(x0 + 1, W - 1);
                    const float wx = static_cast<float>(fx - x0);
                    const float gv = src[y * out_w + x];
                    dst[y0 * W + x0] += (1 - wy) * (1 - wx) * gv;
                    dst[y0 * W + x1] += (1 - wy) * wx * gv;
                    dst[y1 * W + x0] += wy * (1 - wx) * gv;
                    dst[y1 * W + x1] += wy * wx * gv;
                }
            }
        }
    });
}

Var instance_norm2d(const Var& x, const Var& gamma, const Var& beta, float eps) {
    check_rank(x, 4, "instance_norm2d");
    const int64_t N = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw ValidationError("instance_norm2d: affine params must have C elements");
    Tensor out = Tensor::uninit(x->value.shape());
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(N * C * 2));
    const int64_t planes = N * C;
    const float* src0 = x->value.data();
    float* dst0 = out.data();
    const float* pg = gamma->value.data();
    const float* pbv = beta->value.data();
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
        const float* src = src0 + p * HW;
        float* dst = dst0 + p * HW;
        double s = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < HW; ++i) {
            s += src[i];
            s2 += double(src[i]) * src[i];
        }
        const double mu = s / HW;
        const double var = std::max(0.0, s2 / HW - mu * mu);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        const float mean = static_cast<float>(mu);
        (*stats)[2 * p] = mean;
        (*stats)[2 * p + 1] = inv;
        const float gc = pg[p % C], bc = pbv[p % C];
        for (int64_t i = 0; i < HW; ++i) dst[i] = (src[i] - mean) * inv * gc + bc;
    }
    return make(std::move(out), {x, gamma, beta}, [N, C, HW, stats](Node& self) {
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        Node* pbv = self.parents[2].get();
        const int64_t planes = N * C;
        // Per-plane gamma/beta partials, reduced serially over n afterwards.
        std::vector<float> dg(planes, 0.0f), db(planes, 0.0f);
        if (px->requires_grad) px->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < planes; ++p) {
            const float mean = (*stats)[2 * p], inv = (*stats)[2 * p + 1];
            const float gc = pg->value[p % C];
            const float* xsrc = px->value.data() + p * HW;
            const float* dy = self.grad.data() + p * HW;
            double sum_dy = 0.0, sum_dyx = 0.0;
            for (int64_t i = 0; i < HW; ++i) {
                const float xh = (xsrc[i] - mean) * inv;
                sum_dy += dy[i];
                sum_dyx += double(dy[i]) * xh;
            }
            dg[p] = static_cast<float>(sum_dyx);
            db[p] = static_cast<float>(sum_dy);
            if (px->requires_grad) {
                float* dx = px->grad.data() + p * HW;
                const float m_dy = static_cast<float>(sum_dy / HW);
                const float m_dyx = static_cast<float>(sum_dyx / HW);
                for (int64_t i = 0; i < HW; ++i) {
                    const float xh = (xsrc[i] - mean) * inv;
                    dx[i] += gc * inv * (dy[i] - m_dy - xh * m_dyx);
                }
            }
        }
        if (pg->requires_grad) {
            Tensor& g = pg->ensure_grad();
            for (int64_t p = 0; p < planes; ++p) g[p % C] += dg[p];
        }
        if (pbv->requires_grad) {
            Tensor& g = pbv->ensure_grad();
            for (int64_t p = 0; p < planes; ++p) g[p % C] += db[p];
        }
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("concat_channels: empty input");
    const int64_t N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
    int64_t Ct = 0;
    for (const auto& v : xs) {
        check_rank(v, 4, "concat_channels");
        if (v->value.dim(0) != N || v->value.dim(2) != H || v->value.dim(3) != W)
            throw ValidationError("concat_channels: mismatched shapes");
        Ct += v->value.dim(1);
    }
    Tensor out = Tensor::uninit({N, Ct, H, W});
    const int64_t HW = H * W;
    std::vector<int64_t> offs;
    int64_t off = 0;
    for (const auto& v : xs) {
        offs.push_back(off);
        off += v->value.dim(1);
    }
    float* dst0 = out.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t n = 0; n < N; ++n)
        for (size_t i = 0; i < xs.size(); ++i) {
            const int64_t c = xs[i]->value.dim(1);
            std::memcpy(dst0 + (n * Ct + offs[i]) * HW, xs[i]->value.data() + n * c * HW,
                        sizeof(float) * c * HW);
        }
    return make(std::move(out), std::vector<Var>(xs), [N, Ct, HW, offs](Node& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
            Node* p = self.parents[i].get();
            if (!p->requires_grad) continue;
            float* g = p->ensure_grad().data();
            const int64_t c = p->value.dim(1);
            const float* sg = self.grad.data();
#pragma omp parallel for schedule(static)
            for (int64_t n = 0; n < N; ++n) {
                const float* src = sg + (n * Ct + offs[i]) * HW;
                float* dst = g + n * c * HW;
                for (int64_t j = 0; j < c * HW; ++j) dst[j] += src[j];
            }
        }
    });
}

Var concat_channels(const Var& a, const Var& b) { return concat_channels(std::vector<Var>{a, b}); }

Var straight_through(const Tensor& hard, const Var& soft) {
    if (!hard.same_shape(soft->value)) throw ValidationError("straight_through: shape mismatch");
    Tensor out = hard;
    const int64_t n = out.numel();
    return make(std::move(out), {soft}, [n](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
    });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Var bce_mean(const Var& pred, const Tensor& target) {
    if (!pred->value.same_shape(target)) throw ValidationError("bce_mean: shape mismatch");
    const int64_t n = pred->value.numel();
    constexpr float kEps = 1e-7f;
    double acc = 0.0;
    const float* pp = pred->value.data();
    const float* pt = target.data();
    for (int64_t i = 0; i < n; ++i) {
        const double p = std::min(1.0 - double(kEps), std::max(double(kEps), double(pp[i])));
        const double t = pt[i];
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    Tensor out({1});
    out[0] = static_cast<float>(acc / n);
    return make(std::move(out), {pred}, [n, target](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g = self.parents[0]->ensure_grad().data();
        const float* p = self.parents[0]->value.data();
        const float* t = target.data();
        const float s = self.grad[0] / static_cast<float>(n);
        for_each(n, [=](int64_t i) {
            const float pc = std::min(1.0f - 1e-7f, std::max(1e-7f, p[i]));
            g[i] += s * (pc - t[i]) / (pc * (1.0f - pc));
        });
    });
}

Var soft_dice_loss(const Var& pred, const Tensor& target, float smooth) {
    check_rank(pred, 4, "soft_dice_loss");
    if (!pred->value.same_shape(target)) throw ValidationError("soft_dice_loss: shape mismatch");
    const int64_t N = pred->value.dim(0);
    const int64_t M = pred->value.numel() / N;
    auto sums = std::make_shared<std::vector<double>>(static_cast<size_t>(N * 2));
    double loss = 0.0;
    for (int64_t im = 0; im < N; ++im) {
        const float* p = pred->value.data() + im * M;
        const float* t = target.data() + im * M;
        double inter = 0.0, tot = 0.0;
        for (int64_t i = 0; i < M; ++i) {
            inter += double(p[i]) * t[i];
            tot += double(p[i]) + t[i];
        }
        (*sums)[2 * im] = inter;
        (*sums)[2 * im + 1] = tot;
        loss += 1.0 - (2.0 * inter + smooth) / (tot + smooth);
    }
    Tensor out({1});
    out[0] = static_cast<float>(loss / N);
    return make(std::move(out), {pred}, [N, M, smooth, sums, target](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        float* g0 = self.parents[0]->ensure_grad().data();
        const float s = self.grad[0] / static_cast<float>(N);
#pragma omp parallel for schedule(static)
        for (int64_t im = 0; im < N; ++im) {
            const double inter = (*sums)[2 * im], tot = (*sums)[2 * im + 1];
            const double denom = tot + smooth;
            const float* t = target.data() + im * M;
            float* dst = g0 + im * M;
            const double num = 2.0 * inter + smooth;
            for (int64_t i = 0; i < M; ++i) {
                // d/dp of -(2*inter+s)/(tot+s)
                const double d = -(2.0 * t[i] * denom - num) / (denom * denom);
                dst[i] += s * static_cast<float>(d);
            }
        }
    });
}

int argmax_row(const float* row, int64_t n) {
    int best = 0;
    float bv = row[0];
    for (int64_t i = 1; i < n; ++i)
        if (row[i] > bv) {
            bv = row[i];
            best = static_cast<int>(i);
        }
    return best;
}

}  // namespace symseg::ag
