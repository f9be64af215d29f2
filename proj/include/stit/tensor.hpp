#pragma once

// Reverse-mode autodiff over shaped numeric arrays. Scalar type is a
// template parameter: float for training, double for finite-difference
// gradient checks. Graphs are recorded as shared nodes with backward
// closures; leaf gradients accumulate across backward calls and are
// cleared explicitly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace stit {

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw TensorError("negative extent in shape " + shape_str(s));
        n *= size_t(d);
    }
    return n;
}

namespace detail {

// Scoped switch: while disabled, ops skip recording backward closures.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(shape_numel(shape), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_vector(std::vector<T> data, Shape shape, bool requires_grad = false) {
        if (data.size() != shape_numel(shape))
            throw TensorError("from_vector: " + std::to_string(data.size()) +
                              " values for shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    size_t numel() const { return node_->value.size(); }
    int dim(int i) const { return node_->shape[size_t(i)]; }
    int ndim() const { return int(node_->shape.size()); }

    // lvalue-only: the buffer dies with the tensor handle
    std::vector<T>& data() & { return node_->value; }
    const std::vector<T>& data() const& { return node_->value; }
    std::vector<T>& data() && = delete;
    const std::vector<T>& data() const&& = delete;
    T item() const {
        if (numel() != 1) throw TensorError("item: tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    // zeros when no gradient has been accumulated yet
    std::vector<T> grad() const {
        if (node_->grad.empty()) return std::vector<T>(node_->value.size(), T(0));
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }
    TensorNode<T>& raw() { return *node_; }
    const TensorNode<T>& raw() const { return *node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

// --------------------------------------------------------------------
// kernels (row-major, no aliasing)
// --------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]; ikj order so the inner loop vectorizes
template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + size_t(i) * K;
        T* c = C + size_t(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + size_t(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
void transpose(int R, int C, const T* src, T* dst) {
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) dst[size_t(j) * R + i] = src[size_t(i) * C + j];
}

// C[M,N] += A[M,K] * B^T, with B stored [N,K]
template <class T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, std::vector<T>& scratch) {
    scratch.resize(size_t(K) * N);
    transpose(N, K, B, scratch.data());
    gemm_nn(M, N, K, A, scratch.data(), C);
}

// C[K,N] += A^T * B, with A stored [M,K], B stored [M,N]
template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int m = 0; m < M; ++m) {
        const T* a = A + size_t(m) * K;
        const T* b = B + size_t(m) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            T* c = C + size_t(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
Tensor<T> make_op(Shape shape, const char* op, std::vector<Tensor<T>> parents) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs && grad_enabled_flag()) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
    }
    return Tensor<T>(std::move(n));
}

template <class T>
void accum(TensorNode<T>& dst, const std::vector<T>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b)
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                          shape_str(b));
}

}  // namespace detail

// --------------------------------------------------------------------
// elementwise
// --------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a.shape(), b.shape());
    auto out = detail::make_op<T>(a.shape(), "add", {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn](TensorNode<T>& n) {
            if (an->requires_grad) detail::accum(*an, n.grad);
            if (bn->requires_grad) detail::accum(*bn, n.grad);
        };
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a.shape(), b.shape());
    auto out = detail::make_op<T>(a.shape(), "sub", {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn](TensorNode<T>& n) {
            if (an->requires_grad) detail::accum(*an, n.grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a.shape(), b.shape());
    auto out = detail::make_op<T>(a.shape(), "mul", {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn](TensorNode<T>& n) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->value[i];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto out = detail::make_op<T>(a.shape(), "scale", {a});
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        auto an = a.node();
        out.raw().backprop = [an, c](TensorNode<T>& n) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
        };
    }
    return out;
}

// x[..., N] + b[N]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
        throw TensorError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(b.shape()));
    const int N = b.dim(0);
    const size_t rows = x.numel() / size_t(N);
    auto out = detail::make_op<T>(x.shape(), "add_bias", {x, b});
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < N; ++j) ov[r * N + j] = xv[r * N + j] + bv[size_t(j)];
    if (out.requires_grad()) {
        auto xn = x.node(), bn = b.node();
        out.raw().backprop = [xn, bn, rows, N](TensorNode<T>& n) {
            if (xn->requires_grad) detail::accum(*xn, n.grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < N; ++j) bn->grad[size_t(j)] += n.grad[r * size_t(N) + j];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto out = detail::make_op<T>(a.shape(), "sigmoid", {a});
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = detail::stable_sigmoid(av[i]);
    if (out.requires_grad()) {
        auto an = a.node();
        // the closure must not capture the output node: it lives on that
        // node, and the self-reference would leak the whole graph
        out.raw().backprop = [an](TensorNode<T>& n) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) {
                T y = n.value[i];
                an->grad[i] += n.grad[i] * y * (T(1) - y);
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    auto out = detail::make_op<T>(a.shape(), "relu", {a});
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
    if (out.requires_grad()) {
        auto an = a.node();
        out.raw().backprop = [an](TensorNode<T>& n) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                if (an->value[i] > T(0)) an->grad[i] += n.grad[i];
        };
    }
    return out;
}

// --------------------------------------------------------------------
// linear algebra
// --------------------------------------------------------------------

// x[..., K] @ W[K, N] -> [..., N]; leading dims are flattened row-wise
template <class T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(0))
        throw TensorError("matmul: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(w.shape()));
    const int K = w.dim(0), N = w.dim(1);
    const int M = int(x.numel() / size_t(K));
    Shape oshape = x.shape();
    oshape.back() = N;
    auto out = detail::make_op<T>(oshape, "matmul", {x, w});
    detail::gemm_nn(M, N, K, x.data().data(), w.data().data(), out.data().data());
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node();
        out.raw().backprop = [xn, wn, M, N, K](TensorNode<T>& n) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                std::vector<T> scratch;
                // dX += dY @ W^T
                detail::gemm_nt(M, K, N, n.grad.data(), wn->value.data(), xn->grad.data(), scratch);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                // dW += X^T @ dY
                detail::gemm_tn(M, N, K, xn->value.data(), n.grad.data(), wn->grad.data());
            }
        };
    }
    return out;
}

// x[..., K] @ W^T with W stored [N, K] -> [..., N]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(1))
        throw TensorError("matmul_nt: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(w.shape()));
    const int N = w.dim(0), K = w.dim(1);
    const int M = int(x.numel() / size_t(K));
    Shape oshape = x.shape();
    oshape.back() = N;
    auto out = detail::make_op<T>(oshape, "matmul_nt", {x, w});
    std::vector<T> scratch;
    detail::gemm_nt(M, N, K, x.data().data(), w.data().data(), out.data().data(), scratch);
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node();
        out.raw().backprop = [xn, wn, M, N, K](TensorNode<T>& n) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dX += dY @ W
                detail::gemm_nn(M, K, N, n.grad.data(), wn->value.data(), xn->grad.data());
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                // dW += dY^T @ X
                detail::gemm_tn(M, K, N, n.grad.data(), xn->value.data(), wn->grad.data());
            }
        };
    }
    return out;
}

// A[G,M,K] @ B[G,K,N] -> [G,M,N]
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw TensorError("bmm: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const int G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    auto out = detail::make_op<T>({G, M, N}, "bmm", {a, b});
    for (int g = 0; g < G; ++g)
        detail::gemm_nn(M, N, K, a.data().data() + size_t(g) * M * K,
                        b.data().data() + size_t(g) * K * N, out.data().data() + size_t(g) * M * N);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn, G, M, N, K](TensorNode<T>& n) {
            std::vector<T> scratch;
            for (int g = 0; g < G; ++g) {
                const T* dy = n.grad.data() + size_t(g) * M * N;
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::gemm_nt(M, K, N, dy, bn->value.data() + size_t(g) * K * N,
                                    an->grad.data() + size_t(g) * M * K, scratch);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::gemm_tn(M, N, K, an->value.data() + size_t(g) * M * K, dy,
                                    bn->grad.data() + size_t(g) * K * N);
                }
            }
        };
    }
    return out;
}

// A[G,M,K] @ B^T per batch with B stored [G,N,K] -> [G,M,N]
template <class T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw TensorError("bmm_nt: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const int G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
    auto out = detail::make_op<T>({G, M, N}, "bmm_nt", {a, b});
    std::vector<T> scratch;
    for (int g = 0; g < G; ++g)
        detail::gemm_nt(M, N, K, a.data().data() + size_t(g) * M * K,
                        b.data().data() + size_t(g) * N * K, out.data().data() + size_t(g) * M * N,
                        scratch);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn, G, M, N, K](TensorNode<T>& n) {
            for (int g = 0; g < G; ++g) {
                const T* dy = n.grad.data() + size_t(g) * M * N;
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::gemm_nn(M, K, N, dy, bn->value.data() + size_t(g) * N * K,
                                    an->grad.data() + size_t(g) * M * K);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::gemm_tn(M, K, N, dy, an->value.data() + size_t(g) * M * K,
                                    bn->grad.data() + size_t(g) * N * K);
                }
            }
        };
    }
    return out;
}

// --------------------------------------------------------------------
// structure: slice / concat / stack / heads
// --------------------------------------------------------------------

// rows [start, start+len) along axis 0
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, int start, int len) {
    if (x.ndim() < 1 || start < 0 || len < 0 || start + len > x.dim(0))
        throw TensorError("slice_rows: range [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of " + shape_str(x.shape()));
    size_t rowsz = x.numel() / size_t(std::max(1, x.dim(0)));
    Shape oshape = x.shape();
    oshape[0] = len;
    auto out = detail::make_op<T>(oshape, "slice_rows", {x});
    std::copy_n(x.data().data() + size_t(start) * rowsz, size_t(len) * rowsz, out.data().data());
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, start, rowsz](TensorNode<T>& n) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                xn->grad[size_t(start) * rowsz + i] += n.grad[i];
        };
    }
    return out;
}

// [start, start+len) along the last axis
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, int start, int len) {
    const int N = x.dim(x.ndim() - 1);
    if (start < 0 || len < 0 || start + len > N)
        throw TensorError("slice_last: range [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") out of " + shape_str(x.shape()));
    const size_t rows = x.numel() / size_t(N);
    Shape oshape = x.shape();
    oshape.back() = len;
    auto out = detail::make_op<T>(oshape, "slice_last", {x});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t r = 0; r < rows; ++r)
        std::copy_n(xv.data() + r * N + start, size_t(len), ov.data() + r * len);
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, rows, N, start, len](TensorNode<T>& n) {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    xn->grad[r * size_t(N) + size_t(start + j)] += n.grad[r * size_t(len) + j];
        };
    }
    return out;
}

template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != b.ndim())
        throw TensorError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    for (int i = 0; i + 1 < a.ndim(); ++i)
        if (a.dim(i) != b.dim(i))
            throw TensorError("concat_last: shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    const int Na = a.dim(a.ndim() - 1), Nb = b.dim(b.ndim() - 1);
    const size_t rows = a.numel() / size_t(std::max(1, Na));
    Shape oshape = a.shape();
    oshape.back() = Na + Nb;
    auto out = detail::make_op<T>(oshape, "concat_last", {a, b});
    auto& ov = out.data();
    for (size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().data() + r * Na, size_t(Na), ov.data() + r * (Na + Nb));
        std::copy_n(b.data().data() + r * Nb, size_t(Nb), ov.data() + r * (Na + Nb) + Na);
    }
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node();
        out.raw().backprop = [an, bn, rows, Na, Nb](TensorNode<T>& n) {
            for (size_t r = 0; r < rows; ++r) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (int j = 0; j < Na; ++j)
                        an->grad[r * Na + size_t(j)] += n.grad[r * size_t(Na + Nb) + size_t(j)];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < Nb; ++j)
                        bn->grad[r * Nb + size_t(j)] +=
                            n.grad[r * size_t(Na + Nb) + size_t(Na + j)];
                }
            }
        };
    }
    return out;
}

// stacks k tensors of shape [C] or [1,C] into [k, C]
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw TensorError("stack_rows: empty input");
    const int C = int(rows[0].numel());
    for (const auto& r : rows)
        if (int(r.numel()) != C)
            throw TensorError("stack_rows: inconsistent row width " + shape_str(r.shape()));
    auto out = detail::make_op<T>({int(rows.size()), C}, "stack_rows", rows);
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(rows[i].data().data(), size_t(C), out.data().data() + i * size_t(C));
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<TensorNode<T>>> ns;
        ns.reserve(rows.size());
        for (const auto& r : rows) ns.push_back(r.node());
        out.raw().backprop = [ns, C](TensorNode<T>& n) {
            for (size_t i = 0; i < ns.size(); ++i) {
                if (!ns[i]->requires_grad) continue;
                ns[i]->ensure_grad();
                for (int j = 0; j < C; ++j) ns[i]->grad[size_t(j)] += n.grad[i * size_t(C) + j];
            }
        };
    }
    return out;
}

// x[B,S,D] -> [B*H, S, D/H]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
    if (x.ndim() != 3 || x.dim(2) % heads != 0)
        throw TensorError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                          std::to_string(heads) + " heads");
    const int B = x.dim(0), S = x.dim(1), D = x.dim(2), hd = D / heads;
    auto out = detail::make_op<T>({B * heads, S, hd}, "split_heads", {x});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int s = 0; s < S; ++s)
                std::copy_n(xv.data() + (size_t(b) * S + s) * D + size_t(h) * hd, size_t(hd),
                            ov.data() + ((size_t(b) * heads + h) * S + s) * hd);
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, B, S, D, heads, hd](TensorNode<T>& n) {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int s = 0; s < S; ++s)
                        for (int k = 0; k < hd; ++k)
                            xn->grad[(size_t(b) * S + s) * D + size_t(h) * hd + k] +=
                                n.grad[((size_t(b) * heads + h) * S + s) * hd + k];
        };
    }
    return out;
}

// inverse of split_heads: [B*H, S, hd] -> [B, S, H*hd]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, int heads) {
    if (x.ndim() != 3 || x.dim(0) % heads != 0)
        throw TensorError("merge_heads: cannot merge " + shape_str(x.shape()) + " from " +
                          std::to_string(heads) + " heads");
    const int B = x.dim(0) / heads, S = x.dim(1), hd = x.dim(2), D = heads * hd;
    auto out = detail::make_op<T>({B, S, D}, "merge_heads", {x});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int s = 0; s < S; ++s)
                std::copy_n(xv.data() + ((size_t(b) * heads + h) * S + s) * hd, size_t(hd),
                            ov.data() + (size_t(b) * S + s) * D + size_t(h) * hd);
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, B, S, D, heads, hd](TensorNode<T>& n) {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int s = 0; s < S; ++s)
                        for (int k = 0; k < hd; ++k)
                            xn->grad[((size_t(b) * heads + h) * S + s) * hd + k] +=
                                n.grad[(size_t(b) * S + s) * D + size_t(h) * hd + k];
        };
    }
    return out;
}

// rows of x[N,D] (or [B,S,D] flattened to [B*S,D]) at the given indices -> [k,D]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& indices) {
    const int D = x.dim(x.ndim() - 1);
    const int N = int(x.numel() / size_t(D));
    for (int idx : indices)
        if (idx < 0 || idx >= N)
            throw TensorError("gather_rows: index " + std::to_string(idx) + " out of " +
                              std::to_string(N) + " rows");
    auto out = detail::make_op<T>({int(indices.size()), D}, "gather_rows", {x});
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy_n(x.data().data() + size_t(indices[i]) * D, size_t(D),
                    out.data().data() + i * size_t(D));
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, indices, D](TensorNode<T>& n) {
            xn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i)
                for (int j = 0; j < D; ++j)
                    xn->grad[size_t(indices[i]) * D + j] += n.grad[i * size_t(D) + j];
        };
    }
    return out;
}

// --------------------------------------------------------------------
// normalization / softmax
// --------------------------------------------------------------------

// softmax over the last axis
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
    const int N = x.dim(x.ndim() - 1);
    const size_t rows = x.numel() / size_t(N);
    auto out = detail::make_op<T>(x.shape(), "softmax", {x});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * N;
        T* orow = ov.data() + r * N;
        T m = row[0];
        for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        for (int j = 0; j < N; ++j) {
            orow[j] = std::exp(row[j] - m);
            sum += orow[j];
        }
        for (int j = 0; j < N; ++j) orow[j] /= sum;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, rows, N](TensorNode<T>& n) {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const T* y = n.value.data() + r * N;
                const T* g = n.grad.data() + r * N;
                T dot = T(0);
                for (int j = 0; j < N; ++j) dot += g[j] * y[j];
                for (int j = 0; j < N; ++j) xn->grad[r * size_t(N) + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

// causal softmax over [G,S,S]: row i normalizes over columns 0..i, rest 0.
// The mask lives inside the op so no non-finite values are materialized.
template <class T>
Tensor<T> softmax_causal(const Tensor<T>& x) {
    if (x.ndim() != 3 || x.dim(1) != x.dim(2))
        throw TensorError("softmax_causal: want [G,S,S], got " + shape_str(x.shape()));
    const int G = x.dim(0), S = x.dim(1);
    auto out = detail::make_op<T>(x.shape(), "softmax_causal", {x});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int g = 0; g < G; ++g)
        for (int i = 0; i < S; ++i) {
            const T* row = xv.data() + (size_t(g) * S + i) * S;
            T* orow = ov.data() + (size_t(g) * S + i) * S;
            T m = row[0];
            for (int j = 1; j <= i; ++j) m = std::max(m, row[j]);
            T sum = T(0);
            for (int j = 0; j <= i; ++j) {
                orow[j] = std::exp(row[j] - m);
                sum += orow[j];
            }
            for (int j = 0; j <= i; ++j) orow[j] /= sum;
            for (int j = i + 1; j < S; ++j) orow[j] = T(0);
        }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, G, S](TensorNode<T>& n) {
            xn->ensure_grad();
            for (int g = 0; g < G; ++g)
                for (int i = 0; i < S; ++i) {
                    const size_t off = (size_t(g) * S + i) * S;
                    const T* y = n.value.data() + off;
                    const T* gr = n.grad.data() + off;
                    T dot = T(0);
                    for (int j = 0; j <= i; ++j) dot += gr[j] * y[j];
                    for (int j = 0; j <= i; ++j) xn->grad[off + j] += y[j] * (gr[j] - dot);
                }
        };
    }
    return out;
}

// fused scaled causal attention: probabilities are computed row by row
// and recomputed in backward, so no [G,S,S] tensor is ever materialized
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scaling) {
    if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
        throw TensorError("causal_attention: want matching [G,S,hd], got " +
                          shape_str(q.shape()) + " / " + shape_str(k.shape()) + " / " +
                          shape_str(v.shape()));
    const int G = q.dim(0), S = q.dim(1), hd = q.dim(2);
    auto out = detail::make_op<T>(q.shape(), "causal_attention", {q, k, v});
    std::vector<T> row(static_cast<size_t>(S));
    const auto* qd = q.data().data();
    const auto* kd = k.data().data();
    const auto* vd = v.data().data();
    auto* od = out.data().data();
    for (int g = 0; g < G; ++g) {
        const T* qg = qd + size_t(g) * S * hd;
        const T* kg = kd + size_t(g) * S * hd;
        const T* vg = vd + size_t(g) * S * hd;
        T* og = od + size_t(g) * S * hd;
        for (int i = 0; i < S; ++i) {
            const T* qi = qg + size_t(i) * hd;
            T m = -std::numeric_limits<T>::infinity();
            for (int j = 0; j <= i; ++j) {
                T dot = T(0);
                const T* kj = kg + size_t(j) * hd;
                for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                row[size_t(j)] = dot * scaling;
                m = std::max(m, row[size_t(j)]);
            }
            T sum = T(0);
            for (int j = 0; j <= i; ++j) {
                row[size_t(j)] = std::exp(row[size_t(j)] - m);
                sum += row[size_t(j)];
            }
            T* oi = og + size_t(i) * hd;
            for (int c = 0; c < hd; ++c) oi[c] = T(0);
            for (int j = 0; j <= i; ++j) {
                const T p = row[size_t(j)] / sum;
                const T* vj = vg + size_t(j) * hd;
                for (int c = 0; c < hd; ++c) oi[c] += p * vj[c];
            }
        }
    }
    if (out.requires_grad()) {
        auto qn = q.node(), kn = k.node(), vn = v.node();
        out.raw().backprop = [qn, kn, vn, G, S, hd, scaling](TensorNode<T>& n) {
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            std::vector<T> p(static_cast<size_t>(S)), dp(static_cast<size_t>(S));
            for (int g = 0; g < G; ++g) {
                const size_t base = size_t(g) * S * hd;
                const T* qg = qn->value.data() + base;
                const T* kg = kn->value.data() + base;
                const T* vg = vn->value.data() + base;
                const T* dg = n.grad.data() + base;
                T* dq = qn->grad.data() + base;
                T* dk = kn->grad.data() + base;
                T* dv = vn->grad.data() + base;
                for (int i = 0; i < S; ++i) {
                    const T* qi = qg + size_t(i) * hd;
                    const T* doi = dg + size_t(i) * hd;
                    T m = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j <= i; ++j) {
                        T dot = T(0);
                        const T* kj = kg + size_t(j) * hd;
                        for (int c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                        p[size_t(j)] = dot * scaling;
                        m = std::max(m, p[size_t(j)]);
                    }
                    T sum = T(0);
                    for (int j = 0; j <= i; ++j) {
                        p[size_t(j)] = std::exp(p[size_t(j)] - m);
                        sum += p[size_t(j)];
                    }
                    T pdp = T(0);
                    for (int j = 0; j <= i; ++j) {
                        p[size_t(j)] /= sum;
                        T dot = T(0);
                        const T* vj = vg + size_t(j) * hd;
                        for (int c = 0; c < hd; ++c) dot += doi[c] * vj[c];
                        dp[size_t(j)] = dot;
                        pdp += dot * p[size_t(j)];
                    }
                    T* dqi = dq + size_t(i) * hd;
                    for (int j = 0; j <= i; ++j) {
                        const T pj = p[size_t(j)];
                        const T ds = pj * (dp[size_t(j)] - pdp) * scaling;
                        const T* kj = kg + size_t(j) * hd;
                        const T* vj = vg + size_t(j) * hd;
                        (void)vj;
                        T* dkj = dk + size_t(j) * hd;
                        T* dvj = dv + size_t(j) * hd;
                        for (int c = 0; c < hd; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                            dvj[c] += pj * doi[c];
                        }
                    }
                }
            }
        };
    }
    return out;
}

// layer norm over the last axis with learned gain/bias
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const int N = x.dim(x.ndim() - 1);
    if (gain.ndim() != 1 || gain.dim(0) != N || bias.ndim() != 1 || bias.dim(0) != N)
        throw TensorError("layer_norm: param shape mismatch for " + shape_str(x.shape()));
    const size_t rows = x.numel() / size_t(N);
    auto out = detail::make_op<T>(x.shape(), "layer_norm", {x, gain, bias});
    std::vector<T> inv_std(rows), xhat(x.numel());
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * N;
        T mean = T(0);
        for (int j = 0; j < N; ++j) mean += row[j];
        mean /= T(N);
        T var = T(0);
        for (int j = 0; j < N; ++j) {
            T d = row[j] - mean;
            var += d * d;
        }
        var /= T(N);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int j = 0; j < N; ++j) {
            T xh = (row[j] - mean) * is;
            xhat[r * N + j] = xh;
            ov[r * N + j] = gain.data()[size_t(j)] * xh + bias.data()[size_t(j)];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        auto is = std::make_shared<std::vector<T>>(std::move(inv_std));
        out.raw().backprop = [xn, gn, bn, xh, is, rows, N](TensorNode<T>& n) {
            for (size_t r = 0; r < rows; ++r) {
                const T* g = n.grad.data() + r * N;
                const T* xhr = xh->data() + r * N;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int j = 0; j < N; ++j) gn->grad[size_t(j)] += g[j] * xhr[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < N; ++j) bn->grad[size_t(j)] += g[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T mg = T(0), mgx = T(0);
                    for (int j = 0; j < N; ++j) {
                        T gh = g[j] * gn->value[size_t(j)];
                        mg += gh;
                        mgx += gh * xhr[j];
                    }
                    mg /= T(N);
                    mgx /= T(N);
                    for (int j = 0; j < N; ++j) {
                        T gh = g[j] * gn->value[size_t(j)];
                        xn->grad[r * size_t(N) + j] += (gh - mg - xhr[j] * mgx) * (*is)[r];
                    }
                }
            }
        };
    }
    return out;
}

// --------------------------------------------------------------------
// embedding with substitution hook
// --------------------------------------------------------------------

template <class T>
struct Substitution {
    int batch = 0;
    int pos = 0;
    Tensor<T> vec;  // shape [D] or [1,D]
};

// ids[B*S] -> [B,S,D]; rows at substituted (batch,pos) come from the
// supplied external vectors instead of the table.
template <class T>
Tensor<T> embed_tokens(const std::vector<int32_t>& ids, int B, int S, const Tensor<T>& table,
                       const std::vector<Substitution<T>>& subs = {}) {
    if (int(ids.size()) != B * S) throw TensorError("embed_tokens: ids size mismatch");
    const int V = table.dim(0), D = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || id >= V)
            throw TensorError("embed_tokens: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(V));
    std::vector<Tensor<T>> parents = {table};
    std::unordered_map<int64_t, size_t> sub_at;
    for (size_t i = 0; i < subs.size(); ++i) {
        const auto& s = subs[i];
        if (s.batch < 0 || s.batch >= B || s.pos < 0 || s.pos >= S)
            throw TensorError("embed_tokens: substitution position out of range");
        if (int(s.vec.numel()) != D)
            throw TensorError("embed_tokens: substitution vector width " +
                              std::to_string(s.vec.numel()) + " != embedding width " +
                              std::to_string(D));
        sub_at[int64_t(s.batch) * S + s.pos] = i;
        parents.push_back(s.vec);
    }
    auto out = detail::make_op<T>({B, S, D}, "embed_tokens", parents);
    auto& ov = out.data();
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s) {
            auto it = sub_at.find(int64_t(b) * S + s);
            const T* src = (it != sub_at.end())
                               ? subs[it->second].vec.data().data()
                               : table.data().data() + size_t(ids[size_t(b) * S + s]) * D;
            std::copy_n(src, size_t(D), ov.data() + (size_t(b) * S + s) * D);
        }
    if (out.requires_grad()) {
        auto tn = table.node();
        std::vector<std::shared_ptr<TensorNode<T>>> sub_nodes;
        sub_nodes.reserve(subs.size());
        for (const auto& s : subs) sub_nodes.push_back(s.vec.node());
        auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
        auto sub_map = std::make_shared<std::unordered_map<int64_t, size_t>>(std::move(sub_at));
        out.raw().backprop = [tn, sub_nodes, ids_copy, sub_map, B, S, D](TensorNode<T>& n) {
            for (int b = 0; b < B; ++b)
                for (int s = 0; s < S; ++s) {
                    const T* g = n.grad.data() + (size_t(b) * S + s) * D;
                    auto it = sub_map->find(int64_t(b) * S + s);
                    if (it != sub_map->end()) {
                        auto& sn = sub_nodes[it->second];
                        if (!sn->requires_grad) continue;
                        sn->ensure_grad();
                        for (int j = 0; j < D; ++j) sn->grad[size_t(j)] += g[j];
                    } else if (tn->requires_grad) {
                        tn->ensure_grad();
                        T* tg = tn->grad.data() + size_t((*ids_copy)[size_t(b) * S + s]) * D;
                        for (int j = 0; j < D; ++j) tg[j] += g[j];
                    }
                }
        };
    }
    return out;
}

// x[B,S,D] + pos[Smax,D] rows 0..S-1, broadcast over batch
template <class T>
Tensor<T> add_position(const Tensor<T>& x, const Tensor<T>& pos) {
    if (x.ndim() != 3 || pos.ndim() != 2 || x.dim(2) != pos.dim(1) || x.dim(1) > pos.dim(0))
        throw TensorError("add_position: " + shape_str(x.shape()) + " vs " +
                          shape_str(pos.shape()));
    const int B = x.dim(0), S = x.dim(1), D = x.dim(2);
    auto out = detail::make_op<T>(x.shape(), "add_position", {x, pos});
    const auto& xv = x.data();
    const auto& pv = pos.data();
    auto& ov = out.data();
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s)
            for (int j = 0; j < D; ++j)
                ov[(size_t(b) * S + s) * D + j] =
                    xv[(size_t(b) * S + s) * D + j] + pv[size_t(s) * D + j];
    if (out.requires_grad()) {
        auto xn = x.node(), pn = pos.node();
        out.raw().backprop = [xn, pn, B, S, D](TensorNode<T>& n) {
            if (xn->requires_grad) detail::accum(*xn, n.grad);
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int s = 0; s < S; ++s)
                        for (int j = 0; j < D; ++j)
                            pn->grad[size_t(s) * D + j] += n.grad[(size_t(b) * S + s) * D + j];
            }
        };
    }
    return out;
}

// --------------------------------------------------------------------
// 1-D dilated convolution
// --------------------------------------------------------------------

// x[Tin,Cin] * w[K,Cin,Cout] + b[Cout] -> [Tout,Cout], Tout = Tin - dilation*(K-1)
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int dilation = 1) {
    if (x.ndim() != 2 || w.ndim() != 3 || x.dim(1) != w.dim(1))
        throw TensorError("conv1d: shape mismatch input " + shape_str(x.shape()) + " kernel " +
                          shape_str(w.shape()));
    if (dilation < 1) throw TensorError("conv1d: dilation must be >= 1");
    const int Tin = x.dim(0), Cin = x.dim(1), K = w.dim(0), Cout = w.dim(2);
    if (b.ndim() != 1 || b.dim(0) != Cout)
        throw TensorError("conv1d: bias shape " + shape_str(b.shape()) + " wants [" +
                          std::to_string(Cout) + "]");
    const int Tout = Tin - dilation * (K - 1);
    if (Tout < 1)
        throw TensorError("conv1d: sequence length " + std::to_string(Tin) +
                          " shorter than receptive field " + std::to_string(dilation * (K - 1) + 1));
    auto out = detail::make_op<T>({Tout, Cout}, "conv1d", {x, w, b});
    const auto& xv = x.data();
    const auto& wv = w.data();
    auto& ov = out.data();
    for (int t = 0; t < Tout; ++t)
        for (int o = 0; o < Cout; ++o) ov[size_t(t) * Cout + o] = b.data()[size_t(o)];
    for (int t = 0; t < Tout; ++t)
        for (int k = 0; k < K; ++k) {
            const T* xr = xv.data() + size_t(t + k * dilation) * Cin;
            for (int c = 0; c < Cin; ++c) {
                const T xval = xr[c];
                const T* wr = wv.data() + (size_t(k) * Cin + c) * Cout;
                T* orow = ov.data() + size_t(t) * Cout;
                for (int o = 0; o < Cout; ++o) orow[o] += xval * wr[o];
            }
        }
    if (out.requires_grad()) {
        auto xn = x.node(), wn = w.node(), bn = b.node();
        out.raw().backprop = [xn, wn, bn, Tout, Cin, Cout, K, dilation](TensorNode<T>& n) {
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int t = 0; t < Tout; ++t)
                    for (int o = 0; o < Cout; ++o) bn->grad[size_t(o)] += n.grad[size_t(t) * Cout + o];
            }
            for (int t = 0; t < Tout; ++t)
                for (int k = 0; k < K; ++k) {
                    const size_t xrow = size_t(t + k * dilation) * Cin;
                    const T* g = n.grad.data() + size_t(t) * Cout;
                    for (int c = 0; c < Cin; ++c) {
                        const T* wr = wn->value.data() + (size_t(k) * Cin + c) * Cout;
                        if (xn->requires_grad) {
                            xn->ensure_grad();
                            T acc = T(0);
                            for (int o = 0; o < Cout; ++o) acc += g[o] * wr[o];
                            xn->grad[xrow + c] += acc;
                        }
                        if (wn->requires_grad) {
                            wn->ensure_grad();
                            const T xval = xn->value[xrow + c];
                            T* wg = wn->grad.data() + (size_t(k) * Cin + c) * Cout;
                            for (int o = 0; o < Cout; ++o) wg[o] += xval * g[o];
                        }
                    }
                }
        };
    }
    return out;
}

// --------------------------------------------------------------------
// reductions and losses
// --------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = detail::make_op<T>({1}, "sum", {x});
    T acc = T(0);
    for (T v : x.data()) acc += v;
    out.data()[0] = acc;
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn](TensorNode<T>& n) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += n.grad[0];
        };
    }
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.numel() == 0) throw TensorError("mean: empty tensor");
    auto out = detail::make_op<T>({1}, "mean", {x});
    T acc = T(0);
    for (T v : x.data()) acc += v;
    out.data()[0] = acc / T(x.numel());
    if (out.requires_grad()) {
        auto xn = x.node();
        const T inv = T(1) / T(x.numel());
        out.raw().backprop = [xn, inv](TensorNode<T>& n) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += n.grad[0] * inv;
        };
    }
    return out;
}

// x[T,C] -> [1,C], mean over rows
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    if (x.ndim() != 2) throw TensorError("mean_rows: want 2-D, got " + shape_str(x.shape()));
    const int R = x.dim(0), C = x.dim(1);
    auto out = detail::make_op<T>({1, C}, "mean_rows", {x});
    auto& ov = out.data();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[size_t(c)] += x.data()[size_t(r) * C + c];
    for (int c = 0; c < C; ++c) ov[size_t(c)] /= T(R);
    if (out.requires_grad()) {
        auto xn = x.node();
        out.raw().backprop = [xn, R, C](TensorNode<T>& n) {
            xn->ensure_grad();
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) xn->grad[size_t(r) * C + c] += n.grad[size_t(c)] / T(R);
        };
    }
    return out;
}

// mean over masked rows of -log softmax(logits)[target]
template <class T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                               const std::vector<uint8_t>& mask) {
    const int V = logits.dim(logits.ndim() - 1);
    const size_t rows = logits.numel() / size_t(V);
    if (targets.size() != rows || mask.size() != rows)
        throw TensorError("cross_entropy: row count mismatch for " + shape_str(logits.shape()));
    size_t m_count = 0;
    for (auto m : mask) m_count += m ? 1 : 0;
    if (m_count == 0) throw TensorError("cross_entropy: empty mask");
    auto out = detail::make_op<T>({1}, "cross_entropy", {logits});
    const auto& lv = logits.data();
    T total = T(0);
    for (size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* row = lv.data() + r * V;
        int32_t t = targets[r];
        if (t < 0 || t >= V) throw TensorError("cross_entropy: target id out of range");
        T m = row[0];
        for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        for (int j = 0; j < V; ++j) sum += std::exp(row[j] - m);
        total += (std::log(sum) + m) - row[t];
    }
    out.data()[0] = total / T(m_count);
    if (out.requires_grad()) {
        auto ln = logits.node();
        auto tg = std::make_shared<std::vector<int32_t>>(targets);
        auto mk = std::make_shared<std::vector<uint8_t>>(mask);
        out.raw().backprop = [ln, tg, mk, rows, V, m_count](TensorNode<T>& n) {
            ln->ensure_grad();
            const T seed = n.grad[0] / T(m_count);
            for (size_t r = 0; r < rows; ++r) {
                if (!(*mk)[r]) continue;
                const T* row = ln->value.data() + r * V;
                T m = row[0];
                for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
                T sum = T(0);
                for (int j = 0; j < V; ++j) sum += std::exp(row[j] - m);
                T* g = ln->grad.data() + r * V;
                for (int j = 0; j < V; ++j) g[j] += seed * std::exp(row[j] - m) / sum;
                g[(*tg)[r]] -= seed;
            }
        };
    }
    return out;
}

// mean |pred - target|; subgradient 0 at exact ties
template <class T>
Tensor<T> abs_error_mean(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::check_same_shape("abs_error", pred.shape(), target.shape());
    if (pred.numel() == 0) throw TensorError("abs_error: empty input");
    auto out = detail::make_op<T>({1}, "abs_error", {pred, target});
    T acc = T(0);
    for (size_t i = 0; i < pred.numel(); ++i) acc += std::abs(pred.data()[i] - target.data()[i]);
    out.data()[0] = acc / T(pred.numel());
    if (out.requires_grad()) {
        auto pn = pred.node(), tn = target.node();
        out.raw().backprop = [pn, tn](TensorNode<T>& n) {
            const T seed = n.grad[0] / T(pn->value.size());
            for (size_t i = 0; i < pn->value.size(); ++i) {
                T d = pn->value[i] - tn->value[i];
                T s = d > T(0) ? seed : (d < T(0) ? -seed : T(0));
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    pn->grad[i] += s;
                }
                if (tn->requires_grad) {
                    tn->ensure_grad();
                    tn->grad[i] -= s;
                }
            }
        };
    }
    return out;
}

// mean binary cross-entropy of probabilities against {0,1} labels
template <class T>
Tensor<T> binary_cross_entropy_mean(const Tensor<T>& probs, const Tensor<T>& labels) {
    detail::check_same_shape("binary_cross_entropy", probs.shape(), labels.shape());
    if (probs.numel() == 0) throw TensorError("binary_cross_entropy: empty input");
    const T eps = sizeof(T) == 8 ? T(1e-12) : T(1e-7);
    auto out = detail::make_op<T>({1}, "binary_cross_entropy", {probs, labels});
    T acc = T(0);
    for (size_t i = 0; i < probs.numel(); ++i) {
        T p = std::clamp(probs.data()[i], eps, T(1) - eps);
        T y = labels.data()[i];
        acc -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
    }
    out.data()[0] = acc / T(probs.numel());
    if (out.requires_grad()) {
        auto pn = probs.node(), ln = labels.node();
        out.raw().backprop = [pn, ln, eps](TensorNode<T>& n) {
            const T seed = n.grad[0] / T(pn->value.size());
            for (size_t i = 0; i < pn->value.size(); ++i) {
                T p = std::clamp(pn->value[i], eps, T(1) - eps);
                T y = ln->value[i];
                if (pn->requires_grad && pn->value[i] > eps && pn->value[i] < T(1) - eps) {
                    pn->ensure_grad();
                    pn->grad[i] += seed * (p - y) / (p * (T(1) - p));
                }
                if (ln->requires_grad) {
                    ln->ensure_grad();
                    ln->grad[i] += seed * (std::log(T(1) - p) - std::log(p));
                }
            }
        };
    }
    return out;
}

// --------------------------------------------------------------------
// backward pass
// --------------------------------------------------------------------

template <class T>
void backward(Tensor<T> loss) {
    if (loss.numel() != 1)
        throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // topological order (iterative DFS)
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<T>* p = node->parents[idx++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // interior gradients are per-call scratch; leaf gradients accumulate
    for (auto* n : order)
        if (!n->parents.empty()) n->grad.assign(n->value.size(), T(0));
    loss.raw().ensure_grad();
    loss.raw().grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop && !(*it)->grad.empty()) (*it)->backprop(**it);
}

template <class T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(double(x))) return false;
    return true;
}

template <class T>
void assert_finite(const Tensor<T>& t, const std::string& what) {
    if (!all_finite(t.data()))
        throw TensorError("non-finite values in " + what + " " + shape_str(t.shape()));
}

}  // namespace stit
