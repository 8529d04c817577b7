#pragma once

// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// Every op that has at least one input with requires_grad() records a node
// holding its parents and a local gradient rule. backward() orders the
// reachable nodes by creation index (parents are always created first), so
// one pass visits every node exactly once.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace yieldgraph {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t order = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline std::uint64_t next_order() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value in ") + what);
    }
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        detail::check_finite(data, "tensor construction");
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->order = detail::next_order();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    /// Rank-0 tensor; the only shape that broadcasts in elementwise ops.
    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        Shape s{v.size()};
        return from(std::move(s), std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    bool is_scalar() const { return node_->shape.empty(); }

    std::span<const double> data() const { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient buffer; all zeros when no backward pass has reached this tensor.
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    /// In-place update of a leaf (optimizer use only).
    std::span<double> mutable_data() {
        if (!node_->parents.empty()) throw std::logic_error("mutable_data() on a non-leaf tensor");
        return node_->value;
    }

    /// Copy of the values without tape history.
    Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

    const char* op_name() const { return node_->op; }

    // Internal: used by op implementations.
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Creates an op output. The node records parents only when gradients are needed.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> rule) {
    check_finite(value, op);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->order = next_order();
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward = std::move(rule);
    }
    return Tensor(std::move(n));
}

inline void accumulate(Node& parent, const std::vector<double>& g) {
    if (!parent.requires_grad) return;
    auto& buf = parent.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit a;
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    a.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward

/// Topologically ordered record of the nodes reachable from a root.
class Tape {
public:
    explicit Tape(const Tensor& root) {
        std::vector<detail::Node*> stack{root.node().get()};
        std::unordered_set<detail::Node*> seen{root.node().get()};
        while (!stack.empty()) {
            auto* n = stack.back();
            stack.pop_back();
            if (!n->requires_grad) continue;
            nodes_.push_back(n);
            for (auto& p : n->parents) {
                if (seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(nodes_.begin(), nodes_.end(),
                  [](const detail::Node* a, const detail::Node* b) { return a->order < b->order; });
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    /// Nodes in creation order: every node's inputs precede it.
    const std::vector<detail::Node*>& nodes() const { return nodes_; }

    void run(detail::Node& root) const {
        if (root.parents.empty()) {
            root.grad_buffer()[0] += 1.0;
            return;
        }
        root.grad_buffer().assign(root.value.size(), 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            detail::Node& n = **it;
            if (n.parents.empty()) continue;
            if (!n.grad.empty() && n.backward) n.backward(n);
            n.grad.clear();
            n.grad.shrink_to_fit();
        }
        for (auto* n : nodes_) {
            if (n->parents.empty() && !n->grad.empty()) detail::check_finite(n->grad, "gradient");
        }
    }

private:
    std::vector<detail::Node*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from loss.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward() needs a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) return;  // constant loss: every gradient is zero
    Tape tape(loss);
    tape.run(*loss.node());
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Binary { add, sub, mul };

inline Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
    const bool sa = a.is_scalar() && !b.is_scalar();
    const bool sb = b.is_scalar() && !a.is_scalar();
    if (!sa && !sb && a.shape() != b.shape()) {
        throw ShapeError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const Shape out_shape = sa ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[sa ? 0 : i];
        const double y = bv[sb ? 0 : i];
        switch (kind) {
            case Binary::add: out[i] = x + y; break;
            case Binary::sub: out[i] = x - y; break;
            case Binary::mul: out[i] = x * y; break;
        }
    }
    static constexpr const char* names[] = {"add", "sub", "mul"};
    return make_result(names[static_cast<int>(kind)], out_shape, std::move(out), {a, b},
                       [kind, sa, sb, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad) {
            auto& ga = pa.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                double d = g[i];
                if (kind == Binary::mul) d *= pb.value[sb ? 0 : i];
                ga[sa ? 0 : i] += d;
            }
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                double d = g[i];
                if (kind == Binary::sub) d = -d;
                if (kind == Binary::mul) d *= pa.value[sa ? 0 : i];
                gb[sb ? 0 : i] += d;
            }
        }
    });
}

/// Unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Tensor unary(const char* name, const Tensor& x, F f, D dfdx) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_result(name, x.shape(), std::move(out), {x}, [dfdx](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    });
}

inline double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(cosh(r)) as |r| + log1p(exp(-2|r|)) - log 2; finite for every finite r.
inline double logcosh_value(double r) {
    const double a = std::fabs(r);
    return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::mul, a, b); }

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary("sigmoid", x, detail::sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

/// Subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
    return detail::unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    for (double v : x.data()) {
        if (!(v > 0.0)) throw std::domain_error("log of non-positive value " + std::to_string(v));
    }
    return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor cosh(const Tensor& x) {
    return detail::unary("cosh", x, [](double v) { return std::cosh(v); },
                         [](double v, double) { return std::sinh(v); });
}

/// Overflow-safe log(cosh(x)); derivative tanh(x).
inline Tensor logcosh(const Tensor& x) {
    return detail::unary("logcosh", x, detail::logcosh_value, [](double v, double) { return std::tanh(v); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (auto& g : gp) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

enum class Reduce { sum, mean, max };

/// Reduces one axis away. max routes the gradient to the first (lowest flat index) maximum.
inline Tensor reduce(Reduce op, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("reduce axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    const auto sp = detail::split_at(x.shape(), axis);
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i) if (i != axis) out_shape.push_back(x.dim(i));
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    std::vector<std::size_t> arg;
    const auto& xv = x.values();
    if (op == Reduce::max) arg.assign(out.size(), 0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t r = o * sp.inner + in;
            if (op == Reduce::max) {
                std::size_t best = o * sp.len * sp.inner + in;
                for (std::size_t k = 1; k < sp.len; ++k) {
                    const std::size_t idx = (o * sp.len + k) * sp.inner + in;
                    if (xv[idx] > xv[best]) best = idx;
                }
                out[r] = xv[best];
                arg[r] = best;
            } else {
                double s = 0.0;
                for (std::size_t k = 0; k < sp.len; ++k) s += xv[(o * sp.len + k) * sp.inner + in];
                out[r] = op == Reduce::mean ? s / static_cast<double>(sp.len) : s;
            }
        }
    }
    static constexpr const char* names[] = {"reduce_sum", "reduce_mean", "reduce_max"};
    return detail::make_result(names[static_cast<int>(op)], out_shape, std::move(out), {x},
                               [op, sp, arg = std::move(arg)](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t r = o * sp.inner + in;
                const double g = self.grad[r];
                if (op == Reduce::max) {
                    gp[arg[r]] += g;
                } else {
                    const double d = op == Reduce::mean ? g / static_cast<double>(sp.len) : g;
                    for (std::size_t k = 0; k < sp.len; ++k) gp[(o * sp.len + k) * sp.inner + in] += d;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    return detail::make_result("reshape", std::move(shape), x.values(), {x}, [](detail::Node& self) {
        detail::accumulate(*self.parents[0], self.grad);
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    if (parts.size() == 1) return parts.front();
    const Shape& s0 = parts.front().shape();
    if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + shape_str(s0));
    std::vector<std::size_t> lens;
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
        if (!ok) throw ShapeError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
        lens.push_back(s[axis]);
        out_shape[axis] += s[axis];
    }
    const auto sp = detail::split_at(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& pv = parts[p].values();
        const std::size_t chunk = lens[p] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(pv.begin() + o * chunk, chunk, out.begin() + (o * sp.len + offset) * sp.inner);
        }
        offset += lens[p];
    }
    return detail::make_result("concat", out_shape, std::move(out), parts, [sp, lens](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < lens.size(); ++p) {
            detail::Node& par = *self.parents[p];
            const std::size_t chunk = lens[p] * sp.inner;
            if (par.requires_grad) {
                auto& gp = par.grad_buffer();
                for (std::size_t o = 0; o < sp.outer; ++o) {
                    const double* src = self.grad.data() + (o * sp.len + off) * sp.inner;
                    for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
                }
            }
            off += lens[p];
        }
    });
}

/// Half-open range [begin, end) along axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
        throw ShapeError("invalid slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    const auto sp = detail::split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    const std::size_t chunk = (end - begin) * sp.inner;
    std::vector<double> out(sp.outer * chunk);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(xv.begin() + (o * sp.len + begin) * sp.inner, chunk, out.begin() + o * chunk);
    }
    return detail::make_result("slice", out_shape, std::move(out), {x}, [sp, begin, chunk](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            double* dst = gp.data() + (o * sp.len + begin) * sp.inner;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += self.grad[o * chunk + i];
        }
    });
}

/// Splits x along axis into consecutive pieces of the given lengths.
inline std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& lengths) {
    std::vector<Tensor> out;
    std::size_t at = 0;
    for (std::size_t len : lengths) {
        out.push_back(slice(x, axis, at, at + len));
        at += len;
    }
    if (at != x.dim(axis)) throw ShapeError("split lengths do not cover axis of " + shape_str(x.shape()));
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// C[m x n] = A[m x k] * B[k x n], row-major. Every entry is summed over k in
/// ascending order from zero, so a row of C depends only on the matching row of A.
// Eight doubles; GCC and Clang lower this to whatever vector width the target has.
typedef double gemm_vec __attribute__((vector_size(64)));

inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t MR = 8, NR = 8;
    // B is packed one NR-wide column panel at a time so the inner loop reads contiguously.
    std::vector<double> panel(k * NR);
    const std::size_t m_main = m - m % MR;
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
        for (std::size_t p = 0; p < k; ++p) std::copy_n(b + p * n + j0, NR, panel.data() + p * NR);
        for (std::size_t i0 = 0; i0 < m_main; i0 += MR) {
            gemm_vec acc[MR] = {};
            const double* a0 = a + i0 * k;
            for (std::size_t p = 0; p < k; ++p) {
                gemm_vec bv;
                std::memcpy(&bv, panel.data() + p * NR, sizeof bv);
                for (std::size_t ii = 0; ii < MR; ++ii) acc[ii] += a0[ii * k + p] * bv;
            }
            for (std::size_t ii = 0; ii < MR; ++ii) std::memcpy(c + (i0 + ii) * n + j0, &acc[ii], sizeof(gemm_vec));
        }
        for (std::size_t i = m_main; i < m; ++i) {
            gemm_vec acc = {};
            for (std::size_t p = 0; p < k; ++p) {
                gemm_vec bv;
                std::memcpy(&bv, panel.data() + p * NR, sizeof bv);
                acc += a[i * k + p] * bv;
            }
            std::memcpy(c + i * n + j0, &acc, sizeof acc);
        }
    }
    if (j0 < n) {
        const std::size_t w = n - j0;
        for (std::size_t i = 0; i < m; ++i) {
            double acc[NR] = {};
            for (std::size_t p = 0; p < k; ++p) {
                const double av = a[i * k + p];
                const double* brow = b + p * n + j0;
                for (std::size_t jj = 0; jj < w; ++jj) acc[jj] += av * brow[jj];
            }
            std::copy_n(acc, w, c + i * n + j0);
        }
    }
}

inline std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    return t;
}

/// dst += A * B.
inline void gemm_add(const double* a, const double* b, double* dst, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> tmp(m * n);
    gemm(a, b, tmp.data(), m, k, n);
    for (std::size_t i = 0; i < m * n; ++i) dst[i] += tmp[i];
}

} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::gemm(a.values().data(), b.values().data(), out.data(), m, k, n);
    return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) {  // dA = dC * B^T
            const auto bt = detail::transpose(pb.value.data(), k, n);
            detail::gemm_add(self.grad.data(), bt.data(), pa.grad_buffer().data(), m, n, k);
        }
        if (pb.requires_grad) {  // dB = A^T * dC
            const auto at = detail::transpose(pa.value.data(), m, k);
            detail::gemm_add(at.data(), self.grad.data(), pb.grad_buffer().data(), k, m, n);
        }
    });
}

/// x[batch x in] * weight[out x in]^T + bias[out]. Each output is accumulated
/// over inputs in ascending order, then the bias is added.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("linear input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
        throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const auto wt = detail::transpose(weight.values().data(), out_dim, in);
    std::vector<double> out(batch * out_dim);
    detail::gemm(x.values().data(), wt.data(), out.data(), batch, in, out_dim);
    if (bias.defined()) {
        const auto& bv = bias.values();
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) out[i * out_dim + o] += bv[o];
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result("linear", {batch, out_dim}, std::move(out), std::move(inputs),
                               [batch, in, out_dim](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        const auto& g = self.grad;
        if (px.requires_grad) {  // dx = g * W
            detail::gemm_add(g.data(), pw.value.data(), px.grad_buffer().data(), batch, out_dim, in);
        }
        if (pw.requires_grad) {  // dW = g^T * x
            const auto gt = detail::transpose(g.data(), batch, out_dim);
            detail::gemm_add(gt.data(), px.value.data(), pw.grad_buffer().data(), out_dim, batch, in);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->grad_buffer();
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[i * out_dim + o];
        }
    });
}

// ---------------------------------------------------------------------------
// Sequence ops

namespace detail {

/// Unfolds x[batch x cin x len] into col[(cin*k) x (batch*lo)].
inline void im2col(const double* x, std::size_t batch, std::size_t cin, std::size_t len, std::size_t k,
                   std::vector<double>& col) {
    const std::size_t lo = len - k + 1, n = batch * lo;
    col.resize(cin * k * n);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t j = 0; j < k; ++j) {
            double* dst = col.data() + (ci * k + j) * n;
            for (std::size_t b = 0; b < batch; ++b) {
                const double* src = x + (b * cin + ci) * len + j;
                std::copy_n(src, lo, dst + b * lo);
            }
        }
}

/// Transposed im2col: one row of cin*k values per output position.
inline std::vector<double> patches(const double* x, std::size_t batch, std::size_t cin, std::size_t len, std::size_t k) {
    const std::size_t lo = len - k + 1, rows = cin * k;
    std::vector<double> out(batch * lo * rows);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < lo; ++t) {
            double* dst = out.data() + (b * lo + t) * rows;
            for (std::size_t ci = 0; ci < cin; ++ci) std::copy_n(x + (b * cin + ci) * len + t, k, dst + ci * k);
        }
    return out;
}

} // namespace detail

/// Valid (unpadded) cross-correlation. x[batch x c_in x len], weight[c_out x c_in x k], bias[c_out].
inline Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 3 || weight.rank() != 3 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("conv1d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(weight.shape()));
    }
    const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (len < k) {
        throw ShapeError("conv1d input length " + std::to_string(len) + " shorter than kernel " + std::to_string(k));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("conv1d bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                         " output channels");
    }
    const std::size_t lo = len - k + 1, rows = cin * k, n = batch * lo;
    std::vector<double> col;
    detail::im2col(x.values().data(), batch, cin, len, k, col);
    std::vector<double> y(cout * n);
    detail::gemm(weight.values().data(), col.data(), y.data(), cout, rows, n);
    std::vector<double> out(batch * cout * lo);
    for (std::size_t co = 0; co < cout; ++co) {
        const double bb = bias.defined() ? bias.values()[co] : 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const double* src = y.data() + co * n + b * lo;
            double* dst = out.data() + (b * cout + co) * lo;
            for (std::size_t t = 0; t < lo; ++t) dst[t] = src[t] + bb;
        }
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result("conv1d", {batch, cout, lo}, std::move(out), std::move(inputs),
                               [batch, cin, len, cout, k, lo, rows, n](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        std::vector<double> dy(cout * n);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t co = 0; co < cout; ++co)
                std::copy_n(self.grad.data() + (b * cout + co) * lo, lo, dy.data() + co * n + b * lo);
        if (pw.requires_grad) {  // dW = dy * col^T
            const auto colt = detail::patches(px.value.data(), batch, cin, len, k);
            detail::gemm_add(dy.data(), colt.data(), pw.grad_buffer().data(), cout, n, rows);
        }
        if (px.requires_grad) {  // dcol = W^T * dy, folded back onto x
            const auto wt = detail::transpose(pw.value.data(), cout, rows);
            std::vector<double> dcol(rows * n);
            detail::gemm(wt.data(), dy.data(), dcol.data(), rows, cout, n);
            auto& gx = px.grad_buffer();
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t j = 0; j < k; ++j) {
                    const double* src = dcol.data() + (ci * k + j) * n;
                    for (std::size_t b = 0; b < batch; ++b) {
                        double* dst = gx.data() + (b * cin + ci) * len + j;
                        for (std::size_t t = 0; t < lo; ++t) dst[t] += src[b * lo + t];
                    }
                }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->grad_buffer();
            for (std::size_t co = 0; co < cout; ++co) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += dy[co * n + i];
                gb[co] += s;
            }
        }
    });
}

/// Non-overlapping average pooling over the last axis; a trailing remainder is dropped.
inline Tensor avg_pool1d(const Tensor& x, std::size_t window = 2) {
    if (x.rank() < 1 || window == 0 || x.dim(x.rank() - 1) < window) {
        throw ShapeError("avg_pool1d window " + std::to_string(window) + " too large for " + shape_str(x.shape()));
    }
    const std::size_t len = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / len;
    const std::size_t lo = len / window;
    Shape out_shape = x.shape();
    out_shape.back() = lo;
    const auto& xv = x.values();
    const double inv = 1.0 / static_cast<double>(window);
    std::vector<double> out(rows * lo);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < lo; ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < window; ++j) s += xv[r * len + t * window + j];
            out[r * lo + t] = s * inv;
        }
    return detail::make_result("avg_pool1d", out_shape, std::move(out), {x},
                               [rows, len, lo, window, inv](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t t = 0; t < lo; ++t) {
                const double d = self.grad[r * lo + t] * inv;
                for (std::size_t j = 0; j < window; ++j) gp[r * len + t * window + j] += d;
            }
    });
}

// ---------------------------------------------------------------------------
// Row gather / segment reductions (graph message passing)

/// Selects rows of a matrix x[n x d] in the given order.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (x.rank() != 2) throw ShapeError("gather_rows needs a matrix, got " + shape_str(x.shape()));
    if (rows.empty()) throw ShapeError("gather_rows with no rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw ShapeError("gather_rows index " + std::to_string(rows[i]) + " out of range");
        std::copy_n(x.values().begin() + rows[i] * d, d, out.begin() + i * d);
    }
    return detail::make_result("gather_rows", {rows.size(), d}, std::move(out), {x}, [rows, d](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gp[rows[i] * d + j] += self.grad[i * d + j];
    });
}

enum class SegmentReduce { mean, max };

/// out[i] = mean/max over rows x[groups[i][*]]; an empty group yields a zero row.
/// Rows are combined in list order. max ties go to the earliest listed row.
inline Tensor segment_reduce(SegmentReduce op, const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
    if (x.rank() != 2) throw ShapeError("segment_reduce needs a matrix, got " + shape_str(x.shape()));
    if (groups.empty()) throw ShapeError("segment_reduce with no groups");
    const std::size_t n = x.dim(0), d = x.dim(1);
    const auto& xv = x.values();
    std::vector<double> out(groups.size() * d, 0.0);
    std::vector<std::size_t> arg;
    if (op == SegmentReduce::max) arg.assign(out.size(), SIZE_MAX);
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto& grp = groups[i];
        if (grp.empty()) continue;
        for (std::size_t r : grp) {
            if (r >= n) throw ShapeError("segment_reduce row " + std::to_string(r) + " out of range");
        }
        double* orow = out.data() + i * d;
        if (op == SegmentReduce::mean) {
            for (std::size_t r : grp)
                for (std::size_t j = 0; j < d; ++j) orow[j] += xv[r * d + j];
            const double cnt = static_cast<double>(grp.size());
            for (std::size_t j = 0; j < d; ++j) orow[j] = orow[j] / cnt;
        } else {
            for (std::size_t j = 0; j < d; ++j) {
                std::size_t best = grp[0];
                for (std::size_t q = 1; q < grp.size(); ++q)
                    if (xv[grp[q] * d + j] > xv[best * d + j]) best = grp[q];
                orow[j] = xv[best * d + j];
                arg[i * d + j] = best * d + j;
            }
        }
    }
    return detail::make_result(op == SegmentReduce::mean ? "segment_mean" : "segment_max", {groups.size(), d},
                               std::move(out), {x}, [op, groups, d, arg = std::move(arg)](detail::Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const auto& grp = groups[i];
            if (grp.empty()) continue;
            if (op == SegmentReduce::mean) {
                const double cnt = static_cast<double>(grp.size());
                for (std::size_t r : grp)
                    for (std::size_t j = 0; j < d; ++j) gp[r * d + j] += self.grad[i * d + j] / cnt;
            } else {
                for (std::size_t j = 0; j < d; ++j) gp[arg[i * d + j]] += self.grad[i * d + j];
            }
        }
    });
}

} // namespace yieldgraph
