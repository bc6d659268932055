#include "getmol/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace getmol {

namespace {

thread_local Tape* g_active_tape = nullptr;

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i > 0) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor shape " + shape_str(shape_) + " does not match buffer of " +
                         std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::matrix(std::int64_t rows, std::int64_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::int64_t n) {
    std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;
    return Tensor({n, n}, std::move(v));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

std::int64_t Tensor::extent(std::int64_t axis) const {
    if (axis < 0 || axis >= rank()) throw ContractError("tensor axis out of range");
    return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

std::span<const double> Tensor::data() const {
    if (!data_) throw ContractError("use of an undefined tensor");
    return {data_->data(), data_->size()};
}

const std::vector<double>& Tensor::vec() const {
    if (!data_) throw ContractError("use of an undefined tensor");
    return *data_;
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value() requires a 1-element tensor, got " + shape_str(shape_));
    }
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank()) {
        throw ContractError("index rank mismatch for shape " + shape_str(shape_));
    }
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        flat = flat * shape_[k] + i;
        ++k;
    }
    return (*data_)[static_cast<std::size_t>(flat)];
}

// ---------------------------------------------------------------- Tape

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::watch(Tensor& t) {
    if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
    Node node;
    node.shape = t.shape();
    nodes_.push_back(std::move(node));
    t.node_ = static_cast<int>(nodes_.size()) - 1;
}

namespace detail {

std::vector<double>& BackwardCtx::grad(int k) {
    const int id = node.inputs[static_cast<std::size_t>(k)];
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) {
        g.assign(static_cast<std::size_t>(shape_numel(tape.nodes_[static_cast<std::size_t>(id)].shape)),
                 0.0);
    }
    return g;
}

}  // namespace detail

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.tracked()) {
        throw ContractError("backward requires a loss produced under the active tape");
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node())] = {1.0};
    for (int i = loss.node(); i >= 0; --i) {
        auto& g = grads[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        const Node& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.back) continue;  // leaf
        detail::BackwardCtx ctx{g, node, grads, *this};
        node.back(ctx);
    }
    Gradients out;
    // Only leaf (watched) gradients are retained; intermediates are
    // scaffolding for the traversal.
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].empty() || nodes_[i].back) continue;
        out.by_node_[static_cast<int>(i)] = Tensor(nodes_[i].shape, std::move(grads[i]));
    }
    return out;
}

Tensor Gradients::at(const Tensor& t) const {
    if (!t.tracked()) throw ContractError("gradient lookup for an untracked tensor");
    auto it = by_node_.find(t.node());
    if (it == by_node_.end()) return Tensor::zeros(t.shape());
    return it->second;
}

bool Gradients::reached(const Tensor& t) const {
    return t.tracked() && by_node_.find(t.node()) != by_node_.end();
}

// ---------------------------------------------------------------- op plumbing

using detail::BackwardCtx;
using BackFn = std::function<void(BackwardCtx&)>;

int record_node(Shape out_shape, std::vector<int> inputs, std::function<void(BackwardCtx&)> fn) {
    Tape* tape = Tape::active();
    Tape::Node node;
    node.shape = std::move(out_shape);
    node.inputs = std::move(inputs);
    node.back = std::move(fn);
    tape->nodes_.push_back(std::move(node));
    return static_cast<int>(tape->nodes_.size()) - 1;
}

namespace {

int record_op(Shape out_shape, std::initializer_list<const Tensor*> inputs, BackFn fn) {
    Tape* tape = Tape::active();
    if (!tape) return -1;
    bool any_tracked = false;
    for (const Tensor* t : inputs) {
        if (t && t->tracked()) {
            any_tracked = true;
            break;
        }
    }
    if (!any_tracked) return -1;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor* t : inputs) ids.push_back(t ? t->node() : -1);
    return record_node(std::move(out_shape), std::move(ids), std::move(fn));
}

int record_op_vec(Shape out_shape, const std::vector<const Tensor*>& inputs, BackFn fn) {
    Tape* tape = Tape::active();
    if (!tape) return -1;
    bool any_tracked = false;
    for (const Tensor* t : inputs) {
        if (t && t->tracked()) {
            any_tracked = true;
            break;
        }
    }
    if (!any_tracked) return -1;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor* t : inputs) ids.push_back(t ? t->node() : -1);
    return record_node(std::move(out_shape), std::move(ids), std::move(fn));
}

}  // namespace

Tensor wrap_result(Shape shape, std::vector<double> values, int node) {
    Tensor t(std::move(shape), std::move(values));
    t.node_ = node;
    return t;
}

// ---------------------------------------------------------------- broadcasting

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `s` viewed as shape `out` (0 stride over stretched axes).
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    std::int64_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        const std::size_t oi = i + (out.size() - s.size());
        strides[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= s[i];
    }
    return strides;
}

// True when `inner` equals the trailing extents of `outer` (pure leading-dim
// broadcast, e.g. [d] against [n,d]).
bool is_suffix_shape(const Shape& inner, const Shape& outer) {
    if (inner.size() > outer.size()) return false;
    for (std::size_t i = 0; i < inner.size(); ++i) {
        if (inner[inner.size() - 1 - i] != outer[outer.size() - 1 - i]) return false;
    }
    return true;
}

// Sum grad (shaped `gshape`) down to `tshape` by collapsing broadcast axes.
std::vector<double> reduce_to_shape(const std::vector<double>& g, const Shape& gshape,
                                    const Shape& tshape) {
    if (gshape == tshape) return g;
    std::vector<double> out(static_cast<std::size_t>(shape_numel(tshape)), 0.0);
    if (is_suffix_shape(tshape, gshape)) {
        const std::size_t n = out.size();
        for (std::size_t i = 0; i < g.size(); ++i) out[i % n] += g[i];
        return out;
    }
    const auto strides = broadcast_strides(tshape, gshape);
    const std::size_t r = gshape.size();
    std::vector<std::int64_t> idx(r, 0);
    for (std::size_t flat = 0; flat < g.size(); ++flat) {
        std::int64_t tflat = 0;
        for (std::size_t i = 0; i < r; ++i) tflat += idx[i] * strides[i];
        out[static_cast<std::size_t>(tflat)] += g[flat];
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < gshape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

template <class Fwd>
std::vector<double> broadcast_eval(const Tensor& a, const Tensor& b, const Shape& out, Fwd&& f) {
    const auto n = static_cast<std::size_t>(shape_numel(out));
    std::vector<double> vals(n);
    const auto& av = a.vec();
    const auto& bv = b.vec();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < n; ++i) vals[i] = f(av[i], bv[i]);
        return vals;
    }
    if (b.numel() == 1) {
        const double bs = bv[0];
        for (std::size_t i = 0; i < n; ++i) vals[i] = f(av[i], bs);
        return vals;
    }
    if (a.numel() == 1) {
        const double as = av[0];
        for (std::size_t i = 0; i < n; ++i) vals[i] = f(as, bv[i]);
        return vals;
    }
    if (a.shape() == out && is_suffix_shape(b.shape(), out)) {
        const std::size_t bn = bv.size();
        for (std::size_t i = 0; i < n; ++i) vals[i] = f(av[i], bv[i % bn]);
        return vals;
    }
    if (b.shape() == out && is_suffix_shape(a.shape(), out)) {
        const std::size_t an = av.size();
        for (std::size_t i = 0; i < n; ++i) vals[i] = f(av[i % an], bv[i]);
        return vals;
    }
    const auto sa = broadcast_strides(a.shape(), out);
    const auto sb = broadcast_strides(b.shape(), out);
    const std::size_t r = out.size();
    std::vector<std::int64_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::int64_t fa = 0, fb = 0;
        for (std::size_t i = 0; i < r; ++i) {
            fa += idx[i] * sa[i];
            fb += idx[i] * sb[i];
        }
        vals[flat] = f(av[static_cast<std::size_t>(fa)], bv[static_cast<std::size_t>(fb)]);
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out[i]) break;
            idx[i] = 0;
        }
    }
    return vals;
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    Shape out = broadcast_shape(a.shape(), b.shape());
    auto vals = broadcast_eval(a, b, out, [](double x, double y) { return x + y; });
    const Shape ash = a.shape(), bsh = b.shape();
    int node = record_op(out, {&a, &b}, [ash, bsh, out](BackwardCtx& ctx) {
        if (ctx.needs(0)) {
            if (ash == out) accumulate(ctx.grad(0), ctx.out_grad);
            else accumulate(ctx.grad(0), reduce_to_shape(ctx.out_grad, out, ash));
        }
        if (ctx.needs(1)) {
            if (bsh == out) accumulate(ctx.grad(1), ctx.out_grad);
            else accumulate(ctx.grad(1), reduce_to_shape(ctx.out_grad, out, bsh));
        }
    });
    return wrap_result(std::move(out), std::move(vals), node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Shape out = broadcast_shape(a.shape(), b.shape());
    auto vals = broadcast_eval(a, b, out, [](double x, double y) { return x - y; });
    const Shape ash = a.shape(), bsh = b.shape();
    int node = record_op(out, {&a, &b}, [ash, bsh, out](BackwardCtx& ctx) {
        if (ctx.needs(0)) {
            if (ash == out) accumulate(ctx.grad(0), ctx.out_grad);
            else accumulate(ctx.grad(0), reduce_to_shape(ctx.out_grad, out, ash));
        }
        if (ctx.needs(1)) {
            if (bsh == out) {
                auto& g = ctx.grad(1);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= ctx.out_grad[i];
            } else {
                std::vector<double> neg(ctx.out_grad.size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -ctx.out_grad[i];
                accumulate(ctx.grad(1), reduce_to_shape(neg, out, bsh));
            }
        }
    });
    return wrap_result(std::move(out), std::move(vals), node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Shape out = broadcast_shape(a.shape(), b.shape());
    auto vals = broadcast_eval(a, b, out, [](double x, double y) { return x * y; });
    auto ahold = std::make_shared<Tensor>(a);
    auto bhold = std::make_shared<Tensor>(b);
    int node = record_op(out, {&a, &b}, [ahold, bhold, out](BackwardCtx& ctx) {
        const Tensor& a2 = *ahold;
        const Tensor& b2 = *bhold;
        const auto& g = ctx.out_grad;
        if (ctx.needs(0)) {
            auto& ga = ctx.grad(0);
            if (a2.shape() == out && b2.shape() == out) {
                const auto& bv = b2.vec();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
            } else if (a2.shape() == out && b2.numel() == 1) {
                const double bs = b2.vec()[0];
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bs;
            } else if (a2.numel() == 1) {
                const auto& bv = b2.vec();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    acc += g[i] * (b2.numel() == 1 ? bv[0] : bv[i]);
                }
                ga[0] += acc;
            } else {
                auto tmp = broadcast_eval(Tensor(out, g), b2, out,
                                          [](double gg, double y) { return gg * y; });
                accumulate(ga, reduce_to_shape(tmp, out, a2.shape()));
            }
        }
        if (ctx.needs(1)) {
            auto& gb = ctx.grad(1);
            if (b2.shape() == out && a2.shape() == out) {
                const auto& av = a2.vec();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
            } else if (b2.numel() == 1) {
                const auto& av = a2.vec();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    acc += g[i] * (a2.numel() == 1 ? av[0] : av[i]);
                }
                gb[0] += acc;
            } else {
                auto tmp = broadcast_eval(Tensor(out, g), a2, out,
                                          [](double gg, double x) { return gg * x; });
                accumulate(gb, reduce_to_shape(tmp, out, b2.shape()));
            }
        }
    });
    return wrap_result(std::move(out), std::move(vals), node);
}

namespace {

template <class F, class DF>
Tensor unary_op(const Tensor& a, F&& f, DF&& df) {
    const auto& av = a.vec();
    std::vector<double> vals(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) vals[i] = f(av[i]);
    auto hold = std::make_shared<Tensor>(a);
    int node = record_op(a.shape(), {&a}, [hold, df](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        const auto& xv = hold->vec();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.out_grad[i] * df(xv[i]);
    });
    return wrap_result(a.shape(), std::move(vals), node);
}

}  // namespace

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * sigmoid_scalar(x); },
        [](double x) {
            const double s = sigmoid_scalar(x);
            return s + x * s * (1.0 - s);
        });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return sigmoid_scalar(x); },
        [](double x) {
            const double s = sigmoid_scalar(x);
            return s * (1.0 - s);
        });
}

Tensor reciprocal(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / x; }, [](double x) { return -1.0 / (x * x); });
}

Tensor sqrt_elem(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); },
        [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Tensor rsqrt(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / std::sqrt(x); },
        [](double x) { return -0.5 / (x * std::sqrt(x)); });
}

Tensor clamp_min(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x < c ? c : x; }, [c](double x) { return x >= c ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul requires 2D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) {
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> vals(static_cast<std::size_t>(m * n), 0.0);
    const auto& av = a.vec();
    const auto& bv = b.vec();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double aik = av[static_cast<std::size_t>(i * k + kk)];
            if (aik == 0.0) continue;
            const double* brow = &bv[static_cast<std::size_t>(kk * n)];
            double* orow = &vals[static_cast<std::size_t>(i * n)];
            for (std::int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    auto ahold = std::make_shared<Tensor>(a);
    auto bhold = std::make_shared<Tensor>(b);
    int node = record_op({m, n}, {&a, &b}, [ahold, bhold, m, k, n](BackwardCtx& ctx) {
        const auto& g = ctx.out_grad;
        if (ctx.needs(0)) {
            // dA = g . B^T
            auto& ga = ctx.grad(0);
            const auto& bv2 = bhold->vec();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < n; ++j)
                        acc += g[static_cast<std::size_t>(i * n + j)] *
                               bv2[static_cast<std::size_t>(kk * n + j)];
                    ga[static_cast<std::size_t>(i * k + kk)] += acc;
                }
        }
        if (ctx.needs(1)) {
            // dB = A^T . g
            auto& gb = ctx.grad(1);
            const auto& av2 = ahold->vec();
            for (std::int64_t kk = 0; kk < k; ++kk)
                for (std::int64_t i = 0; i < m; ++i) {
                    const double aik = av2[static_cast<std::size_t>(i * k + kk)];
                    if (aik == 0.0) continue;
                    for (std::int64_t j = 0; j < n; ++j)
                        gb[static_cast<std::size_t>(kk * n + j)] +=
                            aik * g[static_cast<std::size_t>(i * n + j)];
                }
        }
    });
    return wrap_result({m, n}, std::move(vals), node);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose requires a 2D tensor, got " + shape_str(a.shape()));
    const std::int64_t m = a.extent(0), n = a.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(m * n));
    const auto& av = a.vec();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            vals[static_cast<std::size_t>(j * m + i)] = av[static_cast<std::size_t>(i * n + j)];
    int node = record_op({n, m}, {&a}, [m, n](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t i = 0; i < m; ++i)
                g[static_cast<std::size_t>(i * n + j)] += ctx.out_grad[static_cast<std::size_t>(j * m + i)];
    });
    return wrap_result({n, m}, std::move(vals), node);
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> vals(a.vec());
    int node = record_op(shape, {&a}, [](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        accumulate(ctx.grad(0), ctx.out_grad);
    });
    return wrap_result(std::move(shape), std::move(vals), node);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero tensors");
    const std::int64_t rows = parts[0].extent(0);
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.extent(0) != rows) {
            throw ShapeError("concat_cols row mismatch at " + shape_str(p.shape()));
        }
        cols += p.extent(1);
    }
    std::vector<double> vals(static_cast<std::size_t>(rows * cols));
    std::vector<std::int64_t> widths;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p.extent(1);
        const auto& pv = p.vec();
        for (std::int64_t r = 0; r < rows; ++r)
            std::copy_n(&pv[static_cast<std::size_t>(r * w)], w,
                        &vals[static_cast<std::size_t>(r * cols + off)]);
        widths.push_back(w);
        off += w;
    }
    std::vector<const Tensor*> ins;
    for (const auto& p : parts) ins.push_back(&p);
    int node = record_op_vec({rows, cols}, ins, [rows, cols, widths](BackwardCtx& ctx) {
        std::int64_t o = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (ctx.needs(static_cast<int>(k))) {
                auto& g = ctx.grad(static_cast<int>(k));
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < widths[k]; ++c)
                        g[static_cast<std::size_t>(r * widths[k] + c)] +=
                            ctx.out_grad[static_cast<std::size_t>(r * cols + o + c)];
            }
            o += widths[k];
        }
    });
    return wrap_result({rows, cols}, std::move(vals), node);
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows of zero tensors");
    const std::int64_t cols = parts[0].extent(1);
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.extent(1) != cols) {
            throw ShapeError("concat_rows column mismatch at " + shape_str(p.shape()));
        }
        rows += p.extent(0);
    }
    std::vector<double> vals;
    vals.reserve(static_cast<std::size_t>(rows * cols));
    std::vector<std::int64_t> counts;
    for (const auto& p : parts) {
        const auto& pv = p.vec();
        vals.insert(vals.end(), pv.begin(), pv.end());
        counts.push_back(p.extent(0));
    }
    std::vector<const Tensor*> ins;
    for (const auto& p : parts) ins.push_back(&p);
    int node = record_op_vec({rows, cols}, ins, [cols, counts](BackwardCtx& ctx) {
        std::int64_t row0 = 0;
        for (std::size_t k = 0; k < counts.size(); ++k) {
            if (ctx.needs(static_cast<int>(k))) {
                auto& g = ctx.grad(static_cast<int>(k));
                for (std::int64_t i = 0; i < counts[k] * cols; ++i)
                    g[static_cast<std::size_t>(i)] +=
                        ctx.out_grad[static_cast<std::size_t>(row0 * cols + i)];
            }
            row0 += counts[k];
        }
    });
    return wrap_result({rows, cols}, std::move(vals), node);
}

Tensor concat_vec(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_vec of zero tensors");
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 1) throw ShapeError("concat_vec requires rank-1 parts, got " + shape_str(p.shape()));
        total += p.extent(0);
    }
    std::vector<double> vals;
    vals.reserve(static_cast<std::size_t>(total));
    std::vector<std::int64_t> counts;
    for (const auto& p : parts) {
        const auto& pv = p.vec();
        vals.insert(vals.end(), pv.begin(), pv.end());
        counts.push_back(p.extent(0));
    }
    std::vector<const Tensor*> ins;
    for (const auto& p : parts) ins.push_back(&p);
    int node = record_op_vec({total}, ins, [counts](BackwardCtx& ctx) {
        std::int64_t off = 0;
        for (std::size_t k = 0; k < counts.size(); ++k) {
            if (ctx.needs(static_cast<int>(k))) {
                auto& g = ctx.grad(static_cast<int>(k));
                for (std::int64_t i = 0; i < counts[k]; ++i)
                    g[static_cast<std::size_t>(i)] += ctx.out_grad[static_cast<std::size_t>(off + i)];
            }
            off += counts[k];
        }
    });
    return wrap_result({total}, std::move(vals), node);
}

Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count) {
    if (a.rank() != 2) throw ShapeError("slice_rows requires 2D, got " + shape_str(a.shape()));
    const std::int64_t n = a.extent(0), d = a.extent(1);
    if (start < 0 || count < 0 || start + count > n) {
        throw ContractError("slice_rows range out of bounds");
    }
    const auto& av = a.vec();
    std::vector<double> vals(av.begin() + static_cast<std::ptrdiff_t>(start * d),
                             av.begin() + static_cast<std::ptrdiff_t>((start + count) * d));
    int node = record_op({count, d}, {&a}, [start, d](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
            g[static_cast<std::size_t>(start * d) + i] += ctx.out_grad[i];
        }
    });
    return wrap_result({count, d}, std::move(vals), node);
}

Tensor tile_rows(const Tensor& v, std::int64_t n) {
    std::int64_t d = 0;
    if (v.rank() == 1) {
        d = v.extent(0);
    } else if (v.rank() == 2 && v.extent(0) == 1) {
        d = v.extent(1);
    } else {
        throw ShapeError("tile_rows requires [d] or [1,d], got " + shape_str(v.shape()));
    }
    std::vector<double> vals(static_cast<std::size_t>(n * d));
    const auto& vv = v.vec();
    for (std::int64_t r = 0; r < n; ++r)
        std::copy_n(vv.data(), d, &vals[static_cast<std::size_t>(r * d)]);
    int node = record_op({n, d}, {&v}, [n, d](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c)
                g[static_cast<std::size_t>(c)] += ctx.out_grad[static_cast<std::size_t>(r * d + c)];
    });
    return wrap_result({n, d}, std::move(vals), node);
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices) {
    if (table.rank() != 2) throw ShapeError("gather_rows requires a 2D table, got " + shape_str(table.shape()));
    const std::int64_t v = table.extent(0), d = table.extent(1);
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    std::vector<double> vals(static_cast<std::size_t>(n * d));
    const auto& tv = table.vec();
    for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t i = indices[static_cast<std::size_t>(r)];
        if (i < 0 || i >= v) throw ContractError("gather_rows index out of range");
        std::copy_n(&tv[static_cast<std::size_t>(i * d)], d, &vals[static_cast<std::size_t>(r * d)]);
    }
    auto idx = indices;
    int node = record_op({n, d}, {&table}, [idx, d](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::int64_t c = 0; c < d; ++c)
                g[static_cast<std::size_t>(idx[r] * d + c)] +=
                    ctx.out_grad[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
    });
    return wrap_result({n, d}, std::move(vals), node);
}

Tensor index_element(const Tensor& v, std::int64_t i) {
    if (v.rank() != 1) throw ShapeError("index_element requires a rank-1 tensor, got " + shape_str(v.shape()));
    if (i < 0 || i >= v.extent(0)) throw ContractError("index_element out of range");
    std::vector<double> vals{v.vec()[static_cast<std::size_t>(i)]};
    int node = record_op({1}, {&v}, [i](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        ctx.grad(0)[static_cast<std::size_t>(i)] += ctx.out_grad[0];
    });
    return wrap_result({1}, std::move(vals), node);
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.vec()) s += x;
    int node = record_op({1}, {&a}, [](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (auto& x : g) x += ctx.out_grad[0];
    });
    return wrap_result({1}, {s}, node);
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_over_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("sum_over_rows requires 2D, got " + shape_str(a.shape()));
    const std::int64_t n = a.extent(0), d = a.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(d), 0.0);
    const auto& av = a.vec();
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < d; ++c)
            vals[static_cast<std::size_t>(c)] += av[static_cast<std::size_t>(r * d + c)];
    int node = record_op({d}, {&a}, [n, d](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c)
                g[static_cast<std::size_t>(r * d + c)] += ctx.out_grad[static_cast<std::size_t>(c)];
    });
    return wrap_result({d}, std::move(vals), node);
}

Tensor mean_over_rows(const Tensor& a) {
    return scale(sum_over_rows(a), 1.0 / static_cast<double>(a.extent(0)));
}

Tensor sum_over_cols(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("sum_over_cols requires 2D, got " + shape_str(a.shape()));
    const std::int64_t n = a.extent(0), d = a.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(n), 0.0);
    const auto& av = a.vec();
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < d; ++c)
            vals[static_cast<std::size_t>(r)] += av[static_cast<std::size_t>(r * d + c)];
    int node = record_op({n}, {&a}, [n, d](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c)
                g[static_cast<std::size_t>(r * d + c)] += ctx.out_grad[static_cast<std::size_t>(r)];
    });
    return wrap_result({n}, std::move(vals), node);
}

// ---------------------------------------------------------------- nonlinear blocks

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("softmax_rows requires 2D, got " + shape_str(a.shape()));
    const std::int64_t m = a.extent(0), n = a.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(m * n));
    const auto& av = a.vec();
    for (std::int64_t r = 0; r < m; ++r) {
        const double* row = &av[static_cast<std::size_t>(r * n)];
        double mx = row[0];
        for (std::int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
        double s = 0.0;
        double* orow = &vals[static_cast<std::size_t>(r * n)];
        for (std::int64_t c = 0; c < n; ++c) {
            orow[c] = std::exp(row[c] - mx);
            s += orow[c];
        }
        for (std::int64_t c = 0; c < n; ++c) orow[c] /= s;
    }
    auto yhold = std::make_shared<std::vector<double>>(vals);
    int node = record_op({m, n}, {&a}, [yhold, m, n](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        const auto& y = *yhold;
        for (std::int64_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < n; ++c)
                dot += ctx.out_grad[static_cast<std::size_t>(r * n + c)] *
                       y[static_cast<std::size_t>(r * n + c)];
            for (std::int64_t c = 0; c < n; ++c)
                g[static_cast<std::size_t>(r * n + c)] +=
                    y[static_cast<std::size_t>(r * n + c)] *
                    (ctx.out_grad[static_cast<std::size_t>(r * n + c)] - dot);
        }
    });
    return wrap_result({m, n}, std::move(vals), node);
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() != 2) throw ShapeError("layer_norm_rows requires 2D, got " + shape_str(x.shape()));
    const std::int64_t n = x.extent(0), d = x.extent(1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm_rows scale/offset must have " + std::to_string(d) + " entries");
    }
    std::vector<double> vals(static_cast<std::size_t>(n * d));
    std::vector<double> xhat(static_cast<std::size_t>(n * d));
    std::vector<double> invstd(static_cast<std::size_t>(n));
    const auto& xv = x.vec();
    const auto& gv = gamma.vec();
    const auto& bv = beta.vec();
    for (std::int64_t r = 0; r < n; ++r) {
        const double* row = &xv[static_cast<std::size_t>(r * d)];
        double mu = 0.0;
        for (std::int64_t c = 0; c < d; ++c) mu += row[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(r)] = is;
        for (std::int64_t c = 0; c < d; ++c) {
            const double xh = (row[c] - mu) * is;
            xhat[static_cast<std::size_t>(r * d + c)] = xh;
            vals[static_cast<std::size_t>(r * d + c)] = xh * gv[static_cast<std::size_t>(c)] +
                                                        bv[static_cast<std::size_t>(c)];
        }
    }
    auto xh_hold = std::make_shared<std::vector<double>>(std::move(xhat));
    auto is_hold = std::make_shared<std::vector<double>>(std::move(invstd));
    auto g_hold = std::make_shared<Tensor>(gamma);
    int node = record_op({n, d}, {&x, &gamma, &beta}, [xh_hold, is_hold, g_hold, n, d](BackwardCtx& ctx) {
        const auto& xh = *xh_hold;
        const auto& is = *is_hold;
        const auto& gv2 = g_hold->vec();
        for (std::int64_t r = 0; r < n; ++r) {
            const std::size_t base = static_cast<std::size_t>(r * d);
            if (ctx.needs(0)) {
                double mean_gh = 0.0, mean_ghx = 0.0;
                for (std::int64_t c = 0; c < d; ++c) {
                    const double gh = ctx.out_grad[base + static_cast<std::size_t>(c)] *
                                      gv2[static_cast<std::size_t>(c)];
                    mean_gh += gh;
                    mean_ghx += gh * xh[base + static_cast<std::size_t>(c)];
                }
                mean_gh /= static_cast<double>(d);
                mean_ghx /= static_cast<double>(d);
                auto& gx = ctx.grad(0);
                for (std::int64_t c = 0; c < d; ++c) {
                    const double gh = ctx.out_grad[base + static_cast<std::size_t>(c)] *
                                      gv2[static_cast<std::size_t>(c)];
                    gx[base + static_cast<std::size_t>(c)] +=
                        (gh - mean_gh - xh[base + static_cast<std::size_t>(c)] * mean_ghx) *
                        is[static_cast<std::size_t>(r)];
                }
            }
            if (ctx.needs(1)) {
                auto& gg = ctx.grad(1);
                for (std::int64_t c = 0; c < d; ++c)
                    gg[static_cast<std::size_t>(c)] += ctx.out_grad[base + static_cast<std::size_t>(c)] *
                                                       xh[base + static_cast<std::size_t>(c)];
            }
            if (ctx.needs(2)) {
                auto& gb = ctx.grad(2);
                for (std::int64_t c = 0; c < d; ++c)
                    gb[static_cast<std::size_t>(c)] += ctx.out_grad[base + static_cast<std::size_t>(c)];
            }
        }
    });
    return wrap_result({n, d}, std::move(vals), node);
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape()) {
        throw ShapeError("bce_with_logits shape mismatch: " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
    }
    const auto& zv = logits.vec();
    const auto& yv = targets.vec();
    std::vector<double> vals(zv.size());
    for (std::size_t i = 0; i < zv.size(); ++i) {
        const double z = zv[i];
        vals[i] = std::max(z, 0.0) - z * yv[i] + std::log1p(std::exp(-std::abs(z)));
    }
    auto zhold = std::make_shared<Tensor>(logits);
    auto yhold = std::make_shared<Tensor>(targets);
    int node = record_op(logits.shape(), {&logits, &targets}, [zhold, yhold](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        const auto& z = zhold->vec();
        const auto& y = yhold->vec();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += ctx.out_grad[i] * (sigmoid_scalar(z[i]) - y[i]);
    });
    return wrap_result(logits.shape(), std::move(vals), node);
}

// ---------------------------------------------------------------- geometry

Tensor pairwise_diff(const Tensor& xi, const Tensor& xj) {
    if (xi.rank() != 2 || xi.extent(1) != 3 || xj.rank() != 2 || xj.extent(1) != 3) {
        throw ShapeError("pairwise_diff requires [n,3] and [m,3], got " + shape_str(xi.shape()) +
                         " and " + shape_str(xj.shape()));
    }
    const std::int64_t n = xi.extent(0), m = xj.extent(0);
    std::vector<double> vals(static_cast<std::size_t>(n * m * 3));
    const auto& a = xi.vec();
    const auto& b = xj.vec();
    for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t q = 0; q < m; ++q)
            for (std::int64_t d = 0; d < 3; ++d)
                vals[static_cast<std::size_t>((p * m + q) * 3 + d)] =
                    a[static_cast<std::size_t>(p * 3 + d)] - b[static_cast<std::size_t>(q * 3 + d)];
    int node = record_op({n, m, 3}, {&xi, &xj}, [n, m](BackwardCtx& ctx) {
        if (ctx.needs(0)) {
            auto& g = ctx.grad(0);
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t q = 0; q < m; ++q)
                    for (std::int64_t d = 0; d < 3; ++d)
                        g[static_cast<std::size_t>(p * 3 + d)] +=
                            ctx.out_grad[static_cast<std::size_t>((p * m + q) * 3 + d)];
        }
        if (ctx.needs(1)) {
            auto& g = ctx.grad(1);
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t q = 0; q < m; ++q)
                    for (std::int64_t d = 0; d < 3; ++d)
                        g[static_cast<std::size_t>(q * 3 + d)] -=
                            ctx.out_grad[static_cast<std::size_t>((p * m + q) * 3 + d)];
        }
    });
    return wrap_result({n, m, 3}, std::move(vals), node);
}

Tensor norm3(const Tensor& t) {
    if (t.rank() != 3 || t.extent(2) != 3) {
        throw ShapeError("norm3 requires [n,m,3], got " + shape_str(t.shape()));
    }
    const std::int64_t n = t.extent(0), m = t.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(n * m));
    const auto& tv = t.vec();
    for (std::int64_t i = 0; i < n * m; ++i) {
        const double x = tv[static_cast<std::size_t>(i * 3)];
        const double y = tv[static_cast<std::size_t>(i * 3 + 1)];
        const double z = tv[static_cast<std::size_t>(i * 3 + 2)];
        vals[static_cast<std::size_t>(i)] = std::sqrt(x * x + y * y + z * z);
    }
    auto thold = std::make_shared<Tensor>(t);
    auto nhold = std::make_shared<std::vector<double>>(vals);
    int node = record_op({n, m}, {&t}, [thold, nhold, n, m](BackwardCtx& ctx) {
        if (!ctx.needs(0)) return;
        auto& g = ctx.grad(0);
        const auto& tv2 = thold->vec();
        const auto& nv = *nhold;
        for (std::int64_t i = 0; i < n * m; ++i) {
            const double nrm = nv[static_cast<std::size_t>(i)];
            if (nrm <= 0.0) continue;  // zero vector: subgradient 0
            const double go = ctx.out_grad[static_cast<std::size_t>(i)] / nrm;
            for (std::int64_t d = 0; d < 3; ++d)
                g[static_cast<std::size_t>(i * 3 + d)] += go * tv2[static_cast<std::size_t>(i * 3 + d)];
        }
    });
    return wrap_result({n, m}, std::move(vals), node);
}

Tensor contract_rows(const Tensor& w, const Tensor& t) {
    if (w.rank() != 2 || t.rank() != 3 || t.extent(2) != 3 || w.extent(0) != t.extent(0) ||
        w.extent(1) != t.extent(1)) {
        throw ShapeError("contract_rows requires [n,m] and [n,m,3], got " + shape_str(w.shape()) +
                         " and " + shape_str(t.shape()));
    }
    const std::int64_t n = w.extent(0), m = w.extent(1);
    std::vector<double> vals(static_cast<std::size_t>(n * 3), 0.0);
    const auto& wv = w.vec();
    const auto& tv = t.vec();
    for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t q = 0; q < m; ++q) {
            const double c = wv[static_cast<std::size_t>(p * m + q)];
            for (std::int64_t d = 0; d < 3; ++d)
                vals[static_cast<std::size_t>(p * 3 + d)] +=
                    c * tv[static_cast<std::size_t>((p * m + q) * 3 + d)];
        }
    auto whold = std::make_shared<Tensor>(w);
    auto thold = std::make_shared<Tensor>(t);
    int node = record_op({n, 3}, {&w, &t}, [whold, thold, n, m](BackwardCtx& ctx) {
        const auto& wv2 = whold->vec();
        const auto& tv2 = thold->vec();
        if (ctx.needs(0)) {
            auto& g = ctx.grad(0);
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t q = 0; q < m; ++q) {
                    double acc = 0.0;
                    for (std::int64_t d = 0; d < 3; ++d)
                        acc += ctx.out_grad[static_cast<std::size_t>(p * 3 + d)] *
                               tv2[static_cast<std::size_t>((p * m + q) * 3 + d)];
                    g[static_cast<std::size_t>(p * m + q)] += acc;
                }
        }
        if (ctx.needs(1)) {
            auto& g = ctx.grad(1);
            for (std::int64_t p = 0; p < n; ++p)
                for (std::int64_t q = 0; q < m; ++q) {
                    const double c = wv2[static_cast<std::size_t>(p * m + q)];
                    for (std::int64_t d = 0; d < 3; ++d)
                        g[static_cast<std::size_t>((p * m + q) * 3 + d)] +=
                            c * ctx.out_grad[static_cast<std::size_t>(p * 3 + d)];
                }
        }
    });
    return wrap_result({n, 3}, std::move(vals), node);
}

Tensor scale_rows(const Tensor& t, const Tensor& s) {
    if (t.rank() != 2) throw ShapeError("scale_rows requires a 2D tensor, got " + shape_str(t.shape()));
    const std::int64_t n = t.extent(0), d = t.extent(1);
    if (s.numel() != n) {
        throw ShapeError("scale_rows needs one factor per row: " + shape_str(t.shape()) + " vs " +
                         shape_str(s.shape()));
    }
    std::vector<double> vals(static_cast<std::size_t>(n * d));
    const auto& tv = t.vec();
    const auto& sv = s.vec();
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < d; ++c)
            vals[static_cast<std::size_t>(r * d + c)] =
                tv[static_cast<std::size_t>(r * d + c)] * sv[static_cast<std::size_t>(r)];
    auto thold = std::make_shared<Tensor>(t);
    auto shold = std::make_shared<Tensor>(s);
    int node = record_op({n, d}, {&t, &s}, [thold, shold, n, d](BackwardCtx& ctx) {
        const auto& tv2 = thold->vec();
        const auto& sv2 = shold->vec();
        if (ctx.needs(0)) {
            auto& g = ctx.grad(0);
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < d; ++c)
                    g[static_cast<std::size_t>(r * d + c)] +=
                        ctx.out_grad[static_cast<std::size_t>(r * d + c)] *
                        sv2[static_cast<std::size_t>(r)];
        }
        if (ctx.needs(1)) {
            auto& g = ctx.grad(1);
            for (std::int64_t r = 0; r < n; ++r) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < d; ++c)
                    acc += ctx.out_grad[static_cast<std::size_t>(r * d + c)] *
                           tv2[static_cast<std::size_t>(r * d + c)];
                g[static_cast<std::size_t>(r)] += acc;
            }
        }
    });
    return wrap_result({n, d}, std::move(vals), node);
}

// ---------------------------------------------------------------- fd check

FdReport finite_difference_check(const std::function<double()>& f,
                                 const std::vector<ParamRef>& params,
                                 const std::vector<Tensor>& analytic_grads, double step,
                                 std::int64_t max_coords_per_tensor, Rng* rng) {
    if (step <= 0.0) throw ContractError("finite_difference_check requires step > 0");
    if (params.size() != analytic_grads.size()) {
        throw ContractError("finite_difference_check: one analytic gradient per parameter required");
    }
    FdReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& param = *params[pi].tensor;
        const Tensor& grad = analytic_grads[pi];
        const std::int64_t n = param.numel();
        std::vector<std::int64_t> coords;
        if (max_coords_per_tensor > 0 && n > max_coords_per_tensor) {
            coords.reserve(static_cast<std::size_t>(max_coords_per_tensor));
            if (rng) {
                std::vector<std::int64_t> all(static_cast<std::size_t>(n));
                std::iota(all.begin(), all.end(), 0);
                std::shuffle(all.begin(), all.end(), *rng);
                coords.assign(all.begin(), all.begin() + max_coords_per_tensor);
                std::sort(coords.begin(), coords.end());
            } else {
                for (std::int64_t i = 0; i < max_coords_per_tensor; ++i) coords.push_back(i);
            }
        } else {
            coords.resize(static_cast<std::size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        }
        FdEntry entry;
        entry.param = params[pi].name;
        entry.coords_checked = static_cast<std::int64_t>(coords.size());
        const Tensor saved = param;
        for (std::int64_t c : coords) {
            std::vector<double> plus(saved.vec());
            plus[static_cast<std::size_t>(c)] += step;
            param = Tensor(saved.shape(), std::move(plus));
            const double fp = f();
            std::vector<double> minus(saved.vec());
            minus[static_cast<std::size_t>(c)] -= step;
            param = Tensor(saved.shape(), std::move(minus));
            const double fm = f();
            param = saved;
            const double central = (fp - fm) / (2.0 * step);
            const double analytic = grad.vec()[static_cast<std::size_t>(c)];
            const double abs_dev = std::abs(analytic - central);
            const double rel_dev = abs_dev / std::max(1.0, std::abs(central));
            entry.max_abs_dev = std::max(entry.max_abs_dev, abs_dev);
            entry.max_rel_dev = std::max(entry.max_rel_dev, rel_dev);
        }
        if (entry.max_rel_dev >= report.max_rel_dev) {
            report.max_rel_dev = entry.max_rel_dev;
            report.worst_param = entry.param;
        }
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace getmol
