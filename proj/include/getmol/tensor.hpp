#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace getmol {

using Shape = std::vector<std::int64_t>;
using Rng = std::mt19937_64;

/// Thrown when operand shapes are incompatible. The message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation contract is violated (non-scalar loss, untracked
/// tensor handed to backward, mixed tapes, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class Tape;

/// Dense row-major f64 tensor. The value buffer is immutable after
/// construction; "mutation" means binding the variable to a new Tensor.
/// A tensor may carry a node id into the currently active Tape, which is
/// how reverse-mode gradients find it.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    /// Row-major 2D convenience constructor.
    static Tensor matrix(std::int64_t rows, std::int64_t cols, std::vector<double> values);
    static Tensor identity(std::int64_t n);
    /// Entries drawn i.i.d. from N(0, stddev^2).
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    /// Entries drawn i.i.d. from U(-bound, bound).
    static Tensor rand_uniform(Shape shape, Rng& rng, double bound);

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t extent(std::int64_t axis) const;
    std::int64_t numel() const;
    bool defined() const { return data_ != nullptr; }

    std::span<const double> data() const;
    const std::vector<double>& vec() const;
    /// Value of a 1-element tensor.
    double value() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    bool tracked() const { return node_ >= 0; }
    int node() const { return node_; }

private:
    friend class Tape;
    friend Tensor wrap_result(Shape, std::vector<double>, int);

    Shape shape_{};
    std::shared_ptr<const std::vector<double>> data_{};
    int node_ = -1;
};

/// Gradient map produced by Tape::backward. Lookup is by tape node id, so
/// any tensor tracked on the tape (in particular every watched parameter)
/// can be queried. Watched-but-unreached parameters yield zeros.
class Gradients {
public:
    Tensor at(const Tensor& t) const;
    bool reached(const Tensor& t) const;

private:
    friend class Tape;
    std::unordered_map<int, Tensor> by_node_;
};

namespace detail {
struct BackwardCtx;
}

/// Reverse-mode tape. Nodes are appended in execution order; backward walks
/// them exactly once in reverse, accumulating gradients additively.
///
/// One tape is active per thread at a time (RAII: the constructor activates,
/// the destructor restores the previous tape). A tape is single-owner and
/// must not be shared across threads; disjoint tapes on different threads
/// are independent.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// Registers t as a leaf the tape tracks. Subsequent ops on t record
    /// backward rules; gradients can be queried for it after backward.
    void watch(Tensor& t);

    /// Backpropagates from a scalar loss. May be called repeatedly; each
    /// call re-walks the same nodes and returns identical gradients.
    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return nodes_.size(); }

private:
    friend struct detail::BackwardCtx;
    friend Tensor wrap_result(Shape, std::vector<double>, int);
    friend int record_node(Shape, std::vector<int>, std::function<void(detail::BackwardCtx&)>);

    struct Node {
        Shape shape;
        std::vector<int> inputs;
        std::function<void(detail::BackwardCtx&)> back;  // empty for leaves
    };
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
};

namespace detail {
/// Handed to a node's backward rule: the incoming gradient plus accumulation
/// access to the gradients of the node's inputs.
struct BackwardCtx {
    const std::vector<double>& out_grad;
    const Tape::Node& node;
    std::vector<std::vector<double>>& grads;
    const Tape& tape;

    bool needs(int k) const { return node.inputs[static_cast<std::size_t>(k)] >= 0; }
    std::vector<double>& grad(int k);
};
}  // namespace detail

// ---- elementwise / broadcasting ----
// Binary ops broadcast by aligning shapes on the right and stretching
// extent-1 axes; the shorter shape is padded with leading 1s.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);
Tensor rsqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double c);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- structure ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_vec(std::span<const Tensor> parts);
/// Rows [start, start+count) of a 2D tensor.
Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count);
Tensor tile_rows(const Tensor& v, std::int64_t n);
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices);
Tensor index_element(const Tensor& v, std::int64_t i);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_over_rows(const Tensor& a);   // [n,d] -> [d]
Tensor mean_over_rows(const Tensor& a);  // [n,d] -> [d]
Tensor sum_over_cols(const Tensor& a);   // [n,d] -> [n]

// ---- nonlinear blocks ----
/// Row-wise softmax with per-row max subtraction. Each output row sums to 1.
Tensor softmax_rows(const Tensor& a);
/// Per-row layer normalization over the trailing feature axis:
/// y = (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Numerically stable binary cross entropy on logits; y is a constant
/// target of the same shape. Elementwise result.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---- geometry ----
/// out[p,q,:] = xi[p,:] - xj[q,:] for xi:[n,3], xj:[m,3] -> [n,m,3].
Tensor pairwise_diff(const Tensor& xi, const Tensor& xj);
/// Euclidean norm over the trailing extent-3 axis: [n,m,3] -> [n,m].
/// Gradient at an exactly-zero difference vector is 0.
Tensor norm3(const Tensor& t);
/// out[p,:] = sum_q w[p,q] * t[p,q,:] for w:[n,m], t:[n,m,3] -> [n,3].
Tensor contract_rows(const Tensor& w, const Tensor& t);
/// out[p,:] = t[p,:] * s[p] for t:[n,d], s:[n] or [n,1].
Tensor scale_rows(const Tensor& t, const Tensor& s);

// ---- parameter plumbing ----
struct ParamRef {
    std::string name;
    Tensor* tensor;
};

struct FdEntry {
    std::string param;
    double max_abs_dev = 0.0;
    double max_rel_dev = 0.0;
    std::int64_t coords_checked = 0;
};

struct FdReport {
    double max_rel_dev = 0.0;
    std::string worst_param;
    std::vector<FdEntry> per_param;
    bool pass(double tol) const { return max_rel_dev <= tol; }
};

/// Central-finite-difference check of analytic gradients.
/// f evaluates the scalar objective at the parameters' current values;
/// analytic_grads[i] is the analytic gradient for params[i]. Deviations are
/// |analytic - central| / max(1, |central|). When max_coords_per_tensor > 0,
/// at most that many coordinates per tensor are sampled (with rng if given,
/// otherwise the first coordinates).
FdReport finite_difference_check(const std::function<double()>& f,
                                 const std::vector<ParamRef>& params,
                                 const std::vector<Tensor>& analytic_grads, double step,
                                 std::int64_t max_coords_per_tensor = 0, Rng* rng = nullptr);

}  // namespace getmol
