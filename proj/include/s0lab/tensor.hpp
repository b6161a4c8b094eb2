#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation,
// a counter-based deterministic RNG, and the Adam update rule. Everything in
// the library that computes or differentiates numbers goes through this file.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace s0lab {

// ----------------------------- errors -----------------------------

struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// ----------------------------- shapes -----------------------------

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// ----------------------------- tensor -----------------------------

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Accumulates this node's output gradient into the gradient buffers of its
// parents. parent_grads[i] is null when parent i does not require grad.
using BackwardFn =
    std::function<void(const std::vector<double>& grad_out,
                       const std::vector<std::vector<double>*>& parent_grads)>;

struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad{false};
    bool leaf{false};
    std::vector<NodePtr> parents;
    BackwardFn backward;
};

}  // namespace detail

// Value handle onto a node of the implicit op graph. Copying a Tensor copies
// the handle, not the storage; tensors are immutable once created except via
// the explicit leaf-update path used by optimizers.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double fill);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor eye(int n);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t size() const;
    int dim(int i) const;
    int ndim() const { return static_cast<int>(shape().size()); }

    bool requires_grad() const;
    bool is_leaf() const;

    std::span<const double> data() const;
    double item() const;             // scalar tensors only
    double at(std::int64_t i) const; // flat index

    // Detached value copy with no graph history.
    Tensor detach() const;

    // In-place value overwrite for leaf/constant tensors. Must not be called
    // while an op graph referencing this tensor is still alive.
    void set_data(std::span<const double> values);

    detail::NodePtr node() const { return node_; }

  private:
    friend class GradTape;
    friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                                 detail::BackwardFn);
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    detail::NodePtr node_;
};

bool same_shape(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

// ----------------------------- ops -----------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Broadcast multiply by a one-element tensor (differentiable in both inputs).
Tensor scale_by(const Tensor& a, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)x(k,n) -> (m,n)
Tensor matvec(const Tensor& m, const Tensor& v);     // (r,c)x(c) -> (r)
Tensor outer(const Tensor& u, const Tensor& v);      // (m),(n) -> (m,n)
Tensor transpose(const Tensor& m);

Tensor sum(const Tensor& a);                          // scalar
Tensor sum_squares(const Tensor& a);                  // scalar
Tensor sigmoid(const Tensor& a);

// Row-wise RMS normalization with learned gain: y[t] = x[t]*gain/rms(x[t]).
Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps = 1e-6);
// Row-wise L2 normalization to unit norm (eps guards the zero row).
Tensor unit_rows(const Tensor& x, double eps = 1e-12);

// Row-wise softmax over all columns.
Tensor softmax_rows(const Tensor& x);
// Row i is a softmax over columns [0, i]; later columns get exactly 0.
Tensor causal_softmax_rows(const Tensor& x);

// Numerically stable negative log-likelihood of `target` under softmax(logits).
Tensor log_softmax_cross_entropy(const Tensor& logits, int target);

// Row gather: out[i] = table[ids[i]]; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);

Tensor row(const Tensor& m, int r);                         // (rows,cols) -> (cols)
Tensor slice_cols(const Tensor& m, int c0, int c1);         // half-open columns
Tensor stack_rows(const std::vector<Tensor>& rows);         // n vectors -> (n,cols)
Tensor concat_cols(const std::vector<Tensor>& mats);
Tensor add_row_broadcast(const Tensor& m, const Tensor& b); // m[i] + b per row
Tensor reshape(const Tensor& a, Shape shape);               // same numel
Tensor elem(const Tensor& a, std::int64_t flat_index);      // one-element view

// Softmax of logits/temperature without graph history (sampling helper).
std::vector<double> softmax_values(std::span<const double> logits, double temperature);

// ----------------------------- grad tape -----------------------------

class GradMap {
  public:
    // Gradient of a registered leaf; zero tensor when the leaf was unused.
    const Tensor& grad(const Tensor& leaf) const;
    bool has(const Tensor& leaf) const;

  private:
    friend class GradTape;
    std::unordered_map<const detail::Node*, Tensor> grads_;
};

// Registry of learnable leaves plus the reverse pass over the implicit graph.
// Frozen weights are ordinary constant tensors and never receive gradient
// storage.
class GradTape {
  public:
    Tensor leaf(Shape shape, std::vector<double> init);
    Tensor leaf_zeros(Shape shape);
    Tensor leaf_like(const Tensor& values);

    const std::vector<Tensor>& leaves() const { return leaves_; }

    // loss must be scalar; returns a gradient for every registered leaf.
    GradMap backward(const Tensor& loss) const;

  private:
    std::vector<Tensor> leaves_;
};

// ----------------------------- rng -----------------------------

// Deterministic counter-based generator. The stream is
//   out_i = finalize(seed + (i+1) * 0x9E3779B97F4A7C15)
// where finalize is the 64-bit xorshift-multiply mixer
//   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//   z ^= z >> 27; z *= 0x94D049BB133111EB;
//   z ^= z >> 31;
// Identical seeds give identical streams on every platform; the counter makes
// the state trivially serializable and the stream splittable.
class Prng {
  public:
    explicit Prng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64();
    double uniform();                                  // [0,1), 53-bit
    double normal(double mean = 0.0, double stddev = 1.0);
    int uniform_int(int n);                            // [0,n), unbiased
    // Independent child stream; deterministic function of (seed, stream id).
    Prng split(std::uint64_t stream) const;

    std::vector<double> normal_vec(std::int64_t n, double mean = 0.0, double stddev = 1.0);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            const int j = uniform_int(static_cast<int>(i + 1));
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

    std::uint64_t seed() const { return seed_; }

  private:
    std::uint64_t seed_{0};
    std::uint64_t counter_{0};
    bool have_spare_{false};
    double spare_{0.0};
};

// ----------------------------- adam -----------------------------

struct AdamHyper {
    double lr{1e-3};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
};

struct AdamResult {
    Tensor param;
    Tensor moment1;
    Tensor moment2;
};

// One bias-corrected Adam update; step_index starts at 1.
AdamResult adam_step(const Tensor& param, const Tensor& grad, const Tensor& moment1,
                     const Tensor& moment2, int step_index, const AdamHyper& hp);

// In-place optimizer over a fixed leaf set (same math as adam_step).
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Tensor> params, AdamHyper hp);
    void step(const GradMap& grads);
    int step_count() const { return step_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamHyper hp_;
    int step_{0};
};

}  // namespace s0lab
