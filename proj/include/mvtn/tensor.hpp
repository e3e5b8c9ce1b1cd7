#ifndef MVTN_TENSOR_HPP
#define MVTN_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvtn/errors.hpp"

namespace mvtn {

// Dense row-major tensor of 64-bit floats. Value semantics throughout;
// copies are real copies. `grad` stays empty until populated by a Tape.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng);
    static Tensor normal(std::vector<int> shape, double mean, double sigma, std::mt19937_64& rng);

    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t numel() const;
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(int i, int j);
    double at(int i, int j) const;
    double& at(int i, int j, int k);
    double at(int i, int j, int k) const;
};

std::string shape_str(const std::vector<int>& shape);
bool all_finite(const Tensor& t);
std::int64_t numel_of(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Forward kernels. Pure functions, no gradient recording; the Tape ops below
// reuse them and add the backward rules.
// ---------------------------------------------------------------------------

// (m x k)(k x n) -> (m x n); also accepts a rank-3 lhs (B x m x k) which is
// treated as a stack of matrices against the same rhs.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched (B x m x k)(B x k x n) -> (B x m x n).
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// x[... x d] + bias[d]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[B x T x d] + rows[T x d], broadcast over the batch axis
Tensor add_rows(const Tensor& x, const Tensor& rows);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// x[... x d_in] * W[d_in x d_out] + b[d_out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// mean over batch of -log softmax(logits)[target]
double cross_entropy(const Tensor& logits, const std::vector<int>& targets);

// ---------------------------------------------------------------------------
// Reverse-mode tape.
// ---------------------------------------------------------------------------

// Handle to a node on a Tape. Only meaningful for the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Records a forward pass and plays the adjoints back in reverse. One tape per
// forward pass, confined to one thread, discarded after backward().
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf holding a copy of `t`. Gradients for leaves registered
    // from a requires_grad tensor are available after backward().
    Var input(const Tensor& t);
    // Leaf that never needs a gradient (positional tables, input features).
    Var constant(const Tensor& t);

    const Tensor& value(Var v) const;

    Var matmul(Var a, Var b);
    Var bmm(Var a, Var b);
    Var transpose_last2(Var x);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var x, double c);
    Var add_bias(Var x, Var bias);
    Var add_rows(Var x, Var rows);
    // Adds a constant (untracked) tensor elementwise; rows variant broadcasts
    // a [T x d] table over the batch axis of a [B x T x d] input.
    Var add_const_rows(Var x, const Tensor& rows);
    Var relu(Var x);
    Var softmax(Var x, int axis);
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
    Var linear(Var x, Var w, Var b);
    Var cross_entropy(Var logits, const std::vector<int>& targets);
    Var sum(Var x);
    Var reshape(Var x, std::vector<int> shape);
    // [B x L x (h*dh)] -> [B*h x L x dh] and back.
    Var split_heads(Var x, int heads);
    Var merge_heads(Var x, int heads);
    // Prepends a learned token row: token[d], x[B x T x d] -> [B x (T+1) x d].
    Var concat_token(Var token, Var x);
    // [B x L x d] -> [B x d]
    Var select_token(Var x, int pos);
    Var mean_tokens(Var x);
    // Inverted dropout; identity when rate == 0. Training-only by convention:
    // evaluation paths simply do not call it.
    Var dropout(Var x, double rate, std::mt19937_64& rng);

    // Accumulates adjoints for every node, seeding d(loss)/d(loss) = 1.
    // loss must be scalar; a tape can only run backward once.
    void backward(Var loss);
    // Adjoint of a node; valid after backward().
    const std::vector<double>& grad(Var v) const;
    // Copies the adjoint into leaf.grad (the leaf the Var was made from).
    void write_grad(Var v, Tensor& leaf) const;

    // Multiply-accumulate count of every matmul/bmm recorded so far.
    std::int64_t mac_count() const { return macs_; }

    int size() const { return static_cast<int>(nodes_.size()); }

  private:
    struct Node {
        Tensor value;
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Var emplace(Tensor value, std::function<void(Tape&)> back = {});
    std::vector<double>& adj(Var v);
    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> adjoints_;
    std::int64_t macs_ = 0;
    bool ran_backward_ = false;
};

// Max over coordinates of |analytic - central difference| scaled by
// max(1, |analytic|, |numeric|). `f` rebuilds the computation on the tape it
// is handed; it must be deterministic.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

}  // namespace mvtn

#endif  // MVTN_TENSOR_HPP
