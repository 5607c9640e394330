#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Tensors are cheap handles onto immutable storage. Operations record
// themselves on the thread's active Tape when any input requires a gradient;
// with no active tape they run as plain inference. Only 1-D and 2-D (row-major)
// shapes are used by the model.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ramp {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Accumulated gradient of a leaf; empty when none has been recorded.
  std::span<const double> grad() const;
  void zero_grad();

  /// Writable storage of a leaf tensor (optimizer updates, test perturbation).
  std::span<double> leaf_data();

  /// Identity of the underlying storage.
  const void* id() const noexcept { return node_.get(); }

  /// Internal access for operation implementations.
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Gradient snapshot returned by backward(): leaf identity -> gradient tensor.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const;
  Tensor operator[](const Tensor& leaf) const;
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const void*, Tensor> grads_;
};

/// Ordered record of differentiable operations for one forward pass.
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed; tapes nest.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return ops_.size(); }
  void record(std::shared_ptr<detail::Node> node);

  /// Replays the tape in reverse from a scalar loss. Gradients accumulate into
  /// every requires_grad leaf; the tape is cleared afterwards.
  Gradients backward(const Tensor& loss);

  static Tape* active() noexcept;

 private:
  std::vector<std::shared_ptr<detail::Node>> ops_;
  Tape* previous_ = nullptr;
};

/// backward() on the calling thread's active tape.
Gradients backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
/// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
/// Mean over rows of -log softmax(logits)[t, targets[t]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
Tensor sum(const Tensor& x);
/// Rows of `table` selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Multi-head attention where query row t sees key rows [0, prefix + t].
/// q is [T x d]; keys and values are [(prefix + T) x d].
Tensor causal_attention(const Tensor& q, const Tensor& keys,
                        const Tensor& values, std::size_t n_heads,
                        std::size_t prefix);

}  // namespace ramp
