#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace qada {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the backward pass touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a shared handle. Every op returns a fresh node; values are
/// never mutated after creation except through mutable_data(), which exists
/// for parameter updates and finite-difference probing.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  /// Gradient buffer; all zeros when backward never reached this tensor.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a single-element tensor. Gradients accumulate into
  /// every reachable tensor that requires grad.
  void backward() const;

  /// Same values, no history, no gradient.
  Tensor detach() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace ops {

// Elementwise; b's shape must equal a's shape or a trailing suffix of it
// (bias-style broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// a: [..., K], w: [K, N] -> [..., N]
Tensor matmul(const Tensor& a, const Tensor& w);
// a: [G, M, K]; b: [G, K, N] (or [G, N, K] when transpose_b) -> [G, M, N]
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);

/// Softmax over the last axis; entries with mask == 0 get exactly 0.
/// mask has a.numel() entries. Rows with no unmasked entry are an error.
Tensor softmax(const Tensor& a, std::span<const std::uint8_t> mask);
Tensor log_softmax(const Tensor& a, std::span<const std::uint8_t> mask);

/// Layer normalisation over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalisation of x: [N, d] over rows with row_mask != 0. In
/// training mode batch statistics are used and the running statistics are
/// updated (unless update_running is false); otherwise running statistics are
/// used. Masked-out rows are normalised with the same statistics but do not
/// contribute to them.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::span<const std::uint8_t> row_mask, BatchNormStats& stats, bool training,
                  bool update_running = true);

/// Rows of table [V, d] indexed by ids. Rows listed in override_rows take
/// the matching constant from override_values ([k * d]) instead; no gradient
/// reaches the table through those rows.
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids,
                 std::span<const std::size_t> override_rows = {},
                 std::span<const double> override_values = {});

// x: [N, d] -> [k, d]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Flat elements -> [k]
Tensor pick(const Tensor& x, std::span<const std::size_t> flat_indices);
// Each row i of x: [N, d] multiplied by factors[i] (constant).
Tensor scale_rows(const Tensor& x, std::span<const double> factors);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Pairwise squared Euclidean distances: a [n, d], b [m, d] -> [n, m].
Tensor sq_dist(const Tensor& a, const Tensor& b);

}  // namespace ops

/// Numerically stable softmax over the unmasked entries; masked entries are 0.
/// Throws std::invalid_argument when no entry is unmasked.
std::vector<double> masked_softmax(std::span<const double> logits, const std::vector<bool>& mask);

}  // namespace qada
