// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vdiag {

using Shape = std::vector<std::size_t>;

struct TensorImpl;

/// Dense row-major float64 array with reverse-mode differentiation.
///
/// `Tensor` is a shared handle: copies alias the same storage, `clone()`
/// makes a deep copy. Operations record a backward closure on their result
/// whenever gradient mode is on and any operand requires a gradient.
/// A tensor of shape [..., c] is viewed as a rows x cols matrix with
/// cols = c and rows = product of the leading dimensions.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;

  std::span<double> data();
  std::span<const double> data() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;
  /// Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  /// Gradient buffer (allocated on first access).
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar; gradients accumulate into every
  /// reachable tensor that requires one.
  void backward();

  Tensor clone() const;
  /// Same storage, no graph history.
  Tensor detach() const;

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const noexcept { return impl_; }

  std::string shape_string() const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>, const char*,
                               std::function<void(TensorImpl&)>);
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Result tensor of an operation; attaches `backward` when gradients flow.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      const char* op, std::function<void(TensorImpl&)> backward);

bool grad_enabled() noexcept;

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a [c] (or [1 x c]) row to every row of `a`.
Tensor add_row(const Tensor& a, const Tensor& row);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& a);

// ---- structure ------------------------------------------------------------

/// Concatenation along the feature (last) axis.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
/// Embedding lookup: row i of the result is row ids[i] of `table`. The
/// backward pass scatter-adds, so repeated ids accumulate.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// ---- reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- normalizations and alignments ----------------------------------------

/// Row softmax. Columns >= valid_cols are padding and receive exactly 0; with
/// valid_cols == 0 the whole mass goes to column 0.
Tensor softmax_rows(const Tensor& x, std::size_t valid_cols = SIZE_MAX);

/// Row-wise 1.5-entmax via the exact sort-based threshold; same padding rule.
Tensor entmax15_rows(const Tensor& x, std::size_t valid_cols = SIZE_MAX);

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kLayerNormEps = 1e-5;

/// y = gain * x / sqrt(mean(x^2) + eps), per row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = kRmsNormEps);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Rotary encoding: coordinate pairs (2i, 2i+1) of row r are rotated by
/// positions[r] * base^(-2i/cols).
Tensor rope(const Tensor& x, std::span<const int> positions, double base);

// ---- losses ---------------------------------------------------------------

/// Sum of -log softmax(logits[p])[targets[p]] over p in `positions`, divided
/// by `normalizer` (defaults to the number of positions). `targets` is
/// indexed by row. An empty position set yields 0 with zero gradient.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::size_t> positions, double normalizer = 0.0);

/// Mean over all entries of softplus(z) - y*z, the stable form of binary
/// cross entropy with logits.
Tensor bce_multilabel(const Tensor& logits, const Tensor& labels);

// ---- verification ---------------------------------------------------------

/// Central-difference check of a scalar function of `inputs`. Returns the
/// largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all
/// input coordinates.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  double h = 1e-5);

}  // namespace vdiag
