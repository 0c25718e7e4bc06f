// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "vdiag/common.hpp"

namespace vdiag {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string describe(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
}

std::vector<double>* grad_of(const std::shared_ptr<TensorImpl>& p) {
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(product(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (values.size() != product(shape))
    throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                         describe(shape));
  impl_->data = std::move(values);
  impl_->shape = std::move(shape);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::cols() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : impl_->data.size() / c;
}

std::size_t Tensor::size() const { return impl_->data.size(); }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double& Tensor::at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item(): tensor has shape " + shape_string());
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size(); }

std::span<double> Tensor::grad() { return impl_->ensure_grad(); }
std::span<const double> Tensor::grad() const { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::backward() {
  if (size() != 1) throw DimensionError("backward(): root must be a scalar, got " + shape_string());
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
  }
}

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

std::string Tensor::shape_string() const { return describe(impl_->shape); }

Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      const char* op, std::function<void(TensorImpl&)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->op = op;
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      impl->requires_grad = true;
      for (auto& p : parents) impl->parents.push_back(p.shared());
      impl->backward = std::move(backward);
    }
  }
  return Tensor(std::move(impl));
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- linear algebra --------------------------------------------------------

namespace {

// out[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto pa = a.shared(), pb = b.shared();
  return make_op_result({m, n}, std::move(out), {a, b}, "matmul",
                        [pa, pb, m, k, n](TensorImpl& self) {
                          if (auto* ga = grad_of(pa)) gemm_nt(self.grad.data(), pb->data.data(), ga->data(), m, n, k);
                          if (auto* gb = grad_of(pb)) gemm_tn(pa->data.data(), self.grad.data(), gb->data(), m, k, n);
                        });
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  auto pa = a.shared();
  return make_op_result({n, m}, std::move(out), {a}, "transpose", [pa, m, n](TensorImpl& self) {
    if (auto* ga = grad_of(pa))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
  });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto pa = a.shared(), pb = b.shared();
  return make_op_result(a.shape(), std::move(out), {a, b}, "add", [pa, pb](TensorImpl& self) {
    for (const auto& p : {pa, pb})
      if (auto* g = grad_of(p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto pa = a.shared(), pb = b.shared();
  return make_op_result(a.shape(), std::move(out), {a, b}, "sub", [pa, pb](TensorImpl& self) {
    if (auto* g = grad_of(pa))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(pb))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto pa = a.shared(), pb = b.shared();
  return make_op_result(a.shape(), std::move(out), {a, b}, "mul", [pa, pb](TensorImpl& self) {
    if (auto* g = grad_of(pa))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pb->data[i];
    if (auto* g = grad_of(pb))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pa->data[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto pa = a.shared();
  return make_op_result(a.shape(), std::move(out), {a}, "scale", [pa, factor](TensorImpl& self) {
    if (auto* g = grad_of(pa))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * self.grad[i];
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.size() != a.cols())
    throw DimensionError("add_row: row " + row.shape_string() + " vs matrix " + a.shape_string());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  auto pa = a.shared(), pr = row.shared();
  return make_op_result(a.shape(), std::move(out), {a, row}, "add_row",
                        [pa, pr, m, n](TensorImpl& self) {
                          if (auto* g = grad_of(pa))
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                          if (auto* g = grad_of(pr))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
                        });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  auto pa = a.shared();
  return make_op_result(a.shape(), std::move(out), {a}, "gelu", [pa](TensorImpl& self) {
    if (auto* g = grad_of(pa)) {
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = pa->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

// ---- structure -------------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rows() != m)
      throw DimensionError("concat_cols: row mismatch " + parts[0].shape_string() + " vs " +
                           p.shape_string());
    offsets.push_back(n);
    n += p.cols();
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(src.data() + i * w, w, out.data() + i * n + offsets[k]);
  }
  std::vector<std::shared_ptr<TensorImpl>> ps;
  for (const auto& p : parts) ps.push_back(p.shared());
  return make_op_result({m, n}, std::move(out), parts, "concat_cols",
                        [ps, offsets, m, n](TensorImpl& self) {
                          for (std::size_t k = 0; k < ps.size(); ++k) {
                            auto* g = grad_of(ps[k]);
                            if (!g) continue;
                            const std::size_t w = ps[k]->shape.back();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < w; ++j)
                                (*g)[i * w + j] += self.grad[i * n + offsets[k] + j];
                          }
                        });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
  const std::size_t m = a.rows(), n = a.cols();
  if (start + width > n)
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(width) +
                         ") out of " + a.shape_string());
  std::vector<double> out(m * width);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(src.data() + i * n + start, width, out.data() + i * width);
  auto pa = a.shared();
  return make_op_result({m, width}, std::move(out), {a}, "slice_cols",
                        [pa, m, n, start, width](TensorImpl& self) {
                          if (auto* g = grad_of(pa))
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < width; ++j)
                                (*g)[i * n + start + j] += self.grad[i * width + j];
                        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n)
      throw DimensionError("concat_rows: column mismatch " + parts[0].shape_string() + " vs " +
                           p.shape_string());
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorImpl>> ps;
  for (const auto& p : parts) ps.push_back(p.shared());
  return make_op_result({m, n}, std::move(out), parts, "concat_rows", [ps](TensorImpl& self) {
    std::size_t offset = 0;
    for (const auto& p : ps) {
      if (auto* g = grad_of(p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offset + i];
      offset += p->data.size();
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t n = a.cols();
  if (start + count > a.rows())
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") out of " + a.shape_string());
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  auto pa = a.shared();
  return make_op_result({count, n}, std::move(out), {a}, "slice_rows",
                        [pa, start, n](TensorImpl& self) {
                          if (auto* g = grad_of(pa))
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              (*g)[start * n + i] += self.grad[i];
                        });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const std::size_t v = table.rows(), n = table.cols();
  std::vector<double> out(ids.size() * n);
  const auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " out of table " +
                           table.shape_string());
    std::copy_n(src.data() + static_cast<std::size_t>(ids[i]) * n, n, out.data() + i * n);
  }
  auto pt = table.shared();
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op_result({ids.size(), n}, std::move(out), {table}, "gather_rows",
                        [pt, idx = std::move(idx), n](TensorImpl& self) {
                          if (auto* g = grad_of(pt))
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              double* dst = g->data() + static_cast<std::size_t>(idx[i]) * n;
                              const double* s = self.grad.data() + i * n;
                              for (std::size_t j = 0; j < n; ++j) dst[j] += s[j];
                            }
                        });
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto pa = a.shared();
  return make_op_result({1}, {s}, {a}, "sum_all", [pa](TensorImpl& self) {
    if (auto* g = grad_of(pa))
      for (double& v : *g) v += self.grad[0];
  });
}

Tensor mean_all(const Tensor& a) {
  const double count = static_cast<double>(a.size());
  return scale(sum_all(a), count > 0 ? 1.0 / count : 0.0);
}

// ---- alignments ------------------------------------------------------------

Tensor softmax_rows(const Tensor& x, std::size_t valid_cols) {
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t valid = std::min(valid_cols, n);
  std::vector<double> out(m * n, 0.0);
  const auto src = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    if (valid == 0) {
      if (n > 0) o[0] = 1.0;
      continue;
    }
    const double* r = src.data() + i * n;
    const double mx = *std::max_element(r, r + valid);
    double z = 0.0;
    for (std::size_t j = 0; j < valid; ++j) z += (o[j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < valid; ++j) o[j] /= z;
  }
  auto px = x.shared();
  return make_op_result(x.shape(), std::move(out), {x}, "softmax_rows",
                        [px, m, n](TensorImpl& self) {
                          auto* g = grad_of(px);
                          if (!g) return;
                          for (std::size_t i = 0; i < m; ++i) {
                            const double* y = self.data.data() + i * n;
                            const double* gy = self.grad.data() + i * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                            for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += y[j] * (gy[j] - dot);
                          }
                        });
}

namespace {

// 1.5-entmax of one row over its first `n` entries. Works on z = x/2; the
// support is the largest k whose threshold tau_k stays below the k-th
// largest z.
void entmax15_row(const double* x, double* out, std::size_t n, std::vector<double>& sorted) {
  sorted.assign(x, x + n);
  for (double& v : sorted) v *= 0.5;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cum = 0.0, cum_sq = 0.0, tau = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const double z = sorted[k - 1];
    cum += z;
    cum_sq += z * z;
    const double kk = static_cast<double>(k);
    const double mean = cum / kk;
    const double ss = cum_sq / kk - mean * mean;
    const double delta = (1.0 - kk * ss) / kk;
    const double tau_k = mean - std::sqrt(std::max(delta, 0.0));
    if (tau_k <= z)
      tau = tau_k;
    else
      break;
  }
  std::size_t support = 0, last = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = std::max(0.5 * x[j] - tau, 0.0);
    out[j] = d * d;
    if (d > 0.0) ++support, last = j;
  }
  if (support == 1) out[last] = 1.0;  // (z - (z - 1))^2 can round below 1
}

}  // namespace

Tensor entmax15_rows(const Tensor& x, std::size_t valid_cols) {
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t valid = std::min(valid_cols, n);
  std::vector<double> out(m * n, 0.0);
  std::vector<double> scratch;
  for (std::size_t i = 0; i < m; ++i) {
    if (valid == 0) {
      if (n > 0) out[i * n] = 1.0;
      continue;
    }
    entmax15_row(x.data().data() + i * n, out.data() + i * n, valid, scratch);
  }
  auto px = x.shared();
  return make_op_result(x.shape(), std::move(out), {x}, "entmax15_rows",
                        [px, m, n](TensorImpl& self) {
                          auto* g = grad_of(px);
                          if (!g) return;
                          for (std::size_t i = 0; i < m; ++i) {
                            const double* y = self.data.data() + i * n;
                            const double* gy = self.grad.data() + i * n;
                            double num = 0.0, den = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double s = std::sqrt(y[j]);
                              num += gy[j] * s;
                              den += s;
                            }
                            const double q = den > 0.0 ? num / den : 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double s = std::sqrt(y[j]);
                              (*g)[i * n + j] += s * (gy[j] - q);
                            }
                          }
                        });
}

// ---- normalizations --------------------------------------------------------

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n)
    throw DimensionError("rms_norm: gain " + gain.shape_string() + " vs input " + x.shape_string());
  std::vector<double> out(m * n);
  std::vector<double> inv(m);
  const auto src = x.data();
  const auto gv = gain.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = src.data() + i * n;
    double ms = 0.0;
    for (std::size_t j = 0; j < n; ++j) ms += r[j] * r[j];
    inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = gv[j] * r[j] * inv[i];
  }
  auto px = x.shared(), pg = gain.shared();
  return make_op_result(x.shape(), std::move(out), {x, gain}, "rms_norm",
                        [px, pg, inv = std::move(inv), m, n](TensorImpl& self) {
                          auto* gx = grad_of(px);
                          auto* gg = grad_of(pg);
                          for (std::size_t i = 0; i < m; ++i) {
                            const double* r = px->data.data() + i * n;
                            const double* gy = self.grad.data() + i * n;
                            if (gg)
                              for (std::size_t j = 0; j < n; ++j) (*gg)[j] += gy[j] * r[j] * inv[i];
                            if (gx) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < n; ++j) dot += gy[j] * pg->data[j] * r[j];
                              const double c = dot * inv[i] * inv[i] * inv[i] / static_cast<double>(n);
                              for (std::size_t j = 0; j < n; ++j)
                                (*gx)[i * n + j] += gy[j] * pg->data[j] * inv[i] - r[j] * c;
                            }
                          }
                        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n)
    throw DimensionError("layer_norm: affine parameters do not match " + x.shape_string());
  std::vector<double> out(m * n), xhat(m * n), inv(m);
  const auto src = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = src.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(n);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mean) * inv[i];
      out[i * n + j] = gain.data()[j] * xhat[i * n + j] + bias.data()[j];
    }
  }
  auto px = x.shared(), pg = gain.shared(), pb = bias.shared();
  return make_op_result(
      x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
      [px, pg, pb, xhat = std::move(xhat), inv = std::move(inv), m, n](TensorImpl& self) {
        auto* gx = grad_of(px);
        auto* gg = grad_of(pg);
        auto* gb = grad_of(pb);
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* gy = self.grad.data() + i * n;
          const double* xh = xhat.data() + i * n;
          if (gg)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += gy[j] * xh[j];
          if (gb)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += gy[j];
          if (gx) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[j] * pg->data[j];
              sum_d += d;
              sum_dx += d * xh[j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[j] * pg->data[j];
              (*gx)[i * n + j] += inv[i] * (d - sum_d / dn - xh[j] * sum_dx / dn);
            }
          }
        }
      });
}

Tensor rope(const Tensor& x, std::span<const int> positions, double base) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n % 2 != 0) throw ValidationError("rope: feature width " + std::to_string(n) + " is odd");
  if (positions.size() != m)
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         x.shape_string());
  const std::size_t pairs = n / 2;
  std::vector<double> cs(m * pairs), sn(m * pairs);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < pairs; ++p) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(n));
      const double angle = static_cast<double>(positions[i]) * freq;
      cs[i * pairs + p] = std::cos(angle);
      sn[i * pairs + p] = std::sin(angle);
    }
  std::vector<double> out(m * n);
  const auto src = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < pairs; ++p) {
      const double a = src[i * n + 2 * p], b = src[i * n + 2 * p + 1];
      const double c = cs[i * pairs + p], s = sn[i * pairs + p];
      out[i * n + 2 * p] = a * c - b * s;
      out[i * n + 2 * p + 1] = a * s + b * c;
    }
  auto px = x.shared();
  return make_op_result(x.shape(), std::move(out), {x}, "rope",
                        [px, cs = std::move(cs), sn = std::move(sn), m, n, pairs](TensorImpl& self) {
                          auto* g = grad_of(px);
                          if (!g) return;
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < pairs; ++p) {
                              const double ga = self.grad[i * n + 2 * p];
                              const double gb = self.grad[i * n + 2 * p + 1];
                              const double c = cs[i * pairs + p], s = sn[i * pairs + p];
                              (*g)[i * n + 2 * p] += ga * c + gb * s;
                              (*g)[i * n + 2 * p + 1] += -ga * s + gb * c;
                            }
                        });
}

// ---- losses ----------------------------------------------------------------

Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::size_t> positions, double normalizer) {
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m)
    throw DimensionError("cross_entropy_masked: " + std::to_string(targets.size()) +
                         " targets for " + logits.shape_string());
  const double denom = normalizer > 0.0 ? normalizer : static_cast<double>(positions.size());
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  std::vector<double> probs(pos.size() * v);
  double loss = 0.0;
  const auto src = logits.data();
  for (std::size_t k = 0; k < pos.size(); ++k) {
    const std::size_t r = pos[k];
    if (r >= m) throw DimensionError("cross_entropy_masked: position out of range");
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw DimensionError("cross_entropy_masked: target " + std::to_string(t) + " outside " +
                           std::to_string(v) + " classes");
    const double* row = src.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (probs[k * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[k * v + j] /= z;
    loss += (mx + std::log(z)) - row[t];
  }
  if (!pos.empty()) loss /= denom;
  auto pl = logits.shared();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_op_result({1}, {loss}, {logits}, "cross_entropy_masked",
                        [pl, pos = std::move(pos), probs = std::move(probs), tg = std::move(tg), v,
                         denom](TensorImpl& self) {
                          auto* g = grad_of(pl);
                          if (!g || pos.empty()) return;
                          const double scale_ = self.grad[0] / denom;
                          for (std::size_t k = 0; k < pos.size(); ++k) {
                            double* row = g->data() + pos[k] * v;
                            for (std::size_t j = 0; j < v; ++j) row[j] += scale_ * probs[k * v + j];
                            row[tg[pos[k]]] -= scale_;
                          }
                        });
}

Tensor bce_multilabel(const Tensor& logits, const Tensor& labels) {
  require_same_shape(logits, labels, "bce_multilabel");
  const std::size_t count = logits.size();
  const auto z = logits.data(), y = labels.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double softplus = std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i])));
    loss += softplus - y[i] * z[i];
  }
  loss /= static_cast<double>(count);
  auto pz = logits.shared(), py = labels.shared();
  return make_op_result({1}, {loss}, {logits, labels}, "bce_multilabel",
                        [pz, py, count](TensorImpl& self) {
                          const double s = self.grad[0] / static_cast<double>(count);
                          if (auto* g = grad_of(pz))
                            for (std::size_t i = 0; i < count; ++i) {
                              const double sig = 1.0 / (1.0 + std::exp(-pz->data[i]));
                              (*g)[i] += s * (sig - py->data[i]);
                            }
                          if (auto* g = grad_of(py))
                            for (std::size_t i = 0; i < count; ++i) (*g)[i] -= s * pz->data[i];
                        });
}

// ---- verification ----------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double h) {
  std::vector<Tensor> xs = inputs;
  for (auto& x : xs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : xs) analytic.emplace_back(x.grad().begin(), x.grad().end());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto values = xs[k].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace vdiag
