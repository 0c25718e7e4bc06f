// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "vdiag/common.hpp"
#include "vdiag/tensor.hpp"

namespace vdiag {

/// A named trainable tensor. `sparse_rows` marks embedding tables whose rows
/// are only updated when they received gradient.
struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;
  bool sparse_rows = false;
};

class ParameterList {
 public:
  void add(std::string name, const Tensor& value, bool decay = true, bool sparse_rows = false) {
    items_.push_back({std::move(name), value, decay, sparse_rows});
  }
  void append(const ParameterList& other) {
    items_.insert(items_.end(), other.items_.begin(), other.items_.end());
  }

  std::vector<Parameter>& items() noexcept { return items_; }
  const std::vector<Parameter>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.value.zero_grad();
  }

  const Parameter* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }

 private:
  std::vector<Parameter> items_;
};

/// Trainable tensor with N(0, stddev^2) entries.
inline Tensor init_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

inline Tensor init_constant(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b.
struct Linear {
  Tensor weight;  ///< [in x out]
  Tensor bias;    ///< [out]

  static Linear create(std::size_t in, std::size_t out, Rng& rng) {
    return {init_normal({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))),
            init_constant({out}, 0.0)};
  }
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
  void collect(ParameterList& params, const std::string& prefix) const {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias, false);
  }
};

}  // namespace vdiag
