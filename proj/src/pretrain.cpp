// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/pretrain.hpp"

#include <cmath>
#include <numeric>

namespace vdiag {

PretrainConfig PretrainConfig::full_scale_preset() {
  PretrainConfig cfg;
  cfg.lr = 1e-4;
  cfg.warmup_steps = 2000;
  cfg.batch_size = 32;
  return cfg;
}

void PretrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("pretrain." + field + ": " + why);
  };
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) fail("mask_rate", "must be in [0,1]");
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) fail("alpha", "loss weights must be >= 0");
  if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) fail("alpha", "alpha + beta + gamma must be 1");
  if (lr < 0.0) fail("lr", "must be >= 0");
  if (warmup_steps < 0) fail("warmup_steps", "must be >= 0");
  if (total_steps < 0) fail("total_steps", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
  if (!(clip > 0.0)) fail("clip", "must be > 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
}

MaskPlan make_mask_plan(const TokenizedPair& pair, const EmbeddingConfig& vocab,
                        const PretrainConfig& cfg, Rng& rng) {
  MaskPlan plan;
  plan.masked_base = pair.base;
  plan.masked_desc = pair.desc;
  plan.masked_value = pair.value;

  // 80/10/10 when enabled: [MASK], random real id, unchanged
  auto replacement = [&](int mask_id, int n_real, int original) {
    if (!cfg.random_replacement) return mask_id;
    const double u = rng.uniform();
    if (u < 0.8) return mask_id;
    if (u < 0.9) return static_cast<int>(rng.below(static_cast<std::uint64_t>(n_real)));
    return original;
  };

  for (std::size_t i = 0; i < pair.base.size(); ++i) {
    if (!rng.bernoulli(cfg.mask_rate)) continue;
    plan.dtc_rows.push_back(i + 1);
    plan.base_targets.push_back(pair.base[i]);
    plan.masked_base[i] = replacement(vocab.mask_base(), vocab.n_base, pair.base[i]);
  }
  for (std::size_t n = 0; n < pair.desc.size(); ++n) {
    if (!rng.bernoulli(cfg.mask_rate)) continue;
    plan.env_rows.push_back(n + 1);
    plan.desc_targets.push_back(pair.desc[n]);
    plan.value_targets.push_back(pair.value[n]);
    plan.masked_desc[n] = replacement(vocab.mask_desc(), vocab.n_desc, pair.desc[n]);
    plan.masked_value[n] = replacement(vocab.mask_value(), vocab.n_value, pair.value[n]);
  }
  return plan;
}

namespace {

// Cross entropy of `head` applied to the selected rows of `h`.
Tensor head_loss(const Tensor& h, const Linear& head, const std::vector<std::size_t>& rows,
                 const std::vector<int>& targets, double normalizer) {
  std::vector<int> ids(rows.begin(), rows.end());
  const Tensor logits = head(gather_rows(h, ids));
  std::vector<std::size_t> positions(rows.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  return cross_entropy_masked(logits, targets, positions,
                              normalizer > 0.0 ? normalizer : static_cast<double>(rows.size()));
}

void accumulate(Tensor& total, const Tensor& term, double weight) {
  if (weight == 0.0) return;
  const Tensor scaled = scale(term, weight);
  total = total.defined() ? add(total, scaled) : scaled;
}

}  // namespace

LossTerms joint_loss(const Backbone& model, const BackboneOutput& out, const MaskPlan& plan,
                     const PretrainConfig& cfg, LossNormalizers norm) {
  LossTerms r;
  Tensor total;
  const bool multi = model.multimodal();
  if (!plan.dtc_rows.empty()) {
    const Tensor l = head_loss(out.h_dtc, model.base_head(), plan.dtc_rows, plan.base_targets, norm.dtc);
    r.l_dtc = l.item();
    accumulate(total, l, multi ? cfg.alpha : 1.0);
  }
  if (multi && !plan.env_rows.empty()) {
    const Tensor lv = head_loss(out.h_env, model.value_head(), plan.env_rows, plan.value_targets, norm.env);
    const Tensor ld = head_loss(out.h_env, model.desc_head(), plan.env_rows, plan.desc_targets, norm.env);
    r.l_value = lv.item();
    r.l_desc = ld.item();
    accumulate(total, lv, cfg.beta);
    accumulate(total, ld, cfg.gamma);
  }
  r.total = total.defined() ? total : Tensor::scalar(0.0);
  return r;
}

bool optimizer_step(ParameterList& params, AdamState& state, const PretrainConfig& cfg, double lr) {
  auto& items = params.items();
  for (const auto& p : items) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad())
      if (!std::isfinite(g)) return false;
  }
  if (state.m.size() != items.size()) {
    state.m.assign(items.size(), {});
    state.v.assign(items.size(), {});
    for (std::size_t k = 0; k < items.size(); ++k) {
      state.m[k].assign(items[k].value.size(), 0.0);
      state.v[k].assign(items[k].value.size(), 0.0);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t k = 0; k < items.size(); ++k) {
    auto& p = items[k];
    if (p.value.size() != state.m[k].size())
      throw DimensionError("optimizer_step: parameter '" + p.name + "' changed shape");
    auto w = p.value.data();
    const bool has = p.value.has_grad();
    std::span<const double> g;
    if (has) g = std::as_const(p.value).grad();
    const std::size_t cols = p.value.cols();
    const std::size_t rows = p.value.size() / std::max<std::size_t>(cols, 1);
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t off = r * cols;
      if (p.sparse_rows) {
        bool touched = false;
        for (std::size_t c = 0; has && c < cols && !touched; ++c) touched = g[off + c] != 0.0;
        if (!touched) continue;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = off + c;
        const double gi = has ? g[i] : 0.0;
        w[i] -= decay * w[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      }
    }
  }
  return true;
}

double lr_schedule(int step, const PretrainConfig& cfg) {
  if (step < 0) throw ValidationError("lr_schedule: step must be >= 0");
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= cfg.total_steps) return 0.0;
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double clip_gradients(ParameterList& params, double threshold) {
  if (!(threshold > 0.0)) throw ValidationError("clip_gradients: threshold must be > 0");
  double sq = 0.0;
  for (const auto& p : params.items()) {
    if (!p.value.has_grad()) continue;
    for (double g : std::as_const(p.value).grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const double f = threshold / norm;
    for (auto& p : params.items()) {
      if (!p.value.has_grad()) continue;
      for (double& g : p.value.grad()) g *= f;
    }
  }
  return norm;
}

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736b;  // "mask"
constexpr std::uint64_t kOrderStream = 0x6f726472;  // "ordr"

}  // namespace

PretrainResult pretrain(Backbone& model, const std::vector<TokenizedPair>& train,
                        const PretrainConfig& cfg,
                        const std::function<void(const PretrainLogRow&)>& on_step) {
  cfg.validate();
  if (train.empty()) throw ValidationError("pretrain: empty training set");
  ParameterList params = model.parameters();
  AdamState state;
  Rng order(mix_seed(cfg.seed, kOrderStream));
  std::vector<std::size_t> perm(train.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  order.shuffle(perm);
  std::size_t cursor = 0;
  const auto& vocab = model.config().embedding;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  PretrainResult result;
  std::vector<std::size_t> batch(bs);
  std::vector<MaskPlan> plans(bs);
  for (int step = 0; step < cfg.total_steps; ++step) {
    params.zero_grad();
    LossNormalizers norm;
    for (std::size_t k = 0; k < bs; ++k) {
      if (cursor == perm.size()) {
        order.shuffle(perm);
        cursor = 0;
      }
      batch[k] = perm[cursor++];
      Rng mask_rng(mix_seed(cfg.seed ^ kMaskStream, static_cast<std::uint64_t>(step) * bs + k));
      plans[k] = make_mask_plan(train[batch[k]], vocab, cfg, mask_rng);
      norm.dtc += static_cast<double>(plans[k].dtc_rows.size());
      norm.env += static_cast<double>(plans[k].env_rows.size());
    }
    PretrainLogRow row;
    row.step = step;
    for (std::size_t k = 0; k < bs; ++k) {
      const auto& p = plans[k];
      const auto out = model.forward(train[batch[k]], false, &p.masked_base, &p.masked_desc, &p.masked_value);
      auto terms = joint_loss(model, out, p, cfg, norm);
      row.l_total += terms.total.item();
      row.l_dtc += terms.l_dtc;
      row.l_value += terms.l_value;
      row.l_desc += terms.l_desc;
      if (terms.total.requires_grad()) terms.total.backward();
    }
    if (!std::isfinite(row.l_total)) {
      params.zero_grad();
      result.diverged = true;
      row.grad_norm = std::nan("");
      result.log.push_back(row);
      if (on_step) on_step(row);
      break;
    }
    row.lr = lr_schedule(step + 1, cfg);
    row.grad_norm = clip_gradients(params, cfg.clip);
    if (!optimizer_step(params, state, cfg, row.lr)) row.grad_norm = std::nan("");
    result.log.push_back(row);
    if (on_step) on_step(row);
  }
  params.zero_grad();
  return result;
}

LossTerms evaluate_mlm(const Backbone& model, const std::vector<TokenizedPair>& data,
                       const PretrainConfig& cfg, std::uint64_t mask_seed) {
  NoGradGuard guard;
  const auto& vocab = model.config().embedding;
  double sum_dtc = 0.0, sum_value = 0.0, sum_desc = 0.0;
  double n_dtc = 0.0, n_env = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(mix_seed(mask_seed, i));
    const MaskPlan plan = make_mask_plan(data[i], vocab, cfg, rng);
    const auto out = model.forward(data[i], false, &plan.masked_base, &plan.masked_desc, &plan.masked_value);
    // normalizer 1 turns the means into sums
    const auto terms = joint_loss(model, out, plan, cfg, {1.0, 1.0});
    sum_dtc += terms.l_dtc;
    sum_value += terms.l_value;
    sum_desc += terms.l_desc;
    n_dtc += static_cast<double>(plan.dtc_rows.size());
    n_env += static_cast<double>(plan.env_rows.size());
  }
  LossTerms r;
  r.l_dtc = n_dtc > 0 ? sum_dtc / n_dtc : 0.0;
  r.l_value = n_env > 0 ? sum_value / n_env : 0.0;
  r.l_desc = n_env > 0 ? sum_desc / n_env : 0.0;
  const double total = model.multimodal()
                           ? cfg.alpha * r.l_dtc + cfg.beta * r.l_value + cfg.gamma * r.l_desc
                           : r.l_dtc;
  r.total = Tensor::scalar(total);
  return r;
}

}  // namespace vdiag
