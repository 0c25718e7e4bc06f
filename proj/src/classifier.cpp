// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "vdiag/pretrain.hpp"

namespace vdiag {

LabelMatrix to_label_matrix(const std::vector<std::vector<int>>& label_sets, int k) {
  LabelMatrix out(label_sets.size(), std::vector<int>(static_cast<std::size_t>(k), 0));
  for (std::size_t b = 0; b < label_sets.size(); ++b)
    for (int l : label_sets[b]) {
      if (l < 0 || l >= k)
        throw ValidationError("label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
      out[b][static_cast<std::size_t>(l)] = 1;
    }
  return out;
}

ClassifierHead ClassifierHead::create(int in_width, int hidden, int k, int n_blocks, Rng& rng,
                                      bool zero_output) {
  if (in_width < 1 || hidden < 1 || k < 1 || n_blocks < 0)
    throw ValidationError("classifier head: widths and label count must be positive");
  const auto h = static_cast<std::size_t>(hidden);
  ClassifierHead head;
  head.input = Linear::create(static_cast<std::size_t>(in_width), h, rng);
  for (int i = 0; i < n_blocks; ++i)
    head.blocks.push_back({init_constant({h}, 1.0), init_constant({h}, 0.0), Linear::create(h, h, rng)});
  head.ln_gain = init_constant({h}, 1.0);
  head.ln_bias = init_constant({h}, 0.0);
  head.output = Linear::create(h, static_cast<std::size_t>(k), rng);
  if (zero_output)
    for (double& w : head.output.weight.data()) w = 0.0;
  return head;
}

Tensor ClassifierHead::logits(const Tensor& features) const {
  if (static_cast<int>(features.cols()) != in_width())
    throw DimensionError("classifier head: feature width " + std::to_string(features.cols()) +
                         " != " + std::to_string(in_width()));
  Tensor h = input(features);
  for (const auto& b : blocks) h = add(h, gelu(b.lin(layer_norm(h, b.ln_gain, b.ln_bias))));
  return output(layer_norm(h, ln_gain, ln_bias));
}

ParameterList ClassifierHead::parameters() const {
  ParameterList p;
  input.collect(p, "cls.input");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string pre = "cls.block" + std::to_string(i);
    p.add(pre + ".ln_gain", blocks[i].ln_gain, false);
    p.add(pre + ".ln_bias", blocks[i].ln_bias, false);
    blocks[i].lin.collect(p, pre + ".lin");
  }
  p.add("cls.ln_gain", ln_gain, false);
  p.add("cls.ln_bias", ln_bias, false);
  output.collect(p, "cls.output");
  return p;
}

Tensor extract_features(const Backbone& backbone, const std::vector<TokenizedPair>& items) {
  NoGradGuard guard;
  const auto f = static_cast<std::size_t>(backbone.feature_width());
  Tensor out({items.size(), f});
  for (std::size_t b = 0; b < items.size(); ++b) {
    const Tensor row = backbone.cls_features(backbone.forward(items[b]));
    std::copy(row.data().begin(), row.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * f));
  }
  return out;
}

namespace {

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

ScoreMatrix predict(const ClassifierHead& head, const Tensor& features) {
  NoGradGuard guard;
  const Tensor z = head.logits(features);
  ScoreMatrix out(z.rows(), std::vector<double>(z.cols()));
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) out[r][c] = sigmoid(z.at(r, c));
  return out;
}

std::vector<double> classify(const TokenizedPair& pair, const Backbone& backbone,
                             const ClassifierHead& head) {
  return predict(head, extract_features(backbone, {pair})).front();
}

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("finetune." + field + ": " + why);
  };
  if (hidden_blocks < 0) fail("hidden_blocks", "must be >= 0");
  if (hidden_width < 0) fail("hidden_width", "must be >= 0");
  if (lr < 0.0) fail("lr", "must be >= 0");
  if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
  if (max_epochs < 0) fail("max_epochs", "must be >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (patience < 1) fail("patience", "must be >= 1");
  if (min_epochs < 0) fail("min_epochs", "must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) fail("threshold", "must be in (0,1)");
}

FinetuneResult finetune_head(const Tensor& train_x, const LabelMatrix& train_y,
                             const Tensor& val_x, const LabelMatrix& val_y,
                             const FinetuneConfig& cfg) {
  cfg.validate();
  if (train_y.empty() || train_x.rows() != train_y.size())
    throw DimensionError("finetune: features and labels disagree in row count");
  const int k = static_cast<int>(train_y.front().size());
  const int f = static_cast<int>(train_x.cols());
  Rng rng(mix_seed(cfg.seed, 0x68656164));  // "head"
  FinetuneResult result;
  result.head = ClassifierHead::create(f, cfg.hidden_width > 0 ? cfg.hidden_width : f, k,
                                       cfg.hidden_blocks, rng, cfg.zero_init_output);
  ParameterList params = result.head.parameters();

  PretrainConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  AdamState state;

  const bool has_val = val_x.rows() > 0;
  const Tensor& sel_x = has_val ? val_x : train_x;
  const LabelMatrix& sel_y = has_val ? val_y : train_y;
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& p : params.items()) s.emplace_back(p.value.data().begin(), p.value.data().end());
    return s;
  };
  // selection key: validation sample-F1, ties broken by lower validation BCE
  // (F1 plateaus while no score crosses the threshold)
  Tensor sel_t({sel_y.size(), static_cast<std::size_t>(k)});
  for (std::size_t i = 0; i < sel_y.size(); ++i)
    for (int c = 0; c < k; ++c) sel_t.at(i, static_cast<std::size_t>(c)) = sel_y[i][static_cast<std::size_t>(c)];
  auto val_loss = [&] {
    NoGradGuard guard;
    return bce_multilabel(result.head.logits(sel_x), sel_t).item();
  };
  // The untrained head only competes when no epoch runs: predicting nothing
  // scores F1 1 on every empty label set and would often beat trained epochs.
  auto best = snapshot();
  result.best_val_sample_f1 = cfg.max_epochs == 0
                                  ? prf1(predict(result.head, sel_x), sel_y, cfg.threshold, Averaging::sample).f1
                                  : -std::numeric_limits<double>::infinity();
  double best_loss = cfg.max_epochs == 0 ? val_loss() : std::numeric_limits<double>::infinity();

  std::vector<int> order(train_y.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  int stale = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs && (epoch <= cfg.min_epochs || stale < cfg.patience); ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::span<const int> ids(order.data() + start, n);
      Tensor y({n, static_cast<std::size_t>(k)});
      for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c) y.at(i, static_cast<std::size_t>(c)) = train_y[static_cast<std::size_t>(ids[i])][static_cast<std::size_t>(c)];
      params.zero_grad();
      Tensor loss = bce_multilabel(result.head.logits(gather_rows(train_x, ids)), y);
      loss_sum += loss.item() * static_cast<double>(n);
      loss.backward();
      if (!optimizer_step(params, state, opt, cfg.lr))
        throw NumericalError("finetune: non-finite gradient in epoch " + std::to_string(epoch));
    }
    result.epochs_run = epoch;
    const double f1 = prf1(predict(result.head, sel_x), sel_y, cfg.threshold, Averaging::sample).f1;
    result.log.push_back({epoch, loss_sum / static_cast<double>(order.size()), f1});
    const double vl = val_loss();
    if (f1 > result.best_val_sample_f1 || (f1 == result.best_val_sample_f1 && vl < best_loss)) {
      result.best_val_sample_f1 = f1;
      best_loss = vl;
      result.best_epoch = epoch;
      best = snapshot();
      stale = 0;
    } else {
      ++stale;
    }
  }
  auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i)
    std::copy(best[i].begin(), best[i].end(), items[i].value.data().begin());
  params.zero_grad();
  return result;
}

// ---- metrics --------------------------------------------------------------

namespace {

void check_shapes(const ScoreMatrix& scores, const LabelMatrix& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("metrics: score and label matrices differ in row count");
  for (std::size_t b = 0; b < scores.size(); ++b)
    if (scores[b].size() != labels[b].size())
      throw DimensionError("metrics: row " + std::to_string(b) + " differs in width");
}

double ratio(double num, double den, bool both_empty) {
  if (den > 0.0) return num / den;
  return both_empty ? 1.0 : 0.0;
}

struct Counts {
  double tp = 0, fp = 0, fn = 0;

  Prf prf() const {
    const bool empty = tp + fp == 0 && tp + fn == 0;
    Prf r;
    r.precision = ratio(tp, tp + fp, empty);
    r.recall = ratio(tp, tp + fn, empty);
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
  }
};

}  // namespace

std::optional<double> auroc_micro(const ScoreMatrix& scores, const LabelMatrix& labels) {
  check_shapes(scores, labels);
  std::vector<std::pair<double, int>> pool;
  for (std::size_t b = 0; b < scores.size(); ++b)
    for (std::size_t c = 0; c < scores[b].size(); ++c) pool.emplace_back(scores[b][c], labels[b][c] != 0);
  std::sort(pool.begin(), pool.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < pool.size();) {
    std::size_t j = i;
    while (j < pool.size() && pool[j].first == pool[i].first) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (pool[t].second) {
        pos += 1;
        rank_sum += midrank;
      }
    i = j;
  }
  const double neg = static_cast<double>(pool.size()) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

Prf prf1(const ScoreMatrix& scores, const LabelMatrix& labels, double threshold,
         Averaging averaging) {
  check_shapes(scores, labels);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("prf1: threshold must be in (0,1)");
  const std::size_t b_count = scores.size();
  const std::size_t k = b_count ? scores.front().size() : 0;
  auto count = [&](std::size_t b, std::size_t c, Counts& n) {
    const bool pred = scores[b][c] >= threshold;
    const bool truth = labels[b][c] != 0;
    n.tp += pred && truth;
    n.fp += pred && !truth;
    n.fn += !pred && truth;
  };
  if (averaging == Averaging::micro) {
    Counts n;
    for (std::size_t b = 0; b < b_count; ++b)
      for (std::size_t c = 0; c < scores[b].size(); ++c) count(b, c, n);
    return n.prf();
  }
  Prf mean;
  const std::size_t groups = averaging == Averaging::macro ? k : b_count;
  if (groups == 0) return {1.0, 1.0, 1.0};
  for (std::size_t g = 0; g < groups; ++g) {
    Counts n;
    if (averaging == Averaging::macro)
      for (std::size_t b = 0; b < b_count; ++b) count(b, g, n);
    else
      for (std::size_t c = 0; c < scores[g].size(); ++c) count(g, c, n);
    const Prf r = n.prf();
    mean.precision += r.precision;
    mean.recall += r.recall;
    mean.f1 += r.f1;
  }
  const double div = static_cast<double>(groups);
  return {mean.precision / div, mean.recall / div, mean.f1 / div};
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["AUROC (Micro)"] = auroc_micro ? nlohmann::ordered_json(*auroc_micro) : nlohmann::ordered_json();
  j["F1 Score (Micro)"] = micro.f1;
  j["F1 Score (Macro)"] = macro.f1;
  j["Precision (Sample)"] = sample.precision;
  j["Recall (Sample)"] = sample.recall;
  j["F1 Score (Sample)"] = sample.f1;
  j["Precision (Micro)"] = micro.precision;
  j["Recall (Micro)"] = micro.recall;
  j["Precision (Macro)"] = macro.precision;
  j["Recall (Macro)"] = macro.recall;
  j["threshold"] = threshold;
  return j.dump(2) + "\n";
}

MetricsReport compute_metrics(const ScoreMatrix& scores, const LabelMatrix& labels,
                              double threshold) {
  MetricsReport r;
  r.threshold = threshold;
  r.auroc_micro = auroc_micro(scores, labels);
  r.micro = prf1(scores, labels, threshold, Averaging::micro);
  r.macro = prf1(scores, labels, threshold, Averaging::macro);
  r.sample = prf1(scores, labels, threshold, Averaging::sample);
  return r;
}

template <class M>
static M select_impl(const M& m, const std::vector<int>& columns) {
  M out;
  out.reserve(m.size());
  for (const auto& row : m) {
    typename M::value_type r;
    for (int c : columns) r.push_back(row.at(static_cast<std::size_t>(c)));
    out.push_back(std::move(r));
  }
  return out;
}

ScoreMatrix select_columns(const ScoreMatrix& m, const std::vector<int>& columns) {
  return select_impl(m, columns);
}

LabelMatrix select_columns(const LabelMatrix& m, const std::vector<int>& columns) {
  return select_impl(m, columns);
}

}  // namespace vdiag
