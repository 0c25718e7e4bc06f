// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>

#include "vdiag/common.hpp"
#include "vdiag/pretrain.hpp"
#include "vdiag/synth.hpp"

using namespace vdiag;

namespace {

struct Tiny {
  TokenizerVocab vocab;
  std::vector<TokenizedPair> train;
};

const Tiny& tiny_corpus() {
  static const Tiny t = [] {
    GeneratorConfig g;
    g.seed = 3;
    g.n_train = 64;
    g.dtc_length_mean = 10;
    g.dtc_length_sd = 3;
    g.env_ratio_mean = 3;
    g.env_ratio_sd = 1;
    const auto corpus = generate(g);
    std::vector<RawSequence> raw;
    for (const auto& r : corpus.train) raw.push_back(r.sequence);
    TokenizerConfig tc;
    tc.theta = 8;
    Tiny out;
    out.vocab = fit_tokenizer(raw, tc);
    for (const auto& r : raw) out.train.push_back(tokenize(r, out.vocab));
    return out;
  }();
  return t;
}

ModelConfig tiny_model(BackboneKind kind) {
  ModelConfig mc;
  mc.kind = kind;
  mc.encoder.d = 8;
  mc.encoder.heads = 2;
  mc.encoder.layers = 2;
  mc.encoder.ffn_mult = 2;
  mc.embedding = tiny_corpus().vocab.embedding_config(8);
  return mc;
}

void zero(Tensor t) {
  for (double& v : t.data()) v = 0.0;
}

std::vector<std::vector<double>> snapshot(const Backbone& b) {
  std::vector<std::vector<double>> out;
  for (const auto& p : b.parameters().items()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

}  // namespace

TEST_CASE("mask plan: rate 0, rate 1 and the binomial rate") {
  const auto& pair = tiny_corpus().train.front();
  const auto vocab = tiny_model(BackboneKind::multimodal).embedding;
  PretrainConfig cfg;
  Rng rng(1);
  cfg.mask_rate = 0.0;
  const auto none = make_mask_plan(pair, vocab, cfg, rng);
  CHECK(none.dtc_rows.empty());
  CHECK(none.env_rows.empty());
  CHECK(none.masked_base == pair.base);

  cfg.mask_rate = 1.0;
  const auto all = make_mask_plan(pair, vocab, cfg, rng);
  CHECK(all.dtc_rows.size() == pair.dtc_length());
  CHECK(all.env_rows.size() == pair.env_length());
  for (int b : all.masked_base) CHECK(b == vocab.mask_base());
  for (int d : all.masked_desc) CHECK(d == vocab.mask_desc());
  for (int v : all.masked_value) CHECK(v == vocab.mask_value());
  CHECK(all.dtc_rows.front() == 1);  // row 0 is [CLS]
  CHECK(all.base_targets == pair.base);

  cfg.mask_rate = 0.15;
  TokenizedPair big;
  big.base.assign(10000, 1);
  big.ecu.assign(10000, 0);
  big.fault.assign(10000, 0);
  const auto plan = make_mask_plan(big, vocab, cfg, rng);
  const double rate = static_cast<double>(plan.dtc_rows.size()) / 10000.0;
  CHECK(rate >= 0.14);
  CHECK(rate <= 0.16);
}

TEST_CASE("mask plan with random replacement keeps the 80/10/10 shape") {
  const auto vocab = tiny_model(BackboneKind::multimodal).embedding;
  PretrainConfig cfg;
  cfg.mask_rate = 1.0;
  cfg.random_replacement = true;
  TokenizedPair big;
  big.base.assign(20000, 0);  // id 0 so "kept" and "random" are distinguishable from [MASK]
  Rng rng(2);
  const auto plan = make_mask_plan(big, vocab, cfg, rng);
  std::size_t masks = 0;
  for (int b : plan.masked_base) {
    masks += b == vocab.mask_base();
    CHECK(b <= vocab.mask_base());
    CHECK(b != vocab.unk_base());
  }
  CHECK(static_cast<double>(masks) / 20000.0 == Catch::Approx(0.8).margin(0.015));
}

TEST_CASE("joint loss: uniform heads give the weighted log vocab sizes") {
  const auto& data = tiny_corpus();
  auto model = Backbone::create(tiny_model(BackboneKind::multimodal), 5);
  for (const Linear* head : {&model.base_head(), &model.value_head(), &model.desc_head()}) {
    zero(head->weight);
    zero(head->bias);
  }
  PretrainConfig cfg;
  cfg.mask_rate = 0.5;
  Rng rng(3);
  const auto& pair = data.train[1];
  const auto plan = make_mask_plan(pair, model.config().embedding, cfg, rng);
  REQUIRE(!plan.dtc_rows.empty());
  REQUIRE(!plan.env_rows.empty());
  const auto out = model.forward(pair, false, &plan.masked_base, &plan.masked_desc, &plan.masked_value);
  const auto terms = joint_loss(model, out, plan, cfg);
  const double v1 = static_cast<double>(model.base_head().bias.size());
  const double v2 = static_cast<double>(model.value_head().bias.size());
  const double v3 = static_cast<double>(model.desc_head().bias.size());
  CHECK(terms.total.item() ==
        Catch::Approx(0.5 * std::log(v1) + 0.3 * std::log(v2) + 0.2 * std::log(v3)).epsilon(1e-12));
}

TEST_CASE("joint loss matches a term-wise oracle and is linear in the weights") {
  const auto& data = tiny_corpus();
  const auto model = Backbone::create(tiny_model(BackboneKind::multimodal), 6);
  PretrainConfig cfg;
  cfg.mask_rate = 0.4;
  Rng rng(4);
  const auto& pair = data.train[2];
  const auto plan = make_mask_plan(pair, model.config().embedding, cfg, rng);
  const auto out = model.forward(pair, false, &plan.masked_base, &plan.masked_desc, &plan.masked_value);

  auto ce = [](const Tensor& h, const Linear& head, const std::vector<std::size_t>& rows,
               const std::vector<int>& targets) {
    double sum = 0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto z = head(slice_rows(h, rows[k], 1));
      double mx = -1e300, lse = 0;
      for (double v : z.data()) mx = std::max(mx, v);
      for (double v : z.data()) lse += std::exp(v - mx);
      sum += mx + std::log(lse) - z.data()[static_cast<std::size_t>(targets[k])];
    }
    return sum / static_cast<double>(rows.size());
  };
  const double l1 = ce(out.h_dtc, model.base_head(), plan.dtc_rows, plan.base_targets);
  const double l2 = ce(out.h_env, model.value_head(), plan.env_rows, plan.value_targets);
  const double l3 = ce(out.h_env, model.desc_head(), plan.env_rows, plan.desc_targets);
  const auto terms = joint_loss(model, out, plan, cfg);
  CHECK(std::abs(terms.l_dtc - l1) < 1e-10);
  CHECK(std::abs(terms.l_value - l2) < 1e-10);
  CHECK(std::abs(terms.l_desc - l3) < 1e-10);
  CHECK(std::abs(terms.total.item() - (0.5 * l1 + 0.3 * l2 + 0.2 * l3)) < 1e-10);

  auto only = cfg;
  only.alpha = 1.0;
  only.beta = only.gamma = 0.0;
  CHECK(std::abs(joint_loss(model, out, plan, only).total.item() - l1) < 1e-12);
  auto twice = cfg;
  twice.alpha *= 2;
  twice.beta *= 2;
  twice.gamma *= 2;
  CHECK(joint_loss(model, out, plan, twice).total.item() == Catch::Approx(2 * terms.total.item()).epsilon(1e-14));
}

TEST_CASE("joint loss gradient passes grad_check at d=8") {
  const auto& data = tiny_corpus();
  const auto model = Backbone::create(tiny_model(BackboneKind::multimodal), 7);
  PretrainConfig cfg;
  cfg.mask_rate = 0.4;
  Rng rng(5);
  TokenizedPair pair = data.train[3];
  const auto plan = make_mask_plan(pair, model.config().embedding, cfg, rng);
  std::vector<Tensor> inputs;
  for (const auto& p : model.parameters().items()) inputs.push_back(p.value);
  const double err = grad_check(
      [&] {
        const auto out = model.forward(pair, false, &plan.masked_base, &plan.masked_desc, &plan.masked_value);
        return joint_loss(model, out, plan, cfg).total;
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("optimizer: zero step, closed-form first step, pure decay") {
  PretrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor w = Tensor::matrix(1, 3, {1.0, -2.0, 0.5});
  w.set_requires_grad(true);
  ParameterList params;
  params.add("w", w);
  AdamState state;
  // gradient buffer exists but is zero
  sum_all(scale(w, 0.0)).backward();
  REQUIRE(optimizer_step(params, state, cfg, 1e-2));
  CHECK(w.at(0, 0) == 1.0);
  CHECK(w.at(0, 1) == -2.0);

  Tensor s = Tensor::matrix(1, 1, {0.3});
  s.set_requires_grad(true);
  ParameterList one;
  one.add("s", s);
  AdamState st;
  sum_all(scale(s, -4.0)).backward();  // g = -4
  REQUIRE(optimizer_step(one, st, cfg, 1e-2));
  // m/bc1 = g, sqrt(v/bc2) = |g|: step = lr * g / (|g| + eps)
  CHECK(s.item() == Catch::Approx(0.3 + 1e-2 * 4.0 / (4.0 + cfg.adam_eps)).epsilon(1e-14));
  CHECK(s.item() - 0.3 < 1e-2);

  cfg.weight_decay = 0.1;
  Tensor d = Tensor::matrix(1, 2, {2.0, -3.0});
  d.set_requires_grad(true);
  ParameterList dp;
  dp.add("d", d);
  AdamState ds;
  sum_all(scale(d, 0.0)).backward();
  REQUIRE(optimizer_step(dp, ds, cfg, 0.5));
  CHECK(d.at(0, 0) == Catch::Approx(2.0 * (1 - 0.5 * 0.1)).epsilon(1e-15));
  CHECK(d.at(0, 1) == Catch::Approx(-3.0 * (1 - 0.5 * 0.1)).epsilon(1e-15));
}

TEST_CASE("optimizer: non-finite gradients abort the step; untouched sparse rows stay") {
  PretrainConfig cfg;
  Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4});
  w.set_requires_grad(true);
  ParameterList params;
  params.add("table", w, true, true);
  AdamState state;
  const std::vector<int> ids{1};
  sum_all(gather_rows(w, ids)).backward();
  REQUIRE(optimizer_step(params, state, cfg, 1e-2));
  CHECK(w.at(0, 0) == 1.0);
  CHECK(w.at(0, 1) == 2.0);
  CHECK(w.at(1, 0) != 3.0);

  w.grad()[0] = std::nan("");
  const double before = w.at(1, 1);
  CHECK_FALSE(optimizer_step(params, state, cfg, 1e-2));
  CHECK(w.at(1, 1) == before);
}

TEST_CASE("lr schedule endpoints") {
  PretrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 100;
  cfg.total_steps = 2000;
  CHECK(lr_schedule(0, cfg) == 0.0);
  CHECK(lr_schedule(50, cfg) == Catch::Approx(5e-4));
  CHECK(lr_schedule(100, cfg) == 1e-3);
  CHECK(std::abs(lr_schedule(2000, cfg)) < 1e-12);
  CHECK(lr_schedule(1050, cfg) == Catch::Approx(5e-4));
  for (int s = 101; s < 2000; ++s) CHECK(lr_schedule(s, cfg) <= lr_schedule(s - 1, cfg));
  CHECK_THROWS_AS(lr_schedule(-1, cfg), ValidationError);
}

TEST_CASE("gradient clipping") {
  Tensor a = Tensor::matrix(1, 2, {0, 0});
  a.set_requires_grad(true);
  ParameterList params;
  params.add("a", a);
  sum_all(mul(a, Tensor::matrix(1, 2, {6, 8}))).backward();  // norm 10
  CHECK(clip_gradients(params, 20.0) == 10.0);
  CHECK(a.grad()[0] == 6.0);
  CHECK(clip_gradients(params, 5.0) == 10.0);
  CHECK(a.grad()[0] == 3.0);
  CHECK(a.grad()[1] == 4.0);

  Rng rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x({1, 7}), y({3, 2});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    ParameterList ps;
    ps.add("x", x);
    ps.add("y", y);
    Tensor rx({1, 7}), ry({3, 2});
    for (double& v : rx.data()) v = rng.normal(0, 3);
    for (double& v : ry.data()) v = rng.normal(0, 3);
    add(sum_all(mul(x, rx)), sum_all(mul(y, ry))).backward();
    const double t = rng.uniform(0.5, 15);
    const double before = clip_gradients(ps, t);
    double sq = 0;
    for (double g : x.grad()) sq += g * g;
    for (double g : y.grad()) sq += g * g;
    CHECK(std::abs(std::sqrt(sq) - std::min(before, t)) < 1e-12);
  }
}

TEST_CASE("pretrain: lr 0 leaves the model unchanged") {
  const auto& data = tiny_corpus();
  auto model = Backbone::create(tiny_model(BackboneKind::multimodal), 8);
  const auto before = snapshot(model);
  PretrainConfig cfg;
  cfg.lr = 0.0;
  cfg.total_steps = 1;
  cfg.batch_size = 4;
  const auto res = pretrain(model, data.train, cfg);
  REQUIRE(res.log.size() == 1);
  CHECK(std::isfinite(res.log[0].l_total));
  CHECK(snapshot(model) == before);
  auto again = Backbone::create(tiny_model(BackboneKind::multimodal), 8);
  CHECK(pretrain(again, data.train, cfg).log[0].l_total == res.log[0].l_total);
}

TEST_CASE("pretrain: 300 steps on 64 sequences lower L_dtc; runs are bit-reproducible") {
  const auto& data = tiny_corpus();
  REQUIRE(data.train.size() == 64);
  for (auto kind : {BackboneKind::multimodal, BackboneKind::unimodal}) {
    PretrainConfig cfg;
    cfg.total_steps = 300;
    cfg.warmup_steps = 20;
    cfg.lr = 3e-3;
    cfg.batch_size = 8;
    cfg.seed = 4;
    auto a = Backbone::create(tiny_model(kind), 9);
    const double start = evaluate_mlm(a, data.train, cfg, 77).l_dtc;
    const auto ra = pretrain(a, data.train, cfg);
    CHECK_FALSE(ra.diverged);
    CHECK(evaluate_mlm(a, data.train, cfg, 77).l_dtc < start);
    if (kind == BackboneKind::unimodal) {
      for (const auto& row : ra.log) CHECK(row.l_value == 0.0);
    }

    cfg.total_steps = 30;
    auto b = Backbone::create(tiny_model(kind), 9), c = Backbone::create(tiny_model(kind), 9);
    const auto rb = pretrain(b, data.train, cfg), rc = pretrain(c, data.train, cfg);
    CHECK(snapshot(b) == snapshot(c));
    for (std::size_t i = 0; i < rb.log.size(); ++i) CHECK(rb.log[i].l_total == rc.log[i].l_total);
  }
}

TEST_CASE("pretrain config validation") {
  PretrainConfig cfg;
  cfg.mask_rate = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = PretrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  const auto full = PretrainConfig::full_scale_preset();
  CHECK(full.lr == 1e-4);
  CHECK(full.warmup_steps == 2000);
  CHECK(full.batch_size == 32);
}
