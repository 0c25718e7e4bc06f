// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/gradcheck.hpp"

#include <chrono>
#include <functional>

#include "json.hpp"

#include "vdiag/classifier.hpp"
#include "vdiag/pretrain.hpp"

namespace vdiag {

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

// sum(R * y) for a fixed random R of y's shape.
Tensor project(const Tensor& y, const Tensor& r) { return sum_all(mul(y, r)); }

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(mix_seed(seed, fnv1a("grad-check"))) {}

  // Checks f(inputs) directly; f must return a scalar.
  void scalar(const std::string& name, double tol, std::vector<Tensor> inputs,
              std::function<Tensor()> f) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckCase c;
    c.name = name;
    c.tolerance = tol;
    for (const auto& x : inputs) c.coordinates += x.size();
    c.max_rel_error = grad_check(f, inputs);
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.cases.push_back(std::move(c));
  }

  // Checks a tensor-valued op through a random projection of its output.
  void projected(const std::string& name, double tol, std::vector<Tensor> inputs,
                 std::function<Tensor()> op) {
    Tensor r;
    {
      NoGradGuard no_grad;
      const Tensor y = op();
      r = random_matrix(y.rows(), y.cols(), rng_);
    }
    scalar(name, tol, std::move(inputs), [op, r] { return project(op(), r); });
  }

  Rng& rng() { return rng_; }
  GradCheckReport report;

 private:
  Rng rng_;
};

void elementwise_ops(Suite& s) {
  auto& rng = s.rng();
  const Tensor a = random_matrix(4, 5, rng), b = random_matrix(4, 5, rng);
  const Tensor row = random_matrix(1, 5, rng);
  s.projected("add", kTightTolerance, {a, b}, [=] { return add(a, b); });
  s.projected("sub", kTightTolerance, {a, b}, [=] { return sub(a, b); });
  s.projected("mul", kTightTolerance, {a, b}, [=] { return mul(a, b); });
  s.projected("scale", kTightTolerance, {a}, [=] { return scale(a, -1.7); });
  s.projected("add_row", kTightTolerance, {a, row}, [=] { return add_row(a, row); });
  s.projected("gelu", kTightTolerance, {a}, [=] { return gelu(a); });
  s.scalar("sum_all", kTightTolerance, {a}, [=] { return sum_all(mul(a, a)); });
  s.scalar("mean_all", kTightTolerance, {a}, [=] { return mean_all(mul(a, a)); });
}

void structural_ops(Suite& s) {
  auto& rng = s.rng();
  const Tensor a = random_matrix(4, 5, rng), b = random_matrix(5, 3, rng);
  const Tensor c = random_matrix(4, 2, rng), e = random_matrix(2, 5, rng);
  s.projected("matmul", kTightTolerance, {a, b}, [=] { return matmul(a, b); });
  s.projected("transpose", kTightTolerance, {a}, [=] { return transpose(a); });
  s.projected("concat_cols", kTightTolerance, {a, c}, [=] { return concat_cols({a, c}); });
  s.projected("slice_cols", kTightTolerance, {a}, [=] { return slice_cols(a, 1, 3); });
  s.projected("concat_rows", kTightTolerance, {a, e}, [=] { return concat_rows({a, e}); });
  s.projected("slice_rows", kTightTolerance, {a}, [=] { return slice_rows(a, 1, 2); });
  const Tensor table = random_matrix(6, 3, rng);
  const std::vector<int> ids{0, 4, 4, 2, 0};  // repeats accumulate
  s.projected("gather_rows", kTightTolerance, {table}, [=] { return gather_rows(table, ids); });
}

void attention_ops(Suite& s) {
  auto& rng = s.rng();
  const Tensor x = random_matrix(6, 7, rng);
  s.projected("softmax_rows", kTightTolerance, {x}, [=] { return softmax_rows(x); });
  s.projected("softmax_rows_padded", kTightTolerance, {x}, [=] { return softmax_rows(x, 4); });
  const Tensor z = random_matrix(6, 7, rng, 2.0);
  s.projected("entmax15_rows", kLooseTolerance, {z}, [=] { return entmax15_rows(z); });
  s.projected("entmax15_rows_padded", kLooseTolerance, {z}, [=] { return entmax15_rows(z, 5); });

  const Tensor h = random_matrix(5, 6, rng);
  Tensor gain = random_matrix(1, 6, rng), bias = random_matrix(1, 6, rng);
  gain = Tensor({6}, std::vector<double>(gain.data().begin(), gain.data().end()));
  bias = Tensor({6}, std::vector<double>(bias.data().begin(), bias.data().end()));
  s.projected("rms_norm", kTightTolerance, {h, gain}, [=] { return rms_norm(h, gain); });
  s.projected("layer_norm", kTightTolerance, {h, gain, bias},
              [=] { return layer_norm(h, gain, bias); });
  const std::vector<int> positions{0, 3, 1, 17, 5};
  s.projected("rope", kTightTolerance, {h}, [=] { return rope(h, positions, 100.0); });
}

void loss_ops(Suite& s) {
  auto& rng = s.rng();
  const Tensor logits = random_matrix(5, 7, rng);
  const std::vector<int> targets{3, 0, 6, 2, 2};
  const std::vector<std::size_t> positions{0, 2, 3};
  s.scalar("cross_entropy_masked", kTightTolerance, {logits},
           [=] { return cross_entropy_masked(logits, targets, positions); });
  s.scalar("cross_entropy_masked_normalized", kTightTolerance, {logits},
           [=] { return cross_entropy_masked(logits, targets, positions, 7.0); });
  const Tensor scores = random_matrix(4, 6, rng, 2.0);
  Tensor labels({4, 6});
  for (double& v : labels.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  s.scalar("bce_multilabel", kTightTolerance, {scores},
           [=] { return bce_multilabel(scores, labels); });
}

std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params.items()) out.push_back(p.value);
  return out;
}

void module_cases(Suite& s) {
  auto& rng = s.rng();

  EmbeddingConfig ecfg;
  ecfg.d = 8;
  ecfg.n_ecu = 3;
  ecfg.n_base = 10;
  ecfg.n_desc = 6;
  ecfg.n_value = 12;
  ecfg.n_units = 4;
  const PositionalConfig pos;
  {
    const auto dtc = DtcEmbeddingTables::create(ecfg, rng);
    ParameterList p;
    dtc.collect(p);
    const std::vector<int> ecu{0, 2, 2, 3}, base{1, 9, 11, 1}, fault{0, 1, 1, 0};
    const std::vector<double> times{0.0, 0.5, 3.0, 40.0}, km{0.0, 0.2, 1.0, 12.0};
    s.projected("embed_dtc", kLooseTolerance, tensors_of(p),
                [=] { return fuse_dtc_input(ecu, base, fault, times, km, dtc, pos); });
  }
  for (const auto fusion : {EnvFusion::concat, EnvFusion::sum}) {
    auto cfg = ecfg;
    cfg.env_fusion = fusion;
    const auto env = EnvEmbeddingTables::create(cfg, rng);
    ParameterList p;
    env.collect(p);
    const std::vector<int> desc{0, 5, 5, 7}, value{2, 13, 0, 2}, unit{0, 3, 4, 0};
    s.projected(fusion == EnvFusion::concat ? "embed_env_concat" : "embed_env_sum",
                kLooseTolerance, tensors_of(p),
                [=] { return embed_env(desc, value, unit, env); });
  }

  EncoderConfig enc;
  enc.d = 8;
  enc.heads = 2;
  enc.layers = 2;
  for (const auto alignment : {Alignment::softmax, Alignment::entmax15}) {
    auto cfg = enc;
    cfg.alignment = alignment;
    cfg.theta0_dtc = 50.0;
    cfg.theta0_env = 80.0;
    const auto w = AttentionWeights::create(cfg.d, rng);
    ParameterList p;
    w.collect(p, "w");
    const Tensor q = random_matrix(3, 8, rng), kv = random_matrix(5, 8, rng);
    auto inputs = tensors_of(p);
    inputs.push_back(q);
    inputs.push_back(kv);
    s.projected(alignment == Alignment::softmax ? "attention_softmax" : "attention_entmax15",
                kLooseTolerance, inputs, [=] {
                  auto kv_in = StreamInput::of(kv, cfg.theta0_env);
                  kv_in.valid = 4;  // last key row is padding
                  return cross_attention(StreamInput::of(q, cfg.theta0_dtc), kv_in, w, cfg)
                      .context;
                });
  }
  for (const bool self_sublayer : {false, true}) {
    auto cfg = enc;
    cfg.self_attn_sublayer = self_sublayer;
    const auto stack = CoAttentionStack::create(cfg, rng);
    ParameterList p;
    stack.collect(p);
    const Tensor xd = random_matrix(7, 8, rng), xe = random_matrix(21, 8, rng);
    const Tensor rd = random_matrix(7, 8, rng), re = random_matrix(21, 8, rng);
    auto inputs = tensors_of(p);
    inputs.push_back(xd);
    inputs.push_back(xe);
    s.scalar(self_sublayer ? "coattention_stack_self_sublayer" : "coattention_stack",
             kLooseTolerance, inputs, [=] {
               const auto out = encode(StreamInput::of(xd, cfg.theta0_dtc),
                                       StreamInput::of(xe, cfg.theta0_env), stack);
               return add(project(out.h_dtc, rd), project(out.h_env, re));
             });
  }
  {
    const auto stack = UnimodalStack::create(enc, rng);
    ParameterList p;
    stack.collect(p);
    const Tensor x = random_matrix(7, 8, rng);
    auto inputs = tensors_of(p);
    inputs.push_back(x);
    s.projected("unimodal_stack", kLooseTolerance, inputs,
                [=] { return encode_unimodal(StreamInput::of(x, 0.0), stack).h; });
  }

  // Full pretraining objective of both backbones, every parameter.
  TokenizedPair pair;
  const std::size_t L = 6, Le = 20;
  for (std::size_t i = 0; i < L; ++i) {
    pair.ecu.push_back(static_cast<int>(rng.below(3)));
    pair.base.push_back(static_cast<int>(rng.below(10)));
    pair.fault.push_back(static_cast<int>(rng.below(2)));
    pair.times.push_back(i == 0 ? 0.0 : pair.times.back() + rng.uniform(0.0, 30.0));
    pair.mileages.push_back(i == 0 ? 0.0 : pair.mileages.back() + rng.uniform(0.0, 10.0));
  }
  for (std::size_t n = 0; n < Le; ++n) {
    pair.desc.push_back(static_cast<int>(rng.below(6)));
    pair.value.push_back(static_cast<int>(rng.below(12)));
    pair.unit.push_back(static_cast<int>(rng.below(4)));
    pair.env_origin.push_back(static_cast<int>(n * L / Le));
    pair.raw_units.push_back(pair.unit.back());
  }
  PretrainConfig pcfg;
  pcfg.mask_rate = 0.35;
  for (const auto kind : {BackboneKind::multimodal, BackboneKind::unimodal}) {
    ModelConfig mcfg;
    mcfg.kind = kind;
    mcfg.encoder = enc;
    mcfg.embedding = ecfg;
    const auto model = Backbone::create(mcfg, rng.below(1u << 30));
    MaskPlan plan;
    do {
      plan = make_mask_plan(pair, ecfg, pcfg, rng);
    } while (plan.dtc_rows.empty() || plan.env_rows.empty());
    Tensor r;
    {
      NoGradGuard no_grad;
      r = random_matrix(1, static_cast<std::size_t>(model.feature_width()), rng);
    }
    const bool multi = kind == BackboneKind::multimodal;
    s.scalar(multi ? "multimodal_model" : "unimodal_model", kLooseTolerance,
             tensors_of(model.parameters()), [=] {
               const auto out = model.forward(pair, false, &plan.masked_base,
                                              multi ? &plan.masked_desc : nullptr,
                                              multi ? &plan.masked_value : nullptr);
               const auto loss = joint_loss(model, out, plan, pcfg);
               return add(loss.total, project(model.cls_features(out), r));
             });
  }

  {
    const auto head = ClassifierHead::create(6, 8, 4, 2, rng);
    const Tensor x = random_matrix(5, 6, rng);
    Tensor y({5, 4});
    for (double& v : y.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    auto inputs = tensors_of(head.parameters());
    inputs.push_back(x);
    s.scalar("classifier_head", kLooseTolerance, inputs,
             [=] { return bce_multilabel(head.logits(x), y); });
  }
}

}  // namespace

bool GradCheckReport::passed() const {
  for (const auto& c : cases)
    if (!c.passed()) return false;
  return !cases.empty();
}

std::string GradCheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["passed"] = passed();
  j["seconds"] = seconds;
  auto& arr = j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : cases)
    arr.push_back({{"name", c.name},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"coordinates", c.coordinates},
                   {"passed", c.passed()},
                   {"seconds", c.seconds}});
  return j.dump(2) + "\n";
}

GradCheckReport run_grad_check_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  Suite s(seed);
  elementwise_ops(s);
  structural_ops(s);
  attention_ops(s);
  loss_ops(s);
  module_cases(s);
  s.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s.report;
}

}  // namespace vdiag
