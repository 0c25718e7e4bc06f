// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <set>

#include "vdiag/common.hpp"
#include "vdiag/synth.hpp"

using namespace vdiag;

namespace {

GeneratorConfig small(std::uint64_t seed) {
  GeneratorConfig g;
  g.seed = seed;
  g.n_train = 300;
  g.dtc_length_mean = 16;
  g.dtc_length_sd = 5;
  g.env_ratio_mean = 4;
  g.env_ratio_sd = 1.5;
  return g;
}

std::string dump(const std::vector<CorpusRecord>& records) {
  std::string out;
  for (const auto& r : records) out += record_to_json_line(r) + "\n";
  return out;
}

// Squared presence-rate differences of every base code between carriers
// and non-carriers of a label.
double dependence(const std::vector<std::set<int>>& codes, const std::vector<int>& label, int n_codes) {
  std::vector<double> on(static_cast<std::size_t>(n_codes)), off(static_cast<std::size_t>(n_codes));
  double n_on = 0, n_off = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    auto& bucket = label[i] ? on : off;
    (label[i] ? n_on : n_off) += 1;
    for (int c : codes[i]) bucket[static_cast<std::size_t>(c)] += 1;
  }
  double stat = 0;
  for (std::size_t c = 0; c < on.size(); ++c) {
    const double d = on[c] / std::max(n_on, 1.0) - off[c] / std::max(n_off, 1.0);
    stat += d * d;
  }
  return stat;
}

}  // namespace

TEST_CASE("rule replay reproduces every label at noise 0") {
  auto g = small(1);
  g.noise_rate = 0.0;
  const auto corpus = generate(g);
  std::size_t positives = 0;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test})
    for (const auto& r : *split) {
      CHECK(replay_labels(r.sequence, corpus.rules) == r.labels);
      positives += r.labels.size();
    }
  CHECK(positives > 0);
  for (const auto& r : corpus.rules) CHECK(r.noise_rate == 0.0);
}

TEST_CASE("every dtc_pattern carrier is labeled at noise 0") {
  auto g = small(2);
  g.noise_rate = 0.0;
  const auto corpus = generate(g);
  for (const auto& rule : corpus.rules) {
    if (rule.kind != RuleKind::dtc_pattern) continue;
    for (const auto& r : corpus.train) {
      const auto pair = preprocess(r.sequence, UnitSet{});
      bool all = true;
      for (int c : rule.codes) {
        bool found = false;
        for (const auto& e : pair.dtc) found = found || e.base == c;
        all = all && found;
      }
      const bool labeled = std::find(r.labels.begin(), r.labels.end(), rule.label) != r.labels.end();
      CHECK(all == labeled);
    }
  }
}

TEST_CASE("same seed gives byte-identical corpora; another seed does not") {
  const auto a = generate(small(3)), b = generate(small(3)), c = generate(small(4));
  CHECK(dump(a.train) == dump(b.train));
  CHECK(dump(a.val) == dump(b.val));
  CHECK(dump(a.test) == dump(b.test));
  CHECK(manifest_json(a.rules) == manifest_json(b.rules));
  CHECK(dump(a.train) != dump(c.train));
  CHECK(a.train.size() == 300);
}

TEST_CASE("split buckets follow the 70/15/15 layout and are stable") {
  std::size_t counts[3] = {0, 0, 0};
  for (int i = 0; i < 20000; ++i) ++counts[split_of("veh-" + std::to_string(i))];
  CHECK(counts[0] / 20000.0 == Catch::Approx(0.70).margin(0.02));
  CHECK(counts[1] / 20000.0 == Catch::Approx(0.15).margin(0.02));
  CHECK(counts[2] / 20000.0 == Catch::Approx(0.15).margin(0.02));
  CHECK(split_of("veh-7") == split_of("veh-7"));
}

TEST_CASE("env-only labels are independent of the DTC codes (permutation test)") {
  auto g = small(5);
  g.n_train = 600;
  const auto corpus = generate(g);
  std::vector<std::set<int>> codes;
  for (const auto& r : corpus.train) {
    std::set<int> s;
    for (const auto& e : preprocess(r.sequence, UnitSet{}).dtc) s.insert(e.base);
    codes.push_back(std::move(s));
  }
  Rng rng(9);
  for (const auto& rule : corpus.rules) {
    if (rule.kind != RuleKind::env_threshold) continue;
    std::vector<int> label;
    for (const auto& r : corpus.train)
      label.push_back(std::find(r.labels.begin(), r.labels.end(), rule.label) != r.labels.end());
    const double observed = dependence(codes, label, g.n_base);
    int as_extreme = 0;
    const int perms = 300;
    for (int p = 0; p < perms; ++p) {
      rng.shuffle(label);
      as_extreme += dependence(codes, label, g.n_base) >= observed;
    }
    const double pvalue = (as_extreme + 1.0) / (perms + 1.0);
    CAPTURE(rule.label);
    CHECK(pvalue > 0.01);
  }
}

TEST_CASE("the same test catches a DTC-driven label") {
  // sanity check of the statistic: dtc_pattern labels must look dependent
  auto g = small(5);
  g.n_train = 600;
  const auto corpus = generate(g);
  std::vector<std::set<int>> codes;
  for (const auto& r : corpus.train) {
    std::set<int> s;
    for (const auto& e : preprocess(r.sequence, UnitSet{}).dtc) s.insert(e.base);
    codes.push_back(std::move(s));
  }
  const auto rule = *std::find_if(corpus.rules.begin(), corpus.rules.end(),
                                  [](const auto& r) { return r.kind == RuleKind::dtc_pattern; });
  std::vector<int> label;
  for (const auto& r : corpus.train)
    label.push_back(std::find(r.labels.begin(), r.labels.end(), rule.label) != r.labels.end());
  const double observed = dependence(codes, label, g.n_base);
  Rng rng(10);
  int as_extreme = 0;
  for (int p = 0; p < 300; ++p) {
    rng.shuffle(label);
    as_extreme += dependence(codes, label, g.n_base) >= observed;
  }
  CHECK(as_extreme == 0);
}

TEST_CASE("rule manifest round-trips and names the required modality") {
  const auto corpus = generate(small(6));
  const auto text = manifest_json(corpus.rules);
  const auto back = rules_from_manifest(text);
  REQUIRE(back.size() == corpus.rules.size());
  std::set<std::string> kinds;
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& a = corpus.rules[i];
    const auto& b = back[i];
    CHECK(a.label == b.label);
    CHECK(a.kind == b.kind);
    CHECK(a.codes == b.codes);
    CHECK(a.noise_rate == b.noise_rate);
    if (a.kind != RuleKind::dtc_pattern) {
      CHECK(a.unit == b.unit);
      CHECK(a.threshold == b.threshold);
      CHECK(a.min_count == b.min_count);
    }
    kinds.insert(b.modality_required());
  }
  CHECK(kinds == std::set<std::string>{"dtc", "env", "both"});
  CHECK(manifest_json(back) == text);
  CHECK_THROWS_AS(rules_from_manifest("[]"), ValidationError);
  CHECK_THROWS_AS(rules_from_manifest(R"({"0": {"kind": "bogus", "params": {}}})"), ValidationError);
}

TEST_CASE("generated sequences respect the configured shape") {
  const auto g = small(7);
  const auto corpus = generate(g);
  std::size_t shared_time = 0, outside = 0;
  for (const auto& r : corpus.train) {
    const auto& ev = r.sequence.events;
    for (std::size_t i = 1; i < ev.size(); ++i) {
      CHECK(ev[i - 1].dtc.timestamp <= ev[i].dtc.timestamp);
      shared_time += ev[i - 1].dtc.timestamp == ev[i].dtc.timestamp;
    }
    const auto pair = preprocess(r.sequence, UnitSet{});
    CHECK(pair.dtc.size() >= static_cast<std::size_t>(g.dtc_length_min));
    outside += ev.size() - pair.dtc.size();
    for (const auto& e : ev) {
      CHECK(e.dtc.base >= 0);
      CHECK(e.dtc.base < g.n_base);
      CHECK(e.dtc.ecu < g.n_ecu);
    }
  }
  CHECK(shared_time > 0);  // bursts produce simultaneous events
  CHECK(outside > 0);      // some events fall outside the window

  auto bad = g;
  bad.n_ecu = 1;
  CHECK_THROWS_AS(generate(bad), ValidationError);
}
