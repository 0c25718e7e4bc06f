// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/quantile.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "vdiag/common.hpp"

namespace vdiag {

namespace {

// Band of a delta value relative to p = floor(2 eps n). Band 0 holds
// delta == p; larger bands hold older tuples with smaller delta.
int band(std::size_t delta, std::size_t p) {
  if (delta == p) return 0;
  const long long pp = static_cast<long long>(p);
  const long long d = static_cast<long long>(delta);
  for (int alpha = 1; alpha < 63; ++alpha) {
    const long long two_a = 1LL << alpha;
    const long long two_a1 = 1LL << (alpha - 1);
    const long long lo = pp - two_a - (pp % two_a);
    const long long hi = pp - two_a1 - (pp % two_a1);
    if (lo < d && d <= hi) return alpha;
  }
  return 63;
}

}  // namespace

GkSketch::GkSketch(double epsilon) : epsilon_(epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0))
    throw ValidationError("GkSketch: epsilon must be in (0,1)");
  compress_period_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(1.0 / (2.0 * epsilon))));
}

void GkSketch::insert(double value) {
  if (!std::isfinite(value)) throw ValidationError("GkSketch: non-finite value rejected");
  ++count_;
  auto it = std::upper_bound(summary_.begin(), summary_.end(), value,
                             [](double v, const Tuple& t) { return v < t.value; });
  std::size_t delta = 0;
  if (it != summary_.begin() && it != summary_.end()) {
    const auto p = static_cast<std::size_t>(std::floor(2.0 * epsilon_ * static_cast<double>(count_)));
    delta = p > 0 ? p - 1 : 0;
  }
  summary_.insert(it, Tuple{value, 1, delta});
  if (count_ % compress_period_ == 0) compress();
}

void GkSketch::compress() {
  if (summary_.size() < 3) return;
  const auto p = static_cast<std::size_t>(std::floor(2.0 * epsilon_ * static_cast<double>(count_)));
  // i never reaches 0 so the minimum survives; i + 1 <= s - 1 keeps the maximum.
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(summary_.size()) - 2; i >= 1; --i) {
    const auto ui = static_cast<std::size_t>(i);
    const int band_i = band(summary_[ui].delta, p);
    if (band_i > band(summary_[ui + 1].delta, p)) continue;
    std::size_t start = ui;
    while (start >= 2 && band(summary_[start - 1].delta, p) < band_i) --start;
    std::size_t g_star = 0;
    for (std::size_t k = start; k <= ui; ++k) g_star += summary_[k].g;
    if (g_star + summary_[ui + 1].g + summary_[ui + 1].delta <= p) {
      summary_[ui + 1].g += g_star;
      summary_.erase(summary_.begin() + static_cast<std::ptrdiff_t>(start),
                     summary_.begin() + static_cast<std::ptrdiff_t>(ui + 1));
      i = static_cast<std::ptrdiff_t>(start);
    }
  }
}

double GkSketch::query(double phi) const {
  if (count_ == 0) throw ValidationError("GkSketch: query on empty sketch");
  phi = std::clamp(phi, 0.0, 1.0);
  const double n = static_cast<double>(count_);
  const double rank = std::clamp(std::ceil(phi * n), 1.0, n);
  double best_err = INFINITY;
  double best = summary_.front().value;
  double rmin = 0.0;
  for (const auto& t : summary_) {
    rmin += static_cast<double>(t.g);
    const double rmax = rmin + static_cast<double>(t.delta);
    const double err = std::max(rank - rmin, rmax - rank);
    if (err < best_err) {
      best_err = err;
      best = t.value;
    }
  }
  return best;
}

std::string category_literal(const EnvValue& value) {
  if (const auto* b = std::get_if<bool>(&value)) return *b ? "true" : "false";
  if (const auto* s = std::get_if<std::string>(&value)) return *s;
  return {};
}

ValueVocab::ValueVocab(std::map<int, UnitBins> units, int theta)
    : units_(std::move(units)), theta_(theta) {
  int next = 0;
  for (auto& [unit, bins] : units_) {
    for (std::size_t k = 1; k < bins.edges.size(); ++k)
      if (!(bins.edges[k - 1] < bins.edges[k]))
        throw ValidationError("ValueVocab: edges of unit " + std::to_string(unit) +
                              " are not strictly increasing");
    if (theta_ > 0 && bins.bin_count() > theta_)
      throw ValidationError("ValueVocab: unit " + std::to_string(unit) + " exceeds theta bins");
    bins.base_token = next;
    next += bins.token_count();
  }
  total_tokens_ = next;
}

int ValueVocab::value_to_token(int unit, double value) const {
  auto it = units_.find(unit);
  if (it == units_.end()) return unknown_token();
  const auto& edges = it->second.edges;
  // number of edges <= value is the half-open bin index
  const auto bin = std::upper_bound(edges.begin(), edges.end(), value) - edges.begin();
  return it->second.base_token + static_cast<int>(bin);
}

int ValueVocab::token(int unit, const EnvValue& value) const {
  if (const auto* d = std::get_if<double>(&value)) return value_to_token(unit, *d);
  auto it = units_.find(unit);
  if (it == units_.end() || std::holds_alternative<std::monostate>(value)) return unknown_token();
  const auto& cats = it->second.categories;
  const auto lit = category_literal(value);
  auto pos = std::lower_bound(cats.begin(), cats.end(), lit);
  if (pos == cats.end() || *pos != lit) return unknown_token();
  return it->second.base_token + it->second.bin_count() + static_cast<int>(pos - cats.begin());
}

UnitSet ValueVocab::retained_units() const {
  UnitSet out;
  for (const auto& [unit, bins] : units_) out.insert(unit);
  return out;
}

std::string ValueVocab::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [unit, bins] : units_) {
    nlohmann::ordered_json u;
    u["edges"] = bins.edges;
    u["base_token"] = bins.base_token;
    u["categories"] = bins.categories;
    j[std::to_string(unit)] = std::move(u);
  }
  return j.dump(1);
}

ValueVocab ValueVocab::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("vocab: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("vocab: top level must be an object");
  std::map<int, UnitBins> units;
  for (auto it = j.begin(); it != j.end(); ++it) {
    int unit = 0;
    try {
      unit = std::stoi(it.key());
    } catch (const std::exception&) {
      throw ValidationError("vocab: unit key '" + it.key() + "' is not an integer");
    }
    UnitBins bins;
    for (auto f = it->begin(); f != it->end(); ++f) {
      if (f.key() == "edges")
        bins.edges = f->get<std::vector<double>>();
      else if (f.key() == "categories")
        bins.categories = f->get<std::vector<std::string>>();
      else if (f.key() != "base_token")
        throw ValidationError("vocab: unknown field '" + f.key() + "'");
    }
    units[unit] = std::move(bins);
  }
  ValueVocab vocab(std::move(units), 0);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const int unit = std::stoi(it.key());
    if (it->contains("base_token") &&
        (*it)["base_token"].get<int>() != vocab.units_.at(unit).base_token)
      throw ValidationError("vocab: base_token of unit " + it.key() + " is inconsistent");
  }
  return vocab;
}

ValueVocab fit_bins(const std::map<int, UnitStream>& streams, double epsilon, int theta) {
  if (theta < 1) throw ValidationError("fit_bins: theta must be >= 1");
  std::map<int, ValueVocab::UnitBins> units;
  for (const auto& [unit, stream] : streams) {
    ValueVocab::UnitBins bins;
    if (!stream.numbers.empty()) {
      GkSketch sketch(epsilon);
      for (double v : stream.numbers) sketch.insert(v);
      const double lowest = sketch.query(0.0);
      for (int k = 1; k < theta; ++k) {
        const double edge = sketch.query(static_cast<double>(k) / theta);
        if (edge <= lowest) continue;
        if (!bins.edges.empty() && edge <= bins.edges.back()) continue;
        bins.edges.push_back(edge);
      }
    }
    std::set<std::string> cats(stream.categories.begin(), stream.categories.end());
    bins.categories.assign(cats.begin(), cats.end());
    units[unit] = std::move(bins);
  }
  return ValueVocab(std::move(units), theta);
}

std::map<int, UnitStream> collect_unit_streams(const std::vector<ModalityPair>& pairs,
                                               const UnitSet& retained_units) {
  std::map<int, UnitStream> streams;
  for (int u : retained_units) streams[u];
  for (const auto& pair : pairs) {
    for (const auto& t : pair.env) {
      auto it = streams.find(t.unit);
      if (it == streams.end()) continue;
      if (const auto* d = std::get_if<double>(&t.value))
        it->second.numbers.push_back(*d);
      else if (!std::holds_alternative<std::monostate>(t.value))
        it->second.categories.push_back(category_literal(t.value));
    }
  }
  return streams;
}

}  // namespace vdiag
