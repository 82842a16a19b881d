// Copyright 2026 The capdetect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "capdetect/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "capdetect/errors.hpp"

namespace capdetect::eval {
namespace {

using nlohmann::json;
constexpr std::size_t kChunk = 64;

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

void push_unique(std::vector<std::string>& v, const std::string& s) {
  if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
}

}  // namespace

void ConfusionCounts::add(int truth, model::Verdict predicted) {
  const bool fake = truth == 1;
  if (predicted == model::Verdict::kAbstain) {
    (fake ? fn : fp) += 1;
    return;
  }
  const bool said_fake = predicted == model::Verdict::kFake;
  if (fake) {
    (said_fake ? tp : fn) += 1;
  } else {
    (said_fake ? fp : tn) += 1;
  }
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw EmptyEvaluationError("accuracy over zero samples");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

F1 f1(const ConfusionCounts& c) {
  if (c.total() == 0) throw EmptyEvaluationError("f1 over zero samples");
  if (c.tp == 0) return {0.0, c.fp == 0 && c.fn == 0};
  const double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return {2.0 * p * r / (p + r), false};
}

Subset load_subset(const synth::Manifest& manifest, const std::string& family, const std::string& split) {
  const auto records = manifest.select(split, family);
  const bool has_family = std::any_of(records.begin(), records.end(), [&](auto* r) { return r->family == family; });
  if (!has_family) throw ConfigError("family '" + family + "' has no " + split + " records in the manifest");
  Subset s;
  s.images = synth::load_images(manifest, records);
  for (const auto* r : records) s.truths.push_back(r->label);
  return s;
}

Subset degrade_subset(const Subset& s, const degrade::DegradeSpec& spec) {
  spec.validate();
  if (spec.kind == degrade::Kind::kNone) return s;
  Subset out;
  out.truths = s.truths;
  out.images.resize(s.images.size());
  const auto n = static_cast<std::ptrdiff_t>(s.images.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out.images[static_cast<std::size_t>(i)] = degrade::apply(s.images[static_cast<std::size_t>(i)], spec);
  }
  return out;
}

SubsetResult eval_images(const model::CaptionModel& m, const Subset& subset) {
  SubsetResult res;
  for (std::size_t b = 0; b < subset.images.size(); b += kChunk) {
    const std::size_t e = std::min(subset.images.size(), b + kChunk);
    std::vector<const Image*> ptrs;
    for (std::size_t i = b; i < e; ++i) ptrs.push_back(&subset.images[i]);
    for (const auto& c : m.generate_captions(ptrs, m.config().max_caption_len)) {
      res.predictions.push_back(model::caption_to_label(c));
    }
  }
  res.truths = subset.truths;
  for (std::size_t i = 0; i < res.truths.size(); ++i) res.counts.add(res.truths[i], res.predictions[i]);
  res.acc = accuracy(res.counts);
  res.f1 = f1(res.counts);
  return res;
}

SubsetResult eval_subset(const model::CaptionModel& m, const synth::Manifest& manifest,
                         const std::string& test_family, const degrade::DegradeSpec& spec) {
  auto res = eval_images(m, degrade_subset(load_subset(manifest, test_family), spec));
  res.test_family = test_family;
  res.degrade = spec.name();
  return res;
}

const ReportRow* EvalReport::find(const std::string& train, const std::string& test,
                                  const std::string& degrade) const {
  for (const auto& r : rows) {
    if (r.train_family == train && r.test_family == test && r.degrade == degrade) return &r;
  }
  return nullptr;
}

std::vector<std::string> EvalReport::train_families() const {
  std::vector<std::string> out;
  for (const auto& r : rows) push_unique(out, r.train_family);
  return out;
}

std::vector<std::string> EvalReport::test_families() const {
  std::vector<std::string> out;
  for (const auto& r : rows) push_unique(out, r.test_family);
  return out;
}

std::vector<std::string> EvalReport::degrades() const {
  std::vector<std::string> out;
  for (const auto& r : rows) push_unique(out, r.degrade);
  return out;
}

void compute_averages(EvalReport& report) {
  report.averages.clear();
  for (const auto& d : report.degrades()) {
    for (const auto& t : report.train_families()) {
      double acc = 0.0, f = 0.0;
      std::size_t n = 0;
      for (const auto& r : report.rows) {
        if (r.degrade == d && r.train_family == t) {
          acc += r.acc;
          f += r.f1;
          ++n;
        }
      }
      if (n > 0) report.averages.push_back({t, d, acc / static_cast<double>(n), f / static_cast<double>(n)});
    }
  }
}

EvalReport cross_matrix(const std::vector<NamedModel>& models, const synth::Manifest& manifest,
                        const std::vector<degrade::DegradeSpec>& degrades, std::vector<std::string> test_families) {
  if (models.empty()) throw ContractError("cross_matrix: no checkpoints");
  if (degrades.empty()) throw ContractError("cross_matrix: no degradations");
  if (test_families.empty()) test_families = manifest.eval_families();
  if (test_families.empty()) throw ContractError("cross_matrix: no test families");

  std::map<std::string, Subset> clean;
  for (const auto& f : test_families) clean.emplace(f, load_subset(manifest, f));

  EvalReport report;
  for (const auto& spec : degrades) {
    std::map<std::string, Subset> subsets;
    for (const auto& f : test_families) subsets.emplace(f, degrade_subset(clean.at(f), spec));
    for (const auto& [train_family, model] : models) {
      for (const auto& test_family : test_families) {
        SubsetResult res;
        try {
          res = eval_images(*model, subsets.at(test_family));
        } catch (const Error& e) {
          throw Error("cross_matrix cell (train " + train_family + ", test " + test_family + ", " + spec.name() +
                      "): " + e.what());
        }
        ReportRow row;
        row.train_family = train_family;
        row.test_family = test_family;
        row.degrade = spec.name();
        row.n = res.counts.total();
        row.acc = res.acc;
        row.f1 = res.f1.value;
        row.f1_degenerate = res.f1.degenerate;
        row.counts = res.counts;
        row.truths = std::move(res.truths);
        row.predictions = std::move(res.predictions);
        report.rows.push_back(std::move(row));
      }
    }
  }
  compute_averages(report);
  return report;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "train_family,test_family,degrade,n,acc,f1\n";
  for (const auto& r : report.rows) {
    os << r.train_family << ',' << r.test_family << ',' << r.degrade << ',' << r.n << ',' << pct(r.acc) << ','
       << pct(r.f1) << '\n';
  }
  return os.str();
}

std::string to_markdown(const EvalReport& report) {
  std::ostringstream os;
  const auto tests = report.test_families();
  bool first = true;
  for (const auto& d : report.degrades()) {
    if (!first) os << '\n';
    first = false;
    os << "### Degradation: " << d << "\n\n";
    os << "ACC (%) / F1 (%); rows are training families, columns test families.\n\n";
    os << "| Train \\ Test |";
    for (const auto& t : tests) os << ' ' << t << " |";
    os << " Average |\n|---|";
    for (std::size_t i = 0; i <= tests.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& train : report.train_families()) {
      os << "| " << train << " |";
      for (const auto& t : tests) {
        const auto* r = report.find(train, t, d);
        if (r) {
          os << ' ' << pct(r->acc) << " / " << pct(r->f1) << " |";
        } else {
          os << " - |";
        }
      }
      const auto avg = std::find_if(report.averages.begin(), report.averages.end(),
                                    [&](const AverageRow& a) { return a.train_family == train && a.degrade == d; });
      if (avg != report.averages.end()) {
        os << ' ' << pct(avg->acc) << " / " << pct(avg->f1) << " |\n";
      } else {
        os << " - |\n";
      }
    }
  }
  return os.str();
}

namespace {

// Per-sample columns as compact strings: truths '0'/'1', verdicts 'R'/'F'/'A'.
std::string encode_truths(const std::vector<int>& truths) {
  std::string s;
  for (int t : truths) s += t ? '1' : '0';
  return s;
}

std::vector<int> decode_truths(const std::string& s) {
  std::vector<int> out;
  for (char c : s) {
    if (c != '0' && c != '1') throw ParseError("report: bad truth character");
    out.push_back(c == '1');
  }
  return out;
}

std::string encode_verdicts(const std::vector<model::Verdict>& v) {
  std::string s;
  for (auto p : v) s += p == model::Verdict::kReal ? 'R' : p == model::Verdict::kFake ? 'F' : 'A';
  return s;
}

std::vector<model::Verdict> decode_verdicts(const std::string& s) {
  std::vector<model::Verdict> out;
  for (char c : s) {
    if (c == 'R') {
      out.push_back(model::Verdict::kReal);
    } else if (c == 'F') {
      out.push_back(model::Verdict::kFake);
    } else if (c == 'A') {
      out.push_back(model::Verdict::kAbstain);
    } else {
      throw ParseError("report: bad verdict character");
    }
  }
  return out;
}

}  // namespace

json to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"train_family", r.train_family},
                    {"test_family", r.test_family},
                    {"degrade", r.degrade},
                    {"n", r.n},
                    {"acc", r.acc},
                    {"f1", r.f1},
                    {"f1_degenerate", r.f1_degenerate},
                    {"tp", r.counts.tp},
                    {"fp", r.counts.fp},
                    {"fn", r.counts.fn},
                    {"tn", r.counts.tn},
                    {"truths", encode_truths(r.truths)},
                    {"predictions", encode_verdicts(r.predictions)}});
  }
  json avgs = json::array();
  for (const auto& a : report.averages) {
    avgs.push_back({{"train_family", a.train_family}, {"degrade", a.degrade}, {"acc", a.acc}, {"f1", a.f1}});
  }
  return {{"rows", rows}, {"averages", avgs}, {"metadata", report.metadata}};
}

EvalReport from_json(const json& j) {
  EvalReport report;
  try {
    for (const auto& r : j.at("rows")) {
      ReportRow row;
      row.train_family = r.at("train_family").get<std::string>();
      row.test_family = r.at("test_family").get<std::string>();
      row.degrade = r.at("degrade").get<std::string>();
      row.n = r.at("n").get<std::size_t>();
      row.acc = r.at("acc").get<double>();
      row.f1 = r.at("f1").get<double>();
      row.f1_degenerate = r.value("f1_degenerate", false);
      row.counts = {r.value("tp", std::size_t{0}), r.value("fp", std::size_t{0}), r.value("fn", std::size_t{0}),
                    r.value("tn", std::size_t{0})};
      row.truths = decode_truths(r.value("truths", std::string()));
      row.predictions = decode_verdicts(r.value("predictions", std::string()));
      if (row.truths.size() != row.predictions.size()) {
        throw InvariantError("report row has mismatched truths and predictions", report.rows.size());
      }
      if (row.acc < 0.0 || row.acc > 1.0 || row.f1 < 0.0 || row.f1 > 1.0) {
        throw InvariantError("report row outside [0, 1]", report.rows.size());
      }
      report.rows.push_back(std::move(row));
    }
    report.metadata = j.value("metadata", json::object());
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  compute_averages(report);
  return report;
}

}  // namespace capdetect::eval
