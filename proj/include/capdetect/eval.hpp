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

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capdetect/degrade.hpp"
#include "capdetect/model.hpp"
#include "capdetect/synth.hpp"
#include "json.hpp"

namespace capdetect::eval {

/// Positive class is fake. An abstaining caption counts as a wrong answer
/// for whichever class the truth is (fn for fakes, fp for reals).
struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  void add(int truth, model::Verdict predicted);
  bool operator==(const ConfusionCounts&) const = default;
};

/// (tp + tn) / total. Throws EmptyEvaluationError when total == 0.
double accuracy(const ConfusionCounts& c);

struct F1 {
  double value = 0.0;
  /// Set when tp = fp = fn = 0 (no positives anywhere).
  bool degenerate = false;
};

/// Harmonic mean of precision and recall; 0 when tp == 0. Throws
/// EmptyEvaluationError when total == 0.
F1 f1(const ConfusionCounts& c);

struct SubsetResult {
  std::string test_family;
  std::string degrade;
  ConfusionCounts counts;
  double acc = 0.0;
  F1 f1;
  /// Per-sample ground truth and verdicts, manifest order.
  std::vector<int> truths;
  std::vector<model::Verdict> predictions;
};

/// Test images of one family subset (shared reals + that family's fakes),
/// optionally degraded.
struct Subset {
  std::vector<Image> images;
  std::vector<int> truths;
};

/// Throws ConfigError when `family` has no fake records in `split`.
Subset load_subset(const synth::Manifest& manifest, const std::string& family, const std::string& split = "test");
Subset degrade_subset(const Subset& s, const degrade::DegradeSpec& spec);

/// Captions every image greedily and scores the verdicts.
SubsetResult eval_images(const model::CaptionModel& m, const Subset& subset);

SubsetResult eval_subset(const model::CaptionModel& m, const synth::Manifest& manifest,
                         const std::string& test_family, const degrade::DegradeSpec& spec);

struct ReportRow {
  std::string train_family;
  std::string test_family;
  std::string degrade;
  std::size_t n = 0;
  double acc = 0.0;
  double f1 = 0.0;
  bool f1_degenerate = false;
  ConfusionCounts counts;
  std::vector<int> truths;
  std::vector<model::Verdict> predictions;
};

struct AverageRow {
  std::string train_family;
  std::string degrade;
  double acc = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<AverageRow> averages;
  nlohmann::json metadata = nlohmann::json::object();

  const ReportRow* find(const std::string& train, const std::string& test, const std::string& degrade) const;
  /// Ordered unique values as they first appear in rows.
  std::vector<std::string> train_families() const;
  std::vector<std::string> test_families() const;
  std::vector<std::string> degrades() const;
};

/// Recomputes `averages` from `rows` (mean over test families per train
/// family and degradation).
void compute_averages(EvalReport& report);

using NamedModel = std::pair<std::string, const model::CaptionModel*>;

/// Every (degrade, train model, test family) cell. `test_families` empty
/// means every non-pretrain fake family in the manifest. Failures are rethrown with the
/// grid coordinates in the message.
EvalReport cross_matrix(const std::vector<NamedModel>& models, const synth::Manifest& manifest,
                        const std::vector<degrade::DegradeSpec>& degrades,
                        std::vector<std::string> test_families = {});

/// train_family,test_family,degrade,n,acc,f1 with percentages to 2 decimals.
std::string to_csv(const EvalReport& report);
/// One table per degradation: rows are training families, columns test
/// families ("ACC / F1"), plus an Average column.
std::string to_markdown(const EvalReport& report);

nlohmann::json to_json(const EvalReport& report);
EvalReport from_json(const nlohmann::json& j);

}  // namespace capdetect::eval
