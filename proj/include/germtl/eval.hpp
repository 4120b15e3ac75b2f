#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace germtl {

// Counts for the positive class of a binary task. The negative class view
// swaps the roles: tp' = tn, fp' = fn, fn' = fp.
struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;

  long total() const { return tp + fp + fn + tn; }
  ConfusionCounts negative_class() const { return {tn, fn, fp, tp}; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

enum class Averaging { PositiveClass, Macro };
std::string_view averaging_name(Averaging a);  // positive_class / macro
Averaging parse_averaging(std::string_view name);

struct TaskMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Averaging averaging = Averaging::Macro;
  std::string note;  // set when a zero denominator forced a metric to 0
};

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> gold);

// Zero denominators give 0 for the affected metric and a diagnostic note.
TaskMetrics prf1(const ConfusionCounts& c, Averaging averaging = Averaging::Macro);

// One row of a results table: a (model, environment) system scored on the three tasks.
struct ResultRow {
  std::string model;
  std::string environment;
  std::array<TaskMetrics, 3> tasks;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
  // best[t][r]: row r holds the maximum F1 for task t (ties all flagged).
  std::array<std::vector<bool>, 3> best;
  std::string text;       // aligned, best F1 marked with '*'
  std::string delimited;  // model,environment,task,averaging,P,R,F1,best
};

// Throws std::invalid_argument when rows is empty.
ResultsTable results_table(std::vector<ResultRow> rows);

// Canonical environment order: STL, LM+STL, MTL, LM+MTL.
inline constexpr std::array<std::string_view, 4> kEnvironmentLabels{"STL", "LM+STL", "MTL",
                                                                    "LM+MTL"};

}  // namespace germtl
