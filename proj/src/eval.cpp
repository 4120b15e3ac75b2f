#include "germtl/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "germtl/errors.hpp"

namespace germtl {

std::string_view averaging_name(Averaging a) {
  return a == Averaging::Macro ? "macro" : "positive_class";
}

Averaging parse_averaging(std::string_view name) {
  if (name == "macro") return Averaging::Macro;
  if (name == "positive_class" || name == "positive") return Averaging::PositiveClass;
  throw ConfigError("unknown averaging '" + std::string(name) +
                    "' (expected macro or positive_class)");
}

ConfusionCounts confusion(std::span<const int> preds, std::span<const int> gold) {
  if (preds.size() != gold.size()) {
    throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(gold.size()) + " gold labels");
  }
  if (preds.empty()) throw DimensionError("confusion: no examples");
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] != 0 && preds[i] != 1) || (gold[i] != 0 && gold[i] != 1)) {
      throw DataError("confusion: labels must be 0/1 (example " + std::to_string(i) + ")");
    }
    if (preds[i] == 1) {
      gold[i] == 1 ? ++c.tp : ++c.fp;
    } else {
      gold[i] == 1 ? ++c.fn : ++c.tn;
    }
  }
  return c;
}

namespace {

double ratio(long num, long den, const char* what, std::string& note) {
  if (den == 0) {
    if (!note.empty()) note += "; ";
    note += std::string(what) + " has a zero denominator, reported as 0";
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

TaskMetrics positive_metrics(const ConfusionCounts& c, const char* cls) {
  TaskMetrics m;
  m.averaging = Averaging::PositiveClass;
  m.precision = ratio(c.tp, c.tp + c.fp, (std::string(cls) + " precision").c_str(), m.note);
  m.recall = ratio(c.tp, c.tp + c.fn, (std::string(cls) + " recall").c_str(), m.note);
  const double s = m.precision + m.recall;
  m.f1 = s > 0.0 ? 2.0 * m.precision * m.recall / s : 0.0;
  return m;
}

}  // namespace

TaskMetrics prf1(const ConfusionCounts& c, Averaging averaging) {
  if (c.total() <= 0) return {0.0, 0.0, 0.0, averaging, "no examples, all metrics reported as 0"};
  if (averaging == Averaging::PositiveClass) return positive_metrics(c, "positive-class");
  const TaskMetrics pos = positive_metrics(c, "positive-class");
  const TaskMetrics neg = positive_metrics(c.negative_class(), "negative-class");
  std::string note = pos.note;
  if (!neg.note.empty()) note += (note.empty() ? "" : "; ") + neg.note;
  return {(pos.precision + neg.precision) / 2.0, (pos.recall + neg.recall) / 2.0,
          (pos.f1 + neg.f1) / 2.0, Averaging::Macro, std::move(note)};
}

ResultsTable results_table(std::vector<ResultRow> rows) {
  if (rows.empty()) throw std::invalid_argument("results_table: no rows");
  ResultsTable t;
  t.rows = std::move(rows);
  const std::size_t n = t.rows.size();
  for (std::size_t k = 0; k < 3; ++k) {
    double best = -1.0;
    for (const auto& r : t.rows) best = std::max(best, r.tasks[k].f1);
    t.best[k].resize(n);
    for (std::size_t i = 0; i < n; ++i) t.best[k][i] = t.rows[i].tasks[k].f1 == best;
  }

  static const char* kTaskHeaders[3] = {"Toxic", "Engaging", "Fact-Claiming"};
  static const char* kTaskKeys[3] = {"toxic", "engage", "fact"};
  std::size_t model_w = 5, env_w = 11;
  for (const auto& r : t.rows) {
    model_w = std::max(model_w, r.model.size());
    env_w = std::max(env_w, r.environment.size());
  }
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };

  std::ostringstream txt;
  txt << pad("", model_w) << " | " << pad("", env_w);
  for (auto* h : kTaskHeaders) txt << " | " << pad(h, 23);
  txt << '\n' << pad("Model", model_w) << " | " << pad("Environment", env_w);
  for (int k = 0; k < 3; ++k) txt << " | " << pad("P", 7) << ' ' << pad("R", 7) << ' ' << pad("F1", 7);
  txt << '\n' << std::string(model_w + env_w + 3 + 3 * 26, '-') << '\n';
  std::string prev_model;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = t.rows[i];
    txt << pad(r.model == prev_model ? "" : r.model, model_w) << " | " << pad(r.environment, env_w);
    prev_model = r.model;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& m = r.tasks[k];
      txt << " | " << num(m.precision) << "  " << num(m.recall) << "  " << num(m.f1)
          << (t.best[k][i] ? '*' : ' ');
    }
    txt << '\n';
  }
  txt << "averaging: " << averaging_name(t.rows.front().tasks[0].averaging)
      << "; * marks the best F1 per task\n";
  t.text = txt.str();

  std::ostringstream csv;
  csv << "model,environment,task,averaging,precision,recall,f1,best\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = t.rows[i];
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& m = r.tasks[k];
      csv << r.model << ',' << r.environment << ',' << kTaskKeys[k] << ','
          << averaging_name(m.averaging) << ',' << num(m.precision) << ',' << num(m.recall) << ','
          << num(m.f1) << ',' << (t.best[k][i] ? 1 : 0) << '\n';
    }
  }
  t.delimited = csv.str();
  return t;
}

}  // namespace germtl
