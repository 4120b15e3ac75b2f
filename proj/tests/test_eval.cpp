#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "germtl/errors.hpp"
#include "germtl/eval.hpp"

using namespace germtl;

namespace {

TaskMetrics metrics(double p, double r, double f1) { return {p, r, f1, Averaging::Macro, ""}; }

// Per-example tally and textbook formulas, independent of confusion()/prf1().
struct Reference {
  double p = 0, r = 0, f1 = 0;
};

Reference reference_class(const std::vector<int>& pred, const std::vector<int>& gold, int cls) {
  double tp = 0, predicted = 0, actual = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    predicted += pred[i] == cls;
    actual += gold[i] == cls;
    tp += pred[i] == cls && gold[i] == cls;
  }
  Reference ref;
  ref.p = predicted > 0 ? tp / predicted : 0.0;
  ref.r = actual > 0 ? tp / actual : 0.0;
  ref.f1 = ref.p + ref.r > 0 ? 2 * ref.p * ref.r / (ref.p + ref.r) : 0.0;
  return ref;
}

}  // namespace

TEST(Confusion, HandCountedExamples) {
  auto c = confusion(std::vector{1, 1, 0, 0}, std::vector{1, 0, 0, 1});
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 1, 1}));
  std::vector gold{1, 0, 1, 1, 0};
  auto same = confusion(gold, gold);
  EXPECT_EQ(same.fp, 0);
  EXPECT_EQ(same.fn, 0);
  std::vector<int> flipped;
  for (int g : gold) flipped.push_back(1 - g);
  auto opposite = confusion(flipped, gold);
  EXPECT_EQ(opposite.tp, 0);
  EXPECT_EQ(opposite.tn, 0);
  EXPECT_EQ(opposite.total(), 5);
}

TEST(Confusion, Errors) {
  EXPECT_THROW(confusion(std::vector{1, 0}, std::vector{1}), DimensionError);
  EXPECT_THROW(confusion(std::vector<int>{}, std::vector<int>{}), DimensionError);
  EXPECT_THROW(confusion(std::vector{2}, std::vector{1}), DataError);
}

TEST(Prf1, SymmetricPositiveClassCase) {
  auto m = prf1({1, 1, 1, 0}, Averaging::PositiveClass);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
  EXPECT_TRUE(m.note.empty());
}

TEST(Prf1, ZeroDenominatorIsZeroWithNote) {
  auto m = prf1({0, 0, 3, 5}, Averaging::PositiveClass);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_FALSE(m.note.empty());
  EXPECT_EQ(prf1({}, Averaging::Macro).f1, 0.0);
}

TEST(Prf1, MacroExample) {
  auto m = prf1({2, 1, 1, 6}, Averaging::Macro);
  auto pos = prf1({2, 1, 1, 6}, Averaging::PositiveClass);
  auto neg = prf1(ConfusionCounts{2, 1, 1, 6}.negative_class(), Averaging::PositiveClass);
  EXPECT_NEAR(pos.f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(neg.f1, 6.0 / 7.0, 1e-12);
  EXPECT_NEAR(m.f1, (2.0 / 3.0 + 6.0 / 7.0) / 2.0, 1e-12);
  EXPECT_NEAR(m.f1, 0.7619, 1e-4);
  EXPECT_EQ(m.averaging, Averaging::Macro);
}

TEST(Prf1, ScaleFree) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<long> count(0, 20);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionCounts c{count(rng), count(rng), count(rng), count(rng)};
    if (c.total() == 0) continue;
    for (long k : {2L, 7L}) {
      ConfusionCounts s{c.tp * k, c.fp * k, c.fn * k, c.tn * k};
      for (auto avg : {Averaging::PositiveClass, Averaging::Macro}) {
        auto a = prf1(c, avg), b = prf1(s, avg);
        EXPECT_NEAR(a.precision, b.precision, 1e-12);
        EXPECT_NEAR(a.recall, b.recall, 1e-12);
        EXPECT_NEAR(a.f1, b.f1, 1e-12);
      }
    }
  }
}

TEST(Prf1, F1BoundsAndPerfectScore) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<long> count(0, 10);
  for (int trial = 0; trial < 500; ++trial) {
    ConfusionCounts c{count(rng), count(rng), count(rng), count(rng)};
    if (c.total() == 0) continue;
    auto m = prf1(c, Averaging::PositiveClass);
    EXPECT_GE(m.f1, 0.0);
    EXPECT_LE(m.f1, 1.0);
    if (c.tp > 0) EXPECT_EQ(m.f1 == 1.0, c.fp == 0 && c.fn == 0);
  }
}

TEST(Prf1, AgreesWithBruteForceTally) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<int> pred(n), gold(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng() % 2);
      gold[i] = static_cast<int>(rng() % 2);
    }
    auto c = confusion(pred, gold);
    auto pos = reference_class(pred, gold, 1), neg = reference_class(pred, gold, 0);
    auto m = prf1(c, Averaging::PositiveClass);
    EXPECT_NEAR(m.precision, pos.p, 1e-12);
    EXPECT_NEAR(m.recall, pos.r, 1e-12);
    EXPECT_NEAR(m.f1, pos.f1, 1e-12);
    auto mac = prf1(c, Averaging::Macro);
    EXPECT_NEAR(mac.precision, (pos.p + neg.p) / 2, 1e-12);
    EXPECT_NEAR(mac.recall, (pos.r + neg.r) / 2, 1e-12);
    EXPECT_NEAR(mac.f1, (pos.f1 + neg.f1) / 2, 1e-12);
  }
}

TEST(Averaging, NamesRoundTrip) {
  for (auto a : {Averaging::PositiveClass, Averaging::Macro}) EXPECT_EQ(parse_averaging(averaging_name(a)), a);
  EXPECT_THROW(parse_averaging("micro"), ConfigError);
}

TEST(ResultsTable, SingleRowIsBestEverywhere) {
  auto t = results_table({{"bert", "MTL", {metrics(0.1, 0.2, 0.3), metrics(0.4, 0.5, 0.6), metrics(0.7, 0.8, 0.9)}}});
  for (std::size_t k = 0; k < 3; ++k) EXPECT_TRUE(t.best[k][0]);
  EXPECT_THROW(results_table({}), std::invalid_argument);
}

TEST(ResultsTable, FourEnvironmentGrid) {
  std::vector<ResultRow> rows;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::string model : {"mBERT", "gBERT"})
    for (auto env : kEnvironmentLabels) {
      ResultRow r{model, std::string(env), {}};
      for (auto& m : r.tasks) m = metrics(u(rng), u(rng), u(rng));
      rows.push_back(r);
    }
  auto t = results_table(rows);
  // Independent column scan.
  for (std::size_t k = 0; k < 3; ++k) {
    double best = 0;
    for (const auto& r : rows) best = std::max(best, r.tasks[k].f1);
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EXPECT_EQ(t.best[k][i], rows[i].tasks[k].f1 == best);
      flagged += t.best[k][i];
    }
    EXPECT_EQ(flagged, 1u);
  }
  // 2 header lines, a rule, 8 rows, a legend.
  std::istringstream text(t.text);
  std::string line;
  int lines = 0, stars = 0;
  while (std::getline(text, line)) {
    ++lines;
    stars += static_cast<int>(std::count(line.begin(), line.end(), '*'));
  }
  EXPECT_EQ(lines, 12);
  EXPECT_EQ(stars, 4);  // three flags plus the legend
  for (auto env : kEnvironmentLabels) EXPECT_NE(t.text.find(std::string(env)), std::string::npos);
  std::istringstream csv(t.delimited);
  std::getline(csv, line);
  EXPECT_EQ(line, "model,environment,task,averaging,precision,recall,f1,best");
  int rows_out = 0;
  while (std::getline(csv, line)) ++rows_out;
  EXPECT_EQ(rows_out, 24);
}

TEST(ResultsTable, TiesAreAllFlagged) {
  auto t = results_table({{"a", "STL", {metrics(0, 0, 0.5), metrics(0, 0, 0.2), metrics(0, 0, 0.1)}},
                          {"a", "MTL", {metrics(0, 0, 0.5), metrics(0, 0, 0.3), metrics(0, 0, 0.1)}}});
  EXPECT_TRUE(t.best[0][0] && t.best[0][1]);
  EXPECT_FALSE(t.best[1][0]);
  EXPECT_TRUE(t.best[1][1]);
}
