// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "germtl/cli.hpp"
#include "germtl/data.hpp"
#include "germtl/eval.hpp"
#include "germtl/model.hpp"
#include "germtl/objectives.hpp"
#include "germtl/tensor.hpp"
#include "germtl/train.hpp"

using namespace germtl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::size_t rand_dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 8) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, bool rg = true, double lo = -1, double hi = 1) {
  return Tensor::uniform(std::move(shape), lo, hi, rng, rg);
}

Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// ---- 1: gradients ------------------------------------------------------------

struct OpCase {
  std::vector<Tensor> inputs;
  std::function<Tensor()> loss;
};

OpCase make_op_case(const std::string& op, std::mt19937_64& rng) {
  const std::size_t m = rand_dim(rng), n = rand_dim(rng), k = rand_dim(rng);
  OpCase c;
  if (op == "matmul") {
    Tensor a = rand_tensor({m, k}, rng), b = rand_tensor({k, n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a, b}, [=] { return probe(matmul(a, b), w); }};
  } else if (op == "transpose") {
    Tensor a = rand_tensor({m, n}, rng), w = rand_tensor({n, m}, rng, false);
    c = {{a}, [=] { return probe(transpose(a), w); }};
  } else if (op == "reshape") {
    Tensor a = rand_tensor({m, n}, rng), w = rand_tensor({n, m}, rng, false);
    c = {{a}, [=] { return probe(reshape(a, {n, m}), w); }};
  } else if (op == "add") {
    Tensor a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a, b}, [=] { return probe(add(a, b), w); }};
  } else if (op == "sub") {
    Tensor a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a, b}, [=] { return probe(sub(a, b), w); }};
  } else if (op == "mul") {
    Tensor a = rand_tensor({m, n}, rng), b = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a, b}, [=] { return probe(mul(a, b), w); }};
  } else if (op == "scale") {
    Tensor a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a}, [=] { return probe(scale(a, -1.7), w); }};
  } else if (op == "add_bias") {
    Tensor a = rand_tensor({m, n}, rng), b = rand_tensor({n}, rng), w = rand_tensor({m, n}, rng, false);
    c = {{a, b}, [=] { return probe(add_bias(a, b), w); }};
  } else if (op == "sum") {
    Tensor a = rand_tensor({m, n}, rng);
    c = {{a}, [=] { return sum(mul(a, a)); }};
  } else if (op == "mean") {
    Tensor a = rand_tensor({m, n}, rng);
    c = {{a}, [=] { return mean(mul(a, a)); }};
  } else if (op == "mean_of") {
    Tensor a = rand_tensor({m, n}, rng), b = rand_tensor({k}, rng);
    c = {{a, b}, [=] {
           std::vector<Tensor> parts{sum(mul(a, a)), sum(b), mean(a)};
           return mean_of(parts);
         }};
  } else if (op == "softmax_rows") {
    Tensor a = rand_tensor({m, n}, rng, true, -3, 3), w = rand_tensor({m, n}, rng, false);
    c = {{a}, [=] { return probe(softmax_rows(a), w); }};
  } else if (op == "layer_norm") {
    const std::size_t d = rand_dim(rng, 2);
    Tensor x = rand_tensor({m, d}, rng, true, -2, 2), g = rand_tensor({d}, rng, true, 0.5, 1.5);
    Tensor b = rand_tensor({d}, rng), w = rand_tensor({m, d}, rng, false);
    c = {{x, g, b}, [=] { return probe(layer_norm(x, g, b, 1e-12), w); }};
  } else if (op == "gelu") {
    Tensor a = rand_tensor({m, n}, rng, true, -3, 3), w = rand_tensor({m, n}, rng, false);
    c = {{a}, [=] { return probe(gelu(a), w); }};
  } else if (op == "dropout") {
    Tensor a = rand_tensor({m, n}, rng), w = rand_tensor({m, n}, rng, false);
    const std::uint64_t seed = rng();
    c = {{a}, [=] { return probe(dropout(a, 0.3, seed), w); }};
  } else if (op == "gather_rows" || op == "embedding_lookup") {
    Tensor t = rand_tensor({m, n}, rng), w = rand_tensor({k, n}, rng, false);
    std::vector<int> ids(k);
    for (auto& id : ids) id = static_cast<int>(rand_dim(rng, 0, m - 1));
    if (op == "gather_rows")
      c = {{t}, [=] { return probe(gather_rows(t, ids), w); }};
    else
      c = {{t}, [=] { return probe(embedding_lookup(t, ids), w); }};
  } else if (op == "cross_entropy" || op == "cross_entropy_ignore") {
    const std::size_t classes = rand_dim(rng, 2);
    Tensor a = rand_tensor({m, classes}, rng, true, -4, 4);
    std::vector<int> t(m);
    for (auto& v : t) v = static_cast<int>(rand_dim(rng, 0, classes - 1));
    if (op == "cross_entropy") {
      c = {{a}, [=] { return cross_entropy(a, t); }};
    } else {
      for (std::size_t i = 1; i < m; ++i)
        if (rand_dim(rng, 0, 2) == 0) t[i] = kIgnoreLabel;
      c = {{a}, [=] { return cross_entropy_ignore(a, t, kIgnoreLabel); }};
    }
  } else if (op == "multi_head_attention") {
    const std::size_t heads = rand_dim(rng, 1, 2), dh = rand_dim(rng, 1, 4);
    const std::size_t batch = rand_dim(rng, 1, 3), seq = rand_dim(rng, 1, 5), d = heads * dh;
    Tensor q = rand_tensor({batch * seq, d}, rng), kk = rand_tensor({batch * seq, d}, rng);
    Tensor v = rand_tensor({batch * seq, d}, rng), w = rand_tensor({batch * seq, d}, rng, false);
    std::vector<std::uint8_t> mask(batch * seq, 1);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 1; j < seq; ++j) mask[b * seq + j] = rand_dim(rng, 0, 3) != 0;
    c = {{q, kk, v}, [=] { return probe(multi_head_attention(q, kk, v, mask, batch, seq, heads), w); }};
  } else if (op == "task_loss") {
    Tensor a = rand_tensor({m, 2}, rng, true, -4, 4);
    std::vector<int> y(m);
    for (auto& v : y) v = static_cast<int>(rand_dim(rng, 0, 1));
    c = {{a}, [=] { return task_loss(a, y); }};
  } else if (op == "multi_loss") {
    Tensor a = rand_tensor({1}, rng), b = rand_tensor({1}, rng), d = rand_tensor({1}, rng);
    c = {{a, b, d}, [=] { return multi_loss(sum(mul(a, a)), sum(mul(b, b)), sum(mul(d, d))); }};
  } else if (op == "mlm_loss") {
    const std::size_t v = rand_dim(rng, 6, 12);
    Tensor a = rand_tensor({1, m, v}, rng, true, -3, 3);
    std::vector<int> y(m, kIgnoreLabel);
    y[0] = static_cast<int>(rand_dim(rng, 0, v - 1));
    for (std::size_t i = 1; i < m; ++i)
      if (rand_dim(rng, 0, 1)) y[i] = static_cast<int>(rand_dim(rng, 0, v - 1));
    c = {{a}, [=] { return mlm_loss(a, y); }};
  } else if (op == "classify") {
    Tensor h = rand_tensor({m, k}, rng), wt = rand_tensor({k, 2}, rng), b = rand_tensor({2}, rng);
    Tensor w = rand_tensor({m, 2}, rng, false);
    c = {{h, wt, b}, [=] { return probe(classify(ClassificationHead{wt, b}, h), w); }};
  } else {
    throw std::logic_error("unknown op " + op);
  }
  return c;
}

EncodedInput random_input(std::mt19937_64& rng, std::size_t len, int vocab) {
  const std::size_t body = rand_dim(rng, 1, len - 2);
  EncodedInput in;
  in.ids.push_back(kClsId);
  for (std::size_t i = 0; i < body; ++i)
    in.ids.push_back(std::uniform_int_distribution<int>(kNumSpecial, vocab - 1)(rng));
  in.ids.push_back(kSepId);
  in.attention_mask.assign(in.ids.size(), 1);
  in.ids.resize(len, kPadId);
  in.attention_mask.resize(len, 0);
  return in;
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  const std::vector<std::string> ops{
      "matmul", "transpose", "reshape", "add", "sub", "mul", "scale", "add_bias", "sum", "mean",
      "mean_of", "softmax_rows", "layer_norm", "gelu", "dropout", "gather_rows", "embedding_lookup",
      "cross_entropy", "cross_entropy_ignore", "multi_head_attention", "task_loss", "multi_loss",
      "mlm_loss", "classify"};
  const double tol = 1e-4;
  double worst = 0.0;
  std::string worst_op;
  bool ok = true;
  for (const auto& op : ops) {
    std::mt19937_64 rng(std::hash<std::string>{}(op));
    for (int trial = 0; trial < 20; ++trial) {
      auto c = make_op_case(op, rng);
      auto rep = grad_check(op, c.loss, c.inputs, tol);
      ok = ok && rep.passed;
      if (rep.max_rel_error >= worst) {
        worst = rep.max_rel_error;
        worst_op = op;
      }
    }
  }

  // Whole model: masked-LM loss plus l_multi through one MTL encoder with an MLM head.
  double worst_e2e = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    EncoderConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 8;
    cfg.dropout = 0.0;
    auto p = ModelParams::init_mtl(cfg, true, rng());
    for (auto& np : p.named_parameters())
      for (double& v : np.tensor.mutable_data()) v += std::normal_distribution<double>(0, 0.3)(rng);
    const std::size_t b = 3;
    std::vector<EncodedInput> clean, masked;
    std::vector<int> mlm_labels;
    for (std::size_t i = 0; i < b; ++i) {
      clean.push_back(random_input(rng, 8, cfg.vocab_size));
      auto mi = mask_for_mlm(clean.back(), cfg.vocab_size, rng(), 0.5);
      mi.labels[1] = clean.back().ids[1];  // at least one supervised position
      masked.push_back(mi.masked);
      mlm_labels.insert(mlm_labels.end(), mi.labels.begin(), mi.labels.end());
    }
    const Batch cb = collate(clean), mb = collate(masked);
    std::array<std::vector<int>, 3> y;
    for (auto& v : y)
      for (std::size_t i = 0; i < b; ++i) v.push_back(static_cast<int>(rng() % 2));
    auto loss = [&] {
      auto bundle = mtl_losses(mtl_forward(p, cb), {y[0], y[1], y[2]});
      return add(mlm_loss(mlm_forward(p, mb), mlm_labels), bundle.l_multi);
    };
    std::vector<Tensor> params;
    for (auto& np : p.named_parameters()) params.push_back(np.tensor);
    auto rep = grad_check("lm+mtl", loss, params, tol, 1e-5, 6, rng());
    ok = ok && rep.passed;
    worst_e2e = std::max(worst_e2e, rep.max_rel_error);
  }
  const double elapsed = seconds_since(t0);
  ok = ok && elapsed < 120.0;
  return {ok, std::to_string(ops.size()) + " ops x 20 trials, worst " + fmt(worst) + " (" + worst_op +
                  "); end-to-end LM+MTL x 20, worst " + fmt(worst_e2e) + "; " + fmt(elapsed, 3) + " s"};
}

// ---- 2: loss identities ----------------------------------------------------

Outcome criterion_loss_identities() {
  std::mt19937_64 rng(2);
  double worst_mean = 0.0, worst_ce = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = rand_dim(rng, 1, 16);
    std::array<TaskOutput, 3> outs;
    std::array<std::vector<int>, 3> y;
    for (std::size_t t = 0; t < 3; ++t) {
      outs[t].logits = rand_tensor({b, 2}, rng, true, -6, 6);
      outs[t].probs = softmax_rows(outs[t].logits);
      for (std::size_t i = 0; i < b; ++i) y[t].push_back(static_cast<int>(rng() % 2));
    }
    auto bundle = mtl_losses(outs, {y[0], y[1], y[2]});
    double by_hand = 0.0;
    for (std::size_t t = 0; t < 3; ++t) {
      // Explicit softmax, then -log of the gold probability, averaged over the batch.
      double explicit_loss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double z0 = outs[t].logits.at(2 * i), z1 = outs[t].logits.at(2 * i + 1);
        const double p = std::exp(y[t][i] ? z1 : z0) / (std::exp(z0) + std::exp(z1));
        explicit_loss -= std::log(p);
      }
      explicit_loss /= static_cast<double>(b);
      const double fused = task_loss(outs[t].logits, y[t]).item();
      worst_ce = std::max(worst_ce, std::abs(fused - explicit_loss));
      by_hand += fused;
    }
    worst_mean = std::max(worst_mean, std::abs(bundle.l_multi.item() - by_hand / 3.0));
  }
  return {worst_mean <= 1e-12 && worst_ce <= 1e-9,
          "100 batches: |l_multi - mean| max " + fmt(worst_mean) + ", |fused - explicit CE| max " + fmt(worst_ce)};
}

// ---- 3: metrics ------------------------------------------------------------

Outcome criterion_metrics() {
  std::mt19937_64 rng(3);
  long mismatches = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = rand_dim(rng, 1, 50);
    std::vector<int> pred(n), gold(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng() % 2);
      gold[i] = static_cast<int>(rng() % 2);
    }
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (pred[i] == 1 && gold[i] == 1) ++tp;
      else if (pred[i] == 1) ++fp;
      else if (gold[i] == 1) ++fn;
      else ++tn;
    }
    auto c = confusion(pred, gold);
    mismatches += !(c == ConfusionCounts{tp, fp, fn, tn});
    auto safe = [](double a, double b) { return b > 0 ? a / b : 0.0; };
    auto f1 = [](double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; };
    const double p1 = safe(tp, tp + fp), r1 = safe(tp, tp + fn);
    const double p0 = safe(tn, tn + fn), r0 = safe(tn, tn + fp);
    const std::array<std::array<double, 3>, 2> expected{
        {{p1, r1, f1(p1, r1)}, {(p1 + p0) / 2, (r1 + r0) / 2, (f1(p1, r1) + f1(p0, r0)) / 2}}};
    for (auto avg : {Averaging::PositiveClass, Averaging::Macro}) {
      auto m = prf1(c, avg);
      const auto& e = expected[avg == Averaging::Macro];
      worst = std::max({worst, std::abs(m.precision - e[0]), std::abs(m.recall - e[1]), std::abs(m.f1 - e[2])});
    }
  }
  return {mismatches == 0 && worst == 0.0,
          "1000 pairs: " + std::to_string(mismatches) + " count mismatches, max metric diff " + fmt(worst)};
}

// ---- 4: ensemble -----------------------------------------------------------

Outcome criterion_ensemble() {
  long checked = 0, wrong = 0;
  for (std::size_t seeds = 1; seeds <= 5; ++seeds) {
    const std::size_t patterns = std::size_t{1} << seeds;
    // Column j of the vote matrix holds pattern j.
    std::vector<std::vector<int>> votes(seeds, std::vector<int>(patterns));
    for (std::size_t j = 0; j < patterns; ++j)
      for (std::size_t s = 0; s < seeds; ++s) votes[s][j] = static_cast<int>((j >> s) & 1);
    auto got = ensemble_predict(votes);
    for (std::size_t j = 0; j < patterns; ++j) {
      const auto ones = static_cast<std::size_t>(std::popcount(j));
      const int expected = 2 * ones > seeds ? 1 : 0;  // ties go to the negative class
      ++checked;
      wrong += got[j] != expected;
    }
  }
  return {wrong == 0, std::to_string(checked) + " vote patterns over 1-5 seeds, " + std::to_string(wrong) +
                          " disagreements"};
}

// ---- 5: dataset audit ------------------------------------------------------

Outcome criterion_dataset_audit() {
  const std::array<std::pair<std::array<int, 3>, long>, 8> cells{{{{0, 0, 0}, 1074},
                                                                   {{1, 0, 0}, 739},
                                                                   {{0, 1, 0}, 239},
                                                                   {{1, 1, 0}, 89},
                                                                   {{0, 1, 1}, 403},
                                                                   {{1, 0, 1}, 160},
                                                                   {{0, 0, 1}, 406},
                                                                   {{1, 1, 1}, 134}}};
  std::vector<Example> data;
  std::mt19937_64 rng(5);
  for (const auto& [labels, n] : cells)
    for (long i = 0; i < n; ++i) data.push_back({std::to_string(1 + data.size()), "Kommentar, \"Nr.\" " + std::to_string(i), labels});
  std::shuffle(data.begin(), data.end(), rng);
  const auto path = fs::temp_directory_path() / "germtl_acceptance_table2.csv";
  write_dataset(path, data);
  auto s = summarize(load_dataset(path));
  fs::remove(path);
  bool ok = s.total == 3244;
  std::string counts;
  for (const auto& [labels, n] : cells) {
    const long got = s.count(labels[0], labels[1], labels[2]);
    ok = ok && got == n;
    counts += (counts.empty() ? "" : " ") + std::to_string(got);
  }
  return {ok, "total " + std::to_string(s.total) + ", cells " + counts};
}

// ---- shared experiment setup ----------------------------------------------

struct SynthSplit {
  Vocab vocab;
  EncoderConfig enc;
  std::vector<EncodedExample> train, val;
};

EncoderConfig desk_encoder(int vocab_size) {
  EncoderConfig e;
  e.vocab_size = vocab_size;
  e.d_model = 128;
  e.n_layers = 2;
  e.n_heads = 4;
  e.d_ff = 512;
  e.max_seq_len = 32;  // no synthetic comment is truncated at this length
  e.dropout = 0.1;
  return e;
}

TrainConfig desk_train() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.num_epochs = 3;
  c.batch_size = 2;
  c.eval_every_batches = 20;
  c.early_stop_patience_evals = 10;
  c.warmup_ratio = 0.1;
  return c;
}

SynthSplit make_split(const std::vector<Example>& train, const std::vector<Example>& val) {
  std::vector<std::string> texts;
  for (const auto& e : train) texts.push_back(e.text);
  SynthSplit s{build_vocab(texts, 300), {}, {}, {}};
  s.enc = desk_encoder(s.vocab.size());
  s.train = encode_examples(s.vocab, train, s.enc.max_seq_len);
  s.val = encode_examples(s.vocab, val, s.enc.max_seq_len);
  return s;
}

std::vector<EncodedInput> inputs_of(const std::vector<EncodedExample>& xs) {
  std::vector<EncodedInput> out;
  for (const auto& x : xs) out.push_back(x.input);
  return out;
}

// ---- 6: overfit ------------------------------------------------------------

Outcome criterion_overfit() {
  const auto t0 = Clock::now();
  SynthSpec spec;
  spec.correlation = 0.7;
  auto [tr, va] = split(synth_generate(200, 6, spec), 0.8, 6);
  auto s = make_split(tr, va);
  const auto cfg = desk_train();
  const auto train_inputs = inputs_of(s.train), val_inputs = inputs_of(s.val);
  std::ostringstream detail;
  bool ok = true;
  auto check = [&](const std::string& name, const ModelParams& p, std::span<const Task> tasks) {
    auto tp = predict_labels(p, train_inputs, cfg.batch_size);
    auto vp = predict_labels(p, val_inputs, cfg.batch_size);
    auto tm = score_predictions(tp, s.train, Averaging::Macro);
    auto vm = score_predictions(vp, s.val, Averaging::Macro);
    for (Task t : tasks) {
      const auto k = task_index(t);
      ok = ok && tm[k].f1 >= 0.99 && vm[k].f1 >= 0.95;
      detail << name << "/" << task_name(t) << " " << std::fixed << std::setprecision(3) << tm[k].f1 << "/"
             << vm[k].f1 << " ";
    }
  };
  for (Task t : kAllTasks) {
    auto res = train_one(ModelParams::init_stl(s.enc, t, false, 1), s.train, s.val, cfg, 1);
    const std::array<Task, 1> one{t};
    check("STL", res.params, one);
  }
  auto mtl = train_one(ModelParams::init_mtl(s.enc, false, 1), s.train, s.val, cfg, 1);
  check("MTL", mtl.params, kAllTasks);
  const double elapsed = seconds_since(t0);
  ok = ok && elapsed < 600.0;
  detail << "(train/val macro F1, 3 epochs); " << std::setprecision(1) << elapsed << " s";
  return {ok, detail.str()};
}

// ---- 7: MTL vs STL ---------------------------------------------------------

Outcome criterion_mtl_vs_stl() {
  const auto t0 = Clock::now();
  SynthSpec spec;
  spec.correlation = 0.7;
  spec.noise = 0.1;
  auto all = synth_generate(600, 7, spec);
  std::vector<Example> tr(all.begin(), all.begin() + 400), va(all.begin() + 400, all.end());
  auto s = make_split(tr, va);
  ExperimentData data{s.enc, s.train, s.val, s.val, inputs_of(s.train)};

  std::vector<ResultRow> rows;
  std::array<std::array<double, 3>, 4> mean_f1{};
  std::size_t row = 0;
  for (auto [env, lm] : {std::pair{Environment::STL, false}, std::pair{Environment::STL, true},
                         std::pair{Environment::MTL, false}, std::pair{Environment::MTL, true}}) {
    auto cfg = desk_train();
    cfg.eval_every_batches = 100;
    cfg.environment = env;
    cfg.lm_stage = lm;
    cfg.seeds = {1, 2, 3, 4, 5};
    auto res = run_experiment(cfg, data);
    ResultRow r{"synthetic", res.environment, {}};
    for (const auto& sr : res.seeds) {
      auto m = score_predictions(sr.predictions, s.val, Averaging::Macro);
      for (std::size_t k = 0; k < 3; ++k) {
        r.tasks[k].precision += m[k].precision / 5.0;
        r.tasks[k].recall += m[k].recall / 5.0;
        r.tasks[k].f1 += m[k].f1 / 5.0;
      }
    }
    for (std::size_t k = 0; k < 3; ++k) mean_f1[row][k] = r.tasks[k].f1;
    rows.push_back(r);
    ++row;
  }
  auto table = results_table(rows);
  std::cout << "\nValidation macro scores, mean over 5 seeds (400 train / 200 val, correlation 0.7, noise 0.1)\n"
            << table.text << "\n";

  bool ok = true;
  std::ostringstream detail;
  detail << std::fixed << std::setprecision(4);
  // MTL (row 2) against STL (row 0), and the LM variants against each other.
  for (std::size_t k = 0; k < 3; ++k) {
    ok = ok && mean_f1[2][k] >= mean_f1[0][k] - 0.02;
    detail << task_name(kAllTasks[k]) << " MTL-STL " << std::showpos << mean_f1[2][k] - mean_f1[0][k]
           << std::noshowpos << " ";
  }
  int wins = 0;
  for (std::size_t k = 0; k < 3; ++k) wins += mean_f1[2][k] > mean_f1[0][k];
  detail << "(MTL ahead on " << wins << "/3 tasks, reported only); " << std::setprecision(1)
         << seconds_since(t0) << " s";
  return {ok, detail.str()};
}

// ---- 8: determinism --------------------------------------------------------

Outcome criterion_determinism() {
  const fs::path dir = fs::temp_directory_path() / "germtl_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };
  int code = run({"synth", "--n", "120", "--seed", "8", "--correlation", "0.7", "--out", (dir / "train.csv").string()});
  if (code == 0)
    code = run({"build-vocab", "--corpus", (dir / "train.csv").string(), "--out", (dir / "vocab.txt").string(),
                "--max-size", "200"});
  {
    std::ofstream cfg(dir / "exp.cfg");
    cfg << "d_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\nmax_seq_len = 24\ndropout = 0.1\n"
           "num_epochs = 1\nlearning_rate = 0.003\neval_every_batches = 3\n";
  }
  for (const char* out : {"a", "b"}) {
    if (code != 0) break;
    code = run({"train", "--config", (dir / "exp.cfg").string(), "--train", (dir / "train.csv").string(), "--vocab",
                (dir / "vocab.txt").string(), "--out", (dir / out).string(), "--env", "mtl", "--lm", "--seeds", "3",
                "--quiet"});
  }
  if (code != 0) return {false, "cli exited with " + std::to_string(code) + ": " + sink.str()};
  int files = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(dir / "a" / "predictions")) {
    if (entry.path().extension() != ".csv") continue;
    ++files;
    differing += slurp(entry.path()) != slurp(dir / "b" / "predictions" / entry.path().filename());
  }
  fs::remove_all(dir);
  return {files == 4 && differing == 0,
          std::to_string(files) + " prediction files compared across two LM+MTL runs, " + std::to_string(differing) +
              " differ"};
}

// ---- 9: early stopping -----------------------------------------------------

Outcome criterion_early_stopping() {
  SynthSpec spec;
  auto all = synth_generate(240, 9, spec);
  std::vector<Example> tr(all.begin(), all.begin() + 200), va(all.begin() + 200, all.end());
  auto s = make_split(tr, va);
  auto cfg = desk_train();
  cfg.num_epochs = 2;
  cfg.eval_every_batches = 1;
  cfg.early_stop_patience_evals = 10;
  std::vector<double> computed;
  TrainHooks hooks;
  hooks.val_loss_override = [&](std::size_t, double loss) {
    computed.push_back(loss);
    return 0.6931;
  };
  auto res = train_one(ModelParams::init_mtl(s.enc, false, 1), s.train, s.val, cfg, 1, hooks);
  const auto& h = res.record.eval_history;
  // The returned parameters must reproduce the true loss seen at the first evaluation.
  const double returned = evaluate_model(res.params, s.val, cfg.batch_size).loss;
  const bool first = !computed.empty() && returned == computed.front() &&
                     (computed.size() < 2 || returned != computed.back());
  const bool ok = h.size() == 11 && res.record.stopped_early && res.record.best_checkpoint_step == h.front().step &&
                  res.record.steps_run == h.back().step && first;
  return {ok, std::to_string(h.size()) + " evaluations, stopped_early=" + (res.record.stopped_early ? "yes" : "no") +
                  ", best step " + std::to_string(res.record.best_checkpoint_step) + " of " +
                  std::to_string(res.record.steps_run) + ", first checkpoint returned=" + (first ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", criterion_gradients},
      {"loss identities", criterion_loss_identities},
      {"metrics oracle", criterion_metrics},
      {"ensemble oracle", criterion_ensemble},
      {"dataset audit", criterion_dataset_audit},
      {"overfit experiment", criterion_overfit},
      {"MTL vs STL experiment", criterion_mtl_vs_stl},
      {"determinism", criterion_determinism},
      {"early stopping", criterion_early_stopping},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  bool all_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.contains(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all_ok = all_ok && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << number << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return all_ok ? 0 : 1;
}
