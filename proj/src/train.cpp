#include "germtl/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "germtl/errors.hpp"
#include "germtl/hashing.hpp"
#include "germtl/objectives.hpp"

namespace germtl {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (num_epochs < 1) fail("num_epochs must be at least 1");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) fail("warmup_ratio must lie in [0, 1]");
  if (warmup_steps < 0) fail("warmup_steps must be nonnegative");
  if (!(max_grad_norm > 0.0)) fail("max_grad_norm must be positive");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (eval_every_batches < 1) fail("eval_every_batches must be at least 1");
  if (early_stop_patience_evals < 1) fail("early_stop_patience_evals must be at least 1");
  if (gradient_accumulation_steps < 1) fail("gradient_accumulation_steps must be at least 1");
  if (seeds.empty()) fail("at least one seed is required");
  if (!(mlm_probability > 0.0 && mlm_probability < 1.0)) fail("mlm_probability must lie in (0, 1)");
}

std::string environment_label(Environment env, bool lm_stage) {
  return (lm_stage ? "LM+" : "") + std::string(environment_name(env));
}

std::vector<EncodedExample> encode_examples(const Vocab& vocab, std::span<const Example> data,
                                            int max_len) {
  std::vector<EncodedExample> out;
  out.reserve(data.size());
  for (const auto& e : data) out.push_back({e.id, encode(vocab, e.text, max_len), e.labels});
  return out;
}

// ---- optimizer -------------------------------------------------------------

double adam_step(std::span<NamedTensor> params, AdamState& state, double lr,
                 const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::logic_error("adam_step: parameter set changed");

  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    if (!t.has_grad()) continue;
    const double* g = t.grad().data();
    double* w = t.mutable_data().data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_epsilon;
    const std::size_t n = t.numel();
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j] * clip;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
    t.zero_grad();
  }
  return norm;
}

double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) return 0.0;
  step = std::clamp(step, 0L, total_steps);
  const long warm = cfg.warmup_steps > 0
                        ? cfg.warmup_steps
                        : static_cast<long>(std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
  if (step < warm) return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
  const long decay = std::max(1L, total_steps - warm);
  return cfg.learning_rate * static_cast<double>(total_steps - step) / static_cast<double>(decay);
}

// ---- helpers ---------------------------------------------------------------

namespace {

struct LabeledBatch {
  Batch batch;
  std::array<std::vector<int>, 3> labels;
};

LabeledBatch make_batch(std::span<const EncodedExample> data, std::span<const std::size_t> idx) {
  std::vector<const EncodedInput*> inputs;
  LabeledBatch lb;
  for (std::size_t i : idx) {
    inputs.push_back(&data[i].input);
    for (std::size_t k = 0; k < 3; ++k) lb.labels[k].push_back(data[i].labels[k]);
  }
  lb.batch = collate(inputs, true);
  return lb;
}

Tensor classification_loss(const ModelParams& p, const LabeledBatch& lb, bool train_mode,
                           std::uint64_t seed) {
  if (p.environment == Environment::STL) {
    const Task t = *p.stl_task;
    return task_loss(stl_forward(p, lb.batch, train_mode, seed).logits,
                     lb.labels[task_index(t)]);
  }
  auto out = mtl_forward(p, lb.batch, train_mode, seed);
  return mtl_losses(out, {lb.labels[0], lb.labels[1], lb.labels[2]}).l_multi;
}

std::vector<int> argmax_labels(const Tensor& probs) {
  std::vector<int> out(probs.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = probs.at(r * 2 + 1) > probs.at(r * 2) ? 1 : 0;
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Trims per-row labels to the collated sequence length.
std::vector<int> trimmed_labels(const std::vector<const std::vector<int>*>& rows,
                                std::size_t seq_len) {
  std::vector<int> out;
  out.reserve(rows.size() * seq_len);
  for (const auto* r : rows) out.insert(out.end(), r->begin(), r->begin() + static_cast<std::ptrdiff_t>(seq_len));
  return out;
}

}  // namespace

ValidationResult evaluate_model(const ModelParams& params, std::span<const EncodedExample> data,
                                int batch_size) {
  ValidationResult vr;
  if (data.empty()) return vr;
  double total = 0.0;
  const auto bs = static_cast<std::size_t>(batch_size);
  const auto all = iota_n(data.size());
  for (std::size_t start = 0; start < data.size(); start += bs) {
    const std::size_t end = std::min(data.size(), start + bs);
    auto lb = make_batch(data, std::span(all).subspan(start, end - start));
    const double n = static_cast<double>(end - start);
    if (params.environment == Environment::STL) {
      const Task t = *params.stl_task;
      auto out = stl_forward(params, lb.batch);
      total += task_loss(out.logits, lb.labels[task_index(t)]).item() * n;
      auto pred = argmax_labels(out.probs);
      auto& dst = vr.predictions[task_index(t)];
      dst.insert(dst.end(), pred.begin(), pred.end());
    } else {
      auto out = mtl_forward(params, lb.batch);
      total += mtl_losses(out, {lb.labels[0], lb.labels[1], lb.labels[2]}).l_multi.item() * n;
      for (std::size_t k = 0; k < 3; ++k) {
        auto pred = argmax_labels(out[k].probs);
        vr.predictions[k].insert(vr.predictions[k].end(), pred.begin(), pred.end());
      }
    }
  }
  vr.loss = total / static_cast<double>(data.size());
  for (std::size_t k = 0; k < 3; ++k) {
    if (vr.predictions[k].empty()) continue;
    std::vector<int> gold;
    for (const auto& e : data) gold.push_back(e.labels[k]);
    vr.f1[k] = prf1(confusion(vr.predictions[k], gold), Averaging::Macro).f1;
  }
  return vr;
}

std::array<std::vector<int>, 3> predict_labels(const ModelParams& params,
                                               std::span<const EncodedInput> inputs,
                                               int batch_size) {
  std::array<std::vector<int>, 3> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < inputs.size(); start += bs) {
    const std::size_t end = std::min(inputs.size(), start + bs);
    Batch b = collate(inputs.subspan(start, end - start), true);
    if (params.environment == Environment::STL) {
      auto pred = argmax_labels(stl_forward(params, b).probs);
      auto& dst = out[task_index(*params.stl_task)];
      dst.insert(dst.end(), pred.begin(), pred.end());
    } else {
      auto res = mtl_forward(params, b);
      for (std::size_t k = 0; k < 3; ++k) {
        auto pred = argmax_labels(res[k].probs);
        out[k].insert(out[k].end(), pred.begin(), pred.end());
      }
    }
  }
  return out;
}

// ---- classification training -----------------------------------------------

TrainResult train_one(const ModelParams& params, std::span<const EncodedExample> train_set,
                      std::span<const EncodedExample> val_set, const TrainConfig& cfg,
                      std::uint64_t seed, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train_one: empty training set");
  for (const auto& t : train_set)
    for (const auto& v : val_set)
      if (!t.id.empty() && t.id == v.id) throw DataError("train_one: example " + t.id + " is in both train and validation sets");

  ModelParams p = params.clone();
  auto named = p.named_parameters();
  AdamState adam;
  TrainResult result{p, {}};
  result.record.seed = seed;

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_batches = (train_set.size() + bs - 1) / bs;
  const auto k = static_cast<std::size_t>(cfg.gradient_accumulation_steps);
  const long steps_per_epoch = static_cast<long>((n_batches + k - 1) / k);
  const long total_steps = steps_per_epoch * cfg.num_epochs;

  std::optional<ModelParams> best;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  long opt_step = 0;
  std::uint64_t batch_counter = 0;
  bool stop = false;

  auto evaluate = [&] {
    if (val_set.empty()) return;
    ValidationResult v = evaluate_model(p, val_set, cfg.batch_size);
    const std::size_t i = result.record.eval_history.size();
    const double loss = hooks.val_loss_override ? hooks.val_loss_override(i, v.loss) : v.loss;
    if (!std::isfinite(loss)) throw NumericError("non-finite validation loss at step " + std::to_string(opt_step));
    result.record.eval_history.push_back({opt_step, loss, v.f1});
    if (loss < best_loss) {
      best_loss = loss;
      best = p.clone();
      result.record.best_checkpoint_step = opt_step;
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience_evals) {
      result.record.stopped_early = true;
      stop = true;
    }
  };

  for (int epoch = 0; epoch < cfg.num_epochs && !stop; ++epoch) {
    auto order = iota_n(train_set.size());
    std::mt19937_64 rng(mix_seed(seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t micro = 0;
    double step_loss = 0.0;
    for (std::size_t b = 0; b < n_batches && !stop; ++b) {
      const std::size_t start = b * bs, end = std::min(train_set.size(), start + bs);
      auto lb = make_batch(train_set, std::span(order).subspan(start, end - start));
      Tensor loss = classification_loss(p, lb, true, mix_seed(seed, batch_counter++));
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite training loss at step " + std::to_string(opt_step));
      }
      step_loss += loss.item() / static_cast<double>(k);
      if (k > 1) loss = scale(loss, 1.0 / static_cast<double>(k));
      loss.backward();
      if (++micro < k && b + 1 < n_batches) continue;
      adam_step(named, adam, lr_at(opt_step, total_steps, cfg), cfg);
      ++opt_step;
      micro = 0;
      if (hooks.on_step) hooks.on_step(opt_step, step_loss);
      step_loss = 0.0;
      if (opt_step % cfg.eval_every_batches == 0) evaluate();
    }
  }
  if (!stop && cfg.evaluate_at_end &&
      (result.record.eval_history.empty() || result.record.eval_history.back().step != opt_step)) {
    evaluate();
  }
  result.record.steps_run = opt_step;
  result.params = best ? std::move(*best) : std::move(p);
  if (!best) result.record.best_checkpoint_step = opt_step;
  return result;
}

// ---- language-model stage ------------------------------------------------------

ModelParams lm_finetune(const ModelParams& params, std::span<const EncodedInput> corpus,
                        const TrainConfig& cfg, std::uint64_t seed, LmStats* stats) {
  cfg.validate();
  if (corpus.empty()) throw DataError("lm_finetune: empty corpus");
  if (!params.mlm_bias) throw EnvironmentError("lm_finetune: model has no MLM head");
  ModelParams p = params.clone();
  auto named = p.encoder_parameters();
  named.push_back({"mlm.bias", *p.mlm_bias});
  AdamState adam;
  const int V = p.config.vocab_size;

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_batches = (corpus.size() + bs - 1) / bs;
  const long total_steps = static_cast<long>(n_batches) * cfg.num_epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
    auto order = iota_n(corpus.size());
    std::mt19937_64 rng(mix_seed(seed, 0x1A000000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t start = b * bs, end = std::min(corpus.size(), start + bs);
      std::vector<MaskedInput> masked;
      for (std::size_t i = start; i < end; ++i) {
        const std::uint64_t mseed = mix_seed(seed, static_cast<std::uint64_t>(epoch) * corpus.size() + order[i]);
        masked.push_back(mask_for_mlm(corpus[order[i]], V, mseed, cfg.mlm_probability));
      }
      std::vector<const EncodedInput*> inputs;
      std::vector<const std::vector<int>*> labels;
      for (const auto& m : masked) {
        inputs.push_back(&m.masked);
        labels.push_back(&m.labels);
      }
      // Nothing was selected for prediction: no gradient, so no update either.
      const bool any_masked = std::any_of(masked.begin(), masked.end(), [](const MaskedInput& m) {
        return std::any_of(m.labels.begin(), m.labels.end(), [](int y) { return y != kIgnoreLabel; });
      });
      if (!any_masked) {
        ++step;
        continue;
      }
      Batch batch = collate(inputs, true);
      Tensor loss = mlm_loss(mlm_forward(p, batch, true, mix_seed(seed, 0x10000000ULL + static_cast<std::uint64_t>(step))),
                             trimmed_labels(labels, batch.seq_len));
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite MLM loss at step " + std::to_string(step));
      }
      if (stats) stats->step_losses.push_back(loss.item());
      loss.backward();
      adam_step(named, adam, lr_at(step, total_steps, cfg), cfg);
      ++step;
    }
  }
  return p;
}

double masked_token_accuracy(const ModelParams& params, std::span<const EncodedInput> corpus,
                             std::uint64_t seed, int rounds, double mask_prob) {
  long correct = 0, total = 0;
  const int V = params.config.vocab_size;
  for (int r = 0; r < rounds; ++r) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      auto m = mask_for_mlm(corpus[i], V, mix_seed(seed, static_cast<std::uint64_t>(r) * corpus.size() + i), mask_prob);
      std::array<EncodedInput, 1> one{m.masked};
      Batch b = collate(one, true);
      Tensor logits = mlm_forward(params, b);
      auto d = logits.data();
      const auto vs = static_cast<std::size_t>(V);
      for (std::size_t j = 0; j < b.seq_len; ++j) {
        if (m.labels[j] == kIgnoreLabel) continue;
        auto row = d.subspan(j * vs, vs);
        const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
        correct += arg == m.labels[j];
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// ---- experiments -----------------------------------------------------------

std::vector<int> ensemble_predict(const std::vector<std::vector<int>>& per_seed_labels) {
  if (per_seed_labels.empty()) throw DimensionError("ensemble_predict: no seeds");
  const std::size_t n = per_seed_labels.front().size();
  for (const auto& row : per_seed_labels) {
    if (row.size() != n) {
      throw DimensionError("ensemble_predict: seed rows have lengths " + std::to_string(n) +
                           " and " + std::to_string(row.size()));
    }
  }
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ones = 0;
    for (const auto& row : per_seed_labels) ones += row[i] == 1;
    out[i] = 2 * ones > per_seed_labels.size() ? 1 : 0;
  }
  return out;
}

std::array<TaskMetrics, 3> score_predictions(const std::array<std::vector<int>, 3>& predictions,
                                             std::span<const EncodedExample> gold,
                                             Averaging averaging) {
  std::array<TaskMetrics, 3> out;
  for (std::size_t k = 0; k < 3; ++k) {
    if (predictions[k].empty()) continue;
    std::vector<int> g;
    for (const auto& e : gold) g.push_back(e.labels[k]);
    out[k] = prf1(confusion(predictions[k], g), averaging);
  }
  return out;
}

ExperimentResult run_experiment(const TrainConfig& cfg, const ExperimentData& data,
                                const ProgressFn& progress) {
  cfg.validate();
  if (cfg.lm_stage && data.lm_corpus.empty()) throw DataError("run_experiment: LM stage needs a corpus");
  ExperimentResult res;
  res.environment = environment_label(cfg.environment, cfg.lm_stage);
  std::vector<EncodedInput> predict_inputs;
  for (const auto& e : data.predict) predict_inputs.push_back(e.input);

  auto prepare = [&](ModelParams p, std::uint64_t seed, std::uint64_t salt) {
    if (!cfg.lm_stage) return p;
    p = lm_finetune(p, data.lm_corpus, cfg, mix_seed(seed, 100 + salt));
    p.reinit_heads(mix_seed(seed, 200 + salt));
    return p;
  };

  for (std::uint64_t seed : cfg.seeds) {
    SeedRun sr;
    sr.seed = seed;
    if (cfg.environment == Environment::MTL) {
      if (progress) progress(res.environment + " seed " + std::to_string(seed));
      ModelParams p = prepare(ModelParams::init_mtl(data.encoder, cfg.lm_stage, mix_seed(seed, 0)), seed, 0);
      auto tr = train_one(p, data.train, data.val, cfg, mix_seed(seed, 300));
      sr.predictions = predict_labels(tr.params, predict_inputs, cfg.batch_size);
      sr.models.push_back({std::nullopt, std::move(tr.params), std::move(tr.record)});
    } else {
      for (Task t : kAllTasks) {
        if (progress) {
          progress(res.environment + " seed " + std::to_string(seed) + " task " + std::string(task_name(t)));
        }
        const std::uint64_t salt = 1 + task_index(t);
        ModelParams p = prepare(ModelParams::init_stl(data.encoder, t, cfg.lm_stage, mix_seed(seed, salt)), seed, salt);
        auto tr = train_one(p, data.train, data.val, cfg, mix_seed(seed, 300 + salt));
        auto preds = predict_labels(tr.params, predict_inputs, cfg.batch_size);
        sr.predictions[task_index(t)] = std::move(preds[task_index(t)]);
        sr.models.push_back({t, std::move(tr.params), std::move(tr.record)});
      }
    }
    res.seeds.push_back(std::move(sr));
  }
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<std::vector<int>> votes;
    for (const auto& sr : res.seeds) votes.push_back(sr.predictions[k]);
    res.ensemble[k] = ensemble_predict(votes);
  }
  return res;
}

}  // namespace germtl
