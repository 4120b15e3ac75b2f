#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "germtl/data.hpp"
#include "germtl/eval.hpp"
#include "germtl/model.hpp"
#include "germtl/tokenizer.hpp"

namespace germtl {

struct TrainConfig {
  double learning_rate = 1e-5;
  int num_epochs = 3;
  double adam_epsilon = 1e-8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double warmup_ratio = 0.1;
  int warmup_steps = 0;
  double max_grad_norm = 1.0;
  int batch_size = 8;
  int eval_every_batches = 100;
  int early_stop_patience_evals = 10;
  int gradient_accumulation_steps = 1;
  Environment environment = Environment::MTL;
  bool lm_stage = false;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double mlm_probability = 0.15;
  // Evaluate once more after the last step when it was not an evaluation step.
  bool evaluate_at_end = true;

  // Throws ConfigError on a violated invariant.
  void validate() const;
};

// "STL", "LM+STL", "MTL" or "LM+MTL".
std::string environment_label(Environment env, bool lm_stage);

struct EncodedExample {
  std::string id;
  EncodedInput input;
  std::array<int, 3> labels{};
};

std::vector<EncodedExample> encode_examples(const Vocab& vocab, std::span<const Example> data,
                                            int max_len);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

// Clips the global gradient norm to cfg.max_grad_norm, applies one
// bias-corrected Adam update at rate lr, then resets the gradients.
// Returns the pre-clip global norm. A non-finite gradient throws
// NumericError naming the parameter.
double adam_step(std::span<NamedTensor> params, AdamState& state, double lr,
                 const TrainConfig& cfg);

// Linear warmup from 0 over W steps (warmup_steps if positive, otherwise
// ceil(warmup_ratio * total)), then linear decay to 0 at total_steps.
double lr_at(long step, long total_steps, const TrainConfig& cfg);

// ---- training --------------------------------------------------------------

struct EvalPoint {
  long step = 0;
  double val_loss = 0.0;
  std::array<std::optional<double>, 3> f1;  // macro F1 for the trained tasks
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EvalPoint> eval_history;
  bool stopped_early = false;
  long best_checkpoint_step = 0;
  long steps_run = 0;
};

struct TrainHooks {
  // Replaces the computed validation loss at evaluation i (0-based).
  std::function<double(std::size_t eval_index, double computed)> val_loss_override;
  // Called after every optimizer step with the step's training loss.
  std::function<void(long step, double train_loss)> on_step;
};

struct TrainResult {
  ModelParams params;  // best-validation-loss checkpoint
  RunRecord record;
};

struct ValidationResult {
  double loss = 0.0;
  std::array<std::optional<double>, 3> f1;
  std::array<std::vector<int>, 3> predictions;
};

// Mean validation loss (task loss for STL, l_multi for MTL) and macro F1.
ValidationResult evaluate_model(const ModelParams& params, std::span<const EncodedExample> data,
                                int batch_size);

// Predicted labels per task; empty vectors for tasks the model has no head for.
std::array<std::vector<int>, 3> predict_labels(const ModelParams& params,
                                               std::span<const EncodedInput> inputs,
                                               int batch_size);

TrainResult train_one(const ModelParams& params, std::span<const EncodedExample> train_set,
                      std::span<const EncodedExample> val_set, const TrainConfig& cfg,
                      std::uint64_t seed, const TrainHooks& hooks = {});

struct LmStats {
  std::vector<double> step_losses;
};

// Masked-language-model training of the encoder (and MLM head) for
// cfg.num_epochs. Classification heads are left untouched.
ModelParams lm_finetune(const ModelParams& params, std::span<const EncodedInput> corpus,
                        const TrainConfig& cfg, std::uint64_t seed, LmStats* stats = nullptr);

// Top-1 accuracy of MLM predictions at masked positions, over `rounds`
// independent maskings of the corpus.
double masked_token_accuracy(const ModelParams& params, std::span<const EncodedInput> corpus,
                             std::uint64_t seed, int rounds = 4, double mask_prob = 0.15);

// ---- experiments -----------------------------------------------------------

struct ExperimentData {
  EncoderConfig encoder;
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> val;
  std::vector<EncodedExample> predict;  // scored after training; usually the validation set
  std::vector<EncodedInput> lm_corpus;  // used when cfg.lm_stage
};

struct ModelRun {
  std::optional<Task> task;  // STL task; empty for MTL
  ModelParams params;
  RunRecord record;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<ModelRun> models;                // 3 for STL, 1 for MTL
  std::array<std::vector<int>, 3> predictions;  // over ExperimentData::predict
};

struct ExperimentResult {
  std::string environment;  // STL, LM+STL, MTL, LM+MTL
  std::vector<SeedRun> seeds;
  std::array<std::vector<int>, 3> ensemble;
};

using ProgressFn = std::function<void(const std::string&)>;

ExperimentResult run_experiment(const TrainConfig& cfg, const ExperimentData& data,
                                const ProgressFn& progress = {});

// Per-example majority vote over seeds (rows); ties go to 0.
std::vector<int> ensemble_predict(const std::vector<std::vector<int>>& per_seed_labels);

// Metrics of one prediction set against gold labels.
std::array<TaskMetrics, 3> score_predictions(const std::array<std::vector<int>, 3>& predictions,
                                             std::span<const EncodedExample> gold,
                                             Averaging averaging);

}  // namespace germtl
