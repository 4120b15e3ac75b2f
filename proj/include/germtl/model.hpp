#pragma once

// Shared transformer encoder with single-task (one head) and multitask
// (three heads over one encoder pass) configurations, plus an optional
// masked-language-model head tied to the token embeddings.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "germtl/tensor.hpp"
#include "germtl/tokenizer.hpp"

namespace germtl {

enum class Task { Toxic = 0, Engaging = 1, FactClaiming = 2 };
inline constexpr std::array<Task, 3> kAllTasks{Task::Toxic, Task::Engaging, Task::FactClaiming};
inline constexpr std::size_t kNumTasks = 3;

std::string_view task_name(Task task);  // toxic / engage / fact
Task parse_task(std::string_view name);
inline std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }

enum class Environment { STL, MTL };
std::string_view environment_name(Environment env);  // STL / MTL
Environment parse_environment(std::string_view name);

struct EncoderConfig {
  int vocab_size = 8000;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 120;
  double dropout = 0.1;

  // Throws ConfigError on a violated invariant.
  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ClassificationHead {
  Tensor weight;  // [d_model × 2]
  Tensor bias;    // [2]
};

struct EncoderLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor attn_ln_gamma, attn_ln_beta;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor ff_ln_gamma, ff_ln_beta;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  EncoderConfig config;
  Environment environment = Environment::MTL;
  std::optional<Task> stl_task;  // set iff environment == STL

  Tensor token_embedding;     // [V × d]
  Tensor position_embedding;  // [max_seq_len × d]
  Tensor embedding_ln_gamma, embedding_ln_beta;
  std::vector<EncoderLayer> layers;
  std::vector<std::pair<Task, ClassificationHead>> heads;
  std::optional<Tensor> mlm_bias;  // [V]; output weights are the token embeddings

  static ModelParams init_stl(const EncoderConfig& config, Task task, bool with_mlm_head,
                              std::uint64_t seed);
  static ModelParams init_mtl(const EncoderConfig& config, bool with_mlm_head,
                              std::uint64_t seed);

  // Stable ordering: embeddings, layers, heads, MLM head.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> encoder_parameters() const;
  std::vector<NamedTensor> head_parameters() const;
  std::size_t parameter_count() const;
  std::size_t encoder_parameter_count() const;

  // Throws EnvironmentError when the model has no head for task.
  const ClassificationHead& head(Task task) const;
  // Fresh truncated-normal (std 0.02) head weights and zero biases.
  void reinit_heads(std::uint64_t seed);

  // Deep copy; the result shares no tensors with *this.
  ModelParams clone() const;
  // Overwrites parameter values from a structurally identical model.
  void assign_from(const ModelParams& other);
  void zero_grad();
};

// A collated batch of equal-length sequences.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;               // [size * seq_len]
  std::vector<std::uint8_t> mask;     // 1 for real tokens
};

// Collates inputs of uniform length. With trim_padding the trailing columns
// that are PAD in every sequence are dropped; masked keys never influence
// real positions, so this leaves real-position outputs unchanged.
Batch collate(std::span<const EncodedInput> inputs, bool trim_padding = false);
Batch collate(std::span<const EncodedInput* const> inputs, bool trim_padding = false);

// Optional capture of attention weights, one [batch, heads, seq, seq] block per layer.
struct EncoderTrace {
  std::vector<std::vector<double>> attention;
};

// Final hidden states [batch × seq × d_model]. Dropout is active only in train_mode.
Tensor encoder_forward(const ModelParams& p, const Batch& batch, bool train_mode,
                       std::uint64_t rng_seed, EncoderTrace* trace = nullptr);
Tensor encoder_forward(const ModelParams& p, std::span<const EncodedInput> batch,
                       bool train_mode, std::uint64_t rng_seed);

// Number of encoder_forward evaluations on the calling thread.
std::uint64_t encoder_forward_count();

// Hidden state at position 0 for every sequence: [batch × d_model].
Tensor cls_hidden(const Tensor& hidden);

Tensor head_logits(const ClassificationHead& head, const Tensor& h_cls);
// softmax(h_cls · W + b): per-row probabilities over {negative, positive}.
Tensor classify(const ClassificationHead& head, const Tensor& h_cls);

struct TaskOutput {
  Tensor logits;  // [batch × 2]
  Tensor probs;   // [batch × 2]
};

TaskOutput stl_forward(const ModelParams& p, const Batch& batch, bool train_mode = false,
                       std::uint64_t rng_seed = 0);
// One encoder pass; the three heads read the same CLS hidden state.
// Indexed by task_index().
std::array<TaskOutput, 3> mtl_forward(const ModelParams& p, const Batch& batch,
                                      bool train_mode = false, std::uint64_t rng_seed = 0);
// Vocabulary logits [batch × seq × V].
Tensor mlm_forward(const ModelParams& p, const Batch& batch, bool train_mode = false,
                   std::uint64_t rng_seed = 0);

// ---- checkpoints -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string vocab_hash;
  std::string config_hash;
};

// Versioned JSON container: environment, task, encoder config, hashes and
// every named parameter with its shape.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info);
std::pair<ModelParams, CheckpointInfo> load_checkpoint(const std::filesystem::path& path);

}  // namespace germtl
