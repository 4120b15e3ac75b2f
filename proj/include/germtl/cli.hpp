#pragma once
// Command-line front end: build-vocab, pretrain-lm, train, predict, evaluate, report.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "germtl/eval.hpp"
#include "germtl/model.hpp"
#include "germtl/train.hpp"

namespace germtl::cli {

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2, kNumericError = 3 };

struct ExperimentConfig {
  TrainConfig train;
  EncoderConfig encoder;
  std::string model_name = "encoder";
  std::string train_path;
  std::string val_path;        // empty: split train_path by split_ratio
  std::string lm_corpus_path;  // empty: the training texts
  std::string vocab_path;
  std::string output_dir = "run";
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;
  Averaging averaging = Averaging::Macro;

  // Throws ConfigError.
  void validate() const;
};

// Recognized configuration keys, in canonical order.
const std::vector<std::string>& config_keys();

// Throws ConfigError on an unknown key or a malformed value.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);

// "key = value" lines; blank lines and lines starting with '#' are ignored.
void apply_config_text(ExperimentConfig& cfg, std::string_view text, std::string_view source);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical "key = value" rendering of every key.
std::string render_config(const ExperimentConfig& cfg);

// Digest over the settings that determine model behaviour (paths excluded).
std::string config_hash(const ExperimentConfig& cfg);

// Runs one command; returns an ExitCode. Diagnostics go to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace germtl::cli
