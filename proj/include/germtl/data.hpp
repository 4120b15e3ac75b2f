#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "germtl/model.hpp"

namespace germtl {

// One comment with its three binary labels. Unlabeled inputs (prediction
// files without label columns) carry -1.
struct Example {
  std::string id;
  std::string text;
  std::array<int, 3> labels{0, 0, 0};  // indexed by task_index()

  int label(Task t) const { return labels[task_index(t)]; }
  friend bool operator==(const Example&, const Example&) = default;
};

// Column layout of a delimited dataset file.
struct FormatSpec {
  char delimiter = ',';
  std::string id_column = "comment_id";
  std::string text_column = "comment_text";
  std::array<std::string, 3> label_columns{"Sub1_Toxic", "Sub2_Engaging", "Sub3_FactClaiming"};
  // When false, missing label columns are tolerated and labels are -1.
  bool require_labels = true;
};

// Histogram over the eight (toxic, engaging, fact) label triples.
struct DatasetSummary {
  long total = 0;
  std::array<long, 8> counts{};  // index = toxic + 2*engaging + 4*fact

  static constexpr std::size_t cell(int toxic, int engaging, int fact) {
    return static_cast<std::size_t>(toxic + 2 * engaging + 4 * fact);
  }
  long count(int toxic, int engaging, int fact) const { return counts[cell(toxic, engaging, fact)]; }
};

// Parses delimited text with a header row and standard double-quote escaping.
// Text is NFC-normalized and otherwise preserved. Errors carry the 1-based
// line number where the offending record starts.
std::vector<Example> parse_dataset(std::string_view content, const FormatSpec& format = {},
                                   std::string_view source = "<memory>");
std::vector<Example> load_dataset(const std::filesystem::path& path,
                                  const FormatSpec& format = {});

std::string format_dataset(std::span<const Example> data, const FormatSpec& format = {});
void write_dataset(const std::filesystem::path& path, std::span<const Example> data,
                   const FormatSpec& format = {});

// Unicode NFC normalization of UTF-8 text.
std::string nfc_normalize(std::string_view utf8);

DatasetSummary summarize(std::span<const Example> data);

// Seeded shuffle, then a prefix of round(ratio * n) examples becomes the training part.
std::pair<std::vector<Example>, std::vector<Example>> split(std::span<const Example> data,
                                                            double ratio, std::uint64_t seed);

// ---- synthetic data --------------------------------------------------------

inline constexpr std::array<std::string_view, 3> kMarkerTokens{"TOXMARK", "ENGMARK", "FACTMARK"};

// Generator parameters. A latent class z ~ Bernoulli(positive_rate) is drawn
// per example; each task label equals z except for an independent flip chosen
// so that any two label columns agree with probability `correlation`
// (0.5 = independent, 1 = identical). Each task's marker token is planted iff
// its label is 1, except that the planted/absent decision is inverted with
// probability `noise`.
struct SynthSpec {
  double correlation = 1.0;
  double noise = 0.0;
  double positive_rate = 0.5;
  int min_filler = 4;
  int max_filler = 12;

  void validate() const;
  // Per-task probability that a label differs from the latent class.
  double flip_probability() const;
  // Expected share of each DatasetSummary cell.
  std::array<double, 8> cell_probabilities() const;
};

std::vector<Example> synth_generate(int n, std::uint64_t seed, const SynthSpec& spec = {});

// ---- predictions -----------------------------------------------------------

inline constexpr std::string_view kPredictionHeader =
    "comment_id,Sub1_Toxic,Sub2_Engaging,Sub3_FactClaiming";

struct PredictionRow {
  std::string id;
  std::array<int, 3> labels{};
  friend bool operator==(const PredictionRow&, const PredictionRow&) = default;
};

std::string format_predictions(std::span<const PredictionRow> rows);
void write_predictions(const std::filesystem::path& path, std::span<const PredictionRow> rows);
std::vector<PredictionRow> read_predictions(const std::filesystem::path& path);

}  // namespace germtl
