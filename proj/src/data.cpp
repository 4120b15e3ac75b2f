#include "germtl/data.hpp"

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "germtl/errors.hpp"

namespace germtl {

namespace {

struct Record {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

// RFC 4180-style reader: quoted fields may hold the delimiter, doubled quotes
// and line breaks.
std::vector<Record> read_records(std::string_view s, char delim, std::string_view source) {
  std::vector<Record> out;
  std::size_t i = 0, line = 1;
  auto fail = [&](std::size_t at_line, const std::string& what) {
    throw DataError(std::string(source) + ":" + std::to_string(at_line) + ": " + what);
  };
  while (i < s.size()) {
    Record rec;
    rec.line = line;
    std::string field;
    bool done = false;
    while (!done) {
      field.clear();
      if (i < s.size() && s[i] == '"') {
        ++i;
        for (;;) {
          if (i >= s.size()) fail(rec.line, "unterminated quoted field");
          const char c = s[i++];
          if (c == '"') {
            if (i < s.size() && s[i] == '"') {
              field += '"';
              ++i;
            } else {
              break;
            }
          } else {
            if (c == '\n') ++line;
            field += c;
          }
        }
        if (i < s.size() && s[i] != delim && s[i] != '\n' && s[i] != '\r') {
          fail(rec.line, "unexpected character after closing quote");
        }
      } else {
        while (i < s.size() && s[i] != delim && s[i] != '\n' && s[i] != '\r') {
          if (s[i] == '"') fail(rec.line, "quote inside unquoted field");
          field += s[i++];
        }
      }
      rec.fields.push_back(field);
      if (i < s.size() && s[i] == delim) {
        ++i;
      } else {
        if (i < s.size() && s[i] == '\r') ++i;
        if (i < s.size() && s[i] == '\n') ++i;
        ++line;
        done = true;
      }
    }
    if (!(rec.fields.size() == 1 && rec.fields[0].empty())) out.push_back(std::move(rec));
  }
  return out;
}

bool needs_quotes(std::string_view f, char delim) {
  return f.find_first_of(std::string{delim, '"', '\n', '\r'}) != std::string_view::npos;
}

std::string quote(std::string_view f, char delim) {
  if (!needs_quotes(f, delim)) return std::string(f);
  std::string q = "\"";
  for (char c : f) {
    if (c == '"') q += '"';
    q += c;
  }
  q += '"';
  return q;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << content;
}

int parse_label(const std::string& f, std::string_view source, std::size_t line,
                const std::string& column) {
  if (f == "0") return 0;
  if (f == "1") return 1;
  throw DataError(std::string(source) + ":" + std::to_string(line) + ": column " + column +
                  " has non-binary label '" + f + "'");
}

}  // namespace

std::string nfc_normalize(std::string_view utf8) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw DataError("ICU NFC normalizer unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(utf8.data(), static_cast<int32_t>(utf8.size())));
  if (nfc->isNormalized(u, status) && U_SUCCESS(status)) return std::string(utf8);
  status = U_ZERO_ERROR;
  icu::UnicodeString n = nfc->normalize(u, status);
  if (U_FAILURE(status)) throw DataError("NFC normalization failed");
  std::string out;
  n.toUTF8String(out);
  return out;
}

std::vector<Example> parse_dataset(std::string_view content, const FormatSpec& format,
                                   std::string_view source) {
  if (content.starts_with("\xEF\xBB\xBF")) content.remove_prefix(3);
  auto records = read_records(content, format.delimiter, source);
  if (records.empty()) throw DataError(std::string(source) + ": missing header row");
  const auto& header = records.front().fields;
  auto column = [&](const std::string& name, bool required) -> long {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) {
        throw DataError(std::string(source) + ":1: header lacks column '" + name + "'");
      }
      return -1;
    }
    return it - header.begin();
  };
  const long id_col = column(format.id_column, true);
  const long text_col = column(format.text_column, true);
  std::array<long, 3> label_cols{};
  for (std::size_t k = 0; k < 3; ++k)
    label_cols[k] = column(format.label_columns[k], format.require_labels);

  std::vector<Example> out;
  out.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.fields.size() != header.size()) {
      throw DataError(std::string(source) + ":" + std::to_string(rec.line) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(rec.fields.size()));
    }
    Example e;
    e.id = rec.fields[static_cast<std::size_t>(id_col)];
    e.text = nfc_normalize(rec.fields[static_cast<std::size_t>(text_col)]);
    for (std::size_t k = 0; k < 3; ++k) {
      e.labels[k] = label_cols[k] < 0
                        ? -1
                        : parse_label(rec.fields[static_cast<std::size_t>(label_cols[k])], source,
                                      rec.line, format.label_columns[k]);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> load_dataset(const std::filesystem::path& path, const FormatSpec& format) {
  return parse_dataset(read_file(path), format, path.string());
}

std::string format_dataset(std::span<const Example> data, const FormatSpec& format) {
  const char d = format.delimiter;
  std::string out = quote(format.id_column, d) + d + quote(format.text_column, d);
  for (const auto& c : format.label_columns) out += d + quote(c, d);
  out += '\n';
  for (const auto& e : data) {
    out += quote(e.id, d) + d + quote(e.text, d);
    for (int y : e.labels) out += d + std::to_string(y);
    out += '\n';
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const Example> data,
                   const FormatSpec& format) {
  write_file(path, format_dataset(data, format));
}

DatasetSummary summarize(std::span<const Example> data) {
  DatasetSummary s;
  for (const auto& e : data) {
    for (int y : e.labels) {
      if (y != 0 && y != 1) throw DataError("summarize: example " + e.id + " is unlabeled");
    }
    ++s.counts[DatasetSummary::cell(e.labels[0], e.labels[1], e.labels[2])];
    ++s.total;
  }
  return s;
}

std::pair<std::vector<Example>, std::vector<Example>> split(std::span<const Example> data,
                                                            double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must lie in (0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train =
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(data.size())));
  std::pair<std::vector<Example>, std::vector<Example>> out;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? out.first : out.second).push_back(data[order[i]]);
  return out;
}

// ---- synthetic data --------------------------------------------------------

void SynthSpec::validate() const {
  if (!(correlation >= 0.5 && correlation <= 1.0)) {
    throw ConfigError("synth: correlation (pairwise agreement) must lie in [0.5, 1]");
  }
  if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("synth: noise must lie in [0, 0.5]");
  if (!(positive_rate > 0.0 && positive_rate < 1.0)) {
    throw ConfigError("synth: positive_rate must lie in (0, 1)");
  }
  if (min_filler < 0 || max_filler < min_filler) throw ConfigError("synth: bad filler range");
}

double SynthSpec::flip_probability() const {
  // Two flips with rate q agree with probability (1-q)^2 + q^2 = correlation.
  return (1.0 - std::sqrt(std::max(0.0, 2.0 * correlation - 1.0))) / 2.0;
}

std::array<double, 8> SynthSpec::cell_probabilities() const {
  const double q = flip_probability();
  std::array<double, 8> p{};
  for (int cell = 0; cell < 8; ++cell) {
    for (int z = 0; z < 2; ++z) {
      double pr = z ? positive_rate : 1.0 - positive_rate;
      for (int k = 0; k < 3; ++k) {
        const int y = (cell >> k) & 1;
        pr *= y == z ? 1.0 - q : q;
      }
      p[static_cast<std::size_t>(cell)] += pr;
    }
  }
  return p;
}

namespace {
constexpr std::array<std::string_view, 32> kFiller{
    "heute",  "wir",     "die",    "Regierung", "Meinung", "Frage",   "immer",   "noch",
    "sehr",   "viele",   "Leute",  "Thema",     "Politik", "Sendung", "Gast",    "gut",
    "warum",  "denn",    "aber",   "nicht",     "wieder",  "Jahr",    "Land",    "Stadt",
    "Zeit",   "Familie", "Arbeit", "Schule",    "sagen",   "finde",   "gestern", "morgen"};
}

std::vector<Example> synth_generate(int n, std::uint64_t seed, const SynthSpec& spec) {
  if (n < 1) throw ConfigError("synth: n must be at least 1");
  spec.validate();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution latent(spec.positive_rate);
  std::bernoulli_distribution flip(spec.flip_probability());
  std::bernoulli_distribution noisy(spec.noise);
  std::uniform_int_distribution<int> n_filler(spec.min_filler, spec.max_filler);
  std::uniform_int_distribution<std::size_t> word(0, kFiller.size() - 1);

  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Example e;
    char id[32];
    std::snprintf(id, sizeof id, "syn%06d", i);
    e.id = id;
    const int z = latent(rng) ? 1 : 0;
    std::vector<std::string_view> words;
    const int nf = n_filler(rng);
    for (int w = 0; w < nf; ++w) words.push_back(kFiller[word(rng)]);
    for (std::size_t k = 0; k < 3; ++k) {
      e.labels[k] = flip(rng) ? 1 - z : z;
      const bool planted = (e.labels[k] == 1) != noisy(rng);
      if (planted) {
        std::uniform_int_distribution<std::size_t> pos(0, words.size());
        words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos(rng)), kMarkerTokens[k]);
      }
    }
    for (std::size_t w = 0; w < words.size(); ++w) {
      if (w) e.text += ' ';
      e.text += words[w];
    }
    out.push_back(std::move(e));
  }
  return out;
}

// ---- predictions -----------------------------------------------------------

std::string format_predictions(std::span<const PredictionRow> rows) {
  std::string out(kPredictionHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += quote(r.id, ',');
    for (int y : r.labels) out += ',' + std::to_string(y);
    out += '\n';
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, std::span<const PredictionRow> rows) {
  write_file(path, format_predictions(rows));
}

std::vector<PredictionRow> read_predictions(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  auto records = read_records(content, ',', path.string());
  if (records.empty()) throw DataError(path.string() + ": missing header row");
  std::vector<PredictionRow> out;
  const auto& header = records.front().fields;
  static const std::array<std::string, 4> kCols{"comment_id", "Sub1_Toxic", "Sub2_Engaging",
                                                "Sub3_FactClaiming"};
  std::array<std::size_t, 4> idx{};
  for (std::size_t c = 0; c < 4; ++c) {
    auto it = std::find(header.begin(), header.end(), kCols[c]);
    if (it == header.end()) throw DataError(path.string() + ":1: missing column " + kCols[c]);
    idx[c] = static_cast<std::size_t>(it - header.begin());
  }
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.fields.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(rec.line) + ": wrong field count");
    }
    PredictionRow row;
    row.id = rec.fields[idx[0]];
    for (std::size_t k = 0; k < 3; ++k)
      row.labels[k] = parse_label(rec.fields[idx[k + 1]], path.string(), rec.line, kCols[k + 1]);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace germtl
