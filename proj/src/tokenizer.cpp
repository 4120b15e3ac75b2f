#include "germtl/tokenizer.hpp"

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "germtl/errors.hpp"

namespace germtl {

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return s;
}

// Byte offsets of each code point boundary, including the end.
std::vector<std::size_t> codepoint_offsets(std::string_view s) {
  std::vector<std::size_t> offs;
  int32_t i = 0;
  const auto n = static_cast<int32_t>(s.size());
  while (i < n) {
    offs.push_back(static_cast<std::size_t>(i));
    UChar32 c;
    U8_NEXT(s.data(), i, n, c);
  }
  offs.push_back(s.size());
  return offs;
}

// Longest piece considered during vocabulary construction, in code points.
constexpr std::size_t kMaxPieceChars = 16;

}  // namespace

// ---- Vocab -----------------------------------------------------------------

Vocab::Vocab() : Vocab(special_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& sp = special_tokens();
  if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin())) {
    throw DataError("vocabulary must begin with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw DataError("empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
    }
  }
}

int Vocab::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write vocabulary " + path.string());
  os << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

// ---- pre-tokenization ------------------------------------------------------

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  int32_t i = 0;
  const auto n = static_cast<int32_t>(text.size());
  while (i < n) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(text.data(), i, n, c);
    std::string_view piece = text.substr(static_cast<std::size_t>(start),
                                         static_cast<std::size_t>(i - start));
    if (c >= 0 && u_isUWhiteSpace(c)) {
      if (!cur.empty()) out.push_back(std::exchange(cur, {}));
    } else if (c >= 0 && (u_ispunct(c) || (c < 128 && std::ispunct(c)))) {
      if (!cur.empty()) out.push_back(std::exchange(cur, {}));
      out.emplace_back(piece);
    } else {
      cur.append(piece);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---- vocabulary construction -----------------------------------------------

Vocab build_vocab(std::span<const std::string> corpus, int max_size, int min_freq) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  if (max_size <= kNumSpecial) {
    throw ConfigError("build_vocab: max_size must exceed the " + std::to_string(kNumSpecial) +
                      " special tokens");
  }
  std::map<std::string, long> word_counts;
  for (const auto& text : corpus)
    for (auto& w : pretokenize(text)) ++word_counts[w];

  // Character pieces (initial and continuation forms) and multi-character pieces.
  std::map<std::string, long> char_counts;
  std::map<std::string, long> piece_counts;
  for (const auto& [word, count] : word_counts) {
    const auto offs = codepoint_offsets(word);
    const std::size_t nch = offs.size() - 1;
    for (std::size_t i = 0; i < nch; ++i) {
      std::string ch = word.substr(offs[i], offs[i + 1] - offs[i]);
      char_counts[i == 0 ? ch : std::string(kContinuationPrefix) + ch] += count;
      for (std::size_t j = i + 2; j <= std::min(nch, i + kMaxPieceChars); ++j) {
        std::string sub = word.substr(offs[i], offs[j] - offs[i]);
        piece_counts[i == 0 ? sub : std::string(kContinuationPrefix) + sub] += count;
      }
    }
  }

  struct Candidate {
    std::string token;
    long score;
  };
  auto ranked = [](const std::map<std::string, long>& m, bool weight_by_length, long min_count) {
    std::vector<Candidate> v;
    for (const auto& [tok, count] : m) {
      if (count < min_count) continue;
      long len = 1;
      if (weight_by_length) {
        std::string_view body = tok;
        if (body.starts_with(kContinuationPrefix)) body.remove_prefix(kContinuationPrefix.size());
        len = static_cast<long>(codepoint_offsets(body).size() - 1);
      }
      v.push_back({tok, count * len});
    }
    std::sort(v.begin(), v.end(), [](const Candidate& a, const Candidate& b) {
      return a.score != b.score ? a.score > b.score : a.token < b.token;
    });
    return v;
  };

  std::vector<std::string> tokens = special_tokens();
  auto admit = [&](const std::vector<Candidate>& cands) {
    for (const auto& c : cands) {
      if (static_cast<int>(tokens.size()) >= max_size) return;
      if (std::find(special_tokens().begin(), special_tokens().end(), c.token) !=
          special_tokens().end())
        continue;
      tokens.push_back(c.token);
    }
  };
  admit(ranked(char_counts, false, 1));
  admit(ranked(piece_counts, true, std::max(min_freq, 1)));
  return Vocab(std::move(tokens));
}

// ---- encoding --------------------------------------------------------------

std::vector<std::string> wordpiece(const Vocab& vocab, std::string_view word) {
  const auto offs = codepoint_offsets(word);
  const std::size_t nch = offs.size() - 1;
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < nch) {
    std::size_t end = nch;
    std::string found;
    while (end > start) {
      std::string sub(word.substr(offs[start], offs[end] - offs[start]));
      if (start > 0) sub.insert(0, kContinuationPrefix);
      if (vocab.contains(sub)) {
        found = std::move(sub);
        break;
      }
      --end;
    }
    if (found.empty()) return {vocab.token(kUnkId)};
    pieces.push_back(std::move(found));
    start = end;
  }
  return pieces;
}

std::vector<std::string> tokenize(const Vocab& vocab, std::string_view text) {
  std::vector<std::string> out;
  for (const auto& w : pretokenize(text))
    for (auto& p : wordpiece(vocab, w)) out.push_back(std::move(p));
  return out;
}

EncodedInput encode(const Vocab& vocab, std::string_view text, int max_len) {
  if (max_len < 3) throw ConfigError("encode: max_len must be at least 3");
  const auto len = static_cast<std::size_t>(max_len);
  EncodedInput e;
  e.ids.reserve(len);
  e.ids.push_back(kClsId);
  for (const auto& piece : tokenize(vocab, text)) {
    if (e.ids.size() + 1 >= len) break;
    const int id = vocab.id_of(piece);
    e.ids.push_back(id < 0 ? kUnkId : id);
  }
  e.ids.push_back(kSepId);
  e.attention_mask.assign(e.ids.size(), 1);
  e.ids.resize(len, kPadId);
  e.attention_mask.resize(len, 0);
  return e;
}

std::vector<std::string> decode(const Vocab& vocab, const EncodedInput& input) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i < input.ids.size(); ++i) {
    if (input.ids[i] == kSepId || input.ids[i] == kPadId) break;
    out.push_back(vocab.token(input.ids[i]));
  }
  return out;
}

MaskedInput mask_for_mlm(const EncodedInput& input, int vocab_size, std::uint64_t rng_seed,
                         double mask_prob) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) {
    throw ConfigError("mask_for_mlm: mask_prob must lie in (0, 1)");
  }
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_id(kNumSpecial, std::max(kNumSpecial, vocab_size - 1));

  MaskedInput out{input, std::vector<int>(input.ids.size(), kIgnoreLabel)};
  for (std::size_t i = 0; i < input.ids.size(); ++i) {
    const int id = input.ids[i];
    if (id < kNumSpecial) continue;
    if (unit(rng) >= mask_prob) continue;
    out.labels[i] = id;
    const double r = unit(rng);
    if (r < 0.8) {
      out.masked.ids[i] = kMaskId;
    } else if (r < 0.9 && vocab_size > kNumSpecial) {
      out.masked.ids[i] = random_id(rng);
    }
  }
  return out;
}

}  // namespace germtl
