#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace germtl {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecial = 5;
inline constexpr int kIgnoreLabel = -100;

inline constexpr std::string_view kContinuationPrefix = "##";

// Subword vocabulary. Ids are dense; the five special tokens hold ids 0-4.
class Vocab {
 public:
  // Builds a vocabulary holding only the special tokens.
  Vocab();
  // Throws DataError unless tokens start with the specials and are unique.
  explicit Vocab(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  // -1 when absent.
  int id_of(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const { return id_of(token) >= 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, line number == id.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Splits on Unicode whitespace; every punctuation code point becomes its own token.
std::vector<std::string> pretokenize(std::string_view text);

// Frequency-ranked WordPiece-style vocabulary. Every character seen in the
// corpus is admitted first (initial and continuation form), then multi-character
// pieces ranked by count × length, ties broken lexicographically. Pieces that
// occur fewer than min_freq times are never admitted.
Vocab build_vocab(std::span<const std::string> corpus, int max_size, int min_freq = 1);

// Greedy longest-match-first WordPiece; a word that cannot be covered maps to [UNK].
std::vector<std::string> wordpiece(const Vocab& vocab, std::string_view word);
std::vector<std::string> tokenize(const Vocab& vocab, std::string_view text);

struct EncodedInput {
  std::vector<int> ids;
  std::vector<std::uint8_t> attention_mask;

  friend bool operator==(const EncodedInput&, const EncodedInput&) = default;
};

// [CLS] pieces... [SEP] [PAD]...; always exactly max_len ids.
EncodedInput encode(const Vocab& vocab, std::string_view text, int max_len);

// Pieces between [CLS] and [SEP].
std::vector<std::string> decode(const Vocab& vocab, const EncodedInput& input);

struct MaskedInput {
  EncodedInput masked;
  std::vector<int> labels;  // original id where selected, kIgnoreLabel elsewhere
};

// Selects each real (non-special, non-PAD) position with probability mask_prob;
// selected positions become [MASK] 80% of the time, a random non-special id 10%,
// and stay unchanged 10%.
MaskedInput mask_for_mlm(const EncodedInput& input, int vocab_size, std::uint64_t rng_seed,
                         double mask_prob = 0.15);

}  // namespace germtl
