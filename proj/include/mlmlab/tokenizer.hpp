#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mlmlab {

// Cased subword inventory. Ids are dense, specials pinned to 0..4.
// Continuation pieces carry a "##" prefix in their surface form.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kUnk = 1;
  static constexpr int64_t kCls = 2;
  static constexpr int64_t kSep = 3;
  static constexpr int64_t kMask = 4;
  static constexpr int64_t kNumSpecials = 5;

  static const std::vector<std::string>& special_tokens();

  // Builds from an ordered token list; validates specials and uniqueness.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  const std::string& token(int64_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(int64_t id) const { return id >= 0 && id < kNumSpecials; }

  // Lookup for a word-initial piece: exact surface match on non-## tokens.
  int64_t initial_id(std::string_view piece) const;
  // Lookup for a continuation piece: "##piece" wins, bare surface is the
  // fallback so raw single characters stay usable in any position.
  int64_t continuation_id(std::string_view piece) const;

  size_t max_piece_bytes() const { return max_piece_bytes_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> surface_to_id_;
  size_t max_piece_bytes_ = 0;
};

// Trains a vocabulary of exactly target_size tokens by frequency-driven
// pair merging over words as character sequences. Deterministic: ties on
// pair frequency break toward the lexicographically smallest pair.
// Throws if target_size is below specials + alphabet or above what the
// corpus can yield.
Vocabulary train_vocab(const std::vector<std::string>& lines, int64_t target_size);

// Whitespace pre-tokenization, then per-word greedy longest-prefix matching.
// A word with an unmatchable character becomes a single [UNK].
std::vector<int64_t> encode(const std::string& text, const Vocabulary& vocab);

// Test utility inverse: strips "##", joins pieces, separates words by space.
std::string decode(const std::vector<int64_t>& ids, const Vocabulary& vocab);

// Fraction of non-special tokens whose occurrence count under encode() over
// the given lines reaches `threshold`. Optionally reports the raw counts.
double coverage_report(const Vocabulary& vocab, const std::vector<std::string>& lines,
                       int64_t threshold, std::map<std::string, int64_t>* counts_out = nullptr);

// Splits a UTF-8 string into single codepoints (as byte substrings).
std::vector<std::string> utf8_chars(const std::string& s);

}  // namespace mlmlab
