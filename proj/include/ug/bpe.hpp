#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ug {

class BpeError : public std::runtime_error {
 public:
  explicit BpeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A subword token: raw bytes plus an end-of-word flag. Words are encoded as
// byte sequences terminated by an end-of-word marker; merges may absorb the
// marker, so "cat</w>" can become a single token. Every byte has a base
// token, which makes encoding total (no UNK for encodable input).
struct BpeToken {
  std::string bytes;
  bool eow = false;

  bool operator==(const BpeToken&) const = default;
};

// Token <-> id bijection. Ids 0..3 are reserved, 4..259 are the single
// bytes, 260 is the bare end-of-word marker, merged tokens follow in merge
// order.
class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr int32_t kBos = 2;
  static constexpr int32_t kEos = 3;
  static constexpr int32_t kByteBase = 4;
  static constexpr int32_t kEow = 260;
  static constexpr int32_t kBaseSize = 261;

  // Base vocabulary: reserved + bytes + end-of-word marker.
  static Vocab base();

  int32_t size() const { return static_cast<int32_t>(tokens_.size()); }
  const BpeToken& token(int32_t id) const;
  const std::string& render(int32_t id) const;

  // Appends a token and returns its id. Rejects duplicates.
  int32_t add(BpeToken t);

  // Id for a rendered token string, or -1.
  int32_t find_rendered(const std::string& rendered) const;

  std::string lang;

 private:
  std::vector<BpeToken> tokens_;
  std::vector<std::string> rendered_;
  std::unordered_map<std::string, int32_t> index_;
};

// Ordered merge list. Merge k combines token ids (left, right) into the
// token with id Vocab::kBaseSize + k.
struct MergeTable {
  std::vector<std::pair<int32_t, int32_t>> merges;
  std::string lang;
};

// Greedy pair-merge learning over a whitespace-pretokenized corpus, one
// document per line. Merging stops at `target_size` tokens or when no pair
// occurs at least twice; ties break by lexicographic order of the rendered
// pair. target_size below the base vocabulary is an error; equal means no
// merge budget.
std::pair<Vocab, MergeTable> bpe_learn(std::istream& corpus, int32_t target_size = 16000);

// Whitespace-pretokenized encoding with byte fallback; BOS/EOS appended.
// decode(encode(s)) == s for any line whose whitespace is already
// normalized (single spaces, no leading/trailing); otherwise decode yields
// the normalized form.
std::vector<int32_t> bpe_encode(std::string_view text, const Vocab& v, const MergeTable& m);

// Inverse of encode up to whitespace normalization. PAD/BOS/EOS are
// skipped; ids outside the vocabulary are an error.
std::string bpe_decode(std::span<const int32_t> ids, const Vocab& v);

// Token-string rendering used by the vocab and merge files: printable
// ASCII except '<' stands for itself, every other byte is <0xNN>, and an
// end-of-word flag appends </w>.
std::string render_token(const BpeToken& t);
BpeToken parse_token(std::string_view rendered);

// Vocab file: one rendered token per line, line number = id.
// Merge file: one "left right" rendered pair per line, in merge order.
void save_vocab(std::ostream& out, const Vocab& v);
Vocab load_vocab(std::istream& in);
void save_merges(std::ostream& out, const MergeTable& m, const Vocab& v);
MergeTable load_merges(std::istream& in, const Vocab& v);

}  // namespace ug
