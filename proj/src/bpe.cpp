#include "ug/bpe.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace ug {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> words;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) words.push_back(line.substr(i, j - i));
    i = j;
  }
  return words;
}

std::vector<int32_t> word_to_base_ids(std::string_view word) {
  std::vector<int32_t> ids;
  ids.reserve(word.size() + 1);
  for (const char c : word)
    ids.push_back(Vocab::kByteBase + static_cast<int32_t>(static_cast<uint8_t>(c)));
  ids.push_back(Vocab::kEow);
  return ids;
}

// One in-order left-to-right replacement pass for a single merge.
void apply_merge(std::vector<int32_t>& seq, int32_t left, int32_t right, int32_t result) {
  size_t w = 0;
  for (size_t r = 0; r < seq.size();) {
    if (r + 1 < seq.size() && seq[r] == left && seq[r + 1] == right) {
      seq[w++] = result;
      r += 2;
    } else {
      seq[w++] = seq[r++];
    }
  }
  seq.resize(w);
}

}  // namespace

Vocab Vocab::base() {
  Vocab v;
  v.add({"<pad>", false});
  v.add({"<unk>", false});
  v.add({"<bos>", false});
  v.add({"<eos>", false});
  for (int b = 0; b < 256; ++b) v.add({std::string(1, static_cast<char>(b)), false});
  v.add({"", true});  // bare end-of-word marker
  return v;
}

const BpeToken& Vocab::token(int32_t id) const {
  if (id < 0 || id >= size()) throw BpeError("unknown token id " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

const std::string& Vocab::render(int32_t id) const {
  if (id < 0 || id >= size()) throw BpeError("unknown token id " + std::to_string(id));
  return rendered_[static_cast<size_t>(id)];
}

int32_t Vocab::add(BpeToken t) {
  const int32_t id = size();
  std::string r = id < kByteBase ? t.bytes : render_token(t);
  if (index_.count(r)) throw BpeError("duplicate token " + r);
  index_.emplace(r, id);
  rendered_.push_back(std::move(r));
  tokens_.push_back(std::move(t));
  return id;
}

int32_t Vocab::find_rendered(const std::string& rendered) const {
  const auto it = index_.find(rendered);
  return it == index_.end() ? -1 : it->second;
}

std::string render_token(const BpeToken& t) {
  std::string out;
  for (const char c : t.bytes) {
    const auto u = static_cast<unsigned char>(c);
    if (u >= 0x21 && u <= 0x7e && c != '<') {
      out.push_back(c);
    } else {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "<0x%02X>", u);
      out += buf;
    }
  }
  if (t.eow) out += "</w>";
  return out;
}

BpeToken parse_token(std::string_view rendered) {
  BpeToken t;
  if (rendered.size() >= 4 && rendered.substr(rendered.size() - 4) == "</w>") {
    t.eow = true;
    rendered.remove_suffix(4);
  }
  size_t i = 0;
  while (i < rendered.size()) {
    if (rendered[i] == '<') {
      if (i + 5 >= rendered.size() || rendered[i + 1] != '0' || rendered[i + 2] != 'x' ||
          rendered[i + 5] != '>')
        throw BpeError("bad token escape in '" + std::string(rendered) + "'");
      const auto hex = [&](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw BpeError("bad hex digit in token escape");
      };
      t.bytes.push_back(static_cast<char>(hex(rendered[i + 3]) * 16 + hex(rendered[i + 4])));
      i += 6;
    } else {
      t.bytes.push_back(rendered[i]);
      ++i;
    }
  }
  return t;
}

std::pair<Vocab, MergeTable> bpe_learn(std::istream& corpus, int32_t target_size) {
  if (target_size < Vocab::kBaseSize)
    throw BpeError("target_size below base vocabulary size (" +
                   std::to_string(Vocab::kBaseSize) + ")");

  // Word-type frequencies; std::map keeps iteration deterministic.
  std::map<std::string, int64_t> word_freq;
  std::string line;
  while (std::getline(corpus, line))
    for (const auto w : split_ws(line)) word_freq[std::string(w)] += 1;
  if (word_freq.empty()) throw BpeError("empty corpus");

  Vocab vocab = Vocab::base();
  MergeTable table;

  std::vector<std::vector<int32_t>> seqs;
  std::vector<int64_t> freqs;
  seqs.reserve(word_freq.size());
  for (const auto& [word, freq] : word_freq) {
    seqs.push_back(word_to_base_ids(word));
    freqs.push_back(freq);
  }

  while (vocab.size() < target_size) {
    std::map<std::pair<int32_t, int32_t>, int64_t> counts;
    for (size_t s = 0; s < seqs.size(); ++s) {
      const auto& seq = seqs[s];
      for (size_t i = 0; i + 1 < seq.size(); ++i) counts[{seq[i], seq[i + 1]}] += freqs[s];
    }

    std::pair<int32_t, int32_t> best{-1, -1};
    BpeToken merged;
    for (;;) {
      best = {-1, -1};
      int64_t best_count = 0;
      for (const auto& [pair, count] : counts) {
        if (count < best_count) continue;
        if (count > best_count) {
          best = pair;
          best_count = count;
          continue;
        }
        // Tie: lexicographic order of the rendered pair.
        const auto& bl = vocab.render(best.first);
        const auto& br = vocab.render(best.second);
        const auto& cl = vocab.render(pair.first);
        const auto& cr = vocab.render(pair.second);
        if (std::tie(cl, cr) < std::tie(bl, br)) best = pair;
      }
      if (best_count < 2) {
        best = {-1, -1};
        break;
      }
      merged = {vocab.token(best.first).bytes + vocab.token(best.second).bytes,
                vocab.token(best.second).eow};
      // Distinct merge paths can concatenate to the same byte string; such a
      // candidate would break the token<->id bijection, so it is skipped.
      if (vocab.find_rendered(render_token(merged)) < 0) break;
      counts.erase(best);
    }
    if (best.first < 0) break;

    const int32_t result = vocab.add(merged);
    table.merges.push_back(best);
    for (auto& seq : seqs) apply_merge(seq, best.first, best.second, result);
  }
  return {std::move(vocab), std::move(table)};
}

std::vector<int32_t> bpe_encode(std::string_view text, const Vocab& v, const MergeTable& m) {
  std::vector<int32_t> out{Vocab::kBos};
  for (const auto word : split_ws(text)) {
    std::vector<int32_t> seq = word_to_base_ids(word);
    for (size_t k = 0; k < m.merges.size(); ++k)
      apply_merge(seq, m.merges[k].first, m.merges[k].second,
                  Vocab::kBaseSize + static_cast<int32_t>(k));
    out.insert(out.end(), seq.begin(), seq.end());
  }
  out.push_back(Vocab::kEos);
  (void)v;
  return out;
}

std::string bpe_decode(std::span<const int32_t> ids, const Vocab& v) {
  std::string out;
  for (const int32_t id : ids) {
    if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
    const BpeToken& t = v.token(id);  // throws on unknown id
    if (id == Vocab::kUnk) {
      out += "<unk>";
      continue;
    }
    out += t.bytes;
    if (t.eow) out.push_back(' ');
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

void save_vocab(std::ostream& out, const Vocab& v) {
  for (int32_t id = 0; id < v.size(); ++id) out << v.render(id) << '\n';
}

Vocab load_vocab(std::istream& in) {
  Vocab v = Vocab::base();
  std::string line;
  int32_t id = 0;
  while (std::getline(in, line)) {
    if (id < Vocab::kBaseSize) {
      if (line != v.render(id))
        throw BpeError("vocab file disagrees with base vocabulary at id " + std::to_string(id));
    } else {
      v.add(parse_token(line));
    }
    ++id;
  }
  if (id < Vocab::kBaseSize) throw BpeError("vocab file truncated");
  return v;
}

void save_merges(std::ostream& out, const MergeTable& m, const Vocab& v) {
  for (const auto& [l, r] : m.merges) out << v.render(l) << ' ' << v.render(r) << '\n';
}

MergeTable load_merges(std::istream& in, const Vocab& v) {
  MergeTable m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t sp = line.find(' ');
    if (sp == std::string::npos) throw BpeError("bad merge line: " + line);
    const int32_t l = v.find_rendered(line.substr(0, sp));
    const int32_t r = v.find_rendered(line.substr(sp + 1));
    if (l < 0 || r < 0) throw BpeError("merge references unknown token: " + line);
    m.merges.emplace_back(l, r);
  }
  return m;
}

}  // namespace ug
