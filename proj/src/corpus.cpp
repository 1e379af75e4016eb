#include "ug/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace ug {

std::vector<Document> load_documents(const std::string& path, int lang, const Vocab& v,
                                     const MergeTable& m) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path);
  std::vector<Document> docs;
  std::string line;
  while (std::getline(in, line)) {
    auto ids = bpe_encode(line, v, m);
    if (ids.size() <= 2) continue;  // whitespace-only line
    docs.push_back({lang, std::move(ids)});
  }
  if (docs.empty()) throw CorpusError("no documents in corpus file: " + path);
  return docs;
}

namespace {

Batch build_batch(std::vector<const Document*> docs, int lang) {
  std::sort(docs.begin(), docs.end(), [](const Document* a, const Document* b) {
    if (a->ids.size() != b->ids.size()) return a->ids.size() > b->ids.size();
    return a->ids < b->ids;  // deterministic tie order
  });
  const int rows = static_cast<int>(docs.size());
  const int max_len = static_cast<int>(docs[0]->ids.size());
  Batch b;
  b.lang = lang;
  b.tokens = IdMatrix(rows, max_len);  // zero-filled = PAD
  b.lengths.resize(rows);
  for (int r = 0; r < rows; ++r) {
    b.lengths[r] = static_cast<int>(docs[r]->ids.size());
    for (int c = 0; c < b.lengths[r]; ++c) b.tokens.at(r, c) = docs[r]->ids[c];
  }
  return b;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<std::vector<Document>>& docs_by_lang,
                                int batch_size, int bucket_width, RngState& rng) {
  if (batch_size < 1) throw CorpusError("batch_size must be >= 1");
  if (bucket_width < 1) throw CorpusError("bucket_width must be >= 1");

  std::vector<std::vector<Batch>> per_lang;
  for (size_t lang = 0; lang < docs_by_lang.size(); ++lang) {
    std::map<int, std::vector<const Document*>> buckets;
    for (const Document& d : docs_by_lang[lang])
      buckets[static_cast<int>(d.ids.size()) / bucket_width].push_back(&d);

    std::vector<Batch> batches;
    for (auto& [bucket, docs] : buckets) {
      rng.shuffle(docs);
      for (size_t i = 0; i < docs.size(); i += batch_size) {
        const size_t end = std::min(docs.size(), i + batch_size);
        batches.push_back(build_batch({docs.begin() + i, docs.begin() + end},
                                      static_cast<int>(lang)));
      }
    }
    rng.shuffle(batches);
    per_lang.push_back(std::move(batches));
  }

  // Round-robin over languages; exhausted languages drop out of the round.
  std::vector<Batch> out;
  std::vector<size_t> cursor(per_lang.size(), 0);
  for (bool any = true; any;) {
    any = false;
    for (size_t lang = 0; lang < per_lang.size(); ++lang) {
      if (cursor[lang] < per_lang[lang].size()) {
        out.push_back(std::move(per_lang[lang][cursor[lang]++]));
        any = true;
      }
    }
  }
  return out;
}

std::vector<BpttSlice> bptt_slices(const Batch& b, long step, const TruncationSchedule& sched) {
  const int w = sched.value(step);
  const int rows = b.tokens.rows;
  const int max_inputs = b.tokens.cols - 1;  // last token is never an input
  std::vector<BpttSlice> slices;
  for (int c0 = 0; c0 < max_inputs; c0 += w) {
    const int c1 = std::min(max_inputs, c0 + w);
    BpttSlice s;
    s.first = c0 == 0;
    s.inputs = IdMatrix(rows, c1 - c0);
    s.targets = IdMatrix(rows, c1 - c0);
    s.valid.resize(rows);
    for (int r = 0; r < rows; ++r) {
      s.valid[r] = std::clamp(b.lengths[r] - 1 - c0, 0, c1 - c0);
      for (int c = c0; c < c1; ++c) {
        s.inputs.at(r, c - c0) = c < b.lengths[r] ? b.tokens.at(r, c) : 0;
        s.targets.at(r, c - c0) = c + 1 < b.lengths[r] ? b.tokens.at(r, c + 1) : 0;
      }
    }
    slices.push_back(std::move(s));
  }
  return slices;
}

}  // namespace ug
