#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ug/bpe.hpp"
#include "ug/rng.hpp"
#include "ug/tensor.hpp"

namespace ug {

class CorpusError : public std::runtime_error {
 public:
  explicit CorpusError(const std::string& msg) : std::runtime_error(msg) {}
};

// One encoded document (BOS/EOS included).
struct Document {
  int lang = 0;
  std::vector<int32_t> ids;
};

// Single-language batch: PAD-padded token matrix with rows sorted by length
// descending.
struct Batch {
  IdMatrix tokens;  // [batch x max_len]
  int lang = 0;
  std::vector<int> lengths;
};

// BPTT truncation window that grows linearly (rounded down) from `start`
// at step 0 to `end` at `total_steps`.
struct TruncationSchedule {
  int start = 15;
  int end = 50;
  long total_steps = 1;

  int value(long step) const {
    if (step <= 0) return start;
    if (step >= total_steps) return end;
    return start + static_cast<int>((static_cast<long>(end - start) * step) / total_steps);
  }
};

// One truncated-BPTT window: inputs and next-token targets, with the
// number of valid target positions per row. Hidden state carries across
// windows of the same batch (detached); `first` marks where to reset it.
struct BpttSlice {
  IdMatrix inputs;   // [batch x w]
  IdMatrix targets;  // [batch x w]
  std::vector<int> valid;
  bool first = false;
};

// Loads one document per line, skipping empty lines. Missing file or an
// empty result is an error.
std::vector<Document> load_documents(const std::string& path, int lang, const Vocab& v,
                                     const MergeTable& m);

// Length-bucketed single-language batches, interleaved so each language
// appears once per round (in language order) before any repeats.
std::vector<Batch> make_batches(const std::vector<std::vector<Document>>& docs_by_lang,
                                int batch_size, int bucket_width, RngState& rng);

std::vector<BpttSlice> bptt_slices(const Batch& b, long step, const TruncationSchedule& sched);

}  // namespace ug
