#pragma once

#include <string>
#include <vector>

#include "ug/rng.hpp"

namespace ug {

// Synthetic language family: every language realizes the same template set
// and concept inventory, but through its own lexicon (disjoint surface
// forms) and word-order parameter. Semantics are sampled language-
// independently, so a shared rng state yields sentence-aligned parallel
// corpora with identical labels.
//
// Sentences are phrase sequences; head-final languages reverse the word
// order inside each phrase. Every sentence ends with the shared
// punctuation token ".".
class SynthGrammar {
 public:
  enum class Order { kHeadFirst, kHeadFinal };

  struct Phrase {
    std::vector<int> slots;  // slot-class ids
  };
  struct Template {
    std::vector<Phrase> phrases;
    int quality_slot = -1;  // index into flattened slot list, -1 if none
  };

  // Slot classes.
  static constexpr int kAgent = 0;
  static constexpr int kAction = 1;
  static constexpr int kTheme = 2;
  static constexpr int kQuality = 3;  // fillers 0..4 positive, 5..9 negative
  static constexpr int kDegree = 4;
  static constexpr int kPlace = 5;

  static constexpr int kQualityPositives = 5;

  explicit SynthGrammar(int num_langs);

  int num_langs() const { return num_langs_; }
  Order order(int lang) const;
  const std::vector<Template>& templates() const { return templates_; }
  int class_size(int slot_class) const;

  // Surface word for a concept (slot class + filler index) in a language.
  const std::string& word(int lang, int slot_class, int filler) const;

  // Full surface vocabulary of one language, punctuation excluded.
  std::vector<std::string> lexicon(int lang) const;

  // Renders a template instance: fillers are per-slot indices in flattened
  // template order (phrase by phrase, head-first order).
  std::string render(int template_idx, const std::vector<int>& fillers, int lang) const;

  // Samples a template and fillers; language-independent.
  std::pair<int, std::vector<int>> sample(RngState& rng) const;

  // As `sample`, but restricted to quality-bearing templates with the
  // quality filler forced to the given label class (1 = positive).
  std::pair<int, std::vector<int>> sample_task(RngState& rng, int label) const;

 private:
  int num_langs_;
  std::vector<Template> templates_;
  std::vector<int> task_templates_;  // indices of quality-bearing templates
  // lexicon_[lang][class][filler]
  std::vector<std::vector<std::vector<std::string>>> lexicon_;
};

struct LabeledExample {
  std::string text;
  int label = 0;  // binary; depends only on semantic slots
  int lang = 0;
};

std::vector<std::string> generate_corpus(const SynthGrammar& g, int lang, int n, RngState rng);

// Balanced to within one example; label = presence of a positive-quality
// filler in the designated quality slot.
std::vector<LabeledExample> generate_task(const SynthGrammar& g, int lang, int n, RngState rng);

}  // namespace ug
