#include "ug/synthlang.hpp"

#include <array>
#include <stdexcept>

namespace ug {

namespace {

constexpr std::array<int, 6> kClassSizes{10, 8, 10, 10, 4, 6};

// Disjoint consonant inventories keep surface vocabularies disjoint across
// languages; every syllable carries a consonant, so no two languages can
// produce the same word.
constexpr std::array<const char*, 5> kConsonants{"bdgk", "lmnp", "rstv", "fhjw", "czqx"};
constexpr const char* kVowels = "aeiou";

std::string make_word(int lang, int concept_index) {
  const std::string cons = kConsonants[static_cast<size_t>(lang)];
  const std::string vowels = kVowels;
  const int base = static_cast<int>(cons.size() * vowels.size());  // 20 syllables
  std::string w;
  int x = concept_index;
  for (int s = 0; s < 2; ++s) {  // two syllables cover 400 concepts
    const int syl = x % base;
    x /= base;
    w.push_back(cons[static_cast<size_t>(syl) / vowels.size()]);
    w.push_back(vowels[static_cast<size_t>(syl) % vowels.size()]);
  }
  return w;
}

}  // namespace

SynthGrammar::SynthGrammar(int num_langs) : num_langs_(num_langs) {
  if (num_langs < 1 || num_langs > static_cast<int>(kConsonants.size()))
    throw std::invalid_argument("SynthGrammar: unsupported language count");

  // Templates: phrase lists over slot classes, 2-8 slots per sentence.
  const auto tpl = [this](std::vector<Phrase> phrases) {
    Template t;
    t.phrases = std::move(phrases);
    int flat = 0;
    for (const auto& p : t.phrases)
      for (const int slot : p.slots) {
        if (slot == kQuality) t.quality_slot = flat;
        ++flat;
      }
    templates_.push_back(std::move(t));
  };
  tpl({{{kAgent}}, {{kAction}}});
  tpl({{{kAgent}}, {{kAction, kTheme}}});
  tpl({{{kAgent}}, {{kAction, kQuality, kTheme}}});
  tpl({{{kQuality, kAgent}}, {{kAction}}});
  tpl({{{kAgent}}, {{kAction, kTheme}}, {{kPlace}}});
  tpl({{{kDegree, kQuality, kAgent}}, {{kAction, kTheme}}});
  tpl({{{kAgent}}, {{kAction, kDegree, kQuality, kTheme}}, {{kPlace}}});
  tpl({{{kAgent, kPlace}}, {{kAction}}});
  tpl({{{kAgent}}, {{kAction, kQuality, kTheme}}, {{kDegree, kPlace}}});
  tpl({{{kDegree, kAgent}}, {{kAction, kTheme, kTheme}}});
  tpl({{{kQuality, kTheme}}, {{kAction, kAgent}}, {{kPlace, kDegree}}});
  tpl({{{kAgent, kAgent}}, {{kAction, kQuality, kTheme, kPlace}}, {{kDegree}}});

  for (size_t i = 0; i < templates_.size(); ++i)
    if (templates_[i].quality_slot >= 0) task_templates_.push_back(static_cast<int>(i));

  lexicon_.resize(static_cast<size_t>(num_langs));
  for (int lang = 0; lang < num_langs; ++lang) {
    auto& classes = lexicon_[static_cast<size_t>(lang)];
    classes.resize(kClassSizes.size());
    int concept_index = 0;
    for (size_t c = 0; c < kClassSizes.size(); ++c)
      for (int f = 0; f < kClassSizes[c]; ++f)
        classes[c].push_back(make_word(lang, concept_index++));
  }
}

SynthGrammar::Order SynthGrammar::order(int lang) const {
  return lang % 2 == 0 ? Order::kHeadFirst : Order::kHeadFinal;
}

int SynthGrammar::class_size(int slot_class) const {
  return kClassSizes.at(static_cast<size_t>(slot_class));
}

const std::string& SynthGrammar::word(int lang, int slot_class, int filler) const {
  return lexicon_.at(static_cast<size_t>(lang))
      .at(static_cast<size_t>(slot_class))
      .at(static_cast<size_t>(filler));
}

std::vector<std::string> SynthGrammar::lexicon(int lang) const {
  std::vector<std::string> words;
  for (const auto& cls : lexicon_.at(static_cast<size_t>(lang)))
    words.insert(words.end(), cls.begin(), cls.end());
  return words;
}

std::string SynthGrammar::render(int template_idx, const std::vector<int>& fillers,
                                 int lang) const {
  const Template& t = templates_.at(static_cast<size_t>(template_idx));
  std::string out;
  size_t flat = 0;
  for (const auto& phrase : t.phrases) {
    std::vector<std::string> words;
    for (const int slot : phrase.slots) words.push_back(word(lang, slot, fillers.at(flat++)));
    if (order(lang) == Order::kHeadFinal) std::reverse(words.begin(), words.end());
    for (const auto& w : words) {
      if (!out.empty()) out.push_back(' ');
      out += w;
    }
  }
  out += " .";
  return out;
}

std::pair<int, std::vector<int>> SynthGrammar::sample(RngState& rng) const {
  const int idx = static_cast<int>(rng.next_below(templates_.size()));
  std::vector<int> fillers;
  for (const auto& phrase : templates_[static_cast<size_t>(idx)].phrases)
    for (const int slot : phrase.slots)
      fillers.push_back(static_cast<int>(rng.next_below(
          static_cast<uint64_t>(kClassSizes[static_cast<size_t>(slot)]))));
  return {idx, std::move(fillers)};
}

std::pair<int, std::vector<int>> SynthGrammar::sample_task(RngState& rng, int label) const {
  const int idx =
      task_templates_[static_cast<size_t>(rng.next_below(task_templates_.size()))];
  const Template& t = templates_[static_cast<size_t>(idx)];
  std::vector<int> fillers;
  int flat = 0;
  for (const auto& phrase : t.phrases)
    for (const int slot : phrase.slots) {
      if (flat == t.quality_slot) {
        // positive fillers are 0..4, negative 5..9
        const int off = static_cast<int>(rng.next_below(kQualityPositives));
        fillers.push_back(label == 1 ? off : kQualityPositives + off);
      } else {
        fillers.push_back(static_cast<int>(rng.next_below(
            static_cast<uint64_t>(kClassSizes[static_cast<size_t>(slot)]))));
      }
      ++flat;
    }
  return {idx, std::move(fillers)};
}

std::vector<std::string> generate_corpus(const SynthGrammar& g, int lang, int n, RngState rng) {
  if (n < 1) throw std::invalid_argument("generate_corpus: n must be >= 1");
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto [idx, fillers] = g.sample(rng);
    out.push_back(g.render(idx, fillers, lang));
  }
  return out;
}

std::vector<LabeledExample> generate_task(const SynthGrammar& g, int lang, int n, RngState rng) {
  if (n < 2) throw std::invalid_argument("generate_task: n must be >= 2");
  std::vector<LabeledExample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;  // balanced to within one example
    const auto [idx, fillers] = g.sample_task(rng, label);
    out.push_back({g.render(idx, fillers, lang), label, lang});
  }
  return out;
}

}  // namespace ug
