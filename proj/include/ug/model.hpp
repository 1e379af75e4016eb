#pragma once

#include <string>
#include <vector>

#include "ug/corpus.hpp"
#include "ug/rng.hpp"
#include "ug/tape.hpp"
#include "ug/tensor.hpp"

namespace ug {

class ModelError : public std::runtime_error {
 public:
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
  int embed_dim = 64;       // embedding width; logits tie back to this
  int hidden_dim = 64;      // recurrent width
  int lang_embed_dim = 32;  // language embedding width fed to the decoder
  int universal_depth = 2;
  float dropout = 0.1f;
  std::vector<int> vocab_sizes;  // one per language

  int num_langs() const { return static_cast<int>(vocab_sizes.size()); }

  static ModelConfig desk(std::vector<int> vocab_sizes) {
    ModelConfig c;
    c.vocab_sizes = std::move(vocab_sizes);
    return c;
  }

  // Published-scale preset (300-wide embeddings, 512-wide recurrence). The
  // output layer returns to embedding width so the tied projection stays
  // well-formed.
  static ModelConfig paper(std::vector<int> vocab_sizes) {
    ModelConfig c;
    c.embed_dim = 300;
    c.hidden_dim = 512;
    c.lang_embed_dim = 32;
    c.vocab_sizes = std::move(vocab_sizes);
    return c;
  }

  void validate() const;
};

// One LSTM layer's parameters.
struct LstmLayerParams {
  Parameter w_ih, w_hh, bias;

  void init(const std::string& name, int in, int hidden, RngState& rng);
  Var apply(Tape& tape, Var x, const LstmCarry* carry_in, LstmCarry* carry_out);
  std::vector<Parameter*> params();
};

// Per-language recurrent state carried across BPTT windows of one batch.
struct ModelState {
  LstmCarry encoder;
  std::vector<LstmCarry> universal;
  LstmCarry decoder;
  LstmCarry output;

  void reset() { *this = ModelState{}; }
};

// Per-language input map: embedding table followed by one LSTM.
struct LanguageEncoder {
  Parameter embedding;  // [V x embed_dim]; also the tied output projection
  LstmLayerParams lstm;
};

// Shared stack mapping language-specific states into the common space.
struct UniversalEncoder {
  std::vector<LstmLayerParams> layers;
};

// Per-language output map: language embedding conditions a decoder LSTM,
// an output LSTM returns to embedding width, and logits come from the
// transpose of the encoder's embedding table.
struct LanguageDecoder {
  Parameter lang_embed;  // [1 x lang_embed_dim]
  LstmLayerParams recur;
  LstmLayerParams output;
};

class UgModel {
 public:
  UgModel(ModelConfig cfg, RngState init_rng);

  const ModelConfig& config() const { return cfg_; }

  // Embedding lookup + language LSTM over time-major ids [T x b]. Empty
  // input is an error; ids must be valid for the language's vocabulary.
  Var encode(Tape& tape, const IdMatrix& ids, int lang, ModelState* state = nullptr);

  // Stacked shared LSTM; locked dropout between layers in train mode.
  // Output is the representation the critic sees and downstream consumes.
  Var universal(Tape& tape, Var states, bool train = false, RngState* dropout_rng = nullptr,
                ModelState* state = nullptr);

  // Language embedding concatenated to every timestep, decoder and output
  // LSTMs, then logits through the transposed embedding table.
  Var decode(Tape& tape, Var universal_states, int lang, ModelState* state = nullptr);

  // Mean negative log-likelihood per predicted token for one BPTT window.
  // `universal_out`, when given, receives the universal states var so the
  // caller can reuse the same in-batch samples for the critic.
  Var window_nll(Tape& tape, const BpttSlice& slice, int lang, bool train = false,
                 RngState* dropout_rng = nullptr, ModelState* state = nullptr,
                 Var* universal_out = nullptr);

  // Eval-mode mean NLL over a whole batch (full-length window).
  double lm_nll(const Batch& batch);

  // Universal states of a full batch in eval mode: [T x b x hidden].
  Tensor universal_states(const Batch& batch);

  // Autoregressive sampling. Returns prefix + continuation, stopping at
  // EOS or `max_len` total tokens; temperature 0 is greedy argmax.
  std::vector<int32_t> sample(int lang, const std::vector<int32_t>& prefix, int max_len,
                              float temperature, RngState& rng);

  std::vector<Parameter*> params();
  Parameter& embedding(int lang);
  LanguageEncoder& encoder(int lang) { return encoders_.at(static_cast<size_t>(lang)); }
  LanguageDecoder& decoder(int lang) { return decoders_.at(static_cast<size_t>(lang)); }

 private:
  void check_lang(int lang) const;

  ModelConfig cfg_;
  std::vector<LanguageEncoder> encoders_;
  UniversalEncoder universal_;
  std::vector<LanguageDecoder> decoders_;
};

}  // namespace ug
