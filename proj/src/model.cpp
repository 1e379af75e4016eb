#include "ug/model.hpp"

#include <algorithm>
#include <cmath>

#include "ug/bpe.hpp"

namespace ug {

namespace {

constexpr float kInitRange = 0.08f;  // classic LSTM LM uniform init

// Corpus matrices are [batch x time]; the recurrent ops run time-major.
IdMatrix time_major(const IdMatrix& ids) {
  IdMatrix out(ids.cols, ids.rows);
  for (int r = 0; r < ids.rows; ++r)
    for (int c = 0; c < ids.cols; ++c) out.at(c, r) = ids.at(r, c);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim < 1 || hidden_dim < 1 || lang_embed_dim < 1 || universal_depth < 1)
    throw ModelError("model dimensions must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) throw ModelError("dropout must be in [0,1)");
  if (vocab_sizes.empty()) throw ModelError("at least one language required");
  for (const int v : vocab_sizes)
    if (v < 1) throw ModelError("vocab sizes must be positive");
}

void LstmLayerParams::init(const std::string& name, int in, int hidden, RngState& rng) {
  w_ih = Parameter(name + ".w_ih", Tensor::uniform({in, 4 * hidden}, -kInitRange, kInitRange, rng));
  w_hh = Parameter(name + ".w_hh",
                   Tensor::uniform({hidden, 4 * hidden}, -kInitRange, kInitRange, rng));
  bias = Parameter(name + ".bias", Tensor({4 * hidden}));
}

Var LstmLayerParams::apply(Tape& tape, Var x, const LstmCarry* carry_in, LstmCarry* carry_out) {
  return tape.lstm_seq(x, tape.leaf(w_ih), tape.leaf(w_hh), tape.leaf(bias), carry_in, carry_out);
}

std::vector<Parameter*> LstmLayerParams::params() { return {&w_ih, &w_hh, &bias}; }

UgModel::UgModel(ModelConfig cfg, RngState init_rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (int lang = 0; lang < cfg_.num_langs(); ++lang) {
    const std::string tag = "lang" + std::to_string(lang);
    LanguageEncoder enc;
    enc.embedding = Parameter(
        tag + ".embedding", Tensor::uniform({cfg_.vocab_sizes[static_cast<size_t>(lang)],
                                             cfg_.embed_dim},
                                            -kInitRange, kInitRange, init_rng));
    enc.lstm.init(tag + ".encoder", cfg_.embed_dim, cfg_.hidden_dim, init_rng);
    encoders_.push_back(std::move(enc));
  }
  for (int l = 0; l < cfg_.universal_depth; ++l) {
    LstmLayerParams layer;
    layer.init("universal.l" + std::to_string(l), cfg_.hidden_dim, cfg_.hidden_dim, init_rng);
    universal_.layers.push_back(std::move(layer));
  }
  for (int lang = 0; lang < cfg_.num_langs(); ++lang) {
    const std::string tag = "lang" + std::to_string(lang);
    LanguageDecoder dec;
    dec.lang_embed = Parameter(
        tag + ".lang_embed",
        Tensor::uniform({1, cfg_.lang_embed_dim}, -kInitRange, kInitRange, init_rng));
    dec.recur.init(tag + ".decoder", cfg_.hidden_dim + cfg_.lang_embed_dim, cfg_.hidden_dim,
                   init_rng);
    dec.output.init(tag + ".output", cfg_.hidden_dim, cfg_.embed_dim, init_rng);
    decoders_.push_back(std::move(dec));
  }
}

void UgModel::check_lang(int lang) const {
  if (lang < 0 || lang >= cfg_.num_langs())
    throw ModelError("unknown language id " + std::to_string(lang));
}

Var UgModel::encode(Tape& tape, const IdMatrix& ids, int lang, ModelState* state) {
  check_lang(lang);
  if (ids.numel() == 0) throw ModelError("encode: empty token sequence");
  LanguageEncoder& enc = encoders_[static_cast<size_t>(lang)];
  Var emb = tape.rows_lookup(tape.leaf(enc.embedding), ids);
  return enc.lstm.apply(tape, emb, state ? &state->encoder : nullptr,
                        state ? &state->encoder : nullptr);
}

Var UgModel::universal(Tape& tape, Var states, bool train, RngState* dropout_rng,
                       ModelState* state) {
  if (state && state->universal.size() != universal_.layers.size())
    state->universal.resize(universal_.layers.size());
  Var x = states;
  for (size_t l = 0; l < universal_.layers.size(); ++l) {
    if (l > 0 && train && cfg_.dropout > 0.0f && dropout_rng)
      x = tape.dropout(x, cfg_.dropout, *dropout_rng, /*locked=*/true);
    LstmCarry* carry = state ? &state->universal[l] : nullptr;
    x = universal_.layers[l].apply(tape, x, carry, carry);
  }
  return x;
}

Var UgModel::decode(Tape& tape, Var universal_states, int lang, ModelState* state) {
  check_lang(lang);
  LanguageDecoder& dec = decoders_[static_cast<size_t>(lang)];
  const Tensor& b = tape.value(universal_states);
  const int rows = b.rows();
  // Broadcast the language embedding to every timestep.
  Var ones = tape.constant(Tensor::full({rows, 1}, 1.0f));
  Var k = tape.matmul(ones, tape.leaf(dec.lang_embed));
  Var conditioned = tape.concat_cols(universal_states, k);
  Var h = dec.recur.apply(tape, conditioned, state ? &state->decoder : nullptr,
                          state ? &state->decoder : nullptr);
  Var o = dec.output.apply(tape, h, state ? &state->output : nullptr,
                           state ? &state->output : nullptr);
  // Tied projection: logits share storage with the embedding table.
  return tape.matmul_nt(o, tape.leaf(encoders_[static_cast<size_t>(lang)].embedding));
}

Var UgModel::window_nll(Tape& tape, const BpttSlice& slice, int lang, bool train,
                        RngState* dropout_rng, ModelState* state, Var* universal_out) {
  Var enc = encode(tape, time_major(slice.inputs), lang, state);
  Var uni = universal(tape, enc, train, dropout_rng, state);
  if (universal_out) *universal_out = uni;
  Var logits = decode(tape, uni, lang, state);

  const int rows = slice.inputs.rows, cols = slice.inputs.cols;
  std::vector<int32_t> targets(static_cast<size_t>(rows) * cols);
  std::vector<float> weights(static_cast<size_t>(rows) * cols, 0.0f);
  // logits rows are laid out [time x batch]
  for (int t = 0; t < cols; ++t)
    for (int r = 0; r < rows; ++r) {
      const size_t idx = static_cast<size_t>(t) * rows + r;
      if (t < slice.valid[static_cast<size_t>(r)]) {
        targets[idx] = slice.targets.at(r, t);
        weights[idx] = 1.0f;
      }
    }
  return tape.softmax_xent(logits, targets, weights);
}

double UgModel::lm_nll(const Batch& batch) {
  TruncationSchedule whole{batch.tokens.cols, batch.tokens.cols, 1};
  const auto slices = bptt_slices(batch, 0, whole);
  ModelState state;
  double total = 0, count = 0;
  for (const auto& slice : slices) {
    Tape tape;
    Var nll = window_nll(tape, slice, batch.lang, false, nullptr, &state, nullptr);
    double valid = 0;
    for (const int v : slice.valid) valid += v;
    total += static_cast<double>(tape.value(nll).data[0]) * valid;
    count += valid;
  }
  return total / count;
}

Tensor UgModel::universal_states(const Batch& batch) {
  Tape tape;
  Var enc = encode(tape, time_major(batch.tokens), batch.lang, nullptr);
  Var uni = universal(tape, enc, false, nullptr, nullptr);
  return tape.value(uni);
}

std::vector<int32_t> UgModel::sample(int lang, const std::vector<int32_t>& prefix, int max_len,
                                     float temperature, RngState& rng) {
  check_lang(lang);
  if (temperature < 0.0f) throw ModelError("sample: temperature must be >= 0");
  const int vsize = cfg_.vocab_sizes[static_cast<size_t>(lang)];

  std::vector<int32_t> out = prefix;
  if (out.empty()) out.push_back(Vocab::kBos);

  // Picks the next id from the last timestep's logit row.
  const auto pick = [&](const Tensor& logits) -> int32_t {
    const size_t off = logits.numel() - static_cast<size_t>(vsize);
    const float* l = logits.data.data() + off;
    if (temperature == 0.0f) {
      int32_t best = 0;
      for (int v = 1; v < vsize; ++v)
        if (l[v] > l[best]) best = v;
      return best;
    }
    double mx = l[0];
    for (int v = 1; v < vsize; ++v) mx = std::max(mx, static_cast<double>(l[v]));
    std::vector<double> p(static_cast<size_t>(vsize));
    double z = 0;
    for (int v = 0; v < vsize; ++v) {
      p[static_cast<size_t>(v)] = std::exp((static_cast<double>(l[v]) - mx) / temperature);
      z += p[static_cast<size_t>(v)];
    }
    const double u = rng.next_double() * z;
    double acc = 0;
    for (int v = 0; v < vsize; ++v) {
      acc += p[static_cast<size_t>(v)];
      if (u < acc) return v;
    }
    return vsize - 1;
  };

  ModelState state;
  // The prefix runs as one window; its last logit row conditions the first
  // generated token, after which generation is one step at a time.
  std::vector<int32_t> pending = out;
  while (static_cast<int>(out.size()) < max_len && out.back() != Vocab::kEos) {
    IdMatrix ids(static_cast<int>(pending.size()), 1);
    for (size_t i = 0; i < pending.size(); ++i) ids.v[i] = pending[i];
    Tape tape;
    Var uni = universal(tape, encode(tape, ids, lang, &state), false, nullptr, &state);
    Var logits = decode(tape, uni, lang, &state);
    const int32_t next = pick(tape.value(logits));
    out.push_back(next);
    pending = {next};
  }
  return out;
}

std::vector<Parameter*> UgModel::params() {
  std::vector<Parameter*> ps;
  for (auto& enc : encoders_) {
    ps.push_back(&enc.embedding);
    for (auto* p : enc.lstm.params()) ps.push_back(p);
  }
  for (auto& layer : universal_.layers)
    for (auto* p : layer.params()) ps.push_back(p);
  for (auto& dec : decoders_) {
    ps.push_back(&dec.lang_embed);
    for (auto* p : dec.recur.params()) ps.push_back(p);
    for (auto* p : dec.output.params()) ps.push_back(p);
  }
  return ps;
}

Parameter& UgModel::embedding(int lang) {
  check_lang(lang);
  return encoders_[static_cast<size_t>(lang)].embedding;
}

}  // namespace ug
