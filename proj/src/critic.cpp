#include "ug/critic.hpp"

#include <cmath>

namespace ug {

namespace {
constexpr float kInitRange = 0.08f;
}

double WassersteinEstimate::mean_off_diagonal() const {
  const int m = matrix.rows();
  if (m < 2) return 0.0;
  return sum_off_diagonal() / (static_cast<double>(m) * (m - 1));
}

double WassersteinEstimate::sum_off_diagonal() const {
  const int m = matrix.rows();
  double sum = 0;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      if (a != b) sum += matrix.at(a, b);
  return sum;
}

Critic::Critic(CriticConfig cfg, RngState init_rng) : cfg_(cfg) {
  if (cfg.num_langs < 2) throw CriticError("critic needs at least 2 languages");
  if (cfg.clip <= 0.0f) throw CriticError("clip bound must be positive");
  const int m2 = cfg.num_langs * cfg.num_langs;
  for (int l = 0; l < cfg.depth; ++l) {
    const int in = l == 0 ? cfg.input_dim : cfg.hidden_dim;
    const std::string tag = "critic.l" + std::to_string(l);
    lstm_.emplace_back(tag + ".w_ih",
                       Tensor::uniform({in, 4 * cfg.hidden_dim}, -kInitRange, kInitRange, init_rng));
    lstm_.emplace_back(tag + ".w_hh", Tensor::uniform({cfg.hidden_dim, 4 * cfg.hidden_dim},
                                                      -kInitRange, kInitRange, init_rng));
    lstm_.emplace_back(tag + ".bias", Tensor({4 * cfg.hidden_dim}));
  }
  attn_ = Parameter("critic.attn",
                    Tensor::uniform({cfg.hidden_dim}, -kInitRange, kInitRange, init_rng));
  out_w_ = Parameter("critic.out_w",
                     Tensor::uniform({cfg.hidden_dim, m2}, -kInitRange, kInitRange, init_rng));
  out_b_ = Parameter("critic.out_b", Tensor({m2}));
  bn_gamma_ = Parameter("critic.bn_gamma", Tensor::full({m2}, 1.0f));
  bn_beta_ = Parameter("critic.bn_beta", Tensor({m2}));
  bn_stats_ = BnStats(m2);
  // Parameters live inside the clamp ball from the start; otherwise the
  // first update collapses the output scale and early estimates are
  // meaningless.
  clip_params();
}

Var Critic::leaf_or_frozen(Tape& tape, Parameter& p, bool bind) {
  return bind ? tape.leaf(p) : tape.frozen(p);
}

Var Critic::scores_batch(Tape& tape, const std::vector<TapeGroup>& groups, bool train_bn,
                         bool bind_params, std::vector<std::pair<int, int>>* row_ranges) {
  if (groups.empty()) throw CriticError("critic: no sample groups");

  // Bind each parameter once per tape and reuse across groups.
  std::vector<Var> lstm_vars;
  for (auto& p : lstm_) lstm_vars.push_back(leaf_or_frozen(tape, p, bind_params));
  Var attn = leaf_or_frozen(tape, attn_, bind_params);
  Var out_w = leaf_or_frozen(tape, out_w_, bind_params);
  Var out_b = leaf_or_frozen(tape, out_b_, bind_params);
  Var gamma = leaf_or_frozen(tape, bn_gamma_, bind_params);
  Var beta = leaf_or_frozen(tape, bn_beta_, bind_params);

  std::vector<Var> pooled;
  int row = 0;
  for (const auto& g : groups) {
    const Tensor& st = tape.value(g.states);
    if (st.shape.size() != 3) throw CriticError("critic: states must be [T x b x d]");
    if (st.shape[2] != cfg_.input_dim) throw CriticError("critic: state width mismatch");
    const int b = st.shape[1];
    if (b < 1) throw CriticError("critic: a language has zero samples");
    Var x = g.states;
    for (int l = 0; l < cfg_.depth; ++l)
      x = tape.lstm_seq(x, lstm_vars[static_cast<size_t>(3 * l)],
                        lstm_vars[static_cast<size_t>(3 * l + 1)],
                        lstm_vars[static_cast<size_t>(3 * l + 2)]);
    pooled.push_back(tape.attention_pool(x, attn, g.lengths ? *g.lengths : std::vector<int>{}));
    if (row_ranges) row_ranges->emplace_back(row, row + b);
    row += b;
  }

  Var all = pooled.size() == 1 ? pooled[0] : tape.stack_rows(pooled);
  Var affine = tape.add_rowvec(tape.matmul(all, out_w), out_b);
  return tape.batch_norm(affine, gamma, beta, &bn_stats_, train_bn);
}

Var Critic::objective(Tape& tape, const std::vector<TapeGroup>& groups, bool train_bn,
                      bool bind_params) {
  const int m = cfg_.num_langs;
  if (static_cast<int>(groups.size()) != m)
    throw CriticError("critic objective needs one sample group per language");

  std::vector<std::pair<int, int>> ranges;
  Var scores = scores_batch(tape, groups, train_bn, bind_params, &ranges);

  std::vector<Var> means;
  for (const auto& [r0, r1] : ranges) means.push_back(tape.mean_rows(tape.slice_rows(scores, r0, r1)));
  Var stacked = tape.stack_rows(means);  // [m x m*m]

  // J = sum_{a != b} (mean_a[f_ab] - mean_b[f_ab]); linear in the stacked
  // means with fixed +-1 coefficients.
  Tensor coeffs({m, m * m});
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) {
      if (a == b) continue;
      coeffs.at(a, a * m + b) += 1.0f;
      coeffs.at(b, a * m + b) -= 1.0f;
    }
  return tape.weighted_sum(stacked, std::move(coeffs));
}

Tensor Critic::scores(const Tensor& states_one_seq) {
  if (states_one_seq.shape.size() != 2 || states_one_seq.cols() != cfg_.input_dim)
    throw CriticError("scores: expected [time x d] states");
  const int T = states_one_seq.rows();
  Tensor cube({T, 1, cfg_.input_dim}, states_one_seq.data);
  Tape tape;
  Var out = scores_batch(tape, {{tape.constant(std::move(cube)), nullptr}}, /*train_bn=*/false,
                         /*bind_params=*/false, nullptr);
  const int m = cfg_.num_langs;
  return Tensor({m, m}, tape.value(out).data);
}

WassersteinEstimate Critic::wasserstein_estimate(
    const std::vector<CriticGroup>& samples_by_lang) {
  const int m = cfg_.num_langs;
  if (static_cast<int>(samples_by_lang.size()) != m)
    throw CriticError("wasserstein_estimate needs one sample group per language");

  Tape tape;
  std::vector<TapeGroup> groups;
  for (const auto& g : samples_by_lang) {
    if (g.states.numel() == 0) throw CriticError("a language has zero samples");
    groups.push_back({tape.constant(g.states), &g.lengths});
  }
  std::vector<std::pair<int, int>> ranges;
  Var scores = scores_batch(tape, groups, /*train_bn=*/false, /*bind_params=*/false, &ranges);
  const Tensor& sv = tape.value(scores);

  WassersteinEstimate est;
  est.matrix = Tensor({m, m});
  for (const auto& [r0, r1] : ranges) est.sample_counts.push_back(r1 - r0);

  // per-language mean score vectors
  Tensor means({m, m * m});
  for (int lang = 0; lang < m; ++lang) {
    const auto [r0, r1] = ranges[static_cast<size_t>(lang)];
    for (int r = r0; r < r1; ++r)
      for (int k = 0; k < m * m; ++k) means.at(lang, k) += sv.at(r, k);
    for (int k = 0; k < m * m; ++k) means.at(lang, k) /= static_cast<float>(r1 - r0);
  }
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      if (a != b) est.matrix.at(a, b) = means.at(a, a * m + b) - means.at(b, a * m + b);
  return est;
}

float Critic::update(const std::vector<CriticGroup>& samples_by_lang, RmsPropT<float>& opt) {
  if (static_cast<int>(samples_by_lang.size()) < 2)
    throw CriticError("critic update needs at least 2 languages");

  zero_grads(params());
  Tape tape;
  std::vector<TapeGroup> groups;
  for (const auto& g : samples_by_lang)
    groups.push_back({tape.constant(g.states), &g.lengths});
  Var j = objective(tape, groups, /*train_bn=*/true, /*bind_params=*/true);
  const float value = tape.value(j).data[0];
  // Ascend the estimate: minimize -J.
  tape.backward(tape.scale(j, -1.0f));
  opt.step();
  clip_params();
  return value;
}

void Critic::clip_params(float bound) { ug::clip_params(params(), bound); }

std::vector<Parameter*> Critic::params() {
  std::vector<Parameter*> ps;
  for (auto& p : lstm_) ps.push_back(&p);
  ps.push_back(&attn_);
  ps.push_back(&out_w_);
  ps.push_back(&out_b_);
  ps.push_back(&bn_gamma_);
  ps.push_back(&bn_beta_);
  return ps;
}

}  // namespace ug
