#pragma once

#include <string>
#include <vector>

#include "ug/optim.hpp"
#include "ug/rng.hpp"
#include "ug/tape.hpp"
#include "ug/tensor.hpp"

namespace ug {

class CriticError : public std::runtime_error {
 public:
  explicit CriticError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CriticConfig {
  int input_dim = 64;   // width of the universal states
  int hidden_dim = 64;  // critic LSTM width
  int depth = 2;
  int num_langs = 2;    // m; output is an m x m matrix per sequence
  float clip = 0.01f;   // weight clamp enforcing the Lipschitz bound
};

// Pairwise distance estimates over the universal representations. Entry
// (a,b) is the empirical mean gap of critic output f_ab between language
// a's samples and language b's samples; the diagonal is identically zero
// and excluded from every objective.
struct WassersteinEstimate {
  Tensor matrix;                   // [m x m]
  std::vector<int> sample_counts;  // per language

  double mean_off_diagonal() const;
  double sum_off_diagonal() const;
};

// One language's batch of state sequences for the critic: [T x b x d]
// with per-sequence valid lengths.
struct CriticGroup {
  Tensor states;
  std::vector<int> lengths;
};

// Wasserstein-1 critic: stacked LSTM over state sequences, linear sequence
// attention pooling, affine map to m*m scores, batch norm at the end, and
// parameter clamping after every update.
class Critic {
 public:
  Critic(CriticConfig cfg, RngState init_rng);

  const CriticConfig& config() const { return cfg_; }

  // Per-sequence score matrix [m x m], eval-mode batch norm.
  Tensor scores(const Tensor& states_one_seq);

  // Tape path shared by training and the penalty term. `groups` holds one
  // entry per language, each a var of [T x b x d] states already on the
  // tape. When `bind_params` is false the critic's parameters join the
  // tape as constants, so no gradient can reach them. Batch norm runs over
  // the combined batch of all languages.
  struct TapeGroup {
    Var states;
    const std::vector<int>* lengths = nullptr;  // null = all timesteps valid
  };
  // Sum of off-diagonal pairwise estimates (the critic's objective).
  Var objective(Tape& tape, const std::vector<TapeGroup>& groups, bool train_bn,
                bool bind_params);

  // Reporting path: estimate matrix over constant samples, eval-mode BN.
  WassersteinEstimate wasserstein_estimate(const std::vector<CriticGroup>& samples_by_lang);

  // One gradient-ascent step on the summed off-diagonal estimates over
  // constant samples, then clamping. Returns the objective value.
  // Language-model parameters are never touched: the samples enter as
  // constants.
  float update(const std::vector<CriticGroup>& samples_by_lang, RmsPropT<float>& opt);

  void clip_params(float bound);
  void clip_params() { clip_params(cfg_.clip); }

  std::vector<Parameter*> params();
  BnStats& bn_stats() { return bn_stats_; }

 private:
  Var scores_batch(Tape& tape, const std::vector<TapeGroup>& groups, bool train_bn,
                   bool bind_params, std::vector<std::pair<int, int>>* row_ranges);
  Var leaf_or_frozen(Tape& tape, Parameter& p, bool bind);

  CriticConfig cfg_;
  std::vector<Parameter> lstm_;  // depth x {w_ih, w_hh, bias} flattened
  Parameter attn_;               // [d]
  Parameter out_w_;              // [d x m*m]
  Parameter out_b_;              // [m*m]
  Parameter bn_gamma_, bn_beta_;
  BnStats bn_stats_;
};

}  // namespace ug
