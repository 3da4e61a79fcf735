#pragma once

// Mask-and-visual-prompt method: prompt pool with key/mask pairs, prompt
// selection, the contrastive key loss, logit masking, gradient-similarity
// focal weighting and adaptive feature scaling.
//
// Most losses come in two forms: a plain function on matrices (the reference
// used by tests and the Python module) and a tape form used for training.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "siblurry/autodiff.hpp"
#include "siblurry/rng.hpp"
#include "siblurry/types.hpp"

namespace siblurry {

/// 1 - cos(a, b); 1 when either argument has zero norm. Clamped to [0, 2].
template <class A, class B>
double cosine_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double d = 1.0 - a.reshaped().dot(b.reshaped()) / (na * nb);
  return std::clamp(d, 0.0, 2.0);
}

struct PromptPool {
  Matrix keys;                  // [P x D]
  std::vector<Matrix> prompts;  // P entries of [prompt_rows x D]
  Matrix masks;                 // [P x num_classes]
  std::vector<std::int64_t> counts;

  /// Keys and prompts uniform in [-1, 1) and [-init, init); masks all ones.
  static PromptPool create(int pool_size, Index embed_dim, int num_classes, Index prompt_rows, Rng& rng,
                           double prompt_init = 1.0);

  int size() const { return static_cast<int>(keys.rows()); }
  std::int64_t total_selections() const;
  void validate() const;
};

struct Selection {
  int index = 0;
  double distance = 0.0;
};

/// Nearest key by cosine distance; ties go to the lowest index. In training
/// mode the selected count is incremented.
Selection select_prompt(const RowVector& q, PromptPool& pool, bool training);
/// Pure form: no count update.
Selection nearest_key(const RowVector& q, const Matrix& keys);
/// The k nearest keys per query row, nearest first, ties by index.
std::vector<std::vector<int>> nearest_keys(const Matrix& queries, const Matrix& keys, int k);

/// Contrastive key loss with per-key temperature (count + 1).
double cvpt_loss(const Matrix& keys, const std::vector<std::int64_t>& counts, const Matrix& queries);
/// Tape form; gradients reach `keys` only.
ad::Var cvpt_loss(ad::Var keys, const std::vector<std::int64_t>& counts, const Matrix& queries);

/// out[b, c] = logits[b, c] * mask[c].
Matrix apply_mask(const Matrix& logits, const RowVector& mask);
/// Row b multiplied by the mean of masks' rows listed in selections[b].
ad::Var apply_mask(ad::Var logits, ad::Var masks, const std::vector<std::vector<int>>& selections);

/// Row softmax. With a non-empty `allowed`, disallowed columns get 0.
Matrix softmax_rows(const Matrix& logits, const std::vector<bool>& allowed = {});
/// Per-sample softmax cross-entropy.
Vector cross_entropy(const Matrix& logits, const Labels& labels, const std::vector<bool>& allowed = {});

/// g_i: gradient of sample i's cross-entropy with respect to head column
/// W[:, y_i] (logits = h * W), one row per sample.
Matrix per_sample_label_gradients(const Matrix& h, const Labels& labels, const Matrix& w);

/// Cosine distance between each sample's label-column gradient and the batch
/// mean gradient for that column.
Vector ignore_scores(const Matrix& h, const Labels& labels, const Matrix& w);
/// General form: dlogits[i, c] is d CE_i / d (h_i . W[:, c]), so that the
/// column-c gradient of sample i is dlogits[i, c] * h_i.
Vector ignore_scores_from_logit_grads(const Matrix& dlogits, const Matrix& h, const Labels& labels);

/// mean_i scores_i^gamma * CE_i, with 0^0 = 1.
double gsf_loss(const Matrix& logits, const Labels& labels, const Vector& scores, double gamma,
                const std::vector<bool>& allowed = {});
/// Tape form on a column of per-sample cross-entropies.
ad::Var gsf_loss(ad::Var ce_rows, const Vector& scores, double gamma);

/// delta(h_i, W[:, y_i]) + margin.
Vector marginal_benefit_scores(const Matrix& h, const Labels& labels, const Matrix& w, double margin);

/// h_i / scores_i.
Matrix afs_scale(const Matrix& h, const Vector& scores);
ad::Var afs_scale(ad::Var h, const Vector& scores);

struct LossBreakdown {
  double ce = 0.0;
  double gsf = 0.0;
  double cvpt = 0.0;
  double total = 0.0;
  Vector ignore_scores;
  Vector mb_scores;
};

/// total = (1 - alpha) * ce + alpha * gsf + cvpt.
LossBreakdown total_loss(double ce, double gsf, double cvpt, double alpha);
ad::Var total_loss(ad::Var ce, ad::Var gsf, ad::Var cvpt, double alpha);

}  // namespace siblurry
