#include "siblurry/mvp.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "siblurry/error.hpp"

namespace siblurry {

namespace {

Matrix uniform_matrix(Index rows, Index cols, double lo, double hi, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  }
  return m;
}

Matrix normalized_rows(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

Vector inverse_temperatures(const std::vector<std::int64_t>& counts, Index pool_size) {
  if (static_cast<Index>(counts.size()) != pool_size) throw ContractError("cvpt_loss: one count per key is required");
  Vector inv(pool_size);
  for (Index p = 0; p < pool_size; ++p) inv[p] = 1.0 / (static_cast<double>(counts[static_cast<std::size_t>(p)]) + 1.0);
  return inv;
}

void check_labels(const Labels& labels, Index rows, Index classes, const char* op) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw ContractError(fmt::format("{}: {} labels for {} rows", op, labels.size(), rows));
  }
  for (ClassId y : labels) {
    if (y < 0 || y >= classes) throw ContractError(fmt::format("{}: label {} out of range", op, y));
  }
}

}  // namespace

PromptPool PromptPool::create(int pool_size, Index embed_dim, int num_classes, Index prompt_rows, Rng& rng,
                              double prompt_init) {
  if (pool_size < 1) throw ConfigError("prompt pool size must be >= 1");
  PromptPool pool;
  pool.keys = uniform_matrix(pool_size, embed_dim, -1.0, 1.0, rng);
  for (int p = 0; p < pool_size; ++p) {
    pool.prompts.push_back(uniform_matrix(prompt_rows, embed_dim, -prompt_init, prompt_init, rng));
  }
  pool.masks = Matrix::Ones(pool_size, num_classes);
  pool.counts.assign(static_cast<std::size_t>(pool_size), 0);
  return pool;
}

std::int64_t PromptPool::total_selections() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

void PromptPool::validate() const {
  const auto p = static_cast<std::size_t>(keys.rows());
  if (p == 0 || prompts.size() != p || static_cast<std::size_t>(masks.rows()) != p || counts.size() != p) {
    throw ContractError("prompt pool: keys, prompts, masks and counts disagree on the pool size");
  }
  for (auto c : counts) {
    if (c < 0) throw ContractError("prompt pool: negative selection count");
  }
}

Selection nearest_key(const RowVector& q, const Matrix& keys) {
  if (keys.rows() == 0) throw ContractError("select_prompt: empty pool");
  if (keys.cols() != q.size()) throw ContractError("select_prompt: query and key widths differ");
  Selection best{0, cosine_distance(keys.row(0), q)};
  for (Index p = 1; p < keys.rows(); ++p) {
    const double d = cosine_distance(keys.row(p), q);
    if (d < best.distance) best = {static_cast<int>(p), d};
  }
  return best;
}

Selection select_prompt(const RowVector& q, PromptPool& pool, bool training) {
  const Selection s = nearest_key(q, pool.keys);
  if (training) ++pool.counts[static_cast<std::size_t>(s.index)];
  return s;
}

std::vector<std::vector<int>> nearest_keys(const Matrix& queries, const Matrix& keys, int k) {
  if (k < 1 || k > keys.rows()) throw ConfigError(fmt::format("top_k must lie in [1, {}]", keys.rows()));
  std::vector<std::vector<int>> out(static_cast<std::size_t>(queries.rows()));
  std::vector<int> order(static_cast<std::size_t>(keys.rows()));
  std::vector<double> dist(order.size());
  for (Index i = 0; i < queries.rows(); ++i) {
    if (k == 1) {
      out[static_cast<std::size_t>(i)] = {nearest_key(queries.row(i), keys).index};
      continue;
    }
    for (Index p = 0; p < keys.rows(); ++p) dist[static_cast<std::size_t>(p)] = cosine_distance(keys.row(p), queries.row(i));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
    });
    out[static_cast<std::size_t>(i)].assign(order.begin(), order.begin() + k);
  }
  return out;
}

double cvpt_loss(const Matrix& keys, const std::vector<std::int64_t>& counts, const Matrix& queries) {
  if (queries.rows() < 1) throw ContractError("cvpt_loss: empty query batch");
  const Vector inv = inverse_temperatures(counts, keys.rows());
  double sp = 0.0;
  double sn = 0.0;
  for (Index p = 0; p < keys.rows(); ++p) {
    for (Index q = 0; q < queries.rows(); ++q) sp += std::exp(cosine_distance(keys.row(p), queries.row(q)) * inv[p]);
    for (Index q = 0; q < keys.rows(); ++q) sn += std::exp(cosine_distance(keys.row(p), keys.row(q)) * inv[p]);
  }
  return -std::log(sn / (sp + sn));
}

ad::Var cvpt_loss(ad::Var keys, const std::vector<std::int64_t>& counts, const Matrix& queries) {
  ad::Tape& tape = *keys.tape;
  if (queries.rows() < 1) throw ContractError("cvpt_loss: empty query batch");
  const Vector inv = inverse_temperatures(counts, tape.value(keys).rows());
  const ad::Var kn = ad::row_normalize(keys);
  const ad::Var qn = tape.constant(normalized_rows(queries));
  const ad::Var dist_kq = ad::affine(ad::matmul_nt(kn, qn), -1.0, 1.0);
  const ad::Var dist_kk = ad::affine(ad::matmul_nt(kn, kn), -1.0, 1.0);
  const ad::Var sp = ad::sum(ad::exp(ad::row_scale(dist_kq, inv)));
  const ad::Var sn = ad::sum(ad::exp(ad::row_scale(dist_kk, inv)));
  return ad::sub(ad::log(ad::add(sp, sn)), ad::log(sn));
}

Matrix apply_mask(const Matrix& logits, const RowVector& mask) {
  if (logits.cols() != mask.size()) throw ContractError("apply_mask: mask width differs from logits");
  return logits.array().rowwise() * mask.array();
}

ad::Var apply_mask(ad::Var logits, ad::Var masks, const std::vector<std::vector<int>>& selections) {
  std::vector<std::vector<Index>> groups;
  groups.reserve(selections.size());
  for (const auto& s : selections) groups.emplace_back(s.begin(), s.end());
  return ad::hadamard(logits, ad::gather_mean_rows(masks, groups));
}

Matrix softmax_rows(const Matrix& logits, const std::vector<bool>& allowed) {
  const bool restrict = !allowed.empty();
  if (restrict && static_cast<Index>(allowed.size()) != logits.cols()) {
    throw ContractError("softmax: allowed mask width differs from logits");
  }
  Matrix p = Matrix::Zero(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < logits.cols(); ++c) {
      if (!restrict || allowed[static_cast<std::size_t>(c)]) mx = std::max(mx, logits(i, c));
    }
    double z = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) {
      if (!restrict || allowed[static_cast<std::size_t>(c)]) z += p(i, c) = std::exp(logits(i, c) - mx);
    }
    p.row(i) /= z;
  }
  return p;
}

Vector cross_entropy(const Matrix& logits, const Labels& labels, const std::vector<bool>& allowed) {
  check_labels(labels, logits.rows(), logits.cols(), "cross_entropy");
  const Matrix p = softmax_rows(logits, allowed);
  Vector ce(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double pi = p(i, labels[static_cast<std::size_t>(i)]);
    if (pi <= 0.0 && !allowed.empty() && !allowed[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]) {
      throw ContractError("cross_entropy: label outside the allowed classes");
    }
    // log-sum-exp form keeps precision for confident predictions.
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < logits.cols(); ++c) {
      if (allowed.empty() || allowed[static_cast<std::size_t>(c)]) mx = std::max(mx, logits(i, c));
    }
    double z = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) {
      if (allowed.empty() || allowed[static_cast<std::size_t>(c)]) z += std::exp(logits(i, c) - mx);
    }
    ce[i] = mx + std::log(z) - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return ce;
}

Matrix per_sample_label_gradients(const Matrix& h, const Labels& labels, const Matrix& w) {
  if (h.cols() != w.rows()) throw ContractError("ignore_scores: feature width differs from head");
  check_labels(labels, h.rows(), w.cols(), "ignore_scores");
  const Matrix p = softmax_rows(h * w);
  Matrix g(h.rows(), h.cols());
  for (Index i = 0; i < h.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    g.row(i) = (p(i, y) - 1.0) * h.row(i);
  }
  return g;
}

Vector ignore_scores_from_logit_grads(const Matrix& dlogits, const Matrix& h, const Labels& labels) {
  if (h.rows() < 1) throw ContractError("ignore_scores: empty batch");
  if (dlogits.rows() != h.rows()) throw ContractError("ignore_scores: logit gradients and features disagree on B");
  check_labels(labels, h.rows(), dlogits.cols(), "ignore_scores");
  const Matrix mean_grad = dlogits.transpose() * h / static_cast<double>(h.rows());  // [C x D]
  Vector scores(h.rows());
  for (Index i = 0; i < h.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    const RowVector gi = dlogits(i, y) * h.row(i);
    if (mean_grad.row(y).norm() == 0.0) spdlog::debug("ignore_scores: zero mean gradient for class {}", y);
    scores[i] = cosine_distance(gi, mean_grad.row(y));
  }
  return scores;
}

Vector ignore_scores(const Matrix& h, const Labels& labels, const Matrix& w) {
  if (h.cols() != w.rows()) throw ContractError("ignore_scores: feature width differs from head");
  check_labels(labels, h.rows(), w.cols(), "ignore_scores");
  Matrix g = softmax_rows(h * w);
  for (Index i = 0; i < h.rows(); ++i) g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  return ignore_scores_from_logit_grads(g, h, labels);
}

double gsf_loss(const Matrix& logits, const Labels& labels, const Vector& scores, double gamma,
                const std::vector<bool>& allowed) {
  if (scores.size() != logits.rows()) throw ContractError("gsf_loss: one score per sample is required");
  if (gamma < 0.0) throw ConfigError("gsf_loss: gamma must be nonnegative");
  const Vector ce = cross_entropy(logits, labels, allowed);
  double total = 0.0;
  for (Index i = 0; i < ce.size(); ++i) total += std::pow(scores[i], gamma) * ce[i];
  return total / static_cast<double>(ce.size());
}

ad::Var gsf_loss(ad::Var ce_rows, const Vector& scores, double gamma) {
  if (gamma < 0.0) throw ConfigError("gsf_loss: gamma must be nonnegative");
  // std::pow(0, 0) is 1.
  const Vector w = scores.unaryExpr([gamma](double s) { return std::pow(s, gamma); });
  return ad::weighted_mean(ce_rows, w);
}

Vector marginal_benefit_scores(const Matrix& h, const Labels& labels, const Matrix& w, double margin) {
  if (!(margin > 0.0)) throw ConfigError("marginal benefit margin must be positive");
  if (h.cols() != w.rows()) throw ContractError("marginal_benefit_scores: feature width differs from head");
  check_labels(labels, h.rows(), w.cols(), "marginal_benefit_scores");
  Vector s(h.rows());
  for (Index i = 0; i < h.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (h.row(i).norm() == 0.0 || w.col(y).norm() == 0.0) spdlog::debug("marginal_benefit_scores: zero-norm input");
    s[i] = cosine_distance(h.row(i), w.col(y)) + margin;
  }
  return s;
}

Matrix afs_scale(const Matrix& h, const Vector& scores) {
  if (scores.size() != h.rows()) throw ContractError("afs_scale: one score per sample is required");
  if ((scores.array() <= 0.0).any()) throw ContractError("afs_scale: scores must be positive");
  return scores.cwiseInverse().asDiagonal() * h;
}

ad::Var afs_scale(ad::Var h, const Vector& scores) {
  if ((scores.array() <= 0.0).any()) throw ContractError("afs_scale: scores must be positive");
  return ad::row_scale(h, scores.cwiseInverse());
}

LossBreakdown total_loss(double ce, double gsf, double cvpt, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
  LossBreakdown b;
  b.ce = ce;
  b.gsf = gsf;
  b.cvpt = cvpt;
  b.total = (1.0 - alpha) * ce + alpha * gsf + cvpt;
  return b;
}

ad::Var total_loss(ad::Var ce, ad::Var gsf, ad::Var cvpt, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
  return ad::add(ad::add(ad::scale(ce, 1.0 - alpha), ad::scale(gsf, alpha)), cvpt);
}

}  // namespace siblurry
