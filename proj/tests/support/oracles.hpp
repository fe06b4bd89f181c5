#pragma once

// Independent reference implementations used as test oracles. They are
// written as plain loops and share no code with the library.

#include <algorithm>
#include <cmath>
#include <vector>

#include "attn_distill/core.hpp"
#include "attn_distill/evaluator.hpp"
#include "attn_distill/model.hpp"

namespace test_support {

using namespace attn_distill;

inline AttentionParams random_attention(int c, int l, Rng& rng, double scale = 0.5) {
  auto p = AttentionParams::zeros(c, l);
  auto fill = [&](double* data, long n) {
    for (long i = 0; i < n; ++i) data[i] = rng.uniform(-scale, scale);
  };
  fill(p.query.data(), p.query.size());
  fill(p.query_pos.data(), p.query_pos.size());
  fill(p.kv_pos.data(), p.kv_pos.size());
  for (auto* m : {&p.wq, &p.wk, &p.wv, &p.wo}) fill(m->data(), m->size());
  for (auto* v : {&p.bq, &p.bk, &p.bv, &p.bo}) fill(v->data(), v->size());
  fill(p.head_w.data(), p.head_w.size());
  p.head_b = rng.uniform(-scale, scale);
  return p;
}

/// Random tokens; each position active with probability 0.7, at least one.
inline TokenGrid random_grid(int rows, int cols, int c, Rng& rng) {
  TokenGrid g;
  g.rows = rows;
  g.cols = cols;
  g.tokens = MatrixD::Zero(rows * cols, c);
  g.active.assign(static_cast<std::size_t>(rows) * cols, 0);
  int n = 0;
  while (n == 0) {
    for (int i = 0; i < rows * cols; ++i) {
      g.active[i] = rng.uniform() < 0.7;
      n += g.active[i];
    }
  }
  for (int i = 0; i < rows * cols; ++i) {
    if (!g.active[i]) continue;
    for (int k = 0; k < c; ++k) g.tokens(i, k) = rng.uniform(-1.0, 1.0);
  }
  return g;
}

struct ReferenceAttention {
  std::vector<double> weights;  // per grid position, 0 when inactive
  std::vector<double> output;
  double logit = 0.0;
};

/// Scaled dot-product attention of one query, computed entry by entry.
inline ReferenceAttention reference_attention(const TokenGrid& g, const AttentionParams& p) {
  const int c = p.channels;
  const int l = g.rows * g.cols;
  auto affine = [&](const MatrixD& w, const VectorD& b, const std::vector<double>& x) {
    std::vector<double> y(c);
    for (int i = 0; i < c; ++i) {
      double s = b[i];
      for (int j = 0; j < c; ++j) s += w(i, j) * x[j];
      y[i] = s;
    }
    return y;
  };
  std::vector<double> q_in(c);
  for (int j = 0; j < c; ++j) q_in[j] = p.query[j] + p.query_pos[j];
  const auto q = affine(p.wq, p.bq, q_in);

  std::vector<double> scores(l, 0.0);
  std::vector<std::vector<double>> values(l);
  double best = -1e300;
  for (int t = 0; t < l; ++t) {
    if (!g.active[t]) continue;
    std::vector<double> x(c);
    for (int j = 0; j < c; ++j) x[j] = g.tokens(t, j) + p.kv_pos(t, j);
    const auto k = affine(p.wk, p.bk, x);
    values[t] = affine(p.wv, p.bv, x);
    double dot = 0.0;
    for (int j = 0; j < c; ++j) dot += q[j] * k[j];
    scores[t] = dot / std::sqrt(static_cast<double>(c));
    best = std::max(best, scores[t]);
  }
  ReferenceAttention r;
  r.weights.assign(l, 0.0);
  double z = 0.0;
  for (int t = 0; t < l; ++t) {
    if (g.active[t]) z += std::exp(scores[t] - best);
  }
  std::vector<double> pooled(c, 0.0);
  for (int t = 0; t < l; ++t) {
    if (!g.active[t]) continue;
    r.weights[t] = std::exp(scores[t] - best) / z;
    for (int j = 0; j < c; ++j) pooled[j] += r.weights[t] * values[t][j];
  }
  r.output = affine(p.wo, p.bo, pooled);
  r.logit = p.head_b;
  for (int j = 0; j < c; ++j) r.logit += p.head_w[j] * r.output[j];
  return r;
}

struct GradCheck {
  int compared = 0;
  double worst = 0.0;  // largest relative deviation seen
  bool ok = true;
};

/// Analytic gradient of focal(sigmoid(head(attention(tokens)))) against
/// central differences with step 1e-4. A value passes when its relative
/// deviation is within tol or both are below 1e-7 in magnitude.
inline GradCheck check_attention_gradients(int c, int rows, int cols, Rng& rng, double tol = 1e-3) {
  auto params = random_attention(c, rows * cols, rng);
  auto grid = random_grid(rows, cols, c, rng);
  const int target = rng.uniform() < 0.5 ? 1 : 0;
  const double gamma = 2.0, alpha = 0.25;

  auto loss = [&]() {
    const double logit = head_logit(cross_attention(grid, params).features, params);
    return focal_loss(sigmoid(logit), target, gamma, alpha);
  };

  const auto att = cross_attention(grid, params);
  const double logit = head_logit(att.features, params);
  auto grads = AttentionParams::zeros(c, rows * cols);
  MatrixD token_grad;
  attention_backward(att.trace, params, focal_loss_grad_logit(logit, target, gamma, alpha), grads, &token_grad);

  GradCheck out;
  auto compare = [&](double* value, double analytic) {
    constexpr double h = 1e-4;
    const double saved = *value;
    *value = saved + h;
    const double up = loss();
    *value = saved - h;
    const double down = loss();
    *value = saved;
    const double numeric = (up - down) / (2 * h);
    const double diff = std::abs(numeric - analytic);
    const double scale = std::max(std::abs(numeric), std::abs(analytic));
    ++out.compared;
    if (scale < 1e-7) return;
    out.worst = std::max(out.worst, diff / scale);
    if (diff > tol * scale) out.ok = false;
  };
  auto each = [&](double* v, const double* g, long n) {
    for (long i = 0; i < n; ++i) compare(v + i, g[i]);
  };
  each(params.query.data(), grads.query.data(), c);
  each(params.query_pos.data(), grads.query_pos.data(), c);
  each(params.kv_pos.data(), grads.kv_pos.data(), params.kv_pos.size());
  each(params.wq.data(), grads.wq.data(), params.wq.size());
  each(params.wk.data(), grads.wk.data(), params.wk.size());
  each(params.wv.data(), grads.wv.data(), params.wv.size());
  each(params.wo.data(), grads.wo.data(), params.wo.size());
  each(params.bq.data(), grads.bq.data(), c);
  each(params.bk.data(), grads.bk.data(), c);
  each(params.bv.data(), grads.bv.data(), c);
  each(params.bo.data(), grads.bo.data(), c);
  each(params.head_w.data(), grads.head_w.data(), c);
  compare(&params.head_b, grads.head_b);
  for (int t = 0; t < rows * cols; ++t) {
    if (!grid.active[t]) continue;
    for (int k = 0; k < c; ++k) compare(&grid.tokens(t, k), token_grad(t, k));
  }
  return out;
}

// Evaluation oracles.

inline BoolGrid brute_downsample(const BoolGrid& mask, int tile) {
  BoolGrid out(mask.rows / tile, mask.cols / tile);
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c)
      if (mask.at(r, c)) out.set(r / tile, c / tile, true);
  return out;
}

inline std::vector<double> brute_upsample(const AttentionMap& map, int tile) {
  std::vector<double> out(static_cast<std::size_t>(map.rows) * tile * map.cols * tile);
  const int width = map.cols * tile;
  for (int y = 0; y < map.rows * tile; ++y)
    for (int x = 0; x < width; ++x) out[static_cast<std::size_t>(y) * width + x] = map.at(y / tile, x / tile);
  return out;
}

struct BruteScore {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double iou = 0, precision = 0, recall = 0;
};

inline BruteScore brute_score(const BoolGrid& pred, const BoolGrid& gt) {
  BruteScore s;
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      const bool p = pred.at(r, c), g = gt.at(r, c);
      if (p && g) ++s.tp;
      else if (p) ++s.fp;
      else if (g) ++s.fn;
      else ++s.tn;
    }
  }
  auto ratio = [](std::size_t num, std::size_t den, bool both_empty) {
    if (den == 0) return both_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  const bool none = s.tp + s.fp + s.fn == 0;
  s.iou = ratio(s.tp, s.tp + s.fp + s.fn, none);
  s.precision = ratio(s.tp, s.tp + s.fp, none);
  s.recall = ratio(s.tp, s.tp + s.fn, none);
  return s;
}

}  // namespace test_support
