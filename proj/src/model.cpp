#include "attn_distill/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace {

using MapF = Eigen::Map<MatrixF>;
using ConstMapF = Eigen::Map<const MatrixF>;

FeatureMap make_map(int c, int h, int w) {
  FeatureMap m{c, h, w, {}};
  m.data.assign(static_cast<std::size_t>(c) * h * w, 0.0f);
  return m;
}

// Rows are (channel, ky, kx), columns are output pixels.
void im2col(const FeatureMap& x, MatrixF& col) {
  const int h = x.height;
  const int w = x.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  col.resize(static_cast<Eigen::Index>(x.channels) * 9, static_cast<Eigen::Index>(plane));
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* dst = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          float* out = dst + static_cast<std::size_t>(y) * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0f);
            continue;
          }
          const float* in = src + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(w, w - dx);
          std::fill(out, out + x0, 0.0f);
          std::copy(in + x0 + dx, in + x1 + dx, out + x0);
          std::fill(out + x1, out + w, 0.0f);
        }
      }
    }
  }
}

void col2im(const MatrixF& col, FeatureMap& dx) {
  const int h = dx.height;
  const int w = dx.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::fill(dx.data.begin(), dx.data.end(), 0.0f);
  for (int c = 0; c < dx.channels; ++c) {
    float* dst = dx.data.data() + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* src = col.row(c * 9 + ky * 3 + kx).data();
        const int dy = ky - 1;
        const int dxo = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const float* in = src + static_cast<std::size_t>(y) * w;
          float* out = dst + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dxo);
          const int x1 = std::min(w, w - dxo);
          for (int xx = x0; xx < x1; ++xx) out[xx + dxo] += in[xx];
        }
      }
    }
  }
}

FeatureMap conv_relu(const FeatureMap& x, const ConvParams& conv, MatrixF& col) {
  im2col(x, col);
  FeatureMap y = make_map(conv.out_channels, x.height, x.width);
  MapF out(y.data.data(), conv.out_channels, static_cast<Eigen::Index>(x.height) * x.width);
  out.noalias() = conv.weight * col;
  out.colwise() += conv.bias;
  out = out.cwiseMax(0.0f);
  return y;
}

FeatureMap max_pool(const FeatureMap& x, std::vector<std::int32_t>* argmax) {
  const int oh = x.height / 2;
  const int ow = x.width / 2;
  FeatureMap y = make_map(x.channels, oh, ow);
  if (argmax) argmax->assign(y.data.size(), 0);
  const std::size_t in_plane = static_cast<std::size_t>(x.height) * x.width;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < x.channels; ++c) {
    const float* src = x.data.data() + c * in_plane;
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        const int base = (2 * yy) * x.width + 2 * xx;
        const int candidates[4] = {base, base + 1, base + x.width, base + x.width + 1};
        int best = candidates[0];
        for (int k = 1; k < 4; ++k) {
          if (src[candidates[k]] > src[best]) best = candidates[k];
        }
        const std::size_t o = c * out_plane + static_cast<std::size_t>(yy) * ow + xx;
        y.data[o] = src[best];
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return y;
}

void softmax_inplace(VectorD& s) {
  const double m = s.maxCoeff();
  s = (s.array() - m).exp();
  s /= s.sum();
}

void add_uniform(MatrixD& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
}

void add_uniform(VectorD& v, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-bound, bound);
}

void add_normal(VectorD& v, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal(0.0, stddev);
}

}  // namespace

void ModelConfig::validate() const {
  if (encoder_widths.size() != kEncoderBlocks) {
    throw InvalidArgument("encoder needs exactly six block widths");
  }
  for (int w : encoder_widths) {
    if (w <= 0) throw InvalidArgument("encoder widths must be positive");
  }
  if (input_height <= 0 || input_width <= 0 || input_height % kTokenPx != 0 || input_width % kTokenPx != 0) {
    throw ShapeError("input size must be a positive multiple of 64");
  }
  if (!(drop_p >= 0.0 && drop_p < 1.0)) throw InvalidArgument("drop probability must be in [0,1)");
  if (!(focal_gamma >= 0.0)) throw InvalidArgument("focal gamma must be non-negative");
  if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) throw InvalidArgument("focal alpha must be in (0,1)");
}

AttentionParams AttentionParams::zeros(int channels, int tokens) {
  AttentionParams p;
  p.channels = channels;
  p.tokens = tokens;
  p.query = VectorD::Zero(channels);
  p.query_pos = VectorD::Zero(channels);
  p.kv_pos = MatrixD::Zero(tokens, channels);
  for (auto* m : {&p.wq, &p.wk, &p.wv, &p.wo}) *m = MatrixD::Zero(channels, channels);
  for (auto* v : {&p.bq, &p.bk, &p.bv, &p.bo}) *v = VectorD::Zero(channels);
  p.head_w = VectorD::Zero(channels);
  p.head_b = 0.0;
  return p;
}

ClassifierParams ClassifierParams::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  ClassifierParams p;
  p.config = config;
  int in = 3;
  for (int block = 0; block < kEncoderBlocks; ++block) {
    const int out = config.encoder_widths[block];
    for (int j = 0; j < 2; ++j) {
      ConvParams conv;
      conv.in_channels = in;
      conv.out_channels = out;
      conv.weight.resize(out, in * 9);
      const double stddev = std::sqrt(2.0 / (in * 9));
      for (Eigen::Index i = 0; i < conv.weight.size(); ++i) {
        conv.weight.data()[i] = static_cast<float>(rng.normal(0.0, stddev));
      }
      conv.bias = VectorF::Zero(out);
      p.convs.push_back(std::move(conv));
      in = out;
    }
  }
  const int c = config.channels();
  auto& a = p.attention;
  a = AttentionParams::zeros(c, config.token_count());
  add_normal(a.query, rng, 0.02);
  add_normal(a.query_pos, rng, 0.02);
  for (Eigen::Index i = 0; i < a.kv_pos.size(); ++i) a.kv_pos.data()[i] = rng.normal(0.0, 0.02);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  for (auto* m : {&a.wq, &a.wk, &a.wv, &a.wo}) add_uniform(*m, rng, bound);
  for (auto* v : {&a.bq, &a.bk, &a.bv, &a.bo}) add_uniform(*v, rng, bound);
  add_uniform(a.head_w, rng, bound);
  a.head_b = rng.uniform(-bound, bound);
  return p;
}

ClassifierParams ClassifierParams::zeros_like(const ClassifierParams& like) {
  ClassifierParams p;
  p.config = like.config;
  for (const auto& conv : like.convs) {
    p.convs.push_back(ConvParams{conv.in_channels, conv.out_channels,
                                 MatrixF::Zero(conv.weight.rows(), conv.weight.cols()),
                                 VectorF::Zero(conv.bias.size())});
  }
  p.attention = AttentionParams::zeros(like.attention.channels, like.attention.tokens);
  return p;
}

bool ClassifierParams::all_finite() const {
  bool finite = true;
  auto& self = const_cast<ClassifierParams&>(*this);
  for_each_tensor(
      self,
      [&](const std::string&, std::span<float> t) {
        finite = finite && std::all_of(t.begin(), t.end(), [](float v) { return std::isfinite(v); });
      },
      [&](const std::string&, std::span<double> t) {
        finite = finite && std::all_of(t.begin(), t.end(), [](double v) { return std::isfinite(v); });
      });
  return finite;
}

void for_each_tensor(ClassifierParams& params,
                     const std::function<void(const std::string&, std::span<float>)>& on_float,
                     const std::function<void(const std::string&, std::span<double>)>& on_double) {
  for (std::size_t i = 0; i < params.convs.size(); ++i) {
    auto& conv = params.convs[i];
    const auto prefix = "encoder.conv" + std::to_string(i);
    on_float(prefix + ".weight", {conv.weight.data(), static_cast<std::size_t>(conv.weight.size())});
    on_float(prefix + ".bias", {conv.bias.data(), static_cast<std::size_t>(conv.bias.size())});
  }
  auto& a = params.attention;
  auto mat = [&](const char* name, MatrixD& m) {
    on_double(name, {m.data(), static_cast<std::size_t>(m.size())});
  };
  auto vec = [&](const char* name, VectorD& v) {
    on_double(name, {v.data(), static_cast<std::size_t>(v.size())});
  };
  vec("attention.query", a.query);
  vec("attention.query_pos", a.query_pos);
  mat("attention.kv_pos", a.kv_pos);
  mat("attention.wq", a.wq);
  vec("attention.bq", a.bq);
  mat("attention.wk", a.wk);
  vec("attention.bk", a.bk);
  mat("attention.wv", a.wv);
  vec("attention.bv", a.bv);
  mat("attention.wo", a.wo);
  vec("attention.bo", a.bo);
  vec("head.weight", a.head_w);
  on_double("head.bias", {&a.head_b, 1});
}

int TokenGrid::active_count() const {
  return static_cast<int>(std::count(active.begin(), active.end(), std::uint8_t{1}));
}

void TokenGrid::deactivate(int index) {
  active.at(static_cast<std::size_t>(index)) = 0;
  tokens.row(index).setZero();
}

const FeatureMap& EncoderTrace::conv_input(std::size_t layer) const {
  if (layer == 0) return input;
  if (layer % 2 == 1) return conv_outputs[layer - 1];
  return pooled[layer / 2 - 1];
}

FeatureMap to_feature_map(const Image& image) {
  FeatureMap x = make_map(3, image.height, image.width);
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) x.data[c * plane + i] = image.pixels[i * 3 + c];
  }
  return x;
}

TokenGrid encode(const Image& image, const ClassifierParams& params, EncoderTrace* trace) {
  if (image.height <= 0 || image.width <= 0 || image.height % kTokenPx != 0 || image.width % kTokenPx != 0) {
    throw ShapeError("encoder input " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by 64");
  }
  if (params.convs.size() != 2 * kEncoderBlocks) throw ShapeError("encoder must have twelve conv layers");

  MatrixF col;
  FeatureMap x = to_feature_map(image);
  if (trace) {
    *trace = EncoderTrace{};
    trace->input = x;
  }
  for (int block = 0; block < kEncoderBlocks; ++block) {
    for (int j = 0; j < 2; ++j) {
      x = conv_relu(x, params.convs[2 * block + j], col);
      if (trace) trace->conv_outputs.push_back(x);
    }
    std::vector<std::int32_t> argmax;
    x = max_pool(x, trace ? &argmax : nullptr);
    if (trace) {
      trace->pool_argmax.push_back(std::move(argmax));
      trace->pooled.push_back(x);
    }
  }

  TokenGrid grid;
  grid.rows = x.height;
  grid.cols = x.width;
  const int tokens = grid.rows * grid.cols;
  grid.tokens.resize(tokens, x.channels);
  for (int c = 0; c < x.channels; ++c) {
    for (int i = 0; i < tokens; ++i) grid.tokens(i, c) = x.data[static_cast<std::size_t>(c) * tokens + i];
  }
  grid.active.assign(tokens, 1);
  return grid;
}

void encoder_backward(const EncoderTrace& trace, const MatrixD& token_grad, const ClassifierParams& params,
                      ClassifierParams& grads) {
  const FeatureMap& last = trace.pooled.back();
  const int tokens = last.height * last.width;
  FeatureMap grad = make_map(last.channels, last.height, last.width);
  for (int c = 0; c < last.channels; ++c) {
    for (int i = 0; i < tokens; ++i) {
      grad.data[static_cast<std::size_t>(c) * tokens + i] = static_cast<float>(token_grad(i, c));
    }
  }

  MatrixF col;
  MatrixF dcol;
  for (int block = kEncoderBlocks - 1; block >= 0; --block) {
    const FeatureMap& pre_pool = trace.conv_outputs[2 * block + 1];
    FeatureMap up = make_map(pre_pool.channels, pre_pool.height, pre_pool.width);
    const auto& argmax = trace.pool_argmax[block];
    const std::size_t in_plane = static_cast<std::size_t>(pre_pool.height) * pre_pool.width;
    const std::size_t out_plane = grad.data.size() / grad.channels;
    for (int c = 0; c < grad.channels; ++c) {
      for (std::size_t o = 0; o < out_plane; ++o) {
        up.data[c * in_plane + argmax[c * out_plane + o]] += grad.data[c * out_plane + o];
      }
    }
    grad = std::move(up);

    for (int j = 1; j >= 0; --j) {
      const std::size_t layer = 2 * block + j;
      const FeatureMap& out = trace.conv_outputs[layer];
      for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (out.data[i] <= 0.0f) grad.data[i] = 0.0f;
      }
      const FeatureMap& in = trace.conv_input(layer);
      const auto& conv = params.convs[layer];
      auto& g = grads.convs[layer];
      const Eigen::Index pixels = static_cast<Eigen::Index>(in.height) * in.width;
      ConstMapF dy(grad.data.data(), conv.out_channels, pixels);
      im2col(in, col);
      g.weight.noalias() += dy * col.transpose();
      g.bias += dy.rowwise().sum();
      if (layer == 0) break;
      dcol.noalias() = conv.weight.transpose() * dy;
      FeatureMap dx = make_map(in.channels, in.height, in.width);
      col2im(dcol, dx);
      grad = std::move(dx);
    }
  }
}

DropResult drop_tokens(const TokenGrid& grid, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("drop probability must be in [0,1)");
  DropResult result{grid, 1.0};
  if (!training || p == 0.0) return result;

  std::vector<int> candidates;
  for (int i = 0; i < grid.size(); ++i) {
    if (grid.active[i]) candidates.push_back(i);
  }
  if (candidates.empty()) return result;

  std::vector<std::uint8_t> keep(grid.active.size(), 0);
  bool any = false;
  while (!any) {
    for (int i : candidates) {
      keep[i] = rng.bernoulli(p) ? 0 : 1;
      any = any || keep[i];
    }
  }
  result.scale = 1.0 / (1.0 - p);
  for (int i = 0; i < grid.size(); ++i) {
    if (keep[i]) {
      result.grid.tokens.row(i) *= result.scale;
    } else {
      result.grid.active[i] = 0;
      result.grid.tokens.row(i).setZero();
    }
  }
  return result;
}

AttentionResult cross_attention(const TokenGrid& grid, const AttentionParams& params) {
  const int c = params.channels;
  if (grid.tokens.cols() != c) throw ShapeError("token channels do not match attention channels");
  if (grid.size() != params.tokens) {
    throw ShapeError("token grid has " + std::to_string(grid.size()) + " tokens, positional embeddings " +
                     std::to_string(params.tokens));
  }
  AttentionResult result;
  auto& t = result.trace;
  for (int i = 0; i < grid.size(); ++i) {
    if (grid.active[i]) t.active.push_back(i);
  }
  const int s = static_cast<int>(t.active.size());
  if (s == 0) throw InvalidState("cross attention needs at least one active token");

  t.query_in = params.query + params.query_pos;
  t.q = params.wq * t.query_in + params.bq;
  t.kv_in.resize(s, c);
  for (int r = 0; r < s; ++r) t.kv_in.row(r) = grid.tokens.row(t.active[r]) + params.kv_pos.row(t.active[r]);
  t.k = t.kv_in * params.wk.transpose();
  t.k.rowwise() += params.bk.transpose();
  t.v = t.kv_in * params.wv.transpose();
  t.v.rowwise() += params.bv.transpose();

  VectorD w = (t.k * t.q) / std::sqrt(static_cast<double>(c));
  softmax_inplace(w);
  t.pooled = t.v.transpose() * w;
  t.features = params.wo * t.pooled + params.bo;

  result.features = t.features;
  result.weights = VectorD::Zero(grid.size());
  for (int r = 0; r < s; ++r) result.weights[t.active[r]] = w[r];
  return result;
}

double head_logit(const VectorD& features, const AttentionParams& params) {
  return params.head_w.dot(features) + params.head_b;
}

void attention_backward(const AttentionTrace& t, const AttentionParams& params, double dlogit,
                        AttentionParams& g, MatrixD* token_grad) {
  const int c = params.channels;
  const int s = static_cast<int>(t.active.size());
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

  // Recover the attention distribution from the trace.
  VectorD w = (t.k * t.q) * inv_sqrt_c;
  softmax_inplace(w);

  g.head_w += dlogit * t.features;
  g.head_b += dlogit;
  const VectorD dfeat = dlogit * params.head_w;
  g.wo.noalias() += dfeat * t.pooled.transpose();
  g.bo += dfeat;
  const VectorD dpooled = params.wo.transpose() * dfeat;

  const MatrixD dv = w * dpooled.transpose();  // S x C
  const VectorD dw = t.v * dpooled;
  const VectorD ds = w.cwiseProduct((dw.array() - w.dot(dw)).matrix());

  const VectorD dq = (t.k.transpose() * ds) * inv_sqrt_c;
  const MatrixD dk = (ds * t.q.transpose()) * inv_sqrt_c;

  g.wk.noalias() += dk.transpose() * t.kv_in;
  g.bk += dk.colwise().sum().transpose();
  g.wv.noalias() += dv.transpose() * t.kv_in;
  g.bv += dv.colwise().sum().transpose();
  const MatrixD dkv_in = dk * params.wk + dv * params.wv;
  for (int r = 0; r < s; ++r) g.kv_pos.row(t.active[r]) += dkv_in.row(r);
  if (token_grad) {
    token_grad->setZero(params.tokens, c);
    for (int r = 0; r < s; ++r) token_grad->row(t.active[r]) = dkv_in.row(r);
  }

  g.wq.noalias() += dq * t.query_in.transpose();
  g.bq += dq;
  const VectorD dquery_in = params.wq.transpose() * dq;
  g.query += dquery_in;
  g.query_pos += dquery_in;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Classification classify(const Image& image, const ClassifierParams& params, double p, Rng& rng, bool training) {
  const auto grid = encode(image, params);
  const auto dropped = drop_tokens(grid, p, rng, training);
  const auto att = cross_attention(dropped.grid, params.attention);
  Classification out;
  out.logit = head_logit(att.features, params.attention);
  out.probability = sigmoid(out.logit);
  out.weights = att.weights;
  return out;
}

double focal_loss(double probability, int target, double gamma, double alpha) {
  const double p = std::clamp(probability, kFocalEps, 1.0 - kFocalEps);
  const double pt = target ? p : 1.0 - p;
  const double at = target ? alpha : 1.0 - alpha;
  return -at * std::pow(1.0 - pt, gamma) * std::log(pt);
}

double focal_loss_grad_logit(double logit, int target, double gamma, double alpha) {
  // Derivative of the unclamped loss, so a confidently wrong prediction
  // still gets a gradient. Everything is computed in logit space.
  const double z = target ? logit : -logit;
  const double pt = sigmoid(z);
  const double qt = sigmoid(-z);  // 1 - pt without cancellation
  const double log_pt = z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
  const double at = target ? alpha : 1.0 - alpha;
  const double sign = target ? 1.0 : -1.0;
  // dL/dpt * dpt/dlogit with dpt/dlogit = sign * pt * (1 - pt).
  const double d = -at * (-gamma * std::pow(qt, gamma) * pt * log_pt + std::pow(qt, gamma + 1.0));
  return sign * d;
}

StepResult accumulate_gradients(const Image& image, int target, const ClassifierParams& params,
                                ClassifierParams& grads, Rng& rng) {
  const auto& cfg = params.config;
  EncoderTrace trace;
  const auto grid = encode(image, params, &trace);
  const auto dropped = drop_tokens(grid, cfg.drop_p, rng, true);
  const auto att = cross_attention(dropped.grid, params.attention);
  const double logit = head_logit(att.features, params.attention);

  StepResult result;
  result.probability = sigmoid(logit);
  result.loss = focal_loss(result.probability, target, cfg.focal_gamma, cfg.focal_alpha);
  const double dlogit = focal_loss_grad_logit(logit, target, cfg.focal_gamma, cfg.focal_alpha);

  MatrixD token_grad;
  attention_backward(att.trace, params.attention, dlogit, grads.attention, &token_grad);
  token_grad *= dropped.scale;
  encoder_backward(trace, token_grad, params, grads);
  return result;
}

// Checkpoint container: magic, version, JSON config, then named tensors with
// raw little-endian payloads.
namespace {

constexpr char kMagic[8] = {'A', 'T', 'D', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw FormatError("truncated checkpoint");
  return value;
}

nlohmann::ordered_json config_json(const ModelConfig& cfg, const CheckpointMeta& meta) {
  return {{"encoder_widths", cfg.encoder_widths},
          {"channels", cfg.channels()},
          {"input_height", cfg.input_height},
          {"input_width", cfg.input_width},
          {"drop_p", cfg.drop_p},
          {"focal_gamma", cfg.focal_gamma},
          {"focal_alpha", cfg.focal_alpha},
          {"class", meta.class_name},
          {"epoch", meta.epoch},
          {"val_loss", meta.val_loss}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ClassifierParams& params, const CheckpointMeta& meta) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    // Config doubles are stored as JSON numbers, which nlohmann prints with
    // round-trip precision.
    const std::string cfg = config_json(params.config, meta).dump();
    put<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    auto& mutable_params = const_cast<ClassifierParams&>(params);
    std::uint32_t count = 0;
    for_each_tensor(mutable_params, [&](const std::string&, std::span<float>) { ++count; },
                    [&](const std::string&, std::span<double>) { ++count; });
    put<std::uint32_t>(out, count);
    auto write_tensor = [&](const std::string& name, std::uint8_t dtype, const void* data, std::size_t n,
                            std::size_t elem) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, dtype);
      put<std::uint64_t>(out, n);
      out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n * elem));
    };
    for_each_tensor(
        mutable_params,
        [&](const std::string& name, std::span<float> t) { write_tensor(name, 0, t.data(), t.size(), sizeof(float)); },
        [&](const std::string& name, std::span<double> t) {
          write_tensor(name, 1, t.data(), t.size(), sizeof(double));
        });
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ClassifierParams load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("not a checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = get<std::uint64_t>(in);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw FormatError("truncated checkpoint");

  ModelConfig cfg;
  CheckpointMeta m;
  try {
    const auto doc = nlohmann::json::parse(cfg_text);
    cfg.encoder_widths = doc.at("encoder_widths").get<std::vector<int>>();
    cfg.input_height = doc.at("input_height").get<int>();
    cfg.input_width = doc.at("input_width").get<int>();
    cfg.drop_p = doc.at("drop_p").get<double>();
    cfg.focal_gamma = doc.at("focal_gamma").get<double>();
    cfg.focal_alpha = doc.at("focal_alpha").get<double>();
    m.class_name = doc.value("class", "");
    m.epoch = doc.value("epoch", -1);
    m.val_loss = doc.value("val_loss", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  cfg.validate();

  // Build the shape skeleton, then fill it tensor by tensor.
  ClassifierParams params;
  params.config = cfg;
  {
    int ch = 3;
    for (int w : cfg.encoder_widths) {
      for (int j = 0; j < 2; ++j) {
        params.convs.push_back(ConvParams{ch, w, MatrixF::Zero(w, ch * 9), VectorF::Zero(w)});
        ch = w;
      }
    }
    params.attention = AttentionParams::zeros(cfg.channels(), cfg.token_count());
  }

  const auto count = get<std::uint32_t>(in);
  std::uint32_t seen = 0;
  auto read_tensor = [&](const std::string& expected, std::uint8_t dtype, void* data, std::size_t n,
                         std::size_t elem) {
    const auto name_len = get<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != expected) throw FormatError("checkpoint tensor order mismatch at " + expected);
    if (get<std::uint8_t>(in) != dtype) throw FormatError("checkpoint dtype mismatch for " + name);
    if (get<std::uint64_t>(in) != n) throw FormatError("checkpoint size mismatch for " + name);
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n * elem));
    if (!in) throw FormatError("truncated checkpoint tensor " + name);
    ++seen;
  };
  for_each_tensor(
      params,
      [&](const std::string& name, std::span<float> t) { read_tensor(name, 0, t.data(), t.size(), sizeof(float)); },
      [&](const std::string& name, std::span<double> t) {
        read_tensor(name, 1, t.data(), t.size(), sizeof(double));
      });
  if (seen != count) throw FormatError("checkpoint tensor count mismatch");
  if (meta) *meta = m;
  return params;
}

}  // namespace attn_distill
