#pragma once

// Independent oracles shared by the unit tests: central finite differences
// and a loop-based decoder forward that materializes the full masked
// attention matrix.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "ramp/decoder.hpp"
#include "ramp/tensor.hpp"

namespace ramp::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Analytic and central-difference derivative of one coordinate.
struct GradSample {
  double analytic;
  double numeric;
  double relative_error() const {
    const double diff = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    // Coordinates whose derivative vanishes are compared absolutely.
    return scale < 1e-7 ? diff / 1e-7 : diff / scale;
  }
};

/// Perturbs coordinate `index` of `leaf` by +-h and re-evaluates `loss_fn`
/// without a tape.
inline double central_difference(Tensor& leaf, std::size_t index,
                                 const std::function<double()>& loss_fn, double h = 1e-5) {
  auto data = leaf.leaf_data();
  const double saved = data[index];
  data[index] = saved + h;
  const double up = loss_fn();
  data[index] = saved - h;
  const double down = loss_fn();
  data[index] = saved;
  return (up - down) / (2.0 * h);
}

/// Fourth-order central stencil. Its truncation error is small enough at a
/// step where rounding noise in the loss stays far below 1e-4 relative.
inline double central_difference5(Tensor& leaf, std::size_t index,
                                  const std::function<double()>& loss_fn, double h = 1e-3) {
  auto data = leaf.leaf_data();
  const double saved = data[index];
  auto at = [&](double dx) {
    data[index] = saved + dx;
    return loss_fn();
  };
  const double d = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
  data[index] = saved;
  return d;
}

// ---- reference decoder ----------------------------------------------------

struct RefItem {
  int token = -1;               // >= 0 for a token
  std::vector<double> vector;   // injected row otherwise
};

struct RefOutput {
  std::vector<std::vector<double>> hidden;               // [T][d]
  std::vector<std::vector<double>> logits;               // [T][V]
  std::vector<std::vector<std::vector<double>>> keys;    // [layer][T][d]
  std::vector<std::vector<std::vector<double>>> values;  // [layer][T][d]
};

/// Straight-line forward over the whole sequence with an explicit T x T
/// causal mask. Shares only the parameter values with the implementation.
inline RefOutput reference_forward(const Decoder& dec, const std::vector<RefItem>& items) {
  const auto& cfg = dec.config();
  const std::size_t d = cfg.d_model, T = items.size(), H = cfg.n_heads, dh = d / H;
  const std::size_t ff = cfg.d_ff, V = cfg.vocab_size;
  auto P = [&](const std::string& name) { return dec.parameter(name).data(); };
  using Mat = std::vector<std::vector<double>>;
  auto linear = [&](const Mat& x, std::span<const double> w, std::span<const double> b,
                    std::size_t in, std::size_t out) {
    Mat y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t t = 0; t < x.size(); ++t) {
      for (std::size_t o = 0; o < out; ++o) {
        long double s = b.empty() ? 0.0L : b[o];
        for (std::size_t i = 0; i < in; ++i) s += static_cast<long double>(x[t][i]) * w[i * out + o];
        y[t][o] = static_cast<double>(s);
      }
    }
    return y;
  };
  auto norm = [&](const Mat& x, std::span<const double> g, std::span<const double> b) {
    Mat y = x;
    for (auto& row : y) {
      long double mean = 0.0L, var = 0.0L;
      for (double v : row) mean += v;
      mean /= d;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= d;
      const long double inv = 1.0L / std::sqrt(var + 1e-5L);
      for (std::size_t c = 0; c < d; ++c) row[c] = static_cast<double>((row[c] - mean) * inv * g[c] + b[c]);
    }
    return y;
  };

  Mat x(T, std::vector<double>(d));
  const auto tok = P("tok_emb"), pos = P("pos_emb");
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      const double base = items[t].token >= 0 ? tok[items[t].token * d + c] : items[t].vector[c];
      x[t][c] = base + pos[t * d + c];
    }
  }
  RefOutput out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Mat h = norm(x, P(p + "ln1.gain"), P(p + "ln1.bias"));
    Mat q = linear(h, P(p + "attn.w_q"), P(p + "attn.b_q"), d, d);
    Mat k = linear(h, P(p + "attn.w_k"), P(p + "attn.b_k"), d, d);
    Mat v = linear(h, P(p + "attn.w_v"), P(p + "attn.b_v"), d, d);
    out.keys.push_back(k);
    out.values.push_back(v);
    Mat att(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      // Full score matrix, masked entries set to -inf before the softmax.
      std::vector<std::vector<long double>> s(T, std::vector<long double>(T));
      for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) {
          long double dot = 0.0L;
          for (std::size_t c = 0; c < dh; ++c) dot += static_cast<long double>(q[i][hd * dh + c]) * k[j][hd * dh + c];
          s[i][j] = j <= i ? dot / std::sqrt(static_cast<long double>(dh))
                           : -std::numeric_limits<long double>::infinity();
        }
        long double mx = s[i][0];
        for (std::size_t j = 0; j < T; ++j) mx = std::max(mx, s[i][j]);
        long double z = 0.0L;
        for (std::size_t j = 0; j < T; ++j) z += std::exp(s[i][j] - mx);
        for (std::size_t c = 0; c < dh; ++c) {
          long double acc = 0.0L;
          for (std::size_t j = 0; j < T; ++j) acc += std::exp(s[i][j] - mx) / z * v[j][hd * dh + c];
          att[i][hd * dh + c] = static_cast<double>(acc);
        }
      }
    }
    Mat o = linear(att, P(p + "attn.w_o"), P(p + "attn.b_o"), d, d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) x[t][c] += o[t][c];
    Mat h2 = norm(x, P(p + "ln2.gain"), P(p + "ln2.bias"));
    Mat f = linear(h2, P(p + "mlp.w_fc"), P(p + "mlp.b_fc"), d, ff);
    for (auto& row : f) {
      for (double& z : row) {
        const long double zl = z;
        z = static_cast<double>(0.5L * zl * (1.0L + std::tanh(std::sqrt(2.0L / 3.14159265358979323846L) * (zl + 0.044715L * zl * zl * zl))));
      }
    }
    Mat m = linear(f, P(p + "mlp.w_proj"), P(p + "mlp.b_proj"), ff, d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) x[t][c] += m[t][c];
  }
  out.hidden = norm(x, P("lnf.gain"), P("lnf.bias"));
  out.logits = linear(out.hidden, P("w_out"), {}, d, V);
  return out;
}

/// Greedy decoding that re-runs the reference forward over the whole
/// context every step.
inline std::vector<int> reference_generate(const Decoder& dec, std::vector<RefItem> context,
                                           const std::vector<int>& prompt, std::size_t max_new) {
  for (int id : prompt) context.push_back(RefItem{id, {}});
  std::vector<int> out;
  while (out.size() < max_new) {
    const auto r = reference_forward(dec, context);
    const auto& last = r.logits.back();
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == dec.config().eos_token_id) break;
    out.push_back(next);
    context.push_back(RefItem{next, {}});
  }
  return out;
}

inline DecoderConfig tiny_config(int vocab = 64) {
  DecoderConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_positions = 64;
  return c;
}

}  // namespace ramp::test
