#include "ramp/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ramp/error.hpp"

namespace ramp {

// ---- config ---------------------------------------------------------------

void DecoderConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) fail(ErrorKind::config, std::string("decoder.") + name + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  if (d_model % n_heads != 0) {
    fail(ErrorKind::config, "decoder.d_model (" + std::to_string(d_model) +
                                ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (summary_token_id < 0 || summary_token_id >= vocab_size) {
    fail(ErrorKind::config, "decoder.summary_token_id outside vocabulary");
  }
  if (eos_token_id < 0 || eos_token_id >= vocab_size) {
    fail(ErrorKind::config, "decoder.eos_token_id outside vocabulary");
  }
}

std::size_t DecoderConfig::parameter_count() const {
  const std::size_t v = vocab_size, d = d_model, p = max_positions, ff = d_ff, l = n_layers;
  return 2 * v * d + p * d + 2 * d + l * (4 * d * d + 2 * d * ff + 9 * d + ff);
}

// ---- inputs ---------------------------------------------------------------

InputSegment InputSegment::tokens(std::vector<int> ids) {
  InputSegment s;
  s.content_ = std::move(ids);
  return s;
}

InputSegment InputSegment::vectors(Tensor rows) {
  if (!rows.defined() || rows.rank() != 2) {
    fail(ErrorKind::dimension, "injected vectors must be a [k x d_model] matrix");
  }
  InputSegment s;
  s.content_ = std::move(rows);
  return s;
}

const std::vector<int>& InputSegment::token_ids() const {
  if (!is_tokens()) fail(ErrorKind::contract, "segment holds vectors, not tokens");
  return std::get<std::vector<int>>(content_);
}

const Tensor& InputSegment::vector_rows() const {
  if (is_tokens()) fail(ErrorKind::contract, "segment holds tokens, not vectors");
  return std::get<Tensor>(content_);
}

std::size_t InputSegment::length() const {
  return is_tokens() ? token_ids().size() : vector_rows().rows();
}

InputSequence& InputSequence::append_tokens(std::span<const int> ids) {
  if (ids.empty()) return *this;
  if (!segments_.empty() && segments_.back().is_tokens()) {
    auto merged = segments_.back().token_ids();
    merged.insert(merged.end(), ids.begin(), ids.end());
    segments_.back() = InputSegment::tokens(std::move(merged));
  } else {
    segments_.push_back(InputSegment::tokens({ids.begin(), ids.end()}));
  }
  length_ += ids.size();
  return *this;
}

InputSequence& InputSequence::append_token(int id) {
  const int one[1] = {id};
  return append_tokens(one);
}

InputSequence& InputSequence::append_vectors(const Tensor& rows) {
  segments_.push_back(InputSegment::vectors(rows));
  length_ += rows.rows();
  return *this;
}

InputSequence& InputSequence::append(const InputSequence& other) {
  for (const auto& seg : other.segments_) {
    if (seg.is_tokens()) {
      append_tokens(seg.token_ids());
    } else {
      append_vectors(seg.vector_rows());
    }
  }
  return *this;
}

std::vector<int> InputSequence::token_view() const {
  std::vector<int> out;
  out.reserve(length_);
  for (const auto& seg : segments_) {
    if (seg.is_tokens()) {
      out.insert(out.end(), seg.token_ids().begin(), seg.token_ids().end());
    } else {
      out.insert(out.end(), seg.length(), -1);
    }
  }
  return out;
}

// ---- cache ----------------------------------------------------------------

KVCache::KVCache(std::vector<Tensor> keys, std::vector<Tensor> values)
    : keys_(std::move(keys)), values_(std::move(values)) {
  if (keys_.size() != values_.size()) {
    fail(ErrorKind::contract, "kv cache: key/value layer counts differ");
  }
  if (keys_.empty()) return;
  rows_ = keys_[0].rows();
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    if (keys_[l].rows() != rows_ || values_[l].rows() != rows_) {
      fail(ErrorKind::contract, "kv cache: row counts differ across layers");
    }
  }
}

KVCache KVCache::concat(std::span<const KVCache> parts) {
  std::vector<const KVCache*> used;
  for (const auto& p : parts) {
    if (!p.empty()) used.push_back(&p);
  }
  if (used.empty()) return {};
  const std::size_t n_layers = used[0]->layers();
  std::vector<Tensor> keys, values;
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<Tensor> k, v;
    for (const auto* p : used) {
      if (p->layers() != n_layers) fail(ErrorKind::contract, "kv cache: layer counts differ");
      k.push_back(p->keys(l));
      v.push_back(p->values(l));
    }
    keys.push_back(concat_rows(k));
    values.push_back(concat_rows(v));
  }
  return KVCache(std::move(keys), std::move(values));
}

// ---- decoder --------------------------------------------------------------

Decoder::Decoder(DecoderConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  constexpr double kStd = 0.02;
  const double proj_std = kStd / std::sqrt(2.0 * config_.n_layers);

  auto normal = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(v), true);
  };
  auto constant = [](std::size_t n, double value) {
    return Tensor::from_data({n}, std::vector<double>(n, value), true);
  };
  auto add = [&](std::string name, Tensor t) {
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(t)});
  };

  add("tok_emb", normal({static_cast<std::size_t>(config_.vocab_size), d}, kStd));
  add("pos_emb", normal({static_cast<std::size_t>(config_.max_positions), d}, kStd));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gain", constant(d, 1.0));
    add(p + "ln1.bias", constant(d, 0.0));
    add(p + "attn.w_q", normal({d, d}, kStd));
    add(p + "attn.b_q", constant(d, 0.0));
    add(p + "attn.w_k", normal({d, d}, kStd));
    add(p + "attn.b_k", constant(d, 0.0));
    add(p + "attn.w_v", normal({d, d}, kStd));
    add(p + "attn.b_v", constant(d, 0.0));
    add(p + "attn.w_o", normal({d, d}, proj_std));
    add(p + "attn.b_o", constant(d, 0.0));
    add(p + "ln2.gain", constant(d, 1.0));
    add(p + "ln2.bias", constant(d, 0.0));
    add(p + "mlp.w_fc", normal({d, ff}, kStd));
    add(p + "mlp.b_fc", constant(ff, 0.0));
    add(p + "mlp.w_proj", normal({ff, d}, proj_std));
    add(p + "mlp.b_proj", constant(d, 0.0));
  }
  add("lnf.gain", constant(d, 1.0));
  add("lnf.bias", constant(d, 0.0));
  add("w_out", normal({d, static_cast<std::size_t>(config_.vocab_size)}, kStd));
  bind_views();
}

void Decoder::bind_views() {
  auto get = [&](const std::string& name) { return params_[index_.at(name)].tensor; };
  token_embedding_ = get("tok_emb");
  position_embedding_ = get("pos_emb");
  lnf_gain_ = get("lnf.gain");
  lnf_bias_ = get("lnf.bias");
  w_out_ = get("w_out");
  layers_.clear();
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layers_.push_back(Layer{get(p + "ln1.gain"), get(p + "ln1.bias"), get(p + "attn.w_q"),
                            get(p + "attn.b_q"), get(p + "attn.w_k"), get(p + "attn.b_k"),
                            get(p + "attn.w_v"), get(p + "attn.b_v"), get(p + "attn.w_o"),
                            get(p + "attn.b_o"), get(p + "ln2.gain"), get(p + "ln2.bias"),
                            get(p + "mlp.w_fc"), get(p + "mlp.b_fc"), get(p + "mlp.w_proj"),
                            get(p + "mlp.b_proj")});
  }
}

const Tensor& Decoder::parameter(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::lookup, "unknown parameter '" + name + "'");
  return params_[it->second].tensor;
}

std::size_t Decoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

Tensor Decoder::embed(const InputSequence& items, std::size_t offset) const {
  const std::size_t t_len = items.length();
  if (offset + t_len > static_cast<std::size_t>(config_.max_positions)) {
    fail(ErrorKind::capacity, "sequence of " + std::to_string(offset + t_len) +
                                  " positions exceeds max_positions " +
                                  std::to_string(config_.max_positions));
  }
  std::vector<Tensor> parts;
  parts.reserve(items.segments().size());
  for (const auto& seg : items.segments()) {
    if (seg.is_tokens()) {
      parts.push_back(embedding(token_embedding_, seg.token_ids()));
    } else {
      const Tensor& rows = seg.vector_rows();
      if (rows.cols() != static_cast<std::size_t>(config_.d_model)) {
        fail(ErrorKind::dimension, "injected vectors have width " + std::to_string(rows.cols()) +
                                       ", expected d_model " + std::to_string(config_.d_model));
      }
      parts.push_back(rows);
    }
  }
  Tensor x = concat_rows(parts);
  return add(x, slice_rows(position_embedding_, offset, t_len));
}

ForwardResult Decoder::forward(const InputSequence& items, const ForwardOptions& options) const {
  return forward_with_context(KVCache{}, items, options);
}

ForwardResult Decoder::forward_with_context(const KVCache& cache, const InputSequence& items,
                                            const ForwardOptions& options) const {
  if (items.empty()) fail(ErrorKind::contract, "forward: empty input sequence");
  if (!cache.empty() && cache.layers() != layers_.size()) {
    fail(ErrorKind::contract, "forward_with_context: cache has " + std::to_string(cache.layers()) +
                                  " layers, decoder has " + std::to_string(layers_.size()));
  }
  const std::size_t prefix = cache.rows();
  const std::size_t heads = config_.n_heads;
  ForwardResult result;
  Tensor x = embed(items, prefix);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    Tensor h = layer_norm(x, L.ln1_gain, L.ln1_bias);
    Tensor q = add_bias(matmul(h, L.w_q), L.b_q);
    Tensor k = add_bias(matmul(h, L.w_k), L.b_k);
    Tensor v = add_bias(matmul(h, L.w_v), L.b_v);
    result.keys.push_back(k);
    result.values.push_back(v);
    Tensor k_all = k, v_all = v;
    if (prefix > 0) {
      const Tensor kp[2] = {cache.keys(l), k};
      const Tensor vp[2] = {cache.values(l), v};
      k_all = concat_rows(kp);
      v_all = concat_rows(vp);
    }
    Tensor att = causal_attention(q, k_all, v_all, heads, prefix);
    x = add(x, add_bias(matmul(att, L.w_o), L.b_o));
    Tensor h2 = layer_norm(x, L.ln2_gain, L.ln2_bias);
    Tensor mlp = add_bias(matmul(gelu(add_bias(matmul(h2, L.w_fc), L.b_fc)), L.w_proj), L.b_proj);
    x = add(x, mlp);
  }
  result.hidden = layer_norm(x, lnf_gain_, lnf_bias_);
  if (options.logits) {
    if (options.logits_from >= items.length()) {
      fail(ErrorKind::index, "forward: logits_from beyond sequence end");
    }
    Tensor rows = slice_rows(result.hidden, options.logits_from,
                             items.length() - options.logits_from);
    result.logits = matmul(rows, w_out_);
  }
  return result;
}

KVCache Decoder::extract_kv(const InputSequence& items,
                            std::span<const std::size_t> positions) const {
  for (std::size_t p : positions) {
    if (p >= items.length()) {
      fail(ErrorKind::index, "extract_kv: position " + std::to_string(p) + " outside sequence of " +
                                 std::to_string(items.length()));
    }
  }
  if (positions.empty()) return {};
  ForwardResult r = forward(items, ForwardOptions{.logits = false});
  std::vector<Tensor> keys, values;
  for (std::size_t l = 0; l < r.keys.size(); ++l) {
    keys.push_back(gather_rows(r.keys[l], positions));
    values.push_back(gather_rows(r.values[l], positions));
  }
  return KVCache(std::move(keys), std::move(values));
}

KVCache Decoder::extend(const KVCache& cache, const ForwardResult& result) {
  KVCache fresh(result.keys, result.values);
  const KVCache parts[2] = {cache, fresh};
  return KVCache::concat(parts);
}

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const auto data = logits.data().subspan(row * v, v);
  return static_cast<int>(std::max_element(data.begin(), data.end()) - data.begin());
}

std::vector<int> Decoder::generate(const KVCache& cache, std::span<const int> prompt,
                                   std::size_t max_new) const {
  if (prompt.empty()) fail(ErrorKind::precondition, "generate: empty prompt");
  std::vector<int> out;
  if (max_new == 0) return out;
  InputSequence items;
  items.append_tokens(prompt);
  ForwardResult r = forward_with_context(cache, items, ForwardOptions{.logits_from = prompt.size() - 1});
  KVCache ctx = extend(cache, r);
  int next = argmax_row(r.logits, 0);
  while (next != config_.eos_token_id) {
    out.push_back(next);
    if (out.size() >= max_new) break;
    InputSequence step;
    step.append_token(next);
    r = forward_with_context(ctx, step);
    ctx = extend(ctx, r);
    next = argmax_row(r.logits, 0);
  }
  return out;
}

}  // namespace ramp
