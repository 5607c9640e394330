#pragma once

// Tiny decoder-only transformer shared by compression, message passing and
// generation. Inputs mix token ids with injected d_model vectors so stored
// summary states can be fed back in place of token embeddings.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ramp/tensor.hpp"

namespace ramp {

/// Reserved vocabulary ids. Ordinary text never maps onto these.
inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;
inline constexpr int kSummaryToken = 2;
inline constexpr int kReservedTokens = 3;

struct DecoderConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 259;
  int max_positions = 1024;
  int summary_token_id = kSummaryToken;
  int eos_token_id = kEosToken;

  void validate() const;

  /// Closed form: 2*V*d + P*d + 2*d + layers * (4*d^2 + 2*d*ff + 9*d + ff).
  std::size_t parameter_count() const;

  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

/// A run of consecutive input positions: either token ids or injected vectors
/// (one row per position).
class InputSegment {
 public:
  static InputSegment tokens(std::vector<int> ids);
  static InputSegment vectors(Tensor rows);

  bool is_tokens() const noexcept { return std::holds_alternative<std::vector<int>>(content_); }
  const std::vector<int>& token_ids() const;
  const Tensor& vector_rows() const;
  std::size_t length() const;

 private:
  std::variant<std::vector<int>, Tensor> content_;
};

/// Ordered input items for one decoder pass. Item k sits at absolute position
/// (offset + k), where the offset is the cache length when a cache is used.
class InputSequence {
 public:
  InputSequence& append_tokens(std::span<const int> ids);
  InputSequence& append_token(int id);
  InputSequence& append_vectors(const Tensor& rows);
  InputSequence& append(const InputSequence& other);

  std::size_t length() const noexcept { return length_; }
  bool empty() const noexcept { return length_ == 0; }
  const std::vector<InputSegment>& segments() const noexcept { return segments_; }
  /// Token id per position, or -1 where a vector is injected.
  std::vector<int> token_view() const;

 private:
  std::vector<InputSegment> segments_;
  std::size_t length_ = 0;
};

/// Per-layer keys/values over cached positions. Rows keep the absolute
/// positions they were computed at; new items continue after rows().
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::vector<Tensor> keys, std::vector<Tensor> values);

  bool empty() const noexcept { return rows_ == 0; }
  std::size_t layers() const noexcept { return keys_.size(); }
  std::size_t rows() const noexcept { return rows_; }
  const Tensor& keys(std::size_t layer) const { return keys_.at(layer); }
  const Tensor& values(std::size_t layer) const { return values_.at(layer); }

  /// Caches concatenated in the given order.
  static KVCache concat(std::span<const KVCache> parts);

 private:
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
  std::size_t rows_ = 0;
};

struct ForwardOptions {
  bool logits = true;
  /// Logits are computed only for rows >= logits_from.
  std::size_t logits_from = 0;
};

struct ForwardResult {
  Tensor hidden;  // [T x d_model], after the final layer norm
  Tensor logits;  // [(T - logits_from) x V], undefined when not requested
  std::vector<Tensor> keys;    // per layer, [T x d_model] for the new items
  std::vector<Tensor> values;  // per layer
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class Decoder {
 public:
  Decoder(DecoderConfig config, std::uint64_t seed);

  const DecoderConfig& config() const noexcept { return config_; }
  const std::vector<NamedParameter>& parameters() const noexcept { return params_; }
  std::vector<NamedParameter>& parameters() noexcept { return params_; }
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  ForwardResult forward(const InputSequence& items, const ForwardOptions& options = {}) const;
  ForwardResult forward_with_context(const KVCache& cache, const InputSequence& items,
                                     const ForwardOptions& options = {}) const;

  /// Per-layer key/value rows at `positions` of one forward over `items`.
  KVCache extract_kv(const InputSequence& items, std::span<const std::size_t> positions) const;

  /// Greedy decoding over cached context; stops at end-of-sequence or max_new.
  std::vector<int> generate(const KVCache& cache, std::span<const int> prompt,
                            std::size_t max_new) const;

  /// The cache extended by the keys/values of a forward_with_context result.
  static KVCache extend(const KVCache& cache, const ForwardResult& result);

 private:
  struct Layer {
    Tensor ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_gain, ln2_bias, w_fc, b_fc, w_proj, b_proj;
  };

  Tensor embed(const InputSequence& items, std::size_t offset) const;
  void bind_views();

  DecoderConfig config_;
  std::vector<NamedParameter> params_;
  std::map<std::string, std::size_t> index_;
  Tensor token_embedding_, position_embedding_, lnf_gain_, lnf_bias_, w_out_;
  std::vector<Layer> layers_;
};

/// Index of the largest entry of row `row` (lowest index on ties).
int argmax_row(const Tensor& logits, std::size_t row);

}  // namespace ramp
