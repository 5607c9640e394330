#pragma once

// Reconstruction pre-training, generative fine-tuning and the optimizer.

#include <chrono>
#include <cstdint>
#include <functional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ramp/checkpoint.hpp"
#include "ramp/decoder.hpp"
#include "ramp/engine.hpp"
#include "ramp/graph.hpp"
#include "ramp/random.hpp"

namespace ramp {

enum class Stage { pretrain, finetune };
std::string stage_name(Stage s);

struct TrainConfig {
  Stage stage = Stage::pretrain;
  std::size_t steps = 600;        // pre-training optimizer steps
  std::size_t max_epochs = 12;    // fine-tuning upper bound
  std::size_t batch_nodes = 4;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
  std::set<std::string> freeze;   // parameter names excluded from updates
  int early_stop_patience = 3;
  int ego_hops = 2;
  std::size_t ego_max_size = 20;
  bool shuffle_neighbors = false;  // fine-tune on seeded neighbor orders
  // Fine-tuning also scores the answer from every earlier round's summaries
  // of the target (mean over rounds 0..mp). Evaluation always uses round mp.
  bool round_supervision = false;

  void validate() const;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // matrices only
  double warmup_fraction = 0.05;
  double min_lr_fraction = 0.1;  // cosine floor
  double clip_norm = 1.0;        // <= 0 disables clipping
};

/// Adam with decoupled weight decay, linear warmup then cosine decay.
class AdamW {
 public:
  AdamW(const Decoder& decoder, AdamConfig config, std::size_t total_steps);

  double learning_rate_at(std::size_t step) const;
  std::size_t steps_taken() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

  /// One update from the leaf gradients accumulated on the decoder's
  /// parameters, multiplied by grad_scale. Frozen parameters are left
  /// untouched. All gradients are cleared. Returns the pre-clip norm.
  double step(Decoder& decoder, const std::set<std::string>& frozen, double grad_scale = 1.0);

  void save_state(CheckpointData& data) const;
  void load_state(const CheckpointData& data);

 private:
  AdamConfig config_;
  std::size_t total_;
  std::size_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_;
};

/// JSON-lines training log: step, stage, task, loss, wall_ms.
class TrainLog {
 public:
  explicit TrainLog(std::ostream* out) : out_(out), start_(std::chrono::steady_clock::now()) {}
  void record(std::size_t step, Stage stage, const std::string& task, double loss);

 private:
  std::ostream* out_;
  std::chrono::steady_clock::time_point start_;
};

// ---- pre-training ---------------------------------------------------------

enum class PretrainTask { self_recon, nbr_recon };
std::string task_name(PretrainTask t);

/// Uniform over the two tasks.
PretrainTask sample_pretrain_task(Rng& rng);

/// Seed for per-node sampling that does not depend on list positions.
std::uint64_t node_seed(std::uint64_t seed, const std::string& id);

/// Ego subgraph used for reconstruction: no prompt node, hops = max(1, mp).
EgoSubgraph reconstruction_subgraph(const TextRichGraph& graph, const std::string& id,
                                    const RampConfig& ramp, std::size_t max_size,
                                    std::uint64_t seed);

/// Reconstruction target: end-of-sequence query, text tokens then EOS.
Tensor reconstruction_loss(const Decoder& decoder, const KVCache& kv, std::span<const int> text);

/// Text of the target (local 0) from its own final-round summaries.
Tensor self_recon_loss(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& ramp);

/// Text of the target from its neighbors' final-round summaries,
/// concatenated in stored (id) order. Falls back to self reconstruction for
/// an isolated target.
Tensor nbr_recon_loss(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& ramp);

/// Neighbors of the target usable for neighbor reconstruction.
std::vector<std::size_t> reconstruction_neighbors(const EgoSubgraph& sub);

struct PretrainResult {
  std::vector<double> step_losses;
  std::size_t self_tasks = 0;
  std::size_t nbr_tasks = 0;
};

PretrainResult pretrain(Decoder& decoder, const TextRichGraph& graph,
                        std::span<const std::string> node_ids, const RampConfig& ramp,
                        const TrainConfig& cfg, AdamW& optimizer, TrainLog* log = nullptr);

// ---- fine-tuning ----------------------------------------------------------

/// Node classification phrased as generation.
struct ClassificationTask {
  std::vector<std::string> labels;

  std::string query_text() const;
  Tokens query_tokens() const { return tokenize(query_text()); }
  static Tokens answer_tokens(const std::string& label);
  std::size_t max_new() const;
};

struct FinetuneSample {
  EgoSubgraph sub;
  Tokens query;
  Tokens answer;
};

EgoSubgraph classification_subgraph(const TextRichGraph& graph, const std::string& id,
                                    const ClassificationTask& task, const TrainConfig& cfg,
                                    std::uint64_t seed);

FinetuneSample make_sample(const TextRichGraph& graph, const std::string& id,
                           const ClassificationTask& task, const TrainConfig& cfg,
                           std::uint64_t seed);

Tensor finetune_loss(const Decoder& decoder, const FinetuneSample& sample, const RampConfig& ramp,
                     bool every_round = false);

/// Forward, backward and one optimizer update over a batch. Returns the mean
/// loss. A non-finite value aborts with the offending node named.
double finetune_step(Decoder& decoder, std::span<const FinetuneSample> batch,
                     const RampConfig& ramp, AdamW& optimizer,
                     const std::set<std::string>& frozen, bool every_round = false);

/// Trimmed, case-folded equality.
bool label_matches(const std::string& generated, const std::string& label);

struct Prediction {
  std::string text;
  bool overflow = false;  // hit max_new without end-of-sequence
  double loss = 0.0;      // answer loss of the true label
};

Prediction predict(const Decoder& decoder, const EgoSubgraph& sub, const ClassificationTask& task,
                   const RampConfig& ramp, const std::string& label);

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t overflow = 0;
  double mean_loss = 0.0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

using SubgraphTransform = std::function<EgoSubgraph(const EgoSubgraph&, const std::string& id)>;

/// Accuracy over `ids` with evaluation subgraphs seeded by node_seed(seed, id).
AccuracyCount classification_accuracy(const Decoder& decoder, const TextRichGraph& graph,
                                      std::span<const std::string> ids,
                                      const ClassificationTask& task, const RampConfig& ramp,
                                      const TrainConfig& cfg, std::uint64_t seed,
                                      const SubgraphTransform& transform = {});

struct FinetuneResult {
  std::vector<double> epoch_losses;
  std::vector<double> val_accuracy;
  std::size_t best_epoch = 0;  // 1-based, 0 when no epoch ran
  double best_val_accuracy = 0.0;
};

/// Epochs over shuffled training nodes with early stopping on validation
/// accuracy (ties broken by lower validation loss). The best parameters are
/// restored before returning.
FinetuneResult finetune(Decoder& decoder, const TextRichGraph& graph,
                        std::span<const std::string> train_ids,
                        std::span<const std::string> val_ids, const ClassificationTask& task,
                        const RampConfig& ramp, const TrainConfig& cfg, AdamW& optimizer,
                        TrainLog* log = nullptr);

/// Optimizer steps a fine-tuning run would take at most.
std::size_t finetune_total_steps(std::size_t train_nodes, const TrainConfig& cfg);

}  // namespace ramp
