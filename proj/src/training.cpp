#include "ramp/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "ramp/binary_io.hpp"
#include "ramp/error.hpp"

namespace ramp {

std::string stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) fail(ErrorKind::config, "learning_rate must be > 0");
  if (steps < 1) fail(ErrorKind::config, "steps must be >= 1");
  if (max_epochs < 1) fail(ErrorKind::config, "max_epochs must be >= 1");
  if (batch_nodes < 1) fail(ErrorKind::config, "batch_nodes must be >= 1");
  if (early_stop_patience < 1) fail(ErrorKind::config, "early_stop_patience must be >= 1");
  if (ego_hops < 1) fail(ErrorKind::config, "ego_hops must be >= 1");
  if (ego_max_size < 1) fail(ErrorKind::config, "ego_max_size must be >= 1");
}

// ---- optimizer ------------------------------------------------------------

AdamW::AdamW(const Decoder& decoder, AdamConfig config, std::size_t total_steps)
    : config_(config), total_(std::max<std::size_t>(total_steps, 1)) {
  for (const auto& p : decoder.parameters()) {
    names_.push_back(p.name);
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

double AdamW::learning_rate_at(std::size_t step) const {
  const auto warmup = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(config_.warmup_fraction * static_cast<double>(total_))));
  if (step < warmup) {
    return config_.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(std::max<std::size_t>(1, total_ - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double floor = config_.min_lr_fraction;
  return config_.learning_rate *
         (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

double AdamW::step(Decoder& decoder, const std::set<std::string>& frozen, double grad_scale) {
  auto& params = decoder.parameters();
  if (params.size() != names_.size()) fail(ErrorKind::contract, "optimizer/model mismatch");
  double norm2 = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (frozen.count(params[k].name)) continue;
    for (double g : params[k].tensor.grad()) norm2 += (g * grad_scale) * (g * grad_scale);
  }
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) fail(ErrorKind::numeric, "non-finite gradient norm");
  double factor = grad_scale;
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) factor *= config_.clip_norm / norm;

  const double lr = learning_rate_at(t_);
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k].tensor;
    if (frozen.count(params[k].name)) {
      w.zero_grad();
      continue;
    }
    const auto grad = w.grad();
    if (grad.empty()) continue;  // no gradient reached this parameter
    const bool decay = w.rank() == 2;
    auto data = w.leaf_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i] * factor;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      data[i] -= lr * (update + (decay ? config_.weight_decay * data[i] : 0.0));
    }
    w.zero_grad();
  }
  return norm;
}

void AdamW::save_state(CheckpointData& data) const {
  data.metadata["adam.step"] = std::to_string(t_);
  data.metadata["adam.total_steps"] = std::to_string(total_);
  for (std::size_t k = 0; k < names_.size(); ++k) {
    data.tensors.push_back({"adam.m/" + names_[k], Tensor::from_data({m_[k].size()}, m_[k])});
    data.tensors.push_back({"adam.v/" + names_[k], Tensor::from_data({v_[k].size()}, v_[k])});
  }
}

void AdamW::load_state(const CheckpointData& data) {
  auto it = data.metadata.find("adam.step");
  if (it == data.metadata.end()) fail(ErrorKind::validation, "checkpoint has no optimizer state");
  for (std::size_t k = 0; k < names_.size(); ++k) {
    const Tensor* m = data.find("adam.m/" + names_[k]);
    const Tensor* v = data.find("adam.v/" + names_[k]);
    if (!m || !v || m->size() != m_[k].size() || v->size() != v_[k].size()) {
      fail(ErrorKind::validation, "optimizer state for '" + names_[k] + "' is missing or misshapen");
    }
  }
  for (std::size_t k = 0; k < names_.size(); ++k) {
    auto m = data.find("adam.m/" + names_[k])->data();
    auto v = data.find("adam.v/" + names_[k])->data();
    m_[k].assign(m.begin(), m.end());
    v_[k].assign(v.begin(), v.end());
  }
  t_ = std::stoull(it->second);
}

void TrainLog::record(std::size_t step, Stage stage, const std::string& task, double loss) {
  if (out_ == nullptr) return;
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_);
  nlohmann::json j = {{"step", step},
                      {"stage", stage_name(stage)},
                      {"task", task},
                      {"loss", loss},
                      {"wall_ms", std::round(ms.count() * 1000.0) / 1000.0}};
  *out_ << j.dump() << "\n";
}

// ---- pre-training ---------------------------------------------------------

std::string task_name(PretrainTask t) {
  return t == PretrainTask::self_recon ? "self_recon" : "nbr_recon";
}

PretrainTask sample_pretrain_task(Rng& rng) {
  return rng.below(2) == 0 ? PretrainTask::self_recon : PretrainTask::nbr_recon;
}

std::uint64_t node_seed(std::uint64_t seed, const std::string& id) {
  return derive_seed(seed, io::fnv1a(id));
}

EgoSubgraph reconstruction_subgraph(const TextRichGraph& graph, const std::string& id,
                                    const RampConfig& ramp, std::size_t max_size,
                                    std::uint64_t seed) {
  EgoOptions opts;
  opts.hops = std::max(1, ramp.mp_rounds);
  opts.max_size = max_size;
  opts.seed = seed;
  opts.prompt_node = false;
  return ego_subgraph(graph, id, opts);
}

Tensor reconstruction_loss(const Decoder& decoder, const KVCache& kv, std::span<const int> text) {
  Tokens answer(text.begin(), text.end());
  answer.push_back(decoder.config().eos_token_id);
  const int query = decoder.config().eos_token_id;
  return answer_loss(decoder, kv, std::span(&query, 1), answer);
}

Tensor self_recon_loss(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& ramp) {
  return reconstruction_loss(decoder, node_context(decoder, sub, ramp), sub.tokens.at(0));
}

std::vector<std::size_t> reconstruction_neighbors(const EgoSubgraph& sub) {
  std::vector<std::size_t> out;
  for (std::size_t j : sub.neighbors.at(0)) {
    if (j < sub.members.size()) out.push_back(j);
  }
  return out;
}

Tensor nbr_recon_loss(const Decoder& decoder, const EgoSubgraph& sub, const RampConfig& ramp) {
  const auto nbrs = reconstruction_neighbors(sub);
  if (nbrs.empty()) return self_recon_loss(decoder, sub, ramp);
  MemoryTable memory = propagate_for(decoder, sub, ramp, nbrs, ramp.mp_rounds);
  return reconstruction_loss(decoder, materialize_kv(decoder, memory, ramp.mp_rounds, nbrs),
                             sub.tokens.at(0));
}

PretrainResult pretrain(Decoder& decoder, const TextRichGraph& graph,
                        std::span<const std::string> node_ids, const RampConfig& ramp,
                        const TrainConfig& cfg, AdamW& optimizer, TrainLog* log) {
  cfg.validate();
  ramp.validate();
  if (node_ids.empty()) fail(ErrorKind::precondition, "pretrain: no training nodes");
  Rng rng(derive_seed(cfg.seed, 0x70726574ULL));
  PretrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double total = 0.0;
    for (std::size_t k = 0; k < cfg.batch_nodes; ++k) {
      const std::string& id = node_ids[rng.below(node_ids.size())];
      PretrainTask task = sample_pretrain_task(rng);
      const EgoSubgraph sub = reconstruction_subgraph(graph, id, ramp, cfg.ego_max_size, rng.next());
      if (task == PretrainTask::nbr_recon && reconstruction_neighbors(sub).empty()) {
        task = PretrainTask::self_recon;
      }
      double value;
      {
        Tape tape;
        Tensor loss = task == PretrainTask::self_recon ? self_recon_loss(decoder, sub, ramp)
                                                       : nbr_recon_loss(decoder, sub, ramp);
        value = loss.item();
        tape.backward(loss);
      }
      (task == PretrainTask::self_recon ? result.self_tasks : result.nbr_tasks) += 1;
      total += value;
      if (log) log->record(step, Stage::pretrain, task_name(task), value);
    }
    optimizer.step(decoder, cfg.freeze, 1.0 / static_cast<double>(cfg.batch_nodes));
    result.step_losses.push_back(total / static_cast<double>(cfg.batch_nodes));
  }
  return result;
}

// ---- fine-tuning ----------------------------------------------------------

std::string ClassificationTask::query_text() const {
  std::string q = "Which class (";
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (k) q += ", ";
    q += labels[k];
  }
  return q + ")? ";
}

Tokens ClassificationTask::answer_tokens(const std::string& label) {
  Tokens t = tokenize(label);
  t.push_back(kEosToken);
  return t;
}

std::size_t ClassificationTask::max_new() const {
  std::size_t longest = 0;
  for (const auto& l : labels) longest = std::max(longest, l.size());
  return longest + 2;
}

EgoSubgraph classification_subgraph(const TextRichGraph& graph, const std::string& id,
                                    const ClassificationTask& task, const TrainConfig& cfg,
                                    std::uint64_t seed) {
  EgoOptions opts;
  opts.hops = cfg.ego_hops;
  opts.max_size = cfg.ego_max_size;
  opts.seed = seed;
  opts.prompt_node = true;
  opts.prompt_text = task.query_text();
  return ego_subgraph(graph, id, opts);
}

FinetuneSample make_sample(const TextRichGraph& graph, const std::string& id,
                           const ClassificationTask& task, const TrainConfig& cfg,
                           std::uint64_t seed) {
  const auto& label = graph.node(id).label;
  if (!label) fail(ErrorKind::validation, "node '" + id + "' has no label");
  return FinetuneSample{classification_subgraph(graph, id, task, cfg, seed), task.query_tokens(),
                        ClassificationTask::answer_tokens(*label)};
}

Tensor finetune_loss(const Decoder& decoder, const FinetuneSample& sample, const RampConfig& ramp,
                     bool every_round) {
  if (!every_round || ramp.mp_rounds == 0) {
    return answer_loss(decoder, node_context(decoder, sample.sub, ramp), sample.query, sample.answer);
  }
  const std::size_t target = 0;
  const MemoryTable memory =
      propagate_for(decoder, sample.sub, ramp, std::span(&target, 1), ramp.mp_rounds);
  Tensor total;
  for (int r = 0; r <= ramp.mp_rounds; ++r) {
    Tensor loss = answer_loss(decoder, materialize_kv(decoder, memory, r, std::span(&target, 1)),
                              sample.query, sample.answer);
    total = r == 0 ? loss : add(total, loss);
  }
  return scale(total, 1.0 / static_cast<double>(ramp.mp_rounds + 1));
}

double finetune_step(Decoder& decoder, std::span<const FinetuneSample> batch,
                     const RampConfig& ramp, AdamW& optimizer,
                     const std::set<std::string>& frozen, bool every_round) {
  if (batch.empty()) fail(ErrorKind::precondition, "finetune_step: empty batch");
  double total = 0.0;
  for (const auto& sample : batch) {
    try {
      Tape tape;
      Tensor loss = finetune_loss(decoder, sample, ramp, every_round);
      total += loss.item();
      tape.backward(loss);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      fail(ErrorKind::numeric, "fine-tuning on node '" + sample.sub.target + "' at optimizer step " +
                                   std::to_string(optimizer.steps_taken()) + ": " + e.what());
    }
  }
  optimizer.step(decoder, frozen, 1.0 / static_cast<double>(batch.size()));
  return total / static_cast<double>(batch.size());
}

bool label_matches(const std::string& generated, const std::string& label) {
  auto normalize = [](const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return std::string();
    const auto last = s.find_last_not_of(" \t\r\n");
    std::string out = s.substr(first, last - first + 1);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  return normalize(generated) == normalize(label);
}

Prediction predict(const Decoder& decoder, const EgoSubgraph& sub, const ClassificationTask& task,
                   const RampConfig& ramp, const std::string& label) {
  const KVCache kv = node_context(decoder, sub, ramp);
  const Tokens query = task.query_tokens();
  const auto ids = decoder.generate(kv, query, task.max_new());
  Prediction p;
  p.text = detokenize(ids);
  p.overflow = ids.size() >= task.max_new();
  p.loss = answer_loss(decoder, kv, query, ClassificationTask::answer_tokens(label)).item();
  return p;
}

AccuracyCount classification_accuracy(const Decoder& decoder, const TextRichGraph& graph,
                                      std::span<const std::string> ids,
                                      const ClassificationTask& task, const RampConfig& ramp,
                                      const TrainConfig& cfg, std::uint64_t seed,
                                      const SubgraphTransform& transform) {
  AccuracyCount count;
  double loss = 0.0;
  for (const auto& id : ids) {
    const auto& label = graph.node(id).label;
    if (!label) fail(ErrorKind::validation, "node '" + id + "' has no label");
    EgoSubgraph sub = classification_subgraph(graph, id, task, cfg, node_seed(seed, id));
    if (transform) sub = transform(sub, id);
    const Prediction p = predict(decoder, sub, task, ramp, *label);
    ++count.total;
    count.overflow += p.overflow;
    if (!p.overflow && label_matches(p.text, *label)) ++count.correct;
    loss += p.loss;
  }
  count.mean_loss = count.total ? loss / static_cast<double>(count.total) : 0.0;
  return count;
}

std::size_t finetune_total_steps(std::size_t train_nodes, const TrainConfig& cfg) {
  return cfg.max_epochs * ((train_nodes + cfg.batch_nodes - 1) / cfg.batch_nodes);
}

FinetuneResult finetune(Decoder& decoder, const TextRichGraph& graph,
                        std::span<const std::string> train_ids,
                        std::span<const std::string> val_ids, const ClassificationTask& task,
                        const RampConfig& ramp, const TrainConfig& cfg, AdamW& optimizer,
                        TrainLog* log) {
  cfg.validate();
  ramp.validate();
  if (train_ids.empty()) fail(ErrorKind::precondition, "finetune: no training nodes");
  if (val_ids.empty()) fail(ErrorKind::precondition, "finetune: no validation nodes");
  Rng rng(derive_seed(cfg.seed, 0x66696e65ULL));
  std::vector<std::string> order(train_ids.begin(), train_ids.end());

  auto snapshot = [&] {
    std::vector<std::vector<double>> values;
    for (const auto& p : decoder.parameters()) {
      values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
    return values;
  };
  auto best = snapshot();
  double best_loss = 0.0;
  int waited = 0;
  FinetuneResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_nodes) {
      std::vector<FinetuneSample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_nodes); ++k) {
        batch.push_back(make_sample(graph, order[k], task, cfg,
                                    derive_seed(node_seed(cfg.seed, order[k]), epoch)));
      }
      RampConfig step_ramp = ramp;
      if (cfg.shuffle_neighbors) {
        step_ramp.neighbor_order = NeighborOrder::seeded_shuffle;
        step_ramp.order_seed = rng.next();
      }
      const double loss = finetune_step(decoder, batch, step_ramp, optimizer, cfg.freeze, cfg.round_supervision);
      epoch_loss += loss * static_cast<double>(batch.size());
      if (log) log->record(step, Stage::finetune, "classify", loss);
      ++step;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
    const AccuracyCount val =
        classification_accuracy(decoder, graph, val_ids, task, ramp, cfg, cfg.seed);
    result.val_accuracy.push_back(val.accuracy());
    const bool better = result.best_epoch == 0 || val.accuracy() > result.best_val_accuracy ||
                        (val.accuracy() == result.best_val_accuracy && val.mean_loss < best_loss);
    if (better) {
      result.best_epoch = epoch;
      result.best_val_accuracy = val.accuracy();
      best_loss = val.mean_loss;
      best = snapshot();
      waited = 0;
    } else if (++waited >= cfg.early_stop_patience) {
      break;
    }
  }
  auto& params = decoder.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(best[k].begin(), best[k].end(), params[k].tensor.leaf_data().begin());
  }
  return result;
}

}  // namespace ramp
