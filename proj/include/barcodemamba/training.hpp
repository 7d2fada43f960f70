#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <type_traits>
#include <string>
#include <vector>

#include "json.hpp"

#include "barcodemamba/backbone.hpp"
#include "barcodemamba/checkpoint.hpp"
#include "barcodemamba/data.hpp"
#include "barcodemamba/tokenizer.hpp"

namespace bm {

enum class Objective { ntp, mlm };

std::string_view to_string(Objective o);
Objective parse_objective(std::string_view name);

struct TrainConfig {
  Objective objective = Objective::ntp;
  double lr = 6e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_frac = 0.01;
  double final_lr_frac = 0.10;
  int max_epochs = 25;
  int batch_size = 16;
  int patience = 3;
  double mlm_mask_ratio = 0.30;
  double rc_augment_prob = 0.5;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;  // fine-tuning only: train the head alone
  Pooling pooling = Pooling::mean;

  void validate() const;
  nlohmann::json to_json() const;
};

// Linear warmup over the first warmup_frac of total_steps, then cosine decay
// to final_lr_frac * lr at total_steps.
double lr_at(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps);

// The two pieces of the schedule over a continuous step axis; lr_at picks
// warmup_branch below warmup_frac * total and cosine_branch from there on.
namespace schedule {
double warmup_branch(const TrainConfig& cfg, double step, double total);
double cosine_branch(const TrainConfig& cfg, double step, double total);
}  // namespace schedule

using EpochLogger = std::function<void(const nlohmann::json&)>;

// Encodes records (optionally reverse-complemented with probability
// rc_prob) into one packed batch.
TokenBatch encode_batch(const Tokenizer& tok, const std::vector<BarcodeRecord>& records,
                        std::span<const std::size_t> indices, Rng* rc_rng = nullptr,
                        double rc_prob = 0.0);

// Next-token targets: position t predicts token t+1 of the same sequence;
// the final position and pad positions are excluded.
struct LossTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};
LossTargets ntp_targets(const TokenBatch& batch);

struct MlmMasking {
  TokenBatch corrupted;
  LossTargets targets;
};

// Selects ceil(ratio * real_len) real positions per sequence, replaces them
// with [MASK], and targets the original ids at exactly those positions.
MlmMasking mlm_mask(const TokenBatch& batch, const Tokenizer& tok, double ratio, Rng& rng);

template <typename S>
Tensor<S> ntp_loss(const Backbone<S>& model, const TokenBatch& batch) {
  if (batch.seq_len < 2) throw DataError("next-token prediction needs at least 2 tokens");
  const auto tg = ntp_targets(batch);
  auto logits = model.lm_logits(model.forward_hidden(batch));
  return softmax_cross_entropy(logits, std::span<const int>(tg.targets),
                               std::span<const std::uint8_t>(tg.mask));
}

template <typename S>
Tensor<S> mlm_loss(const Backbone<S>& model, const Tokenizer& tok, const TokenBatch& batch,
                   double ratio, Rng& rng) {
  const auto m = mlm_mask(batch, tok, ratio, rng);
  auto logits = model.lm_logits(model.forward_hidden(m.corrupted));
  return softmax_cross_entropy(logits, std::span<const int>(m.targets.targets),
                               std::span<const std::uint8_t>(m.targets.mask));
}

// Decoupled-weight-decay Adam with bias-corrected moments.
template <typename S>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  // Applies one update to every parameter that received a gradient. Throws
  // NumericalError, leaving parameters untouched, if any gradient is
  // non-finite.
  void step(std::vector<NamedParam<S>>& params, double lr) {
    for (const auto& p : params)
      if (p.tensor.has_grad() && !p.tensor.grad().allFinite())
        throw NumericalError("non-finite gradient for " + p.name + "; update aborted");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      const auto& g = p.tensor.grad();
      auto& m = m_[p.name];
      auto& v = v_[p.name];
      if (m.size() == 0) {
        m = Matrix<S>::Zero(g.rows(), g.cols());
        v = Matrix<S>::Zero(g.rows(), g.cols());
      }
      m = S(cfg_.beta1) * m + S(1.0 - cfg_.beta1) * g;
      v = S(cfg_.beta2) * v + S(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      auto& w = p.tensor.mutable_value();
      if (p.decay && cfg_.weight_decay != 0.0) w *= S(1.0 - lr * cfg_.weight_decay);
      const S step_size = S(lr / bc1);
      const S root_bc2 = S(std::sqrt(bc2));
      w.array() -= step_size * m.array() / (v.array().sqrt() / root_bc2 + S(cfg_.adam_eps));
    }
  }

  std::int64_t steps() const { return t_; }

  void export_state(TrainingState<S>& st) const {
    st.step = t_;
    st.first_moment = m_;
    st.second_moment = v_;
  }
  void import_state(const TrainingState<S>& st) {
    t_ = st.step;
    m_ = st.first_moment;
    v_ = st.second_moment;
  }

 private:
  TrainConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Matrix<S>> m_, v_;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_perplexity = 0;
  double val_accuracy = 0;  // fine-tuning only
  double lr = 0;
  double wall_seconds = 0;
  std::int64_t steps = 0;

  nlohmann::json to_json(std::string_view phase) const;
};

struct PretrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  int epochs_run = 0;
  bool stopped_early = false;
  double best_val_loss = 0;
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  std::vector<std::string> labels;  // class index -> species
  int best_epoch = 0;
  int epochs_run = 0;
  bool stopped_early = false;
  double best_val_accuracy = 0;
  double test_accuracy = 0;
};

namespace detail {

template <typename S>
std::vector<Matrix<S>> snapshot(const Backbone<S>& model) {
  std::vector<Matrix<S>> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor.value());
  return out;
}

template <typename S>
void restore(Backbone<S>& model, const std::vector<Matrix<S>>& values) {
  auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].tensor.mutable_value() = values[i];
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                          Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(
                                         std::min(n, i + static_cast<std::size_t>(batch_size))));
  return out;
}

inline std::int64_t batches_per_epoch(std::size_t n, int batch_size) {
  return static_cast<std::int64_t>((n + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

}  // namespace detail

// Sum of next-token negative log-likelihood (in double) and the number of
// predicted positions over a set of records. No augmentation.
template <typename S>
std::pair<double, std::int64_t> ntp_nll_sum(const Backbone<S>& model, const Tokenizer& tok,
                                            const std::vector<BarcodeRecord>& records,
                                            int batch_size = 32) {
  NoGradGuard ng;
  double total = 0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(records.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      idx.push_back(j);
    const auto batch = encode_batch(tok, records, idx);
    if (batch.seq_len < 2) throw DataError("next-token prediction needs at least 2 tokens");
    const auto tg = ntp_targets(batch);
    const auto logits = model.lm_logits(model.forward_hidden(batch)).value();
    for (Index r = 0; r < logits.rows(); ++r) {
      if (!tg.mask[static_cast<std::size_t>(r)]) continue;
      const auto row = logits.row(r);
      const double mx = static_cast<double>(row.maxCoeff());
      double z = 0;
      for (Index c = 0; c < row.size(); ++c) z += std::exp(static_cast<double>(row(c)) - mx);
      total += std::log(z) + mx - static_cast<double>(row(tg.targets[static_cast<std::size_t>(r)]));
      ++count;
    }
  }
  return {total, count};
}

// Mean objective loss over a record set in inference mode. MLM masks are
// drawn from a fixed-seed stream so successive epochs are comparable.
template <typename S>
double evaluate_loss(const Backbone<S>& model, const Tokenizer& tok,
                     const std::vector<BarcodeRecord>& records, const TrainConfig& cfg) {
  if (records.empty()) throw DataError("cannot evaluate on an empty set");
  if (cfg.objective == Objective::ntp) {
    const auto [total, count] = ntp_nll_sum(model, tok, records, cfg.batch_size);
    return total / static_cast<double>(count);
  }
  NoGradGuard ng;
  Rng rng(cfg.seed ^ 0x5EEDF00DULL);
  double weighted = 0;
  double positions = 0;
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(records.size(), i + static_cast<std::size_t>(cfg.batch_size)); ++j)
      idx.push_back(j);
    const auto batch = encode_batch(tok, records, idx);
    const auto m = mlm_mask(batch, tok, cfg.mlm_mask_ratio, rng);
    auto logits = model.lm_logits(model.forward_hidden(m.corrupted));
    const auto l = softmax_cross_entropy(logits, std::span<const int>(m.targets.targets),
                                         std::span<const std::uint8_t>(m.targets.mask));
    double n = 0;
    for (auto w : m.targets.mask) n += w;
    weighted += static_cast<double>(l.item()) * n;
    positions += n;
  }
  return weighted / positions;
}

// Self-supervised pretraining on bundle.pretrain_train with early stopping on
// bundle.pretrain_val. The best epoch's parameters are left in `model`.
template <typename S>
PretrainResult pretrain(Backbone<S>& model, const Tokenizer& tok, const DatasetBundle& bundle,
                        const TrainConfig& cfg, std::type_identity_t<TrainingState<S>>* state_out = nullptr,
                        const EpochLogger& log = {}) {
  cfg.validate();
  check_vocab_agreement(model.config(), tok);
  const auto& train = bundle.pretrain_train;
  if (train.empty()) throw DataError("empty pretraining set");
  const auto& val = bundle.pretrain_val.empty() ? train : bundle.pretrain_val;

  AdamW<S> opt(cfg);
  Rng rng(cfg.seed);
  const std::int64_t total_steps =
      detail::batches_per_epoch(train.size(), cfg.batch_size) * cfg.max_epochs;
  PretrainResult res;
  res.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix<S>> best = detail::snapshot(model);
  int stale = 0;
  std::int64_t step = 0;
  double lr = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = rng.fork(static_cast<std::uint64_t>(epoch));
    const auto batches = detail::make_batches(train.size(), cfg.batch_size, epoch_rng);
    double loss_sum = 0;
    for (const auto& idx : batches) {
      const auto batch = encode_batch(tok, train, idx, &epoch_rng, cfg.rc_augment_prob);
      Tensor<S> loss = cfg.objective == Objective::ntp
                           ? ntp_loss(model, batch)
                           : mlm_loss(model, tok, batch, cfg.mlm_mask_ratio, epoch_rng);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw NumericalError("training diverged: non-finite loss");
      for (auto& p : model.parameters()) p.tensor.zero_grad();
      loss.backward();
      lr = lr_at(cfg, ++step, total_steps);
      opt.step(model.parameters(), lr);
      loss_sum += lv;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.val_loss = evaluate_loss(model, tok, val, cfg);
    if (!std::isfinite(rec.val_loss)) throw NumericalError("training diverged: non-finite validation loss");
    rec.val_perplexity = std::exp(rec.val_loss);
    rec.lr = lr;
    rec.steps = step;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(rec);
    if (log) log(rec.to_json("pretrain"));
    res.epochs_run = epoch;
    if (rec.val_loss < res.best_val_loss) {
      res.best_val_loss = rec.val_loss;
      res.best_epoch = epoch;
      best = detail::snapshot(model);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      res.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  detail::restore(model, best);
  if (state_out) {
    opt.export_state(*state_out);
    state_out->seed = cfg.seed;
  }
  return res;
}

// Sorted species labels of a record set.
std::vector<std::string> species_labels(const std::vector<BarcodeRecord>& records);

// Predicted class indices, inference mode.
template <typename S>
std::vector<int> predict_classes(const Backbone<S>& model, const Tokenizer& tok,
                                 const std::vector<BarcodeRecord>& records, Pooling pooling,
                                 int batch_size = 32) {
  NoGradGuard ng;
  std::vector<int> out;
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(records.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      idx.push_back(j);
    const auto logits = model.classify(encode_batch(tok, records, idx), pooling).value();
    for (Index r = 0; r < logits.rows(); ++r) {
      Index arg;
      logits.row(r).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

// Class indices for records under a label map; throws on unknown labels.
std::vector<int> label_indices(const std::vector<BarcodeRecord>& records,
                               const std::vector<std::string>& labels);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Supervised species classification: attaches a head sized to the ft_train
// species, trains end to end (or the head alone with freeze_backbone),
// early-stops on ft_val accuracy and reports ft_test accuracy.
template <typename S>
FinetuneResult finetune(Backbone<S>& model, const Tokenizer& tok, const DatasetBundle& bundle,
                        const TrainConfig& cfg, const EpochLogger& log = {}) {
  cfg.validate();
  check_vocab_agreement(model.config(), tok);
  const auto& train = bundle.ft_train;
  if (train.empty()) throw DataError("empty fine-tuning training set");
  FinetuneResult res;
  res.labels = species_labels(train);
  const auto y_train = label_indices(train, res.labels);
  const auto& val = bundle.ft_val.empty() ? train : bundle.ft_val;
  const auto y_val = label_indices(val, res.labels);
  const auto y_test = label_indices(bundle.ft_test, res.labels);

  Rng rng(cfg.seed ^ 0xF17E7E5EULL);
  model.attach_head(static_cast<Index>(res.labels.size()), rng);
  AdamW<S> opt(cfg);
  const std::int64_t total_steps =
      detail::batches_per_epoch(train.size(), cfg.batch_size) * cfg.max_epochs;
  std::vector<Matrix<S>> best = detail::snapshot(model);
  res.best_val_accuracy = -1;
  int stale = 0;
  std::int64_t step = 0;
  double lr = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng epoch_rng = rng.fork(static_cast<std::uint64_t>(epoch));
    const auto batches = detail::make_batches(train.size(), cfg.batch_size, epoch_rng);
    double loss_sum = 0;
    for (const auto& idx : batches) {
      const auto batch = encode_batch(tok, train, idx);
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(y_train[i]);
      const std::vector<std::uint8_t> mask(targets.size(), 1);
      Tensor<S> logits;
      if (cfg.freeze_backbone) {
        Tensor<S> pooled;
        {
          NoGradGuard ng;
          pooled = model.embed_sequence(batch, cfg.pooling);
        }
        pooled = Tensor<S>::constant(pooled.value());
        logits = add_row(matmul(pooled, model.param("head.weight")), model.param("head.bias"));
      } else {
        logits = model.classify(batch, cfg.pooling);
      }
      auto loss = softmax_cross_entropy(logits, std::span<const int>(targets),
                                        std::span<const std::uint8_t>(mask));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw NumericalError("fine-tuning diverged: non-finite loss");
      for (auto& p : model.parameters()) p.tensor.zero_grad();
      loss.backward();
      lr = lr_at(cfg, ++step, total_steps);
      opt.step(model.parameters(), lr);
      loss_sum += lv;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.val_accuracy = accuracy(predict_classes(model, tok, val, cfg.pooling, cfg.batch_size), y_val);
    rec.lr = lr;
    rec.steps = step;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(rec);
    if (log) log(rec.to_json("finetune"));
    res.epochs_run = epoch;
    if (rec.val_accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = rec.val_accuracy;
      res.best_epoch = epoch;
      best = detail::snapshot(model);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      res.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  detail::restore(model, best);
  res.test_accuracy =
      bundle.ft_test.empty()
          ? 0.0
          : accuracy(predict_classes(model, tok, bundle.ft_test, cfg.pooling, cfg.batch_size), y_test);
  return res;
}

}  // namespace bm
