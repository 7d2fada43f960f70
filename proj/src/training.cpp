#include "barcodemamba/training.hpp"

#include <algorithm>
#include <set>

namespace bm {

std::string_view to_string(Objective o) { return o == Objective::ntp ? "ntp" : "mlm"; }

Objective parse_objective(std::string_view name) {
  if (name == "ntp") return Objective::ntp;
  if (name == "mlm") return Objective::mlm;
  throw ConfigError("unknown objective: " + std::string(name));
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("training config: " + m); };
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(warmup_frac > 0 && warmup_frac < 1)) fail("warmup_frac must lie in (0, 1)");
  if (!(final_lr_frac > 0 && final_lr_frac <= 1)) fail("final_lr_frac must lie in (0, 1]");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (objective == Objective::mlm && !(mlm_mask_ratio > 0 && mlm_mask_ratio < 1))
    fail("mlm_mask_ratio must lie in (0, 1)");
  if (!(rc_augment_prob >= 0 && rc_augment_prob <= 1)) fail("rc_augment_prob must lie in [0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"objective", to_string(objective)},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"warmup_frac", warmup_frac},
          {"final_lr_frac", final_lr_frac},
          {"max_epochs", max_epochs},
          {"batch_size", batch_size},
          {"patience", patience},
          {"mlm_mask_ratio", mlm_mask_ratio},
          {"rc_augment_prob", rc_augment_prob},
          {"seed", seed},
          {"freeze_backbone", freeze_backbone},
          {"pooling", to_string(pooling)}};
}

namespace schedule {

double warmup_branch(const TrainConfig& cfg, double step, double total) {
  return cfg.lr * step / (cfg.warmup_frac * total);
}

double cosine_branch(const TrainConfig& cfg, double step, double total) {
  const double floor = cfg.final_lr_frac * cfg.lr;
  const double warm = cfg.warmup_frac * total;
  const double progress = (step - warm) / (total - warm);
  return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace schedule

double lr_at(const TrainConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (total_steps < 1) throw ConfigError("schedule needs at least one step");
  const double total = static_cast<double>(total_steps);
  const double s = std::clamp(static_cast<double>(step), 0.0, total);
  if (s < cfg.warmup_frac * total) return schedule::warmup_branch(cfg, s, total);
  return schedule::cosine_branch(cfg, s, total);
}

nlohmann::json EpochRecord::to_json(std::string_view phase) const {
  nlohmann::json j = {{"phase", phase},          {"epoch", epoch}, {"train_loss", train_loss},
                      {"lr", lr},                {"steps", steps}, {"wall_time", wall_seconds}};
  if (phase == "finetune") {
    j["val_accuracy"] = val_accuracy;
  } else {
    j["val_loss"] = val_loss;
    j["val_perplexity"] = val_perplexity;
  }
  return j;
}

TokenBatch encode_batch(const Tokenizer& tok, const std::vector<BarcodeRecord>& records,
                        std::span<const std::size_t> indices, Rng* rc_rng, double rc_prob) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(indices.size());
  for (auto i : indices) {
    const auto& seq = records.at(i).sequence;
    if (rc_rng && rc_prob > 0 && rc_rng->bernoulli(rc_prob))
      seqs.push_back(tok.encode(reverse_complement(seq)));
    else
      seqs.push_back(tok.encode(seq));
  }
  return make_batch(seqs);
}

LossTargets ntp_targets(const TokenBatch& batch) {
  LossTargets out;
  const auto n = batch.ids.size();
  const auto L = static_cast<std::size_t>(batch.seq_len);
  out.targets.assign(n, 0);
  out.mask.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    if ((r + 1) % L == 0) continue;
    if (!batch.mask[r] || !batch.mask[r + 1]) continue;
    out.targets[r] = batch.ids[r + 1];
    out.mask[r] = 1;
  }
  return out;
}

MlmMasking mlm_mask(const TokenBatch& batch, const Tokenizer& tok, double ratio, Rng& rng) {
  if (!(ratio > 0 && ratio <= 1)) throw ConfigError("mask ratio must lie in (0, 1]");
  MlmMasking out;
  out.corrupted = batch;
  const auto n = batch.ids.size();
  const auto L = static_cast<std::size_t>(batch.seq_len);
  out.targets.targets.assign(n, 0);
  out.targets.mask.assign(n, 0);
  const int mask_id = tok.mask_id();
  for (std::size_t s0 = 0; s0 < n; s0 += L) {
    std::vector<std::size_t> real;
    for (std::size_t t = s0; t < s0 + L; ++t)
      if (batch.mask[t]) real.push_back(t);
    const auto count = static_cast<std::size_t>(
        std::ceil(ratio * static_cast<double>(real.size()) - 1e-9));
    if (count == 0) throw ConfigError("mask ratio selects no positions in a sequence");
    rng.shuffle(real);
    for (std::size_t i = 0; i < count; ++i) {
      const auto t = real[i];
      out.targets.targets[t] = batch.ids[t];
      out.targets.mask[t] = 1;
      out.corrupted.ids[t] = mask_id;
    }
  }
  return out;
}

std::vector<std::string> species_labels(const std::vector<BarcodeRecord>& records) {
  std::set<std::string> s;
  for (const auto& r : records) {
    if (!r.species) throw DataError("record " + r.record_id + " has no species label");
    s.insert(*r.species);
  }
  return {s.begin(), s.end()};
}

std::vector<int> label_indices(const std::vector<BarcodeRecord>& records,
                               const std::vector<std::string>& labels) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.species) throw DataError("record " + r.record_id + " has no species label");
    const auto it = std::lower_bound(labels.begin(), labels.end(), *r.species);
    if (it == labels.end() || *it != *r.species)
      throw DataError("species " + *r.species + " is not in the training label set");
    out.push_back(static_cast<int>(it - labels.begin()));
  }
  return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) throw ShapeError("accuracy: size mismatch");
  if (preds.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

}  // namespace bm
