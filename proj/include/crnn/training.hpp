// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "crnn/dataset.hpp"
#include "crnn/error.hpp"
#include "crnn/evaluation.hpp"
#include "crnn/model.hpp"
#include "crnn/rng.hpp"
#include "crnn/tensor.hpp"

namespace crnn::training {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t seq_len = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double l1 = 0.1;
  double l2 = 0.001;
  std::size_t max_epochs = 1000;
  std::size_t patience = 50;
  std::uint64_t seed = 0;
  double val_ratio = 0.1;
  bool shuffle = true;

  void validate() const {
    const auto need = [](bool ok, const char* field, const char* why) {
      if (!ok) throw ConfigError(std::string(field) + ": " + why);
    };
    need(batch_size >= 1, "batch_size", "must be >= 1");
    need(seq_len >= 1, "seq_len", "must be >= 1");
    need(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate", "must be >= 0");
    need(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must be in [0, 1)");
    need(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must be in [0, 1)");
    need(adam_eps > 0.0, "adam_eps", "must be positive");
    need(l1 >= 0.0, "l1", "must be >= 0");
    need(l2 >= 0.0, "l2", "must be >= 0");
    need(max_epochs >= 1, "max_epochs", "must be >= 1");
    need(patience >= 1, "patience", "must be >= 1");
    need(val_ratio >= 0.0 && val_ratio < 1.0, "val_ratio", "must be in [0, 1)");
  }
};

// ---------------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  double rmse_valence = 0.0;
  double rmse_arousal = 0.0;
  Tensor grad;  // dloss/dpred, [B x L x 2]
};

/// loss = (RMSE_valence + RMSE_arousal) / 2 over unmasked positions.
/// Where a channel's RMSE is exactly zero its gradient is taken as zero.
inline LossResult rmse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  pred.require_same_shape(target, "rmse_loss");
  if (pred.rank() != 3 || pred.dim(2) != 2) {
    throw DimensionError("rmse_loss: expected [B x L x 2], got " + shape_str(pred.shape()));
  }
  const std::size_t N = pred.dim(0) * pred.dim(1);
  if (mask.size() != N) {
    throw DimensionError("rmse_loss: mask " + shape_str(mask.shape()) + " vs predictions " +
                         shape_str(pred.shape()));
  }
  double active = 0.0;
  double sq[2] = {0.0, 0.0};
  for (std::size_t n = 0; n < N; ++n) {
    if (mask[n] == 0.0) continue;
    active += 1.0;
    for (std::size_t c = 0; c < 2; ++c) {
      const double d = pred[n * 2 + c] - target[n * 2 + c];
      sq[c] += d * d;
    }
  }
  if (active == 0.0) throw InputError("rmse_loss: every position is masked");

  LossResult r;
  const double rm[2] = {std::sqrt(sq[0] / active), std::sqrt(sq[1] / active)};
  r.rmse_valence = rm[0];
  r.rmse_arousal = rm[1];
  r.loss = 0.5 * (rm[0] + rm[1]);
  r.grad = Tensor(pred.shape());
  for (std::size_t n = 0; n < N; ++n) {
    if (mask[n] == 0.0) continue;
    for (std::size_t c = 0; c < 2; ++c) {
      if (rm[c] == 0.0) continue;
      r.grad[n * 2 + c] = 0.5 * (pred[n * 2 + c] - target[n * 2 + c]) / (active * rm[c]);
    }
  }
  return r;
}

struct PenaltyResult {
  double penalty = 0.0;
  Tensor grad_kernel;
  Tensor grad_activations;
};

/// ElasticNet on the convolution: l1*sum|w| + l2*sum w^2 over the kernel plus
/// (l1*sum|a| + l2*sum a^2) / batch_size over its output a, taken before batch
/// normalisation. The subgradient of |x| at 0 is 0.
inline PenaltyResult elasticnet_penalty(const Tensor& kernel, const Tensor& activations, double l1,
                                        double l2, std::size_t batch_size) {
  if (!(l1 >= 0.0 && l2 >= 0.0)) throw ConfigError("elasticnet_penalty: l1 and l2 must be >= 0");
  if (batch_size == 0) throw ConfigError("elasticnet_penalty: batch size must be >= 1");
  const auto sgn = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
  PenaltyResult r;
  r.grad_kernel = Tensor(kernel.shape());
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    const double w = kernel[i];
    r.penalty += l1 * std::abs(w) + l2 * w * w;
    r.grad_kernel[i] = l1 * sgn(w) + 2.0 * l2 * w;
  }
  if (!activations.empty()) {
    const double inv_b = 1.0 / static_cast<double>(batch_size);
    r.grad_activations = Tensor(activations.shape());
    double act = 0.0;
    for (std::size_t i = 0; i < activations.size(); ++i) {
      const double a = activations[i];
      act += l1 * std::abs(a) + l2 * a * a;
      r.grad_activations[i] = inv_b * (l1 * sgn(a) + 2.0 * l2 * a);
    }
    r.penalty += act * inv_b;
  }
  return r;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t t = 0;
};

/// Adam with bias correction on every trainable entry of `params`:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
inline void adam_step(ParamMap& params, const ParamMap& grads, OptState& opt, const AdamConfig& cfg) {
  ++opt.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor& g = grads.at(e.name);
    e.value.require_same_shape(g, ("adam_step " + e.name).c_str());
    auto [mit, m_new] = opt.m.try_emplace(e.name, e.value.shape());
    auto [vit, v_new] = opt.v.try_emplace(e.name, e.value.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      e.value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------

struct Objective {
  double total = 0.0;
  LossResult loss;
  double penalty = 0.0;
  ParamMap grads;
};

/// Train-mode forward, RMSE loss plus ElasticNet penalty, and the full
/// backward pass through every layer and time step.
inline Objective objective_and_gradient(Crnn& model, const dataset::Batch& batch, double l1,
                                        double l2, Rng* dropout_rng) {
  ForwardPass pass(model, layers::Mode::train, dropout_rng);
  const Tensor pred = pass.forward(batch.inputs);
  Objective obj;
  obj.loss = rmse_loss(pred, batch.targets, batch.mask);
  const PenaltyResult pen = elasticnet_penalty(model.params().at("conv.kernel"),
                                               pass.conv_activations(), l1, l2, batch.size());
  obj.penalty = pen.penalty;
  obj.total = obj.loss.loss + pen.penalty;
  obj.grads = model.params().zeros_like();
  pass.backward(obj.loss.grad, &pen.grad_activations, obj.grads);
  obj.grads.at("conv.kernel") += pen.grad_kernel;
  return obj;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean batch RMSE loss (penalty excluded)
  double val_rmse_valence = 0.0;
  double val_rmse_arousal = 0.0;

  double val_rmse_average() const { return 0.5 * (val_rmse_valence + val_rmse_arousal); }
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t stopped_epoch = 0;
  double best_val_rmse = std::numeric_limits<double>::infinity();
  bool validated_on_training = false;  // no held-out songs were available

  void write_csv(std::ostream& os) const {
    os << "epoch,train_loss,val_rmse_valence,val_rmse_arousal\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << dataset::fmt_value(e.train_loss) << ','
         << dataset::fmt_value(e.val_rmse_valence) << ',' << dataset::fmt_value(e.val_rmse_arousal)
         << '\n';
    }
  }
};

struct TrainResult {
  Crnn model;
  RunReport report;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on `train` with early stopping on pooled RMSE over `validation`
/// (the training songs themselves when `validation` is empty) and returns
/// the parameters of the best epoch.
inline TrainResult train(Crnn model, const std::vector<SongPair>& train_set,
                         const std::vector<SongPair>& validation, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw InputError("train: empty training set");
  const auto windows = dataset::slice_sequences(train_set, cfg.seq_len, /*eval_mode=*/false);
  if (windows.empty()) {
    throw InputError("train: no song is at least seq_len = " + std::to_string(cfg.seq_len) +
                     " segments long");
  }
  const std::vector<SongPair>& val_set = validation.empty() ? train_set : validation;

  Rng shuffle_rng(cfg.seed ^ 0x53485546464C45ULL);
  Rng dropout_rng(cfg.seed ^ 0x44524F504F5554ULL);
  const AdamConfig adam{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps};
  OptState opt;

  RunReport report;
  report.validated_on_training = validation.empty();
  std::optional<Crnn> best;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto epoch_batches = dataset::batches(windows, cfg.batch_size, shuffle_rng, cfg.shuffle);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < epoch_batches.size(); ++bi) {
      Objective obj = objective_and_gradient(model, epoch_batches[bi], cfg.l1, cfg.l2, &dropout_rng);
      if (!std::isfinite(obj.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi + 1) + " (rmse " +
                             std::to_string(obj.loss.loss) + ", penalty " +
                             std::to_string(obj.penalty) + ")");
      }
      loss_sum += obj.loss.loss;
      adam_step(model.params(), obj.grads, opt, adam);
    }

    const auto val = evaluation::evaluate_songs(model, val_set, cfg.seq_len);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(epoch_batches.size()), val.rmse_valence,
                    val.rmse_arousal};
    report.epochs.push_back(rec);
    report.stopped_epoch = epoch;
    if (on_epoch) on_epoch(rec);

    if (rec.val_rmse_average() < report.best_val_rmse) {
      report.best_val_rmse = rec.val_rmse_average();
      report.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return {best ? std::move(*best) : std::move(model), std::move(report)};
}

/// Splits `songs` by id hash (cfg.val_ratio held out) and trains.
inline TrainResult train(Crnn model, std::vector<SongPair> songs, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  auto split = dataset::split_by_id_hash(std::move(songs), cfg.val_ratio);
  return train(std::move(model), split.train, split.validation, cfg, on_epoch);
}

}  // namespace crnn::training
