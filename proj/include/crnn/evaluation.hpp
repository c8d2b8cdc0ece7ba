// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crnn/dataset.hpp"
#include "crnn/error.hpp"
#include "crnn/sequence.hpp"
#include "crnn/tensor.hpp"

namespace crnn::evaluation {

/// sqrt(sum (pred - ref)^2 / N).
inline double rmse(std::span<const double> pred, std::span<const double> ref) {
  if (pred.size() != ref.size()) {
    throw DimensionError("rmse: length mismatch " + std::to_string(pred.size()) + " vs " +
                         std::to_string(ref.size()));
  }
  if (pred.empty()) throw InputError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - ref[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double rmse(const Tensor& pred, const Tensor& ref) { return rmse(pred.values(), ref.values()); }

enum class EvalMode { pooled, per_song_mean };

struct SongRmse {
  double valence = 0.0;
  double arousal = 0.0;
};

struct EvalResult {
  double rmse_valence = 0.0;
  double rmse_arousal = 0.0;
  double rmse_average = 0.0;
  std::map<std::string, SongRmse> per_song;
  bool pooled = true;
};

/// Anything that maps [B x L x F] features to [B x L x 2] (valence, arousal).
template <typename P>
concept Predictor = requires(const P& p, const Tensor& x) {
  { p.feature_dim() } -> std::convertible_to<std::size_t>;
  { p.predict(x) } -> std::same_as<Tensor>;
};

/// Runs the predictor over every song in windows of `seq_len` (the last
/// window zero-padded and masked), drops the padding and scores the result.
template <Predictor P>
EvalResult evaluate_songs(const P& model, const std::vector<SongPair>& pairs, std::size_t seq_len,
                          EvalMode mode = EvalMode::pooled, std::size_t batch_size = 64) {
  if (pairs.empty()) throw InputError("evaluate_songs: no songs");
  for (const auto& p : pairs) {
    if (p.features.feature_dim() != model.feature_dim()) {
      throw DimensionError("song " + p.id() + " has " + std::to_string(p.features.feature_dim()) +
                           " features, model expects " + std::to_string(model.feature_dim()));
    }
  }
  const auto windows = dataset::slice_sequences(pairs, seq_len, /*eval_mode=*/true);

  struct Collected {
    std::vector<double> pv, rv, pa, ra;
  };
  std::vector<Collected> songs(pairs.size());
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(windows.size(), start + batch_size); ++i) idx.push_back(i);
    const dataset::Batch batch = dataset::assemble_batch(windows, idx);
    const Tensor pred = model.predict(batch.inputs);
    if (pred.shape() != Shape({batch.size(), seq_len, 2})) {
      throw DimensionError("predictor returned " + shape_str(pred.shape()));
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto& song = songs[windows[idx[b]].song_index];
      for (std::size_t t = 0; t < seq_len; ++t) {
        if (batch.mask(b, t) == 0.0) continue;
        song.pv.push_back(pred(b, t, 0));
        song.rv.push_back(batch.targets(b, t, 0));
        song.pa.push_back(pred(b, t, 1));
        song.ra.push_back(batch.targets(b, t, 1));
      }
    }
  }

  EvalResult r;
  r.pooled = mode == EvalMode::pooled;
  Collected all;
  double sum_v = 0.0, sum_a = 0.0;
  std::size_t scored = 0;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    const auto& c = songs[s];
    if (c.pv.empty()) continue;
    const SongRmse sr{rmse(c.pv, c.rv), rmse(c.pa, c.ra)};
    r.per_song[pairs[s].id()] = sr;
    sum_v += sr.valence;
    sum_a += sr.arousal;
    ++scored;
    all.pv.insert(all.pv.end(), c.pv.begin(), c.pv.end());
    all.rv.insert(all.rv.end(), c.rv.begin(), c.rv.end());
    all.pa.insert(all.pa.end(), c.pa.begin(), c.pa.end());
    all.ra.insert(all.ra.end(), c.ra.begin(), c.ra.end());
  }
  if (scored == 0) throw InputError("evaluate_songs: no annotated segments");
  if (r.pooled) {
    r.rmse_valence = rmse(all.pv, all.rv);
    r.rmse_arousal = rmse(all.pa, all.ra);
  } else {
    r.rmse_valence = sum_v / static_cast<double>(scored);
    r.rmse_arousal = sum_a / static_cast<double>(scored);
  }
  r.rmse_average = 0.5 * (r.rmse_valence + r.rmse_arousal);
  return r;
}

// ---------------------------------------------------------------------------
// Multi-run aggregation
// ---------------------------------------------------------------------------

struct Stat {
  double mean = 0.0;
  std::optional<double> stddev;  // sample (n - 1) estimator; absent for one run
};

/// Sample mean and (n - 1) standard deviation.
inline Stat summarize(std::span<const double> xs) {
  if (xs.empty()) throw InputError("summarize: no values");
  Stat s;
  // Shifted by the first sample so identical runs give an exact mean.
  const double shift = xs.front();
  double acc = 0.0;
  for (double x : xs) acc += x - shift;
  s.mean = shift + acc / static_cast<double>(xs.size());
  if (xs.size() >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct MultiRunSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<EvalResult> runs;
  Stat valence;
  Stat arousal;
  Stat average;

  std::size_t run_count() const { return runs.size(); }
};

inline MultiRunSummary summarize_runs(std::vector<std::uint64_t> seeds, std::vector<EvalResult> runs) {
  MultiRunSummary s;
  std::vector<double> v, a, m;
  for (const auto& r : runs) {
    v.push_back(r.rmse_valence);
    a.push_back(r.rmse_arousal);
    m.push_back(r.rmse_average);
  }
  s.valence = summarize(v);
  s.arousal = summarize(a);
  s.average = summarize(m);
  s.seeds = std::move(seeds);
  s.runs = std::move(runs);
  return s;
}

/// Thrown when one run of multi_run fails; carries the runs that finished.
class PartialRunError : public Error {
 public:
  PartialRunError(const std::string& what, std::vector<std::uint64_t> completed,
                  std::vector<EvalResult> results, bool numerical)
      : Error(what),
        completed_seeds(std::move(completed)),
        completed_results(std::move(results)),
        numerical_failure(numerical) {}

  std::vector<std::uint64_t> completed_seeds;
  std::vector<EvalResult> completed_results;
  bool numerical_failure = false;  // the failing run diverged
};

/// Calls run(seed) for every seed in order and aggregates the results.
template <typename Run>
  requires std::invocable<Run&, std::uint64_t>
MultiRunSummary multi_run(Run&& run, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("multi_run: need at least one seed");
  std::vector<std::uint64_t> done;
  std::vector<EvalResult> results;
  for (std::uint64_t seed : seeds) {
    try {
      results.push_back(run(seed));
    } catch (const std::exception& e) {
      std::string msg = "run with seed " + std::to_string(seed) + " failed: " + e.what() +
                        "; completed seeds:";
      for (auto s : done) msg += " " + std::to_string(s);
      if (done.empty()) msg += " none";
      throw PartialRunError(msg, done, results,
                            dynamic_cast<const NumericalError*>(&e) != nullptr);
    }
    done.push_back(seed);
  }
  return summarize_runs(done, std::move(results));
}

}  // namespace crnn::evaluation
