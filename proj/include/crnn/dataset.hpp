// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crnn/error.hpp"
#include "crnn/rng.hpp"
#include "crnn/sequence.hpp"
#include "crnn/tensor.hpp"

namespace crnn::dataset {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Header plus data rows. Lines starting with '#' and blank lines are skipped;
/// the delimiter (',' or ';') is detected from the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\"");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw IngestionError(where + ": cannot parse number '" + s + "'");
  }
  if (!std::isfinite(v)) throw IngestionError(where + ": non-finite value '" + s + "'");
  return v;
}

inline std::int64_t parse_time_ms(const std::string& s, const std::string& where) {
  const double v = parse_double(s, where);
  const double r = std::round(v);
  if (std::abs(v - r) > 1e-6) throw IngestionError(where + ": non-integral time " + s);
  return static_cast<std::int64_t>(r);
}

}  // namespace detail

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  char delim = ',';
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (table.header.empty()) {
      const auto commas = std::count(line.begin(), line.end(), ',');
      const auto semis = std::count(line.begin(), line.end(), ';');
      delim = semis > commas ? ';' : ',';
      table.header = detail::split(line, delim);
      continue;
    }
    auto cells = detail::split(line, delim);
    if (cells.size() != table.header.size()) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                           std::to_string(table.header.size()) + " columns, found " +
                           std::to_string(cells.size()));
    }
    table.rows.push_back(std::move(cells));
    table.line_numbers.push_back(line_no);
  }
  if (table.header.empty()) throw IngestionError(path.string() + ": missing header row");
  return table;
}

/// Full-precision CSV cell.
inline std::string fmt_value(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_feature_csv(std::ostream& os, const FeatureSequence& seq,
                              bool with_header = true) {
  const std::size_t F = seq.feature_dim();
  if (with_header) {
    os << "song_id,segment_start_ms";
    for (std::size_t f = 0; f < F; ++f) os << ",f" << f;
    os << '\n';
  }
  for (std::size_t t = 0; t < seq.length(); ++t) {
    os << seq.song_id << ',' << seq.times_ms[t];
    for (std::size_t f = 0; f < F; ++f) os << ',' << fmt_value(seq.features(t, f));
    os << '\n';
  }
}

inline void write_annotation_csv(std::ostream& os, const AnnotationSequence& seq,
                                 bool with_header = true) {
  if (with_header) os << "song_id,segment_start_ms,valence,arousal\n";
  for (std::size_t t = 0; t < seq.length(); ++t) {
    os << seq.song_id << ',' << seq.times_ms[t] << ',' << fmt_value(seq.valence[t]) << ','
       << fmt_value(seq.arousal[t]) << '\n';
  }
}

namespace detail {

struct RawRows {
  std::vector<std::int64_t> times;
  std::vector<std::vector<double>> values;
  std::vector<std::string> locations;  // file:line of each row
  std::string source;
};

/// The .csv files in `dir`, sorted; a single regular file is returned as is.
inline std::vector<std::filesystem::path> csv_files(const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) return {dir};
  if (!std::filesystem::is_directory(dir)) {
    throw IngestionError("not a file or directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Groups rows by song id; `value_cols` are the column indices after the key columns.
inline std::map<std::string, RawRows> read_grouped(const std::filesystem::path& dir,
                                                   std::size_t min_value_cols,
                                                   std::optional<std::size_t> exact_value_cols) {
  std::map<std::string, RawRows> songs;
  for (const auto& file : csv_files(dir)) {
    const CsvTable table = read_csv(file);
    if (table.header.size() < 2 || table.header[0] != "song_id" ||
        table.header[1] != "segment_start_ms") {
      throw IngestionError(file.string() + ": header must start with song_id,segment_start_ms");
    }
    const std::size_t n_vals = table.header.size() - 2;
    if (n_vals < min_value_cols || (exact_value_cols && n_vals != *exact_value_cols)) {
      throw IngestionError(file.string() + ": unexpected number of value columns " +
                           std::to_string(n_vals));
    }
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const auto& row = table.rows[r];
      const std::string where = file.string() + ":" + std::to_string(table.line_numbers[r]);
      auto& song = songs[row[0]];
      if (song.source.empty()) song.source = file.string();
      song.times.push_back(parse_time_ms(row[1], where));
      song.locations.push_back(where);
      std::vector<double> vals(n_vals);
      for (std::size_t c = 0; c < n_vals; ++c) vals[c] = parse_double(row[c + 2], where);
      if (!song.values.empty() && song.values.front().size() != n_vals) {
        throw IngestionError(where + ": song " + row[0] + " has inconsistent column counts");
      }
      song.values.push_back(std::move(vals));
    }
  }
  // Sort each song by time and check the 500 ms grid.
  for (auto& [id, song] : songs) {
    std::vector<std::size_t> order(song.times.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return song.times[a] < song.times[b]; });
    RawRows sorted;
    sorted.source = song.source;
    for (std::size_t i : order) {
      sorted.times.push_back(song.times[i]);
      sorted.values.push_back(std::move(song.values[i]));
      sorted.locations.push_back(std::move(song.locations[i]));
    }
    for (std::size_t i = 1; i < sorted.times.size(); ++i) {
      if (sorted.times[i] - sorted.times[i - 1] != kSegmentMs) {
        throw ValidationError(sorted.source + ": song " + id + " times " +
                              std::to_string(sorted.times[i - 1]) + " -> " +
                              std::to_string(sorted.times[i]) + " are not 500 ms apart");
      }
    }
    song = std::move(sorted);
  }
  return songs;
}

}  // namespace detail

/// Reads every feature CSV in `dir` (or the single file `dir`), grouped by song id.
inline std::vector<FeatureSequence> load_features(const std::filesystem::path& dir) {
  std::vector<FeatureSequence> out;
  for (auto& [id, rows] : detail::read_grouped(dir, 1, std::nullopt)) {
    FeatureSequence seq;
    seq.song_id = id;
    seq.times_ms = rows.times;
    const std::size_t T = rows.times.size(), F = rows.values.front().size();
    seq.features = Tensor({T, F});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) seq.features(t, f) = rows.values[t][f];
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::vector<AnnotationSequence> load_annotations(const std::filesystem::path& dir) {
  std::vector<AnnotationSequence> out;
  for (auto& [id, rows] : detail::read_grouped(dir, 2, 2)) {
    AnnotationSequence seq;
    seq.song_id = id;
    seq.times_ms = rows.times;
    const std::size_t T = rows.times.size();
    seq.valence = Tensor({T});
    seq.arousal = Tensor({T});
    for (std::size_t t = 0; t < T; ++t) {
      for (double v : rows.values[t]) {
        if (!(v >= -1.0 && v <= 1.0)) {
          throw ValidationError(rows.locations[t] + ": song " + id + " at " +
                                std::to_string(rows.times[t]) + " ms has annotation " +
                                fmt_value(v) + " outside [-1, 1]");
        }
      }
      seq.valence[t] = rows.values[t][0];
      seq.arousal[t] = rows.values[t][1];
    }
    out.push_back(std::move(seq));
  }
  return out;
}

/// Pairs features and annotations by song id. Songs whose lengths or
/// timestamps disagree are dropped and their ids appended to `rejected`.
inline std::vector<SongPair> load_dataset(const std::filesystem::path& features_dir,
                                          const std::filesystem::path& annotations_dir,
                                          std::vector<std::string>* rejected = nullptr) {
  auto feats = load_features(features_dir);
  auto anns = load_annotations(annotations_dir);
  std::map<std::string, AnnotationSequence*> by_id;
  for (auto& a : anns) by_id[a.song_id] = &a;

  std::vector<SongPair> pairs;
  std::optional<std::size_t> feature_dim;
  for (auto& f : feats) {
    const auto it = by_id.find(f.song_id);
    if (it == by_id.end()) {
      throw IngestionError("song " + f.song_id + " has features but no annotations");
    }
    if (feature_dim && *feature_dim != f.feature_dim()) {
      throw IngestionError("song " + f.song_id + " has " + std::to_string(f.feature_dim()) +
                           " features, expected " + std::to_string(*feature_dim));
    }
    feature_dim = f.feature_dim();
    if (it->second->times_ms != f.times_ms) {
      if (rejected) rejected->push_back(f.song_id);
    } else {
      pairs.push_back({std::move(f), std::move(*it->second)});
    }
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    throw IngestionError("song " + by_id.begin()->first + " has annotations but no features");
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class Difficulty { echo, smooth };

/// Synthetic songs with learnable targets. Features are i.i.d. Uniform(-1, 1).
/// With h = ceil(F/2), define two unit-variance projections per step
///
///   p_t = sqrt(3/h) * sum_{f < h} x[t, f]
///   q_t = sqrt(3/(F-h)) * sum_{f >= h} x[t, f]      (q = p when F = 1)
///
/// smooth: valence_t = 0.9 tanh(mean p over [t-2, t+2]),
///         arousal_t = 0.9 tanh(mean q over [t-2, t+2])  (window clipped at ends)
/// echo:   valence_t = 0.9 tanh(p_{t-1})  (p_{-1} = 0),  arousal_t = 0.9 tanh(q_t)
///
/// |0.9 tanh(.)| < 1, so every target lies strictly inside [-1, 1].
inline std::vector<SongPair> make_synthetic(Rng& rng, std::size_t n_songs, std::size_t T,
                                            std::size_t F, Difficulty difficulty) {
  if (n_songs == 0 || T == 0 || F == 0) throw ConfigError("make_synthetic: sizes must be >= 1");
  const std::size_t h = (F + 1) / 2;
  const double pscale = std::sqrt(3.0 / static_cast<double>(h));
  const double qscale = F > h ? std::sqrt(3.0 / static_cast<double>(F - h)) : pscale;

  std::vector<SongPair> out;
  out.reserve(n_songs);
  for (std::size_t s = 0; s < n_songs; ++s) {
    SongPair pair;
    std::ostringstream id;
    id << "synth" << std::setw(4) << std::setfill('0') << s;
    pair.features.song_id = id.str();
    pair.annotations.song_id = id.str();
    pair.features.features = uniform_init(rng, {T, F}, 1.0);
    const Tensor& x = pair.features.features;

    std::vector<double> p(T, 0.0), q(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = 0; f < h; ++f) p[t] += x(t, f);
      for (std::size_t f = h; f < F; ++f) q[t] += x(t, f);
      p[t] *= pscale;
      q[t] = F > h ? q[t] * qscale : p[t];
    }

    pair.annotations.valence = Tensor({T});
    pair.annotations.arousal = Tensor({T});
    for (std::size_t t = 0; t < T; ++t) {
      double v = 0.0, a = 0.0;
      if (difficulty == Difficulty::smooth) {
        const std::size_t lo = t >= 2 ? t - 2 : 0;
        const std::size_t hi = std::min(T - 1, t + 2);
        for (std::size_t u = lo; u <= hi; ++u) {
          v += p[u];
          a += q[u];
        }
        v /= static_cast<double>(hi - lo + 1);
        a /= static_cast<double>(hi - lo + 1);
      } else {
        v = t > 0 ? p[t - 1] : 0.0;
        a = q[t];
      }
      pair.annotations.valence[t] = 0.9 * std::tanh(v);
      pair.annotations.arousal[t] = 0.9 * std::tanh(a);
      pair.features.times_ms.push_back(static_cast<std::int64_t>(t) * kSegmentMs);
    }
    pair.annotations.times_ms = pair.features.times_ms;
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows and batches
// ---------------------------------------------------------------------------

/// A fixed-length slice of one song. Padded steps have mask 0 and zero data.
struct Window {
  std::size_t song_index = 0;
  std::size_t offset = 0;  // first segment index within the song
  Tensor inputs;           // [L x F]
  Tensor targets;          // [L x 2], (valence, arousal)
  Tensor mask;             // [L]

  std::size_t active() const {
    std::size_t n = 0;
    for (double m : mask.values()) n += m != 0.0;
    return n;
  }
};

/// Cuts every song into floor(T/L) non-overlapping windows. In eval mode a
/// remainder of T mod L segments becomes one extra zero-padded, masked window.
inline std::vector<Window> slice_sequences(const std::vector<SongPair>& pairs, std::size_t L,
                                           bool eval_mode = false) {
  if (L == 0) throw ConfigError("slice_sequences: sequence length must be >= 1");
  std::vector<Window> out;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    const auto& p = pairs[s];
    const std::size_t T = p.length();
    const std::size_t F = p.features.feature_dim();
    const std::size_t full = T / L;
    const std::size_t count = full + ((eval_mode && T % L) ? 1 : 0);
    for (std::size_t w = 0; w < count; ++w) {
      Window win;
      win.song_index = s;
      win.offset = w * L;
      win.inputs = Tensor({L, F});
      win.targets = Tensor({L, 2});
      win.mask = Tensor({L});
      for (std::size_t i = 0; i < L && win.offset + i < T; ++i) {
        const std::size_t t = win.offset + i;
        for (std::size_t f = 0; f < F; ++f) win.inputs(i, f) = p.features.features(t, f);
        win.targets(i, 0) = p.annotations.valence[t];
        win.targets(i, 1) = p.annotations.arousal[t];
        win.mask[i] = 1.0;
      }
      out.push_back(std::move(win));
    }
  }
  return out;
}

struct Batch {
  Tensor inputs;   // [B x L x F]
  Tensor targets;  // [B x L x 2]
  Tensor mask;     // [B x L]
  std::vector<std::size_t> window_indices;

  std::size_t size() const { return window_indices.size(); }
};

inline Batch assemble_batch(const std::vector<Window>& windows,
                            const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw InputError("assemble_batch: no windows");
  const auto& first = windows.at(indices.front());
  const std::size_t B = indices.size(), L = first.inputs.dim(0), F = first.inputs.dim(1);
  Batch b;
  b.inputs = Tensor({B, L, F});
  b.targets = Tensor({B, L, 2});
  b.mask = Tensor({B, L});
  b.window_indices = indices;
  for (std::size_t i = 0; i < B; ++i) {
    const auto& w = windows.at(indices[i]);
    if (w.inputs.shape() != first.inputs.shape()) {
      throw DimensionError("assemble_batch: windows have different shapes");
    }
    std::copy_n(w.inputs.data(), L * F, b.inputs.data() + i * L * F);
    std::copy_n(w.targets.data(), L * 2, b.targets.data() + i * L * 2);
    std::copy_n(w.mask.data(), L, b.mask.data() + i * L);
  }
  return b;
}

/// One epoch's partition of `windows` into batches of at most B. The last
/// batch may be short. With shuffle off the input order is kept.
inline std::vector<Batch> batches(const std::vector<Window>& windows, std::size_t B, Rng& rng,
                                  bool shuffle) {
  if (B == 0) throw ConfigError("batches: batch size must be >= 1");
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += B) {
    const std::size_t end = std::min(order.size(), start + B);
    out.push_back(assemble_batch(
        windows, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train / validation split
// ---------------------------------------------------------------------------

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct Split {
  std::vector<SongPair> train;
  std::vector<SongPair> validation;
};

/// Songs are ranked by FNV-1a hash of their id; the first round(ratio * n)
/// (at least one when ratio > 0 and n >= 2) form the validation set. Both
/// halves keep the input order.
inline Split split_by_id_hash(std::vector<SongPair> pairs, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("validation ratio must be in [0, 1)");
  const std::size_t n = pairs.size();
  std::size_t n_val = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (ratio > 0.0 && n >= 2) n_val = std::max<std::size_t>(n_val, 1);
  n_val = std::min(n_val, n > 0 ? n - 1 : 0);

  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = fnv1a(pairs[a].id()), hb = fnv1a(pairs[b].id());
    return ha != hb ? ha < hb : pairs[a].id() < pairs[b].id();
  });
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[rank[i]] = true;

  Split split;
  for (std::size_t i = 0; i < n; ++i) {
    (is_val[i] ? split.validation : split.train).push_back(std::move(pairs[i]));
  }
  return split;
}

}  // namespace crnn::dataset
