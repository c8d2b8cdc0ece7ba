// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "crnn/dataset.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace crnn;
using namespace crnn::dataset;

namespace {

SongPair make_song(const std::string& id, std::size_t T, std::size_t F, double base = 0.0) {
  SongPair p;
  p.features.song_id = p.annotations.song_id = id;
  p.features.features = Tensor({T, F});
  p.annotations.valence = Tensor({T});
  p.annotations.arousal = Tensor({T});
  for (std::size_t t = 0; t < T; ++t) {
    p.features.times_ms.push_back(static_cast<std::int64_t>(t) * 500);
    for (std::size_t f = 0; f < F; ++f) p.features.features(t, f) = base + double(t) + 0.01 * double(f);
    p.annotations.valence[t] = std::sin(base + double(t)) * 0.5;
    p.annotations.arousal[t] = std::cos(base + double(t)) * 0.5;
  }
  p.annotations.times_ms = p.features.times_ms;
  return p;
}

}  // namespace

TEST(Csv, ReadsCommaAndSemicolonAndSkipsComments) {
  fixture::TempDir dir;
  fixture::write_text(dir / "a.csv", "# provenance line\nsong_id,segment_start_ms,f0\n\ns1,0,1.5\n");
  fixture::write_text(dir / "b.csv", "song_id;segment_start_ms;f0\ns1;0;1,5\n");
  const CsvTable a = read_csv(dir / "a.csv");
  EXPECT_EQ(a.header, (std::vector<std::string>{"song_id", "segment_start_ms", "f0"}));
  ASSERT_EQ(a.rows.size(), 1u);
  EXPECT_EQ(a.line_numbers[0], 4u);
  const CsvTable b = read_csv(dir / "b.csv");
  EXPECT_EQ(b.header.size(), 3u);
  EXPECT_EQ(b.rows[0][2], "1,5");
}

TEST(Csv, MissingHeaderAndRaggedRows) {
  fixture::TempDir dir;
  fixture::write_text(dir / "empty.csv", "# only a comment\n");
  EXPECT_THROW(read_csv(dir / "empty.csv"), IngestionError);
  fixture::write_text(dir / "ragged.csv", "a,b\n1\n");
  EXPECT_THROW(read_csv(dir / "ragged.csv"), IngestionError);
}

TEST(LoadDataset, RoundTripsWrittenSongs) {
  fixture::TempDir dir;
  std::vector<SongPair> songs = {make_song("b", 6, 3, 1.0), make_song("a", 4, 3, 2.0)};
  fixture::write_dataset(songs, dir / "feat", dir / "ann");
  const auto pairs = load_dataset(dir / "feat", dir / "ann");
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].id(), "a");
  EXPECT_EQ(pairs[1].id(), "b");
  EXPECT_EQ(pairs[1].features.features, songs[0].features.features);
  EXPECT_EQ(pairs[1].annotations.valence, songs[0].annotations.valence);
  EXPECT_EQ(pairs[1].annotations.arousal, songs[0].annotations.arousal);
  EXPECT_EQ(pairs[1].features.times_ms, songs[0].features.times_ms);
}

TEST(LoadDataset, DevelopmentLayout) {
  fixture::TempDir dir;
  std::vector<SongPair> songs;
  for (int i = 0; i < 431; ++i) songs.push_back(make_song("song" + std::to_string(i), 60, 2, i));
  fixture::write_dataset(songs, dir / "feat", dir / "ann");
  const auto pairs = load_dataset(dir / "feat", dir / "ann");
  ASSERT_EQ(pairs.size(), 431u);
  for (const auto& p : pairs) EXPECT_EQ(p.length(), 60u);
}

TEST(LoadDataset, UnsortedRowsAndSharedFiles) {
  fixture::TempDir dir;
  const auto f = dir.subdir("feat");
  const auto a = dir.subdir("ann");
  fixture::write_text(f / "all.csv",
                      "song_id,segment_start_ms,f0\nx,15500,2\nx,15000,1\ny,0,5\n");
  fixture::write_text(a / "all.csv",
                      "song_id;segment_start_ms;valence;arousal\ny;0;0.1;0.2\nx;15000;0.3;0.4\n"
                      "x;15500;-0.5;-0.6\n");
  const auto pairs = load_dataset(f, a);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].features.times_ms, (std::vector<std::int64_t>{15000, 15500}));
  EXPECT_EQ(pairs[0].features.features[0], 1.0);
  EXPECT_EQ(pairs[0].annotations.arousal[1], -0.6);
}

TEST(LoadDataset, EmptyDirectoryIsEmptyList) {
  fixture::TempDir dir;
  EXPECT_TRUE(load_dataset(dir.subdir("feat"), dir.subdir("ann")).empty());
}

TEST(LoadDataset, OutOfRangeAnnotationCitesRow) {
  fixture::TempDir dir;
  fixture::write_dataset({make_song("s", 3, 2)}, dir / "feat", dir / "ann");
  fixture::write_text(dir / "ann" / "s.csv",
                      "song_id,segment_start_ms,valence,arousal\ns,0,0.1,0.1\ns,500,1.2,0.0\n"
                      "s,1000,0,0\n");
  try {
    load_dataset(dir / "feat", dir / "ann");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("s.csv:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1.2"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, NonFiniteFeatureIsRejected) {
  fixture::TempDir dir;
  fixture::write_dataset({make_song("s", 2, 2)}, dir / "feat", dir / "ann");
  for (const char* bad : {"nan", "inf", "-inf", "1e999"}) {
    fixture::write_text(dir / "feat" / "s.csv", std::string("song_id,segment_start_ms,f0,f1\n"
                                                            "s,0,0.5,") + bad + "\ns,500,0,0\n");
    EXPECT_THROW(load_dataset(dir / "feat", dir / "ann"), IngestionError) << bad;
  }
}

TEST(LoadDataset, MissingPairNamesSong) {
  fixture::TempDir dir;
  fixture::write_dataset({make_song("lonely", 3, 2)}, dir / "feat", dir / "ann");
  std::filesystem::remove(dir / "ann" / "lonely.csv");
  try {
    load_dataset(dir / "feat", dir / "ann");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
  }
}

TEST(LoadDataset, LengthMismatchIsRejected) {
  fixture::TempDir dir;
  fixture::write_dataset({make_song("good", 4, 2), make_song("short", 4, 2)}, dir / "feat",
                         dir / "ann");
  std::ofstream(dir / "ann" / "short.csv") << "song_id,segment_start_ms,valence,arousal\n"
                                              "short,0,0,0\nshort,500,0,0\n";
  std::vector<std::string> rejected;
  const auto pairs = load_dataset(dir / "feat", dir / "ann", &rejected);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].id(), "good");
  EXPECT_EQ(rejected, std::vector<std::string>{"short"});
}

TEST(LoadDataset, IrregularTimeGridIsValidationError) {
  fixture::TempDir dir;
  const auto f = dir.subdir("feat");
  fixture::write_text(f / "s.csv", "song_id,segment_start_ms,f0\ns,0,1\ns,700,1\n");
  EXPECT_THROW(load_features(f), ValidationError);
}

TEST(Synthetic, DeterministicAndBounded) {
  Rng a(5), b(5);
  const auto x = make_synthetic(a, 3, 20, 6, Difficulty::smooth);
  const auto y = make_synthetic(b, 3, 20, 6, Difficulty::smooth);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(x[i].features.features, y[i].features.features);
    EXPECT_EQ(x[i].annotations.valence, y[i].annotations.valence);
  }
  Rng c(6);
  for (auto diff : {Difficulty::smooth, Difficulty::echo}) {
    for (const auto& p : make_synthetic(c, 10, 1000, 4, diff)) {
      for (double v : p.features.features.values()) ASSERT_LE(std::abs(v), 1.0);
      for (std::size_t t = 0; t < p.length(); ++t) {
        ASSERT_LE(std::abs(p.annotations.valence[t]), 1.0);
        ASSERT_LE(std::abs(p.annotations.arousal[t]), 1.0);
      }
    }
  }
}

TEST(Synthetic, FeaturesHaveUniformMoments) {
  Rng rng(8);
  std::vector<double> xs;
  for (const auto& p : make_synthetic(rng, 20, 100, 10, Difficulty::smooth)) {
    xs.insert(xs.end(), p.features.features.values().begin(), p.features.features.values().end());
  }
  EXPECT_NEAR(oracle::mean(xs), 0.0, 0.02);
  EXPECT_NEAR(oracle::sample_variance(xs), 1.0 / 3.0, 0.02);
}

TEST(Synthetic, LeastSquaresBeatsZeroPredictor) {
  Rng rng(21);
  const auto pairs = make_synthetic(rng, 20, 60, 8, Difficulty::smooth);
  std::size_t N = 0;
  for (const auto& p : pairs) N += p.length();
  Tensor X({N, 9});
  std::vector<double> yv, ya;
  std::size_t n = 0;
  for (const auto& p : pairs)
    for (std::size_t t = 0; t < p.length(); ++t, ++n) {
      for (std::size_t f = 0; f < 8; ++f) X(n, f) = p.features.features(t, f);
      X(n, 8) = 1.0;
      yv.push_back(p.annotations.valence[t]);
      ya.push_back(p.annotations.arousal[t]);
    }
  for (const auto* y : {&yv, &ya}) {
    const auto w = oracle::least_squares(X, *y);
    double se_fit = 0.0, se_zero = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double pred = 0.0;
      for (std::size_t d = 0; d < 9; ++d) pred += X(i, d) * w[d];
      se_fit += (pred - (*y)[i]) * (pred - (*y)[i]);
      se_zero += (*y)[i] * (*y)[i];
    }
    EXPECT_LT(std::sqrt(se_fit / double(N)), std::sqrt(se_zero / double(N)));
  }
}

TEST(Slice, WindowCounts) {
  const std::vector<SongPair> sixty = {make_song("a", 60, 2)};
  EXPECT_EQ(slice_sequences(sixty, 20).size(), 3u);
  EXPECT_EQ(slice_sequences(sixty, 60).size(), 1u);
  EXPECT_EQ(slice_sequences(sixty, 10, true).size(), 6u);

  const std::vector<SongPair> odd = {make_song("b", 47, 2)};
  EXPECT_EQ(slice_sequences(odd, 10).size(), 4u);
  const auto eval = slice_sequences(odd, 10, true);
  ASSERT_EQ(eval.size(), 5u);
  EXPECT_EQ(eval.back().active(), 7u);
  EXPECT_EQ(eval.back().offset, 40u);
  for (std::size_t i = 7; i < 10; ++i) {
    EXPECT_EQ(eval.back().mask[i], 0.0);
    EXPECT_EQ(eval.back().inputs(i, 0), 0.0);
    EXPECT_EQ(eval.back().targets(i, 1), 0.0);
  }
  EXPECT_THROW(slice_sequences(odd, 0), ConfigError);
}

TEST(Slice, WindowsCopyTheRightSegments) {
  const std::vector<SongPair> songs = {make_song("a", 25, 3, 0.0), make_song("b", 12, 3, 100.0)};
  for (const auto& w : slice_sequences(songs, 6, true)) {
    const auto& p = songs[w.song_index];
    for (std::size_t i = 0; i < 6 && w.offset + i < p.length(); ++i) {
      EXPECT_EQ(w.inputs(i, 2), p.features.features(w.offset + i, 2));
      EXPECT_EQ(w.targets(i, 0), p.annotations.valence[w.offset + i]);
      EXPECT_EQ(w.targets(i, 1), p.annotations.arousal[w.offset + i]);
    }
  }
}

TEST(Slice, NoAnnotatedSegmentLostWhenLengthDivides) {
  fixture::TempDir dir;
  std::vector<SongPair> songs;
  for (int i = 0; i < 5; ++i) songs.push_back(make_song("s" + std::to_string(i), 60, 2, i * 7.0));
  fixture::write_dataset(songs, dir / "f", dir / "a");
  const auto loaded = load_dataset(dir / "f", dir / "a");
  for (std::size_t L : {10u, 20u, 30u, 60u}) {
    Rng rng(1);
    std::multiset<std::pair<double, double>> seen, want;
    for (const auto& p : loaded)
      for (std::size_t t = 0; t < p.length(); ++t)
        want.insert({p.annotations.valence[t], p.annotations.arousal[t]});
    for (const auto& b : batches(slice_sequences(loaded, L), 7, rng, true)) {
      for (std::size_t i = 0; i < b.size() * L; ++i) {
        ASSERT_EQ(b.mask[i], 1.0);
        seen.insert({b.targets[2 * i], b.targets[2 * i + 1]});
        ASSERT_LE(std::abs(b.targets[2 * i]), 1.0);
        ASSERT_LE(std::abs(b.targets[2 * i + 1]), 1.0);
      }
    }
    EXPECT_EQ(seen, want) << "L = " << L;
  }
}

TEST(Batches, SizesAndOrder) {
  std::vector<Window> windows;
  for (std::size_t i = 0; i < 100; ++i) {
    Window w;
    w.song_index = i;
    w.inputs = Tensor({2, 1}, double(i));
    w.targets = Tensor({2, 2});
    w.mask = Tensor({2}, 1.0);
    windows.push_back(std::move(w));
  }
  Rng rng(3);
  const auto bs = batches(windows, 32, rng, false);
  ASSERT_EQ(bs.size(), 4u);
  EXPECT_EQ(bs[0].size(), 32u);
  EXPECT_EQ(bs[3].size(), 4u);
  for (int epoch = 0; epoch < 2; ++epoch) {
    std::size_t next = 0;
    for (const auto& b : batches(windows, 32, rng, false))
      for (std::size_t idx : b.window_indices) EXPECT_EQ(idx, next++);
  }

  // Shuffled: each epoch is a permutation and epochs differ.
  std::vector<std::size_t> first;
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::vector<std::size_t> order;
    for (const auto& b : batches(windows, 32, rng, true)) {
      for (std::size_t i = 0; i < b.size(); ++i) {
        EXPECT_EQ(b.inputs(i, 0, 0), double(b.window_indices[i]));
        order.push_back(b.window_indices[i]);
      }
    }
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 100; ++i) ASSERT_EQ(sorted[i], i);
    if (epoch == 0) {
      first = order;
    } else {
      EXPECT_NE(order, first);
    }
  }
  EXPECT_THROW(batches(windows, 0, rng, true), ConfigError);
}

TEST(Split, DeterministicHashSplit) {
  std::vector<SongPair> songs;
  for (int i = 0; i < 40; ++i) songs.push_back(make_song("id" + std::to_string(i), 2, 1));
  const auto a = split_by_id_hash(songs, 0.1);
  auto shuffled = songs;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto b = split_by_id_hash(shuffled, 0.1);
  ASSERT_EQ(a.validation.size(), 4u);
  EXPECT_EQ(a.train.size(), 36u);
  std::vector<std::string> va, vb;
  for (const auto& p : a.validation) va.push_back(p.id());
  for (const auto& p : b.validation) vb.push_back(p.id());
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  EXPECT_EQ(va, vb);

  EXPECT_EQ(split_by_id_hash(songs, 0.0).validation.size(), 0u);
  EXPECT_EQ(split_by_id_hash({songs[0], songs[1]}, 0.1).validation.size(), 1u);
  EXPECT_EQ(split_by_id_hash({songs[0]}, 0.5).validation.size(), 0u);
}

TEST(Split, Fnv1aReferenceValues) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
}
