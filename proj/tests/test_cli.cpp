// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "crnn/audio.hpp"
#include "crnn/dataset.hpp"
#include "crnn/evaluation.hpp"
#include "crnn/model.hpp"
#include "fixtures.hpp"

#ifndef CRNN_CLI_PATH
#error "CRNN_CLI_PATH must point at the crnn executable"
#endif

using namespace crnn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

Result run(const fixture::TempDir& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + CRNN_CLI_PATH + "\" " + args + " > \"" + out.string() +
                          "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = fixture::read_text(out);
  r.err = fixture::read_text(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

bool has(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

/// Small annotated dataset on disk plus fast training flags.
struct Workspace {
  fixture::TempDir dir;
  fs::path features, annotations;
  std::vector<SongPair> songs;

  explicit Workspace(std::size_t n_songs = 6, std::size_t T = 25, std::size_t F = 4) {
    Rng rng(77);
    songs = dataset::make_synthetic(rng, n_songs, T, F, dataset::Difficulty::smooth);
    features = dir.subdir("features");
    annotations = dir.subdir("annotations");
    fixture::write_dataset(songs, features, annotations);
  }

  std::string data_flags() const {
    return "--features " + q(features) + " --annotations " + q(annotations);
  }
  static std::string fast_flags() {
    return " --cnn_filters 2 --fc_units 3 --gru_units 2 --seq_len 5 --max_epochs 3 --batch_size 4";
  }
};

std::string header_of(const fs::path& p) { return lines(fixture::read_text(p)).at(0); }

void expect_header(const std::string& line, const std::string& command) {
  const std::string prefix = "# crnn " + command + " config_hash=";
  ASSERT_TRUE(line.starts_with(prefix)) << line;
  const std::string hash = line.substr(prefix.size());
  EXPECT_EQ(hash.size(), 16u) << line;
  EXPECT_EQ(hash.find_first_not_of("0123456789abcdef"), std::string::npos) << line;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  fixture::TempDir dir;
  EXPECT_EQ(run(dir, "").code, 1);
  EXPECT_EQ(run(dir, "frobnicate").code, 1);
  EXPECT_EQ(run(dir, "train --no_such_flag 1").code, 1);
  EXPECT_EQ(run(dir, "--help").code, 0);
}

TEST(Cli, UnknownConfigKeyExitsOne) {
  fixture::TempDir dir;
  fixture::write_text(dir / "bad.cfg", "seed = 1\nlearnin_rate = 0.1\n");
  const auto r = run(dir, "param-count --config " + q(dir / "bad.cfg"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, "learnin_rate")) << r.err;
}

TEST(Cli, InvalidValueNamesField) {
  fixture::TempDir dir;
  const auto r = run(dir, "param-count --dropout 2");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, "dropout")) << r.err;
}

TEST(Cli, ParamCount) {
  fixture::TempDir dir;
  EXPECT_TRUE(has(run(dir, "param-count").out, "total 35092"));
  EXPECT_TRUE(has(run(dir, "param-count --branched false").out, "total 17628"));
  EXPECT_TRUE(has(run(dir, "param-count --feature_dim 64").out, "total 10004"));
  fixture::write_text(dir / "nb.cfg", "branched = false\n");
  // Flags override the file.
  EXPECT_TRUE(has(run(dir, "param-count --config " + q(dir / "nb.cfg") + " --branched true").out,
                  "total 35092"));
  EXPECT_TRUE(has(run(dir, "param-count --config " + q(dir / "nb.cfg")).out, "total 17628"));
}

TEST(Cli, TrainMissingAnnotationsDirExitsOne) {
  Workspace ws;
  const fs::path missing = ws.dir / "no_annotations_here";
  const auto r = run(ws.dir, "train --features " + q(ws.features) + " --annotations " + q(missing) +
                                 " --checkpoint " + q(ws.dir / "m.ckpt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, missing.string())) << r.err;
  EXPECT_TRUE(has(r.err, "annotations")) << r.err;
}

TEST(Cli, TrainWithoutUsableSongsExitsTwo) {
  Workspace ws;
  const fs::path empty_f = ws.dir.subdir("ef"), empty_a = ws.dir.subdir("ea");
  const auto r = run(ws.dir, "train --features " + q(empty_f) + " --annotations " + q(empty_a) +
                                 " --checkpoint " + q(ws.dir / "m.ckpt"));
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, TrainIsDeterministic) {
  Workspace ws;
  const std::string common = "train " + ws.data_flags() + Workspace::fast_flags() + " --seed 5";
  const auto a = run(ws.dir, common + " --checkpoint " + q(ws.dir / "a.ckpt"));
  const auto b = run(ws.dir, common + " --checkpoint " + q(ws.dir / "b.ckpt"));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(fixture::read_text(ws.dir / "a.ckpt"), fixture::read_text(ws.dir / "b.ckpt"));
  EXPECT_EQ(fixture::read_text(ws.dir / "a.ckpt.report.csv"),
            fixture::read_text(ws.dir / "b.ckpt.report.csv"));
  const auto report = lines(fixture::read_text(ws.dir / "a.ckpt.report.csv"));
  expect_header(report.at(0), "train");
  EXPECT_EQ(report.at(1), "epoch,train_loss,val_rmse_valence,val_rmse_arousal");
  EXPECT_EQ(report.size(), 5u);
  EXPECT_TRUE(has(a.out, "best epoch")) << a.out;

  const auto c = run(ws.dir, "train " + ws.data_flags() + Workspace::fast_flags() +
                                 " --seed 6 --checkpoint " + q(ws.dir / "c.ckpt"));
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_NE(fixture::read_text(ws.dir / "a.ckpt"), fixture::read_text(ws.dir / "c.ckpt"));
  EXPECT_NE(header_of(ws.dir / "a.ckpt.report.csv"), header_of(ws.dir / "c.ckpt.report.csv"));
}

TEST(Cli, ConfigFileAndFlagsAgree) {
  Workspace ws;
  fixture::write_text(ws.dir / "run.cfg", "seed = 1\nmax_epochs = 2\ncnn_filters = 2\n");
  const auto a = run(ws.dir, "train --config " + q(ws.dir / "run.cfg") + " " + ws.data_flags() +
                                 " --seed 9 --seq_len 5 --checkpoint " + q(ws.dir / "a.ckpt"));
  const auto b = run(ws.dir, "train " + ws.data_flags() +
                                 " --seed 9 --max_epochs 2 --cnn_filters 2 --seq_len 5 --checkpoint " +
                                 q(ws.dir / "b.ckpt"));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(fixture::read_text(ws.dir / "a.ckpt"), fixture::read_text(ws.dir / "b.ckpt"));
  EXPECT_EQ(header_of(ws.dir / "a.ckpt.report.csv"), header_of(ws.dir / "b.ckpt.report.csv"));
}

TEST(Cli, NonFiniteTrainingExitsThree) {
  Workspace ws;
  const auto r = run(ws.dir, "train " + ws.data_flags() + Workspace::fast_flags() +
                                 " --learning_rate 1e300 --checkpoint " + q(ws.dir / "m.ckpt"));
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(Cli, PredictMatchesLibrary) {
  Workspace ws(4, 23, 4);
  ASSERT_EQ(run(ws.dir, "train " + ws.data_flags() + Workspace::fast_flags() + " --checkpoint " +
                            q(ws.dir / "m.ckpt"))
                .code,
            0);
  const Crnn model = load_checkpoint(ws.dir / "m.ckpt");
  const std::size_t L = 7;
  const auto p = run(ws.dir, "predict --checkpoint " + q(ws.dir / "m.ckpt") + " --features " +
                                 q(ws.features) + " --seq_len 7 --output " + q(ws.dir / "p.csv"));
  ASSERT_EQ(p.code, 0) << p.err;
  const auto rows = lines(fixture::read_text(ws.dir / "p.csv"));
  expect_header(rows.at(0), "predict");
  EXPECT_EQ(rows.at(1), "song_id,segment_start_ms,valence,arousal");

  std::map<std::string, const SongPair*> by_id;
  for (const auto& s : ws.songs) by_id[s.id()] = &s;
  std::size_t checked = 0;
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const auto cells = dataset::detail::split(rows[i], ',');
    ASSERT_EQ(cells.size(), 4u);
    const SongPair& song = *by_id.at(cells[0]);
    const std::int64_t ms = std::stoll(cells[1]);
    const std::size_t t = static_cast<std::size_t>(ms / 500);
    ASSERT_EQ(song.features.times_ms.at(t), ms);
    // The window holding t, zero-padded, evaluated alone.
    const std::size_t w = t / L;
    Tensor x({1, L, 4});
    for (std::size_t k = 0; k < L && w * L + k < song.length(); ++k)
      for (std::size_t f = 0; f < 4; ++f) x(0, k, f) = song.features.features(w * L + k, f);
    const Tensor y = model.predict(x);
    const double v = std::stod(cells[2]), a = std::stod(cells[3]);
    EXPECT_EQ(v, y(0, t % L, 0)) << rows[i];
    EXPECT_EQ(a, y(0, t % L, 1)) << rows[i];
    EXPECT_LE(std::abs(v), 1.0);
    EXPECT_LE(std::abs(a), 1.0);
    ++checked;
  }
  EXPECT_EQ(checked, 4u * 23u);

  const auto again = run(ws.dir, "predict --checkpoint " + q(ws.dir / "m.ckpt") + " --features " +
                                     q(ws.features) + " --seq_len 7 --output " + q(ws.dir / "p2.csv"));
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(fixture::read_text(ws.dir / "p.csv"), fixture::read_text(ws.dir / "p2.csv"));

  const fs::path one = ws.features / (ws.songs[0].id() + ".csv");
  const auto single = run(ws.dir, "predict --checkpoint " + q(ws.dir / "m.ckpt") + " --features " +
                                      q(one) + " --output " + q(ws.dir / "one.csv"));
  ASSERT_EQ(single.code, 0) << single.err;
  EXPECT_EQ(lines(fixture::read_text(ws.dir / "one.csv")).size(), 2u + 23u);
}

TEST(Cli, PredictDimensionMismatchExitsOne) {
  Workspace ws(4, 23, 4);
  ASSERT_EQ(run(ws.dir, "train " + ws.data_flags() + Workspace::fast_flags() + " --checkpoint " +
                            q(ws.dir / "m.ckpt"))
                .code,
            0);
  Rng rng(1);
  const auto wide = dataset::make_synthetic(rng, 1, 10, 5, dataset::Difficulty::echo);
  const fs::path wf = ws.dir.subdir("wide_f");
  fixture::write_dataset(wide, wf, ws.dir.subdir("wide_a"));
  const auto r = run(ws.dir, "predict --checkpoint " + q(ws.dir / "m.ckpt") + " --features " + q(wf) +
                                 " --output " + q(ws.dir / "p.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, "features")) << r.err;
}

TEST(Cli, MissingCheckpointExitsOne) {
  Workspace ws;
  const auto r = run(ws.dir, "predict --checkpoint " + q(ws.dir / "none.ckpt") + " --features " +
                                 q(ws.features) + " --output " + q(ws.dir / "p.csv"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.err, "checkpoint")) << r.err;
}

TEST(Cli, CorruptCheckpointExitsTwo) {
  Workspace ws;
  fixture::write_text(ws.dir / "junk.ckpt", "not a checkpoint");
  const auto r = run(ws.dir, "predict --checkpoint " + q(ws.dir / "junk.ckpt") + " --features " +
                                 q(ws.features) + " --output " + q(ws.dir / "p.csv"));
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, EvaluateMatchesLibrary) {
  Workspace ws;
  ASSERT_EQ(run(ws.dir, "train " + ws.data_flags() + Workspace::fast_flags() + " --checkpoint " +
                            q(ws.dir / "m.ckpt"))
                .code,
            0);
  const auto r = run(ws.dir, "evaluate --checkpoint " + q(ws.dir / "m.ckpt") + " " + ws.data_flags() +
                                 " --seq_len 5 --output " + q(ws.dir / "e.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.out, "Valence")) << r.out;
  const auto rows = lines(fixture::read_text(ws.dir / "e.csv"));
  expect_header(rows.at(0), "evaluate");
  EXPECT_EQ(rows.at(1), "scope,valence,arousal,average");
  const auto cells = dataset::detail::split(rows.at(2), ',');
  ASSERT_EQ(cells.at(0), "pooled");
  const auto lib = evaluation::evaluate_songs(load_checkpoint(ws.dir / "m.ckpt"), ws.songs, 5);
  EXPECT_EQ(std::stod(cells[1]), lib.rmse_valence);
  EXPECT_EQ(std::stod(cells[2]), lib.rmse_arousal);
  EXPECT_EQ(std::stod(cells[3]), lib.rmse_average);
  EXPECT_EQ(rows.size(), 3u + ws.songs.size());
}

TEST(Cli, ExtractThirtySecondsGivesSixtyRows) {
  fixture::TempDir dir;
  const fs::path audio_dir = dir.subdir("audio");
  audio::AudioClip noise, silence;
  noise.sample_rate = silence.sample_rate = 16000;
  Rng rng(3);
  for (int i = 0; i < 30 * 16000; ++i) noise.samples.push_back(rng.uniform(-0.5, 0.5));
  silence.samples.assign(30 * 16000, 0.0);
  audio::write_wav(audio_dir / "noise.wav", noise);
  audio::write_wav(audio_dir / "quiet.wav", silence);
  const auto r = run(dir, "extract --audio " + q(audio_dir) + " --output " + q(dir / "feat"));
  ASSERT_EQ(r.code, 0) << r.err;

  const auto noise_rows = lines(fixture::read_text(dir / "feat" / "noise.csv"));
  expect_header(noise_rows.at(0), "extract");
  EXPECT_EQ(noise_rows.size(), 2u + 60u);
  const auto songs = dataset::load_features(dir / "feat");
  ASSERT_EQ(songs.size(), 2u);
  for (const auto& s : songs) {
    EXPECT_EQ(s.length(), 60u);
    EXPECT_EQ(s.feature_dim(), 64u);
    EXPECT_EQ(s.times_ms.back(), 59 * 500);
  }
  const auto& quiet = songs[0].song_id == "quiet" ? songs[0] : songs[1];
  for (double v : quiet.features.values()) EXPECT_EQ(v, std::log(1e-10));
}

TEST(Cli, ExtractFailures) {
  fixture::TempDir dir;
  const fs::path empty = dir.subdir("empty");
  auto r = run(dir, "extract --audio " + q(empty) + " --output " + q(dir / "out"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.err, "no .wav")) << r.err;

  const fs::path broken = dir.subdir("broken");
  fixture::write_text(broken / "x.wav", "RIFF garbage");
  r = run(dir, "extract --audio " + q(broken) + " --output " + q(dir / "out"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.err, "x.wav")) << r.err;

  audio::AudioClip ok;
  ok.sample_rate = 8000;
  ok.samples.assign(8000 * 2, 0.1);
  audio::write_wav(broken / "y.wav", ok);
  r = run(dir, "extract --audio " + q(broken) + " --output " + q(dir / "out"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(has(r.err, "warning")) << r.err;
  EXPECT_TRUE(fs::exists(dir / "out" / "y.csv"));

  r = run(dir, "extract --audio " + q(dir / "nowhere") + " --output " + q(dir / "out"));
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, SweepSingleCellOmitsStd) {
  Workspace ws(10, 20, 4);
  const auto r = run(ws.dir, "sweep " + ws.data_flags() + Workspace::fast_flags() +
                                 " --seq_lens 5 --seeds 1 --val_ratio 0.3 --output " +
                                 q(ws.dir / "s.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(fixture::read_text(ws.dir / "s.csv"));
  expect_header(rows.at(0), "sweep");
  ASSERT_EQ(rows.size(), 3u);
  const auto cells = dataset::detail::split(rows[2], ',');
  ASSERT_EQ(cells.size(), 14u);
  EXPECT_EQ(cells[0], "5");
  EXPECT_EQ(cells[1], "1");
  for (std::size_t i = 3; i < 14; i += 2) EXPECT_EQ(cells[i], "") << i;
  EXPECT_NEAR(std::stod(cells[6]), 0.5 * (std::stod(cells[2]) + std::stod(cells[4])), 1e-15);
}

TEST(Cli, SweepGridShape) {
  Workspace ws(10, 20, 4);
  const auto r = run(ws.dir, "sweep " + ws.data_flags() + Workspace::fast_flags() +
                                 " --seq_lens 4,5 --seeds 1,2 --val_ratio 0.3"
                                 " --output " + q(ws.dir / "s.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(fixture::read_text(ws.dir / "s.csv"));
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 2; i < 4; ++i) {
    const auto c = dataset::detail::split(rows[i], ',');
    ASSERT_EQ(c.size(), 14u);
    EXPECT_EQ(c[1], "2");
    for (std::size_t k = 3; k < 14; k += 2) EXPECT_GE(std::stod(c[k]), 0.0);
    // Average column is the mean of the valence and arousal columns.
    EXPECT_NEAR(std::stod(c[6]), 0.5 * (std::stod(c[2]) + std::stod(c[4])), 1e-12);
    EXPECT_NEAR(std::stod(c[12]), 0.5 * (std::stod(c[8]) + std::stod(c[10])), 1e-12);
  }
  EXPECT_EQ(dataset::detail::split(rows[2], ',')[0], "4");
  EXPECT_EQ(dataset::detail::split(rows[3], ',')[0], "5");
  EXPECT_TRUE(has(r.out, "Seq. len")) << r.out;
}
