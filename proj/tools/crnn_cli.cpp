// SPDX-License-Identifier: Apache-2.0
//
// crnn: feature extraction, training, evaluation, prediction, parameter
// counting and sequence-length sweeps for the valence/arousal CRNN.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 data error,
// 3 numerical failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crnn/audio.hpp"
#include "crnn/config.hpp"
#include "crnn/dataset.hpp"
#include "crnn/evaluation.hpp"
#include "crnn/model.hpp"
#include "crnn/training.hpp"

namespace fs = std::filesystem;
using namespace crnn;

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kData = 2, kNumerical = 3 };

/// Thrown for data problems detected by the tool itself.
struct DataFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string header_line(const std::string& command, const config::RunConfig& cfg) {
  return "# crnn " + command + " config_hash=" + config::config_hash(cfg);
}

void require_input(const std::string& key, const std::string& path, bool directory) {
  if (path.empty()) throw ConfigError(key + ": required");
  if (directory ? !fs::is_directory(path) : !fs::exists(path)) {
    throw ConfigError(key + ": " + (directory ? "directory" : "file") + " not found: " + path);
  }
}

void require_output(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError(key + ": required");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) {
    throw ConfigError(key + ": parent directory does not exist: " + parent.string());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  return out;
}

std::vector<SongPair> load_pairs(const std::string& features, const std::string& annotations) {
  std::vector<std::string> rejected;
  auto pairs = dataset::load_dataset(features, annotations, &rejected);
  for (const auto& id : rejected) {
    std::cerr << "warning: song " << id << " skipped (feature/annotation timestamps differ)\n";
  }
  if (pairs.empty()) throw DataFailure("no usable songs in " + features);
  return pairs;
}

std::string fmt4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string fmt_stat(const evaluation::Stat& s) {
  return s.stddev ? fmt4(s.mean) + " +/- " + fmt4(*s.stddev) : fmt4(s.mean);
}

void print_eval(const evaluation::EvalResult& r, std::ostream& os) {
  os << "            Valence  Arousal  Average\n"
     << "RMSE        " << fmt4(r.rmse_valence) << "   " << fmt4(r.rmse_arousal) << "   "
     << fmt4(r.rmse_average) << "  (" << (r.pooled ? "pooled" : "per-song mean") << ", "
     << r.per_song.size() << " songs)\n";
}

void write_eval_csv(const evaluation::EvalResult& r, const std::string& header, std::ostream& os) {
  os << header << '\n' << "scope,valence,arousal,average\n";
  os << (r.pooled ? "pooled" : "per_song_mean") << ',' << dataset::fmt_value(r.rmse_valence) << ','
     << dataset::fmt_value(r.rmse_arousal) << ',' << dataset::fmt_value(r.rmse_average) << '\n';
  for (const auto& [id, s] : r.per_song) {
    os << "song:" << id << ',' << dataset::fmt_value(s.valence) << ','
       << dataset::fmt_value(s.arousal) << ',' << dataset::fmt_value(0.5 * (s.valence + s.arousal))
       << '\n';
  }
}

// ---------------------------------------------------------------------------

int cmd_extract(const config::RunConfig& cfg) {
  require_input("audio", cfg.audio, true);
  require_output("output", cfg.output);
  fs::create_directories(cfg.output);

  std::vector<fs::path> wavs;
  for (const auto& e : fs::directory_iterator(cfg.audio)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (e.is_regular_file() && ext == ".wav") wavs.push_back(e.path());
  }
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) {
    std::cerr << "error: no .wav files in " << cfg.audio << '\n';
    return kData;
  }

  const std::string header = header_line("extract", cfg);
  std::map<int, audio::MelFilterbank> banks;
  std::size_t ok = 0;
  for (const auto& wav : wavs) {
    try {
      const auto clip = audio::read_wav(wav);
      auto it = banks.find(clip.sample_rate);
      if (it == banks.end()) {
        it = banks.emplace(clip.sample_rate, audio::MelFilterbank::for_rate(clip.sample_rate, cfg.n_mels))
                 .first;
      }
      const auto seq = audio::log_mel_segments(clip, it->second, wav.stem().string());
      std::ofstream out = open_out((fs::path(cfg.output) / (wav.stem().string() + ".csv")).string());
      out << header << '\n';
      dataset::write_feature_csv(out, seq);
      std::cout << wav.filename().string() << ": " << seq.length() << " segments\n";
      ++ok;
    } catch (const crnn::Error& e) {
      std::cerr << "warning: " << wav.string() << ": " << e.what() << '\n';
    }
  }
  if (ok == 0) {
    std::cerr << "error: no file could be processed\n";
    return kData;
  }
  return kOk;
}

int cmd_train(const config::RunConfig& cfg) {
  require_input("features", cfg.features, true);
  require_input("annotations", cfg.annotations, true);
  require_output("checkpoint", cfg.checkpoint);
  const std::string report_path = cfg.report.empty() ? cfg.checkpoint + ".report.csv" : cfg.report;
  require_output("report", report_path);

  auto pairs = load_pairs(cfg.features, cfg.annotations);
  const ModelSpec spec = cfg.model_for(pairs.front().features.feature_dim());
  Rng init(cfg.train.seed);
  Crnn model = Crnn::build(spec, init);
  std::cout << "training on " << pairs.size() << " songs, " << count_params(spec)
            << " parameters\n";
  auto result = training::train(std::move(model), std::move(pairs), cfg.train,
                                [](const training::EpochRecord& e) {
                                  if (e.epoch % 10 == 0 || e.epoch == 1) {
                                    std::cout << "epoch " << e.epoch << "  loss "
                                              << fmt4(e.train_loss) << "  val "
                                              << fmt4(e.val_rmse_valence) << " / "
                                              << fmt4(e.val_rmse_arousal) << '\n';
                                  }
                                });
  save_checkpoint(result.model, cfg.checkpoint);
  std::ofstream rep = open_out(report_path);
  rep << header_line("train", cfg) << '\n';
  result.report.write_csv(rep);

  const auto& best = result.report.epochs.at(result.report.best_epoch - 1);
  std::cout << "best epoch " << result.report.best_epoch << " of " << result.report.stopped_epoch
            << (result.report.validated_on_training ? " (selected on training songs)" : "")
            << "\nvalidation RMSE  valence " << fmt4(best.val_rmse_valence) << "  arousal "
            << fmt4(best.val_rmse_arousal) << "  average " << fmt4(best.val_rmse_average()) << '\n';
  return kOk;
}

int cmd_evaluate(const config::RunConfig& cfg) {
  require_input("checkpoint", cfg.checkpoint, false);
  require_input("features", cfg.features, true);
  require_input("annotations", cfg.annotations, true);
  if (!cfg.output.empty()) require_output("output", cfg.output);

  const Crnn model = load_checkpoint(cfg.checkpoint);
  const auto pairs = load_pairs(cfg.features, cfg.annotations);
  const auto r = evaluation::evaluate_songs(model, pairs, cfg.train.seq_len, cfg.eval_mode);
  print_eval(r, std::cout);
  if (!cfg.output.empty()) {
    std::ofstream out = open_out(cfg.output);
    write_eval_csv(r, header_line("evaluate", cfg), out);
  }
  return kOk;
}

int cmd_predict(const config::RunConfig& cfg) {
  require_input("checkpoint", cfg.checkpoint, false);
  require_input("features", cfg.features, false);
  require_output("output", cfg.output);

  const Crnn model = load_checkpoint(cfg.checkpoint);
  const auto songs = dataset::load_features(cfg.features);
  if (songs.empty()) throw DataFailure("no feature rows in " + cfg.features);

  const std::size_t L = cfg.train.seq_len;
  std::ofstream out = open_out(cfg.output);
  out << header_line("predict", cfg) << '\n' << "song_id,segment_start_ms,valence,arousal\n";
  for (const auto& song : songs) {
    if (song.feature_dim() != model.feature_dim()) {
      throw DimensionError("song " + song.song_id + " has " + std::to_string(song.feature_dim()) +
                           " features, checkpoint expects " + std::to_string(model.feature_dim()));
    }
    const std::size_t T = song.length(), F = song.feature_dim();
    const std::size_t W = (T + L - 1) / L;
    Tensor x({W, L, F});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) x((t / L), (t % L), f) = song.features(t, f);
    const Tensor y = model.predict(x);
    for (std::size_t t = 0; t < T; ++t) {
      out << song.song_id << ',' << song.times_ms[t] << ',' << dataset::fmt_value(y(t / L, t % L, 0))
          << ',' << dataset::fmt_value(y(t / L, t % L, 1)) << '\n';
    }
  }
  std::cout << "wrote predictions for " << songs.size() << " songs to " << cfg.output << '\n';
  return kOk;
}

int cmd_param_count(const config::RunConfig& cfg) {
  const ModelSpec spec = cfg.model_for(cfg.feature_dim ? cfg.feature_dim : 260);
  const std::size_t C = spec.cnn_filters, U = spec.fc_units, H = spec.gru_units;
  const std::size_t conv = 10 * C + 2 * C;
  const std::size_t fc = spec.feature_dim * C * U + U;
  const std::size_t gru = 2 * (U * 3 * H + H * 3 * H + 3 * H);
  const std::size_t head = spec.maxout_pieces * (2 * H + 1) * spec.outputs_per_branch();
  std::cout << "feature_dim " << spec.feature_dim << ", " << (spec.branched ? "branched" : "unbranched")
            << "\n  conv + batch norm   " << conv << "\n  per branch         " << fc + gru + head
            << "  (dense " << fc << ", bi-GRU " << gru << ", maxout " << head << ")"
            << "\n  branches           " << spec.branch_count() << "\ntotal " << count_params(spec)
            << '\n';
  return kOk;
}

int cmd_sweep(const config::RunConfig& cfg) {
  require_input("features", cfg.features, true);
  require_input("annotations", cfg.annotations, true);
  const bool external_eval = !cfg.eval_features.empty() || !cfg.eval_annotations.empty();
  if (external_eval) {
    require_input("eval_features", cfg.eval_features, true);
    require_input("eval_annotations", cfg.eval_annotations, true);
  }
  require_output("output", cfg.output);

  const auto dev = load_pairs(cfg.features, cfg.annotations);
  const auto split = dataset::split_by_id_hash(dev, cfg.train.val_ratio);
  std::vector<SongPair> eval_set;
  if (external_eval) {
    eval_set = load_pairs(cfg.eval_features, cfg.eval_annotations);
  } else {
    eval_set = split.validation.empty() ? split.train : split.validation;
    std::cout << "no evaluation set given; scoring the held-out development songs\n";
  }
  const ModelSpec spec = cfg.model_for(dev.front().features.feature_dim());

  struct Row {
    std::size_t seq_len;
    evaluation::MultiRunSummary eval, dev;
  };
  std::vector<Row> rows;
  for (std::size_t L : cfg.seq_lens) {
    training::TrainConfig tc = cfg.train;
    tc.seq_len = L;
    std::vector<evaluation::EvalResult> dev_results;
    auto eval_summary = evaluation::multi_run(
        [&](std::uint64_t seed) {
          tc.seed = seed;
          Rng init(seed);
          auto res = training::train(Crnn::build(spec, init), split.train, split.validation, tc);
          dev_results.push_back(evaluation::evaluate_songs(res.model, dev, L, cfg.eval_mode));
          auto r = evaluation::evaluate_songs(res.model, eval_set, L, cfg.eval_mode);
          std::cout << "seq_len " << L << " seed " << seed << ": eval average "
                    << fmt4(r.rmse_average) << ", dev average " << fmt4(dev_results.back().rmse_average)
                    << '\n';
          return r;
        },
        cfg.seeds);
    rows.push_back({L, std::move(eval_summary),
                    evaluation::summarize_runs(cfg.seeds, std::move(dev_results))});
  }

  std::ofstream out = open_out(cfg.output);
  out << header_line("sweep", cfg) << '\n'
      << "seq_len,runs,eval_valence_mean,eval_valence_std,eval_arousal_mean,eval_arousal_std,"
         "eval_average_mean,eval_average_std,dev_valence_mean,dev_valence_std,dev_arousal_mean,"
         "dev_arousal_std,dev_average_mean,dev_average_std\n";
  const auto cell = [](const evaluation::Stat& s) {
    return dataset::fmt_value(s.mean) + "," + (s.stddev ? dataset::fmt_value(*s.stddev) : "");
  };
  for (const auto& r : rows) {
    out << r.seq_len << ',' << r.eval.run_count() << ',' << cell(r.eval.valence) << ','
        << cell(r.eval.arousal) << ',' << cell(r.eval.average) << ',' << cell(r.dev.valence) << ','
        << cell(r.dev.arousal) << ',' << cell(r.dev.average) << '\n';
  }

  std::cout << "\n         | Evaluation                                         | Development\n"
            << "Seq. len | Valence          Arousal          Average          | Valence          "
               "Arousal          Average\n";
  const auto pad = [](std::string s) {
    s.resize(std::max<std::size_t>(s.size(), 16), ' ');
    return s;
  };
  for (const auto& r : rows) {
    std::cout << std::setw(8) << r.seq_len << " | " << pad(fmt_stat(r.eval.valence)) << ' '
              << pad(fmt_stat(r.eval.arousal)) << ' ' << pad(fmt_stat(r.eval.average)) << " | "
              << pad(fmt_stat(r.dev.valence)) << ' ' << pad(fmt_stat(r.dev.arousal)) << ' '
              << fmt_stat(r.dev.average) << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CRNN music emotion regression: valence/arousal per 500 ms segment"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const config::RunConfig&);
  };
  const std::vector<Command> commands = {
      {"extract", "compute log mel-band energy CSVs from WAV files", cmd_extract},
      {"train", "train one model and write a checkpoint and report", cmd_train},
      {"sweep", "train over sequence lengths and seeds; write a results table", cmd_sweep},
      {"evaluate", "score a checkpoint on annotated songs", cmd_evaluate},
      {"predict", "write per-segment valence/arousal predictions", cmd_predict},
      {"param-count", "print the trainable parameter count of a configuration", cmd_param_count},
  };

  std::map<std::string, std::string> config_files;
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_files[c.name], "key = value configuration file");
    for (const auto& key : config::known_keys()) {
      sub->add_option(std::string("--") + key.name, flags[c.name][key.name], key.help);
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    const std::string name = commands[i].name;
    try {
      config::Settings settings;
      if (!config_files[name].empty()) settings = config::read_config_file(config_files[name]);
      config::Settings overrides;
      for (const auto& key : config::known_keys()) {
        if (subs[i]->count(std::string("--") + key.name) > 0) {
          overrides[key.name] = flags[name][key.name];
        }
      }
      const auto cfg = config::resolve(config::merge(settings, overrides));
      return commands[i].run(cfg);
    } catch (const evaluation::PartialRunError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return e.numerical_failure ? kNumerical : kData;
    } catch (const NumericalError& e) {
      std::cerr << "numerical failure: " << e.what() << '\n';
      return kNumerical;
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kConfig;
    } catch (const DimensionError& e) {
      std::cerr << "dimension error: " << e.what() << '\n';
      return kConfig;
    } catch (const crnn::Error& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return kData;
    } catch (const DataFailure& e) {
      std::cerr << "data error: " << e.what() << '\n';
      return kData;
    } catch (const fs::filesystem_error& e) {
      std::cerr << "filesystem error: " << e.what() << '\n';
      return kData;
    }
  }
  return kConfig;
}
