// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crnn/dataset.hpp"

#include <unistd.h>

namespace fixture {

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("crnn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  std::filesystem::path subdir(const std::string& name) const {
    std::filesystem::create_directories(path_ / name);
    return path_ / name;
  }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// One feature CSV and one annotation CSV per song.
inline void write_dataset(const std::vector<crnn::SongPair>& pairs,
                          const std::filesystem::path& feature_dir,
                          const std::filesystem::path& annotation_dir) {
  std::filesystem::create_directories(feature_dir);
  std::filesystem::create_directories(annotation_dir);
  for (const auto& p : pairs) {
    std::ofstream f(feature_dir / (p.id() + ".csv"));
    crnn::dataset::write_feature_csv(f, p.features);
    std::ofstream a(annotation_dir / (p.id() + ".csv"));
    crnn::dataset::write_annotation_csv(a, p.annotations);
  }
}

}  // namespace fixture
