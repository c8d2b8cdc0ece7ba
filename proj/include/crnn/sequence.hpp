// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "crnn/tensor.hpp"

namespace crnn {

/// Feature and annotation frames are 500 ms apart.
inline constexpr std::int64_t kSegmentMs = 500;

/// One feature vector per segment: features is [T x F], times_ms has T entries.
struct FeatureSequence {
  std::string song_id;
  std::vector<std::int64_t> times_ms;
  Tensor features;

  std::size_t length() const { return times_ms.size(); }
  std::size_t feature_dim() const { return features.empty() ? 0 : features.dim(1); }
};

/// Per-segment valence/arousal targets in [-1, 1], aligned with a FeatureSequence.
struct AnnotationSequence {
  std::string song_id;
  std::vector<std::int64_t> times_ms;
  Tensor valence;  // [T]
  Tensor arousal;  // [T]

  std::size_t length() const { return times_ms.size(); }
};

struct SongPair {
  FeatureSequence features;
  AnnotationSequence annotations;

  const std::string& id() const { return features.song_id; }
  std::size_t length() const { return features.length(); }
};

}  // namespace crnn
