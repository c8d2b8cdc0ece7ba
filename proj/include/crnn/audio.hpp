// SPDX-License-Identifier: Apache-2.0
//
// Log mel-band energy features: Hann-windowed power spectra averaged over
// each non-overlapping 500 ms segment, projected on an HTK-scale triangular
// filterbank and log-compressed.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <fftw3.h>

#include "crnn/error.hpp"
#include "crnn/sequence.hpp"
#include "crnn/tensor.hpp"

namespace crnn::audio {

inline constexpr double kLogFloor = 1e-10;
inline constexpr std::size_t kDefaultMels = 64;

struct AudioClip {
  std::vector<double> samples;  // mono, in [-1, 1]
  int sample_rate = 0;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

inline double hz_to_mel(double hz) {
  if (!(hz >= 0.0)) throw DomainError("hz_to_mel: negative frequency " + std::to_string(hz));
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  if (!(mel >= 0.0)) throw DomainError("mel_to_hz: negative mel " + std::to_string(mel));
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

inline std::size_t samples_for_ms(int sample_rate, double ms) {
  return static_cast<std::size_t>(std::lround(sample_rate * ms / 1000.0));
}

inline std::size_t fft_size_for(std::size_t window) { return std::bit_ceil(window); }

namespace detail {

/// Real-input FFT of a fixed size backed by FFTW.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(fftw_alloc_real(n)),
        out_(fftw_alloc_complex(n / 2 + 1)),
        plan_(fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE)) {
    if (!in_ || !out_ || !plan_) throw InputError("fft: cannot plan a transform of size " + std::to_string(n));
  }
  ~RealFft() {
    fftw_destroy_plan(plan_);
    fftw_free(out_);
    fftw_free(in_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  /// |X_k|^2 for k in [0, n/2].
  double power(std::size_t k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace detail

/// Periodic Hann window.
inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                static_cast<double>(n));
  }
  return w;
}

/// |DFT|^2 of Hann-windowed frames: [frames x (nfft/2 + 1)], with nfft the
/// next power of two >= the window length. No normalisation is applied, so
/// Parseval reads sum_n (w x)^2 = (P_0 + 2 sum_{0<k<nfft/2} P_k + P_{nfft/2}) / nfft.
inline Tensor power_spectrogram(const AudioClip& clip, double win_ms = 60.0,
                                double hop_ms = 10.0) {
  if (clip.sample_rate <= 0) throw InputError("power_spectrogram: sample rate must be positive");
  const std::size_t win = samples_for_ms(clip.sample_rate, win_ms);
  const std::size_t hop = samples_for_ms(clip.sample_rate, hop_ms);
  if (win == 0 || hop == 0) throw InputError("power_spectrogram: window or hop rounds to zero samples");
  if (clip.samples.size() < win) {
    throw InputError("power_spectrogram: clip of " + std::to_string(clip.samples.size()) +
                     " samples is shorter than one " + std::to_string(win) + "-sample frame");
  }
  const std::size_t nfft = fft_size_for(win);
  const std::size_t bins = nfft / 2 + 1;
  const std::size_t frames = 1 + (clip.samples.size() - win) / hop;
  const auto window = hann(win);

  Tensor out({frames, bins});
  detail::RealFft fft(nfft);
  double* buf = fft.input();
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(buf, buf + nfft, 0.0);
    const std::size_t start = f * hop;
    for (std::size_t i = 0; i < win; ++i) buf[i] = clip.samples[start + i] * window[i];
    fft.execute();
    for (std::size_t k = 0; k < bins; ++k) out(f, k) = fft.power(k);
  }
  return out;
}

/// Triangular filters with centres equally spaced on the mel scale.
struct MelFilterbank {
  std::size_t n_mels = 0;
  double f_min = 0.0;
  double f_max = 0.0;
  int sample_rate = 0;
  std::size_t n_fft = 0;
  Tensor weights;  // [n_mels x (n_fft/2 + 1)]

  std::vector<double> centers_hz() const {
    const double lo = hz_to_mel(f_min), hi = hz_to_mel(f_max);
    std::vector<double> c(n_mels);
    for (std::size_t m = 0; m < n_mels; ++m) {
      c[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) /
                                static_cast<double>(n_mels + 1));
    }
    return c;
  }

  static MelFilterbank make(std::size_t n_mels, int sample_rate, std::size_t n_fft,
                            double f_min = 0.0, double f_max = -1.0) {
    if (n_mels == 0) throw ConfigError("mel filterbank needs at least one band");
    if (sample_rate <= 0) throw ConfigError("mel filterbank: sample rate must be positive");
    if (f_max < 0.0) f_max = sample_rate / 2.0;
    if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
      throw ConfigError("mel filterbank: need 0 <= f_min < f_max <= sample_rate/2");
    }
    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.f_min = f_min;
    fb.f_max = f_max;
    fb.sample_rate = sample_rate;
    fb.n_fft = n_fft;
    const std::size_t bins = n_fft / 2 + 1;
    fb.weights = Tensor({n_mels, bins});

    const double mlo = hz_to_mel(f_min), mhi = hz_to_mel(f_max);
    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
      edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) /
                                     static_cast<double>(n_mels + 1));
    }
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
        const double up = (f - left) / (center - left);
        const double down = (right - f) / (right - center);
        fb.weights(m, k) = std::max(0.0, std::min(up, down));
      }
    }
    return fb;
  }

  /// Filterbank matching the default 60 ms analysis window at this rate.
  static MelFilterbank for_rate(int sample_rate, std::size_t n_mels = kDefaultMels) {
    return make(n_mels, sample_rate, fft_size_for(samples_for_ms(sample_rate, 60.0)));
  }
};

inline std::size_t segment_count(std::size_t n_samples, int sample_rate, std::int64_t segment_ms) {
  return static_cast<std::size_t>(
      (static_cast<std::uint64_t>(n_samples) * 1000) /
      (static_cast<std::uint64_t>(sample_rate) * static_cast<std::uint64_t>(segment_ms)));
}

/// One log mel-energy vector per complete segment. Frames never straddle a
/// segment boundary; trailing audio shorter than a segment is ignored.
inline FeatureSequence log_mel_segments(const AudioClip& clip, const MelFilterbank& fb,
                                        std::string song_id = {},
                                        std::int64_t segment_ms = kSegmentMs) {
  if (clip.samples.empty()) throw InputError("log_mel_segments: empty clip");
  if (clip.sample_rate != fb.sample_rate) {
    throw DimensionError("log_mel_segments: filterbank built for " +
                         std::to_string(fb.sample_rate) + " Hz, clip is " +
                         std::to_string(clip.sample_rate) + " Hz");
  }
  const std::size_t n_seg = segment_count(clip.samples.size(), clip.sample_rate, segment_ms);
  if (n_seg == 0) {
    throw InputError("log_mel_segments: clip shorter than one " + std::to_string(segment_ms) +
                     " ms segment");
  }
  const std::size_t win = samples_for_ms(clip.sample_rate, 60.0);
  if (fft_size_for(win) != fb.n_fft) {
    throw DimensionError("log_mel_segments: filterbank FFT size " + std::to_string(fb.n_fft) +
                         " does not match analysis FFT size " +
                         std::to_string(fft_size_for(win)));
  }

  FeatureSequence seq;
  seq.song_id = std::move(song_id);
  seq.features = Tensor({n_seg, fb.n_mels});
  const std::size_t bins = fb.n_fft / 2 + 1;
  const auto rate = static_cast<std::uint64_t>(clip.sample_rate);
  for (std::size_t s = 0; s < n_seg; ++s) {
    const auto begin = static_cast<std::size_t>(s * rate * segment_ms / 1000);
    const auto end = static_cast<std::size_t>((s + 1) * rate * segment_ms / 1000);
    AudioClip part;
    part.sample_rate = clip.sample_rate;
    part.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                        clip.samples.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor spec = power_spectrogram(part);
    const std::size_t frames = spec.dim(0);

    std::vector<double> mean_power(bins, 0.0);
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t k = 0; k < bins; ++k) mean_power[k] += spec(f, k);
    for (double& p : mean_power) p /= static_cast<double>(frames);

    for (std::size_t m = 0; m < fb.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb.weights(m, k) * mean_power[k];
      seq.features(s, m) = std::log(e + kLogFloor);
    }
    seq.times_ms.push_back(static_cast<std::int64_t>(s) * segment_ms);
  }
  return seq;
}

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

/// Reads 16-bit PCM RIFF/WAVE; multi-channel input is averaged to mono.
inline AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open WAV file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) {
    return InputError(path.string() + ": " + why);
  };
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
      std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") {
    throw fail("not a RIFF/WAVE file");
  }

  int channels = 0, rate = 0, bits = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4));
    const std::size_t len = detail::read_u32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size() && id != "data") throw fail("truncated '" + id + "' chunk");
    if (id == "fmt ") {
      if (len < 16) throw fail("short fmt chunk");
      std::uint16_t format = detail::read_u16(&bytes[body]);
      channels = detail::read_u16(&bytes[body + 2]);
      rate = static_cast<int>(detail::read_u32(&bytes[body + 4]));
      bits = detail::read_u16(&bytes[body + 14]);
      if (format == 0xFFFE && len >= 26) format = detail::read_u16(&bytes[body + 24]);
      if (format != 1) throw fail("only PCM encoding is supported");
      if (bits != 16) throw fail("only 16-bit samples are supported");
      if (channels < 1 || rate <= 0) throw fail("invalid channel count or sample rate");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      const std::size_t avail = std::min(len, bytes.size() - body);
      const std::size_t frame_bytes = 2 * static_cast<std::size_t>(channels);
      const std::size_t frames = avail / frame_bytes;
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
          const auto raw = static_cast<std::int16_t>(
              detail::read_u16(&bytes[body + f * frame_bytes + 2 * static_cast<std::size_t>(c)]));
          acc += raw / 32768.0;
        }
        clip.samples[f] = acc / channels;
      }
      return clip;
    }
    pos = body + len + (len & 1);
  }
  throw fail("no data chunk");
}

/// Writes mono 16-bit PCM; samples are clipped to [-1, 1].
inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::string out;
  const auto data_len = static_cast<std::uint32_t>(clip.samples.size() * 2);
  out += "RIFF";
  detail::put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_len);
  for (double s : clip.samples) {
    const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
    const auto v = static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L));
    detail::put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write WAV file " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace crnn::audio
