// SPDX-License-Identifier: Apache-2.0
//
// The CRNN: one 3x3 convolution (batch norm, ReLU, dropout) over the
// time x feature plane, flattened per step, then either two independent
// branches (valence, arousal) or one shared branch of
//   time-distributed dense -> dropout -> bidirectional GRU -> maxout.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crnn/error.hpp"
#include "crnn/layers.hpp"
#include "crnn/rng.hpp"
#include "crnn/tensor.hpp"

namespace crnn {

struct ModelSpec {
  std::size_t feature_dim = 260;
  std::size_t cnn_filters = 8;
  std::size_t fc_units = 8;
  std::size_t gru_units = 8;
  bool branched = true;
  double dropout_rate = 0.25;
  std::size_t maxout_pieces = 2;
  double bn_eps = 1e-3;
  double bn_momentum = 0.99;

  void validate() const {
    const auto need = [](bool ok, const char* field, const std::string& why) {
      if (!ok) throw ConfigError(std::string(field) + ": " + why);
    };
    need(feature_dim >= 1, "feature_dim", "must be >= 1");
    need(cnn_filters >= 1, "cnn_filters", "must be >= 1");
    need(fc_units >= 1, "fc_units", "must be >= 1");
    need(gru_units >= 1, "gru_units", "must be >= 1");
    need(maxout_pieces >= 2, "maxout_pieces", "must be >= 2");
    need(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout", "must be in [0, 1)");
    need(bn_eps > 0.0, "bn_eps", "must be positive");
    need(bn_momentum >= 0.0 && bn_momentum < 1.0, "bn_momentum", "must be in [0, 1)");
  }

  std::size_t branch_count() const { return branched ? 2 : 1; }
  std::size_t outputs_per_branch() const { return branched ? 1 : 2; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Output channel order everywhere.
inline constexpr std::size_t kValence = 0;
inline constexpr std::size_t kArousal = 1;

/// Insertion-ordered map of named tensors.
class ParamMap {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  Tensor& add(std::string name, Tensor value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(value), trainable});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) { return entries_[locate(name)].value; }
  const Tensor& at(const std::string& name) const { return entries_[locate(name)].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.trainable ? e.value.size() : 0;
    return n;
  }

  /// Zero tensors with the same names and shapes (gradient accumulators).
  ParamMap zeros_like() const {
    ParamMap out;
    for (const auto& e : entries_) out.add(e.name, Tensor(e.value.shape()), e.trainable);
    return out;
  }

  friend bool operator==(const ParamMap& a, const ParamMap& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    }
    return true;
  }

 private:
  std::size_t locate(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Branch name prefixes: "valence." and "arousal." when branched, otherwise "shared.".
inline std::vector<std::string> branch_prefixes(const ModelSpec& spec) {
  if (spec.branched) return {"valence.", "arousal."};
  return {"shared."};
}

/// Exact number of trainable scalars, running statistics excluded.
inline std::size_t count_params(const ModelSpec& spec) {
  spec.validate();
  const std::size_t C = spec.cnn_filters, U = spec.fc_units, H = spec.gru_units;
  const std::size_t conv = 9 * C + C;
  const std::size_t bn = 2 * C;
  const std::size_t fc = spec.feature_dim * C * U + U;
  const std::size_t gru_dir = U * 3 * H + H * 3 * H + 3 * H;
  const std::size_t O = spec.outputs_per_branch();
  const std::size_t maxout = spec.maxout_pieces * 2 * H * O + spec.maxout_pieces * O;
  return conv + bn + spec.branch_count() * (fc + 2 * gru_dir + maxout);
}

namespace detail {

inline Tensor glorot(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  return uniform_init(rng, std::move(shape),
                      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

/// Parameter layout with either Glorot-uniform draws (rng given) or zeros.
inline ParamMap make_params(const ModelSpec& spec, Rng* rng) {
  const std::size_t F = spec.feature_dim, C = spec.cnn_filters, U = spec.fc_units,
                    H = spec.gru_units, K = spec.maxout_pieces, O = spec.outputs_per_branch();
  const auto weight = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
    return rng ? glorot(*rng, std::move(shape), fan_in, fan_out) : Tensor(std::move(shape));
  };
  ParamMap p;
  p.add("conv.kernel", weight({3, 3, 1, C}, 9, 9 * C));
  p.add("conv.bias", Tensor({C}));
  p.add("bn.gamma", Tensor({C}, 1.0));
  p.add("bn.beta", Tensor({C}));
  p.add("bn.running_mean", Tensor({C}), false);
  p.add("bn.running_var", Tensor({C}, 1.0), false);
  for (const auto& pre : branch_prefixes(spec)) {
    p.add(pre + "fc.W", weight({F * C, U}, F * C, U));
    p.add(pre + "fc.b", Tensor({U}));
    for (const char* dir : {"fw", "bw"}) {
      const std::string g = pre + "gru." + dir + ".";
      p.add(g + "W", weight({U, 3 * H}, U, 3 * H));
      p.add(g + "U", weight({H, 3 * H}, H, 3 * H));
      p.add(g + "b", Tensor({3 * H}));
    }
    p.add(pre + "maxout.W", weight({K, 2 * H, O}, 2 * H, O));
    p.add(pre + "maxout.b", Tensor({K, O}));
  }
  return p;
}

}  // namespace detail

class Crnn;

/// One forward evaluation with caches retained for a single backward call.
/// In train mode the batch-norm running statistics of the model are updated.
class ForwardPass {
 public:
  ForwardPass(Crnn& model, layers::Mode mode, Rng* dropout_rng = nullptr);

  /// Unclamped network output, [B x L x 2] as (valence, arousal).
  Tensor forward(const Tensor& x);

  /// Convolution output (before batch normalisation) of the last forward,
  /// [B x L x F x C].
  const Tensor& conv_activations() const { return conv_out_; }

  /// Backpropagates dL/doutput (plus an optional extra gradient on the
  /// convolution output) and accumulates parameter gradients into `grads`.
  void backward(const Tensor& grad_output, const Tensor* grad_conv_activations, ParamMap& grads);

 private:
  struct Branch {
    layers::Dense fc;
    layers::Dropout drop;
    layers::BiGru gru;
    layers::Maxout head;
  };

  Crnn& model_;
  layers::Mode mode_;
  Rng* rng_;
  layers::Conv2d conv_;
  layers::BatchNorm bn_;
  layers::Relu relu_;
  layers::Dropout drop_;
  std::vector<Branch> branches_;
  Tensor conv_out_;
  Shape input_shape_;
  bool ready_ = false;
};

class Crnn {
 public:
  Crnn(ModelSpec spec, ParamMap params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const ParamMap expected = detail::make_params(spec_, nullptr);
    if (expected.size() != params_.size()) {
      throw ConfigError("parameter set does not match the model specification");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& e = expected.entries()[i];
      const auto& a = params_.entries()[i];
      if (e.name != a.name || e.value.shape() != a.value.shape()) {
        throw ConfigError("parameter " + a.name + " " + shape_str(a.value.shape()) +
                          " does not match expected " + e.name + " " +
                          shape_str(e.value.shape()));
      }
      params_.entries()[i].trainable = e.trainable;
    }
  }

  /// Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases,
  /// batch-norm gamma = 1, beta = 0, running mean 0 and variance 1.
  static Crnn build(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    return Crnn(spec, detail::make_params(spec, &rng));
  }

  const ModelSpec& spec() const { return spec_; }
  const ParamMap& params() const { return params_; }
  ParamMap& params() { return params_; }
  std::size_t feature_dim() const { return spec_.feature_dim; }

  /// Full forward. Infer mode clamps outputs to [-1, 1] and is deterministic;
  /// train mode uses batch statistics (updating the running ones) and dropout.
  Tensor forward(const Tensor& x, layers::Mode mode, Rng* dropout_rng = nullptr) {
    if (mode == layers::Mode::infer) return predict(x);
    ForwardPass pass(*this, mode, dropout_rng);
    return pass.forward(x);
  }

  /// Inference on [B x L x F] (or a single [L x F] sequence), clamped to [-1, 1].
  Tensor predict(const Tensor& x) const {
    const bool single = x.rank() == 2;
    Crnn copy = *this;
    ForwardPass pass(copy, layers::Mode::infer);
    Tensor y = pass.forward(single ? x.reshaped({1, x.dim(0), x.dim(1)}) : x);
    for (double& v : y.values()) v = std::clamp(v, -1.0, 1.0);
    return single ? y.reshaped({x.dim(0), 2}) : y;
  }

 private:
  ModelSpec spec_;
  ParamMap params_;
};

inline ForwardPass::ForwardPass(Crnn& model, layers::Mode mode, Rng* dropout_rng)
    : model_(model),
      mode_(mode),
      rng_(dropout_rng),
      bn_(model.spec().bn_eps, model.spec().bn_momentum),
      branches_(model.spec().branch_count()) {}

inline Tensor ForwardPass::forward(const Tensor& x) {
  const ModelSpec& spec = model_.spec();
  ParamMap& p = model_.params();
  if (x.rank() != 3 || x.dim(2) != spec.feature_dim) {
    throw DimensionError("model expects [B x L x " + std::to_string(spec.feature_dim) +
                         "] input, got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), L = x.dim(1), F = x.dim(2), C = spec.cnn_filters;
  input_shape_ = x.shape();
  const double rate = spec.dropout_rate;
  Rng fallback(0);
  Rng& rng = rng_ ? *rng_ : fallback;
  if (mode_ == layers::Mode::train && rate > 0.0 && !rng_) {
    throw ConfigError("train-mode forward with dropout needs a random generator");
  }

  conv_out_ = conv_.forward(x.reshaped({B, L, F, 1}), p.at("conv.kernel"), p.at("conv.bias"));
  Tensor h = bn_.forward(conv_out_, p.at("bn.gamma"), p.at("bn.beta"), p.at("bn.running_mean"),
                         p.at("bn.running_var"), mode_);
  h = relu_.forward(h);
  const Tensor flat = drop_.forward(h, rate, rng, mode_).reshaped({B, L, F * C});

  Tensor out({B, L, 2});
  const auto prefixes = branch_prefixes(spec);
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const std::string& pre = prefixes[i];
    Branch& br = branches_[i];
    Tensor z = br.fc.forward(flat, p.at(pre + "fc.W"), p.at(pre + "fc.b"));
    z = br.drop.forward(z, rate, rng, mode_);
    z = br.gru.forward(
        z, {p.at(pre + "gru.fw.W"), p.at(pre + "gru.fw.U"), p.at(pre + "gru.fw.b")},
        {p.at(pre + "gru.bw.W"), p.at(pre + "gru.bw.U"), p.at(pre + "gru.bw.b")});
    z = br.head.forward(z, p.at(pre + "maxout.W"), p.at(pre + "maxout.b"));
    const std::size_t O = z.dim(2);
    for (std::size_t n = 0; n < B * L; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * 2 + i + o] = z[n * O + o];
  }
  ready_ = true;
  return out;
}

inline void ForwardPass::backward(const Tensor& grad_output, const Tensor* grad_conv_activations,
                                  ParamMap& grads) {
  if (!ready_) throw StateError("model backward called without a cached forward");
  const ModelSpec& spec = model_.spec();
  const std::size_t B = input_shape_[0], L = input_shape_[1], F = input_shape_[2],
                    C = spec.cnn_filters;
  if (grad_output.shape() != Shape({B, L, 2})) {
    throw DimensionError("model backward: gradient shape " + shape_str(grad_output.shape()));
  }

  Tensor grad_flat({B, L, F * C});
  const auto prefixes = branch_prefixes(spec);
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const std::string& pre = prefixes[i];
    Branch& br = branches_[i];
    const std::size_t O = spec.outputs_per_branch();
    Tensor g({B, L, O});
    for (std::size_t n = 0; n < B * L; ++n)
      for (std::size_t o = 0; o < O; ++o) g[n * O + o] = grad_output[n * 2 + i + o];
    g = br.head.backward(g, grads.at(pre + "maxout.W"), grads.at(pre + "maxout.b"));
    g = br.gru.backward(
        g, {grads.at(pre + "gru.fw.W"), grads.at(pre + "gru.fw.U"), grads.at(pre + "gru.fw.b")},
        {grads.at(pre + "gru.bw.W"), grads.at(pre + "gru.bw.U"), grads.at(pre + "gru.bw.b")});
    g = br.drop.backward(g);
    grad_flat += br.fc.backward(g, grads.at(pre + "fc.W"), grads.at(pre + "fc.b"));
  }

  Tensor g = drop_.backward(grad_flat.reshaped({B, L, F, C}));
  g = relu_.backward(g);
  g = bn_.backward(g, grads.at("bn.gamma"), grads.at("bn.beta"));
  if (grad_conv_activations) g += *grad_conv_activations;
  conv_.backward(g, grads.at("conv.kernel"), grads.at("conv.bias"));
  ready_ = false;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Little-endian byte layout:
//   "CRNNCKPT"                      8 bytes magic
//   u32 version                     (= 1)
//   u64 feature_dim, cnn_filters, fc_units, gru_units
//   u8  branched
//   f64 dropout_rate
//   u64 maxout_pieces
//   f64 bn_eps, bn_momentum
//   u64 tensor_count
//   per tensor:  u32 name_len, name bytes, u32 rank, u64 dims[rank],
//                f64 values[prod(dims)]  (row-major)

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& str() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Crnn& model) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const ModelSpec& s = model.spec();
  w.u64(s.feature_dim);
  w.u64(s.cnn_filters);
  w.u64(s.fc_units);
  w.u64(s.gru_units);
  w.u8(s.branched ? 1 : 0);
  w.f64(s.dropout_rate);
  w.u64(s.maxout_pieces);
  w.f64(s.bn_eps);
  w.f64(s.bn_momentum);
  w.u64(model.params().size());
  for (const auto& e : model.params().entries()) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u64(d);
    for (double v : e.value.values()) w.f64(v);
  }
  return w.str();
}

inline Crnn deserialize_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError("not a CRNN checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelSpec s;
  s.feature_dim = r.u64();
  s.cnn_filters = r.u64();
  s.fc_units = r.u64();
  s.gru_units = r.u64();
  s.branched = r.u8() != 0;
  s.dropout_rate = r.f64();
  s.maxout_pieces = r.u64();
  s.bn_eps = r.f64();
  s.bn_momentum = r.f64();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid model specification: ") + e.what());
  }
  const ParamMap expected = detail::make_params(s, nullptr);
  const std::uint64_t count = r.u64();
  if (count != expected.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                          std::to_string(expected.size()));
  }
  ParamMap params;
  for (const auto& exp : expected.entries()) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("tensor " + name + " has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (name != exp.name || shape != exp.value.shape()) {
      throw CheckpointError("tensor " + name + " " + shape_str(shape) + " does not match expected " +
                            exp.name + " " + shape_str(exp.value.shape()));
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = r.f64();
    params.add(name, Tensor(shape, std::move(data)), exp.trainable);
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint");
  return Crnn(s, std::move(params));
}

inline void save_checkpoint(const Crnn& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline Crnn load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

}  // namespace crnn
