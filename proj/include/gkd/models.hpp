#pragma once

// Baseline 3D-CNN, baseline LSTM and joint 3D-CNN + LSTM gesture classifiers.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/conv3d.hpp"
#include "gkd/layers.hpp"
#include "gkd/linear.hpp"
#include "gkd/tensor.hpp"
#include "gkd/video.hpp"

namespace gkd {

enum class Family { baseline_cnn3d, baseline_lstm, joint };
enum class InputMode { hand, upper_body, combined };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::baseline_cnn3d: return "baseline_cnn3d";
    case Family::baseline_lstm: return "baseline_lstm";
    case Family::joint: return "joint";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  if (s == "baseline_cnn3d" || s == "cnn3d") return Family::baseline_cnn3d;
  if (s == "baseline_lstm" || s == "lstm") return Family::baseline_lstm;
  if (s == "joint") return Family::joint;
  throw std::invalid_argument("unknown model family '" + s + "'");
}

inline std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::hand: return "hand";
    case InputMode::upper_body: return "upper_body";
    case InputMode::combined: return "combined";
  }
  return "?";
}

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "hand") return InputMode::hand;
  if (s == "upper_body") return InputMode::upper_body;
  if (s == "combined") return InputMode::combined;
  throw std::invalid_argument("unknown input mode '" + s + "'");
}

inline std::size_t channels_for(InputMode m) { return m == InputMode::combined ? 4 : 2; }

struct Rational {
  std::uint32_t num = 1;
  std::uint32_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
  }
  static Rational parse(const std::string& text) {
    Rational r;
    std::size_t used = 0;
    try {
      const auto slash = text.find('/');
      r.num = static_cast<std::uint32_t>(std::stoul(text.substr(0, slash), &used));
      if (used != (slash == std::string::npos ? text.size() : slash)) throw std::invalid_argument("");
      if (slash != std::string::npos) {
        const std::string rest = text.substr(slash + 1);
        r.den = static_cast<std::uint32_t>(std::stoul(rest, &used));
        if (used != rest.size()) throw std::invalid_argument("");
      }
    } catch (const std::exception&) {
      throw std::invalid_argument("malformed rational '" + text + "'");
    }
    if (r.num == 0 || r.den == 0) throw std::invalid_argument("rational must be positive: " + text);
    return r;
  }
  friend bool operator==(const Rational&, const Rational&) = default;
};

struct ConvLayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::array<std::size_t, 3> kernel{};
  Conv3dGeometry geometry;
};

/// Architecture descriptor. Widths are multiplied by `width` and rounded to
/// the nearest integer; input channels and class count never scale.
struct ArchSpec {
  Family family = Family::joint;
  Rational width{1, 1};
  std::size_t class_count = 20;
  InputMode input_mode = InputMode::upper_body;
  // Spatial side of the square input frames; 64 for real data, smaller in tests.
  std::size_t frame_size = 64;

  std::size_t input_channels() const { return channels_for(input_mode); }

  std::size_t scaled(std::size_t base) const {
    const double v = std::floor(static_cast<double>(base) * width.value() + 0.5);
    if (v < 1) {
      throw std::invalid_argument("width " + width.str() + " rounds a width of " +
                                  std::to_string(base) + " below 1");
    }
    return static_cast<std::size_t>(v);
  }

  std::size_t feature_width() const { return scaled(512); }
  std::size_t lstm_units() const { return scaled(256); }

  std::vector<ConvLayerSpec> conv_layers() const {
    if (family == Family::baseline_lstm) return {};
    static constexpr std::array<std::size_t, 6> base{32, 64, 64, 128, 128, 128};
    const Conv3dGeometry down{{2, 2, 2}, {1, 1, 1}};
    const Conv3dGeometry keep{{1, 1, 1}, {1, 1, 1}};
    std::vector<ConvLayerSpec> layers;
    std::size_t in = input_channels();
    for (std::size_t i = 0; i < base.size(); ++i) {
      ConvLayerSpec l;
      l.in_channels = in;
      l.out_channels = scaled(base[i]);
      const bool downsample = i % 2 == 0;
      l.kernel = downsample ? std::array<std::size_t, 3>{4, 4, 4} : std::array<std::size_t, 3>{3, 3, 3};
      l.geometry = downsample ? down : keep;
      // A 4-frame block only has room for two temporal halvings.
      if (family == Family::joint && i == 4) {
        l.kernel[0] = 3;
        l.geometry.stride[0] = 1;
      }
      layers.push_back(l);
      in = l.out_channels;
    }
    return layers;
  }

  /// Frames consumed per forward unit: 32 for the clip CNN, 4 per block otherwise.
  std::size_t unit_frames() const {
    return family == Family::baseline_cnn3d ? kClipFrames : kChunkFrames;
  }

  /// Output (C, T, H, W) of the conv stack for one unit.
  std::array<std::size_t, 4> encoder_output() const {
    std::array<std::size_t, 3> dims{unit_frames(), frame_size, frame_size};
    std::size_t channels = input_channels();
    for (const auto& l : conv_layers()) {
      for (std::size_t a = 0; a < 3; ++a)
        dims[a] = conv3d_shape(dims[a], l.kernel[a], l.geometry.stride[a], l.geometry.pad[a]);
      channels = l.out_channels;
    }
    return {channels, dims[0], dims[1], dims[2]};
  }

  std::size_t flatten_size() const {
    const auto o = encoder_output();
    return o[0] * o[1] * o[2] * o[3];
  }

  void validate() const {
    if (class_count < 1) throw std::invalid_argument("class_count must be >= 1");
    if (frame_size < 8 || frame_size % 8 != 0) {
      throw std::invalid_argument("frame_size must be a positive multiple of 8");
    }
    (void)conv_layers();
    (void)feature_width();
    (void)lstm_units();
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline nlohmann::json to_json(const ArchSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.conv_layers()) {
    layers.push_back({{"type", "conv3d"},
                      {"in", l.in_channels},
                      {"out", l.out_channels},
                      {"kernel", l.kernel},
                      {"stride", l.geometry.stride},
                      {"pad", l.geometry.pad},
                      {"batchnorm", true},
                      {"activation", "relu"}});
  }
  const std::size_t head_in = spec.family == Family::baseline_lstm
                                  ? spec.input_channels() * kChunkFrames * spec.frame_size *
                                        spec.frame_size
                                  : spec.flatten_size();
  if (spec.family == Family::baseline_cnn3d) {
    layers.push_back({{"type", "linear"}, {"in", head_in}, {"out", spec.feature_width()},
                      {"activation", "relu"}});
    layers.push_back({{"type", "linear"}, {"in", spec.feature_width()},
                      {"out", spec.class_count}});
  } else {
    layers.push_back({{"type", "linear"}, {"in", head_in}, {"out", spec.feature_width()},
                      {"activation", "relu"}});
    layers.push_back({{"type", "lstm"}, {"in", spec.feature_width()},
                      {"units", spec.lstm_units()}});
    layers.push_back({{"type", "linear"}, {"in", spec.lstm_units()}, {"out", spec.class_count}});
  }
  return {{"family", to_string(spec.family)},
          {"width_scale", {{"numerator", spec.width.num}, {"denominator", spec.width.den}}},
          {"class_count", spec.class_count},
          {"input_channels", spec.input_channels()},
          {"input_mode", to_string(spec.input_mode)},
          {"frame_size", spec.frame_size},
          {"layer_table", layers}};
}

inline ArchSpec arch_spec_from_json(const nlohmann::json& j) {
  ArchSpec spec;
  spec.family = family_from_string(j.at("family").get<std::string>());
  spec.width.num = j.at("width_scale").at("numerator").get<std::uint32_t>();
  spec.width.den = j.at("width_scale").at("denominator").get<std::uint32_t>();
  if (spec.width.num == 0 || spec.width.den == 0) {
    throw std::invalid_argument("width_scale must be positive");
  }
  spec.class_count = j.at("class_count").get<std::size_t>();
  spec.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
  spec.frame_size = j.at("frame_size").get<std::size_t>();
  if (j.at("input_channels").get<std::size_t>() != spec.input_channels()) {
    throw std::invalid_argument("input_channels inconsistent with input_mode");
  }
  spec.validate();
  if (to_json(spec).at("layer_table") != j.at("layer_table")) {
    throw std::invalid_argument("layer_table does not match the architecture descriptor");
  }
  return spec;
}

struct TensorSlot {
  std::string name;
  Shape shape;
  double init_bound = 0;  // uniform(-b, b); 0 means constant `fill`
  double fill = 0;
  bool buffer = false;    // running statistics, not learnable
};

inline bool is_buffer_name(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

/// Every tensor of the architecture in construction order.
inline std::vector<TensorSlot> tensor_layout(const ArchSpec& spec) {
  spec.validate();
  std::vector<TensorSlot> slots;
  auto weight = [&](std::string name, Shape shape, std::size_t fan_in) {
    slots.push_back({std::move(name), std::move(shape), std::sqrt(1.0 / static_cast<double>(fan_in))});
  };
  auto constant = [&](std::string name, Shape shape, double value, bool buffer = false) {
    slots.push_back({std::move(name), std::move(shape), 0.0, value, buffer});
  };

  const auto convs = spec.conv_layers();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& l = convs[i];
    const std::string conv = "conv" + std::to_string(i + 1);
    const std::string bn = "bn" + std::to_string(i + 1);
    const std::size_t fan_in = l.in_channels * l.kernel[0] * l.kernel[1] * l.kernel[2];
    weight(conv + ".weight", {l.out_channels, l.in_channels, l.kernel[0], l.kernel[1], l.kernel[2]},
           fan_in);
    constant(conv + ".bias", {l.out_channels}, 0.0);
    constant(bn + ".gamma", {l.out_channels}, 1.0);
    constant(bn + ".beta", {l.out_channels}, 0.0);
    constant(bn + ".running_mean", {l.out_channels}, 0.0, true);
    constant(bn + ".running_var", {l.out_channels}, 1.0, true);
  }

  const std::size_t features = spec.feature_width();
  if (spec.family == Family::baseline_cnn3d) {
    weight("fc1.weight", {features, spec.flatten_size()}, spec.flatten_size());
    constant("fc1.bias", {features}, 0.0);
    weight("fc2.weight", {spec.class_count, features}, features);
    constant("fc2.bias", {spec.class_count}, 0.0);
    return slots;
  }

  const std::size_t in = spec.family == Family::joint
                             ? spec.flatten_size()
                             : spec.input_channels() * kChunkFrames * spec.frame_size * spec.frame_size;
  const std::string proj = spec.family == Family::joint ? "enc_fc" : "in_fc";
  weight(proj + ".weight", {features, in}, in);
  constant(proj + ".bias", {features}, 0.0);
  const std::size_t units = spec.lstm_units();
  weight("lstm.w_ih", {4 * units, features}, features);
  weight("lstm.w_hh", {4 * units, units}, units);
  constant("lstm.bias", {4 * units}, 0.0);
  weight("fc.weight", {spec.class_count, units}, units);
  constant("fc.bias", {spec.class_count}, 0.0);
  return slots;
}

/// Learnable parameter count of an architecture, without allocating it.
inline std::size_t param_count(const ArchSpec& spec) {
  std::size_t total = 0;
  for (const auto& s : tensor_layout(spec))
    if (!s.buffer) total += shape_size(s.shape);
  return total;
}

template <typename T>
struct ModelParams {
  ArchSpec spec;
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("model has no tensor '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("model has no tensor '" + name + "'");
    return it->second;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{spec, {}};
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

template <typename T>
std::size_t param_count(const ModelParams<T>& model) {
  std::size_t total = 0;
  for (const auto& [name, t] : model.tensors)
    if (!is_buffer_name(name)) total += t.size();
  return total;
}

/// Initialized parameters, deterministic in `seed`. Weights are uniform in
/// +-sqrt(1/fan_in); biases are zero except the LSTM forget gate (1.0).
template <typename T = float>
ModelParams<T> build_model(const ArchSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams<T> model{spec, {}};
  for (const auto& slot : tensor_layout(spec)) {
    Tensor<T> t(slot.shape, static_cast<T>(slot.fill));
    if (slot.init_bound > 0) {
      std::uniform_real_distribution<double> dist(-slot.init_bound, slot.init_bound);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
    }
    model.tensors.emplace(slot.name, std::move(t));
  }
  if (spec.family != Family::baseline_cnn3d) {
    Tensor<T>& bias = model.at("lstm.bias");
    const std::size_t units = spec.lstm_units();
    for (std::size_t j = units; j < 2 * units; ++j) bias[j] = T(1);
  }
  return model;
}

/// Running-statistic updates produced by a train-mode forward pass.
template <typename T>
using StatUpdates = std::map<std::string, Tensor<T>>;

template <typename T>
void apply_stat_updates(ModelParams<T>& model, StatUpdates<T>&& updates) {
  for (auto& [name, t] : updates) model.at(name) = std::move(t);
}

namespace model_detail {

template <typename T>
Var param(Tape<T>& tape, const ModelParams<T>& model, const std::string& name) {
  return tape.parameter(name, model.at(name));
}

// conv -> batchnorm -> ReLU, six times; returns [N x flatten].
template <typename T>
Var encoder(Tape<T>& tape, const ModelParams<T>& model, Var x, Mode mode,
            StatUpdates<T>* updates) {
  const auto layers = model.spec.conv_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string conv = "conv" + std::to_string(i + 1);
    const std::string bn = "bn" + std::to_string(i + 1);
    x = ops::conv3d(tape, x, param(tape, model, conv + ".weight"), param(tape, model, conv + ".bias"),
                    layers[i].geometry);
    BatchNormStats<T> stats{model.at(bn + ".running_mean"), model.at(bn + ".running_var")};
    x = ops::batchnorm3d(tape, x, param(tape, model, bn + ".gamma"),
                         param(tape, model, bn + ".beta"), stats, mode);
    if (mode == Mode::train && updates) {
      (*updates)[bn + ".running_mean"] = std::move(stats.running_mean);
      (*updates)[bn + ".running_var"] = std::move(stats.running_var);
    }
    x = ops::relu(tape, x);
  }
  return ops::flatten(tape, x);
}

template <typename T>
void check_videos(const ModelParams<T>& model, const std::vector<Tensor<T>>& videos) {
  if (videos.empty()) throw ShapeError("forward: empty batch");
  const auto& s = model.spec;
  for (const auto& v : videos) {
    require_shape(v.rank() == 4 && v.dim(0) == s.input_channels() && v.dim(2) == s.frame_size &&
                      v.dim(3) == s.frame_size,
                  "forward: expected videos of " + std::to_string(s.input_channels()) + " x T x " +
                      std::to_string(s.frame_size) + " x " + std::to_string(s.frame_size) +
                      ", got " + shape_string(v.shape()));
    if (v.dim(1) == 0) throw ShapeError("forward: empty video");
  }
}

// LSTM over per-video block features followed by the classifier on the
// final step's hidden state. `features` is [total_blocks x F], with video b
// owning rows [offsets[b], offsets[b] + counts[b]).
template <typename T>
Var recurrent_head(Tape<T>& tape, const ModelParams<T>& model, Var features,
                   const std::vector<std::size_t>& offsets, const std::vector<std::size_t>& counts) {
  const std::size_t batch = counts.size();
  const std::size_t units = model.spec.lstm_units();
  std::size_t steps = 0;
  for (std::size_t c : counts) steps = std::max(steps, c);

  Var w_ih = param(tape, model, "lstm.w_ih");
  Var w_hh = param(tape, model, "lstm.w_hh");
  Var bias = param(tape, model, "lstm.bias");
  Var zero_bias = tape.constant(Tensor<T>(Shape{4 * units}));
  ops::LstmVars state{tape.constant(Tensor<T>(Shape{batch, units})),
                      tape.constant(Tensor<T>(Shape{batch, units}))};
  std::vector<Var> hidden;
  hidden.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<std::optional<std::size_t>> rows(batch);
    for (std::size_t b = 0; b < batch; ++b)
      if (t < counts[b]) rows[b] = offsets[b] + t;
    Var x = ops::gather_rows(tape, features, std::move(rows));
    state = ops::lstm_step(tape, x, state, w_ih, w_hh, bias, zero_bias);
    hidden.push_back(state.hidden);
  }
  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = counts[b] - 1;
  Var final_hidden = ops::pick_steps(tape, hidden, last);
  return ops::linear(tape, final_hidden, param(tape, model, "fc.weight"),
                     param(tape, model, "fc.bias"));
}

template <typename T>
Tensor<T> stack_blocks(const std::vector<Tensor<T>>& videos, std::vector<std::size_t>& offsets,
                       std::vector<std::size_t>& counts) {
  std::vector<Tensor<T>> blocks;
  offsets.clear();
  counts.clear();
  for (const auto& v : videos) {
    auto chunks = chunk(v);
    offsets.push_back(blocks.size());
    counts.push_back(chunks.size());
    for (auto& c : chunks) blocks.push_back(std::move(c));
  }
  return stack(blocks);
}

}  // namespace model_detail

/// Baseline 3D-CNN on a batch of 32-frame clips [N x C x 32 x S x S] -> [N x classes].
template <typename T>
Var forward_baseline_cnn(Tape<T>& tape, const ModelParams<T>& model, const Tensor<T>& clips,
                         Mode mode, StatUpdates<T>* updates = nullptr) {
  const auto& s = model.spec;
  if (s.family != Family::baseline_cnn3d) throw std::invalid_argument("model is not a baseline_cnn3d");
  require_shape(clips.rank() == 5 && clips.dim(1) == s.input_channels() &&
                    clips.dim(2) == kClipFrames && clips.dim(3) == s.frame_size &&
                    clips.dim(4) == s.frame_size,
                "forward_baseline_cnn: expected N x " + std::to_string(s.input_channels()) +
                    " x 32 x " + std::to_string(s.frame_size) + " x " +
                    std::to_string(s.frame_size) + ", got " + shape_string(clips.shape()));
  using model_detail::param;
  Var x = model_detail::encoder(tape, model, tape.constant(clips), mode, updates);
  x = ops::relu(tape, ops::linear(tape, x, param(tape, model, "fc1.weight"),
                                  param(tape, model, "fc1.bias")));
  return ops::linear(tape, x, param(tape, model, "fc2.weight"), param(tape, model, "fc2.bias"));
}

/// Baseline LSTM: each 4-frame block is flattened and projected to the
/// feature width with ReLU, then fed to the LSTM.
template <typename T>
Var forward_baseline_lstm(Tape<T>& tape, const ModelParams<T>& model,
                          const std::vector<Tensor<T>>& videos) {
  if (model.spec.family != Family::baseline_lstm) {
    throw std::invalid_argument("model is not a baseline_lstm");
  }
  model_detail::check_videos(model, videos);
  std::vector<std::size_t> offsets, counts;
  Tensor<T> blocks = model_detail::stack_blocks(videos, offsets, counts);
  const std::size_t n = blocks.dim(0);
  blocks.reshape(Shape{n, blocks.size() / n});
  using model_detail::param;
  Var features = ops::relu(tape, ops::linear(tape, tape.constant(std::move(blocks)),
                                             param(tape, model, "in_fc.weight"),
                                             param(tape, model, "in_fc.bias")));
  return model_detail::recurrent_head(tape, model, features, offsets, counts);
}

/// Joint model: the conv encoder maps each 4-frame block to a feature vector
/// and the LSTM aggregates the block sequence.
template <typename T>
Var forward_joint(Tape<T>& tape, const ModelParams<T>& model, const std::vector<Tensor<T>>& videos,
                  Mode mode, StatUpdates<T>* updates = nullptr) {
  if (model.spec.family != Family::joint) throw std::invalid_argument("model is not a joint model");
  model_detail::check_videos(model, videos);
  std::vector<std::size_t> offsets, counts;
  Var blocks = tape.constant(model_detail::stack_blocks(videos, offsets, counts));
  using model_detail::param;
  Var x = model_detail::encoder(tape, model, blocks, mode, updates);
  Var features = ops::relu(tape, ops::linear(tape, x, param(tape, model, "enc_fc.weight"),
                                             param(tape, model, "enc_fc.bias")));
  return model_detail::recurrent_head(tape, model, features, offsets, counts);
}

/// Family dispatch over variable-length videos [C x T x S x S]; the clip CNN
/// sees the central 32-frame window of each video.
template <typename T>
Var forward(Tape<T>& tape, const ModelParams<T>& model, const std::vector<Tensor<T>>& videos,
            Mode mode, StatUpdates<T>* updates = nullptr) {
  switch (model.spec.family) {
    case Family::baseline_cnn3d: {
      model_detail::check_videos(model, videos);
      std::vector<Tensor<T>> clips;
      clips.reserve(videos.size());
      for (const auto& v : videos) clips.push_back(center_window(v));
      return forward_baseline_cnn(tape, model, stack(clips), mode, updates);
    }
    case Family::baseline_lstm:
      return forward_baseline_lstm(tape, model, videos);
    case Family::joint:
      return forward_joint(tape, model, videos, mode, updates);
  }
  throw std::logic_error("unreachable");
}

/// Eval-mode logits [B x classes] without recording gradients.
template <typename T>
Tensor<T> infer_logits(const ModelParams<T>& model, const std::vector<Tensor<T>>& videos) {
  Tape<T> tape(false);
  Var out = forward(tape, model, videos, Mode::eval);
  return tape.value(out);
}

}  // namespace gkd
