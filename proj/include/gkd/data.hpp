#pragma once

// Synthetic gesture videos, input construction, augmentation and the .gkdd
// dataset file.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/binary_io.hpp"
#include "gkd/models.hpp"
#include "gkd/tensor.hpp"
#include "gkd/video.hpp"

namespace gkd {

inline constexpr std::size_t kSynthClasses = 8;
inline constexpr std::array<const char*, kSynthClasses> kMotionNames{
    "up", "down", "left", "right", "clockwise", "counter_clockwise", "expand", "contract"};

/// Frames stored as u8 in [T][C][H][W] order; channel 0 is grayscale, 1 depth.
/// Keypoints are one (x, y) pixel position per frame.
struct GestureSample {
  std::uint32_t id = 0;
  std::uint16_t label = 0;
  std::uint8_t channels = 2;
  std::uint8_t height = 64;
  std::uint8_t width = 64;
  std::vector<std::uint8_t> keypoints;
  std::vector<std::uint8_t> pixels;

  std::size_t frames() const { return keypoints.size() / 2; }
  std::size_t frame_pixels() const { return std::size_t{height} * width; }
  std::uint8_t at(std::size_t t, std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[((t * channels + c) * height + y) * width + x];
  }

  friend bool operator==(const GestureSample&, const GestureSample&) = default;
};

struct AugmentConfig {
  bool enabled = false;
  double max_rotation_deg = 10.0;
  double max_shift_px = 4.0;
  double min_zoom = 0.9;
  double max_zoom = 1.1;

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct DatasetManifest {
  std::size_t class_count = kSynthClasses;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  std::uint64_t seed = 0;
  std::size_t frame_size = 64;
  AugmentConfig augmentation;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  return {{"class_count", m.class_count},
          {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
          {"seed", m.seed},
          {"frame_size", m.frame_size},
          {"augmentation",
           {{"enabled", m.augmentation.enabled},
            {"max_rotation_deg", m.augmentation.max_rotation_deg},
            {"max_shift_px", m.augmentation.max_shift_px},
            {"min_zoom", m.augmentation.min_zoom},
            {"max_zoom", m.augmentation.max_zoom}}}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.class_count = j.at("class_count").get<std::size_t>();
  m.train = j.at("splits").at("train").get<std::size_t>();
  m.val = j.at("splits").at("val").get<std::size_t>();
  m.test = j.at("splits").at("test").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.frame_size = j.at("frame_size").get<std::size_t>();
  const auto& a = j.at("augmentation");
  m.augmentation.enabled = a.at("enabled").get<bool>();
  m.augmentation.max_rotation_deg = a.at("max_rotation_deg").get<double>();
  m.augmentation.max_shift_px = a.at("max_shift_px").get<double>();
  m.augmentation.min_zoom = a.at("min_zoom").get<double>();
  m.augmentation.max_zoom = a.at("max_zoom").get<double>();
  return m;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<GestureSample> train;
  std::vector<GestureSample> val;
  std::vector<GestureSample> test;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Generator

namespace data_detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace data_detail

/// Independent stream for one (seed, key...) combination.
inline std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  using data_detail::splitmix64;
  return std::mt19937_64(splitmix64(seed ^ splitmix64(a ^ splitmix64(b + 0x5bd1e995ULL))));
}

/// Renders sample `id` (label id mod 8). Depends only on (seed, id, frame_size).
inline GestureSample synth_sample(std::uint64_t seed, std::uint32_t id, std::size_t frame_size = 64) {
  if (frame_size < 8 || frame_size > 255) throw std::invalid_argument("frame_size must be in [8, 255]");
  auto rng = keyed_rng(seed, id);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double s = static_cast<double>(frame_size);
  const double k = s / 64.0;

  GestureSample g;
  g.id = id;
  g.label = static_cast<std::uint16_t>(id % kSynthClasses);
  g.height = g.width = static_cast<std::uint8_t>(frame_size);
  const std::size_t frames = std::uniform_int_distribution<std::size_t>(16, 48)(rng);

  const double sigma0 = uniform(3.0, 4.5) * k;
  const double amplitude = uniform(0.75, 1.0);
  const double cx0 = uniform(0.35, 0.65) * s, cy0 = uniform(0.35, 0.65) * s;
  const double speed = uniform(0.8, 1.2);
  const double phase = uniform(-0.1, 0.1);
  const double travel = uniform(0.35, 0.5) * s;
  const double radius = uniform(0.15, 0.22) * s;
  const double angle0 = uniform(0.0, 2.0 * std::numbers::pi);
  const double drift_x = uniform(-0.05, 0.05) * s, drift_y = uniform(-0.05, 0.05) * s;

  g.keypoints.resize(frames * 2);
  g.pixels.resize(frames * 2 * frame_size * frame_size);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (std::size_t t = 0; t < frames; ++t) {
    const double u = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
    const double p = phase + speed * u;
    double cx = cx0 + drift_x * u, cy = cy0 + drift_y * u, sigma = sigma0;
    switch (g.label) {
      case 0: cy = cy0 - (p - 0.5) * travel; break;
      case 1: cy = cy0 + (p - 0.5) * travel; break;
      case 2: cx = cx0 - (p - 0.5) * travel; break;
      case 3: cx = cx0 + (p - 0.5) * travel; break;
      case 4:
      case 5: {
        // y grows downwards, so increasing angle turns clockwise on screen.
        const double angle = angle0 + (g.label == 4 ? 1.0 : -1.0) * 1.8 * std::numbers::pi * p;
        cx = cx0 + radius * std::cos(angle);
        cy = cy0 + radius * std::sin(angle);
        break;
      }
      case 6: sigma = sigma0 * (1.0 + 1.2 * p); break;
      case 7: sigma = sigma0 * (2.2 - 1.2 * p); break;
    }
    cx = std::clamp(cx, 2.0, s - 3.0);
    cy = std::clamp(cy, 2.0, s - 3.0);
    sigma = std::max(sigma, 1.0 * k);
    // Nearer (larger) blobs read darker in the depth channel.
    const double depth = std::clamp(1.15 - 0.12 * sigma / k, 0.2, 1.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    g.keypoints[2 * t] = static_cast<std::uint8_t>(std::lround(cx));
    g.keypoints[2 * t + 1] = static_cast<std::uint8_t>(std::lround(cy));
    std::uint8_t* gray = g.pixels.data() + (t * 2) * frame_size * frame_size;
    std::uint8_t* dep = gray + frame_size * frame_size;
    for (std::size_t y = 0; y < frame_size; ++y) {
      for (std::size_t x = 0; x < frame_size; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double blob = std::exp(-(dx * dx + dy * dy) * inv);
        gray[y * frame_size + x] = data_detail::to_u8(amplitude * blob + noise(rng));
        dep[y * frame_size + x] = data_detail::to_u8(depth * blob + noise(rng));
      }
    }
  }
  return g;
}

/// Splits in order train, val, test with consecutive ids starting at 0, so
/// each split's labels are balanced within +-1.
inline Dataset synth_generate(const DatasetManifest& manifest) {
  if (manifest.class_count != kSynthClasses) {
    throw std::invalid_argument("the synthetic generator has exactly 8 motion classes");
  }
  if (manifest.train < 1 || manifest.val < 1 || manifest.test < 1) {
    throw std::invalid_argument("every split needs at least one sample");
  }
  Dataset d{manifest, {}, {}, {}};
  std::uint32_t id = 0;
  for (auto [split, count] : {std::pair{&d.train, manifest.train}, std::pair{&d.val, manifest.val},
                              std::pair{&d.test, manifest.test}}) {
    split->reserve(count);
    for (std::size_t i = 0; i < count; ++i) split->push_back(synth_sample(manifest.seed, id++, manifest.frame_size));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Inputs

/// Float video [C x T x H x W] in [0, 1].
inline Tensor<float> to_video(const GestureSample& s) {
  const std::size_t t_count = s.frames(), c = s.channels, hw = s.frame_pixels();
  Tensor<float> v(Shape{c, t_count, s.height, s.width});
  for (std::size_t t = 0; t < t_count; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::uint8_t* src = s.pixels.data() + (t * c + ch) * hw;
      float* dst = v.ptr() + (ch * t_count + t) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(src[i]) / 255.0f;
    }
  return v;
}

template <typename T>
Tensor<T> center_window_32(const Tensor<T>& video) {
  return center_window(video, kClipFrames);
}

template <typename T>
std::vector<Tensor<T>> chunk4(const Tensor<T>& video) {
  return chunk(video, kChunkFrames);
}

namespace data_detail {

// Bilinear sample of a single-channel plane with zero outside the plane.
inline double sample_zero(const float* plane, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ay = y - fy, ax = x - fx;
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  double acc = 0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const double wgt = (dy ? ay : 1 - ay) * (dx ? ax : 1 - ax);
      if (wgt == 0) continue;
      const long yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
      acc += wgt * plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
    }
  }
  return acc;
}

}  // namespace data_detail

/// side/2 x side/2 window centred on each frame's keypoint (shifted to stay
/// inside the frame), bilinearly resized back to side x side.
inline Tensor<float> hand_crop(const GestureSample& s) {
  if (s.keypoints.size() != 2 * s.frames() || s.keypoints.empty()) {
    throw std::invalid_argument("hand input needs one keypoint per frame");
  }
  const Tensor<float> body = to_video(s);
  const std::size_t h = s.height, w = s.width, ch = s.channels, tc = s.frames();
  const std::size_t crop_h = h / 2, crop_w = w / 2;
  Tensor<float> out(body.shape());
  for (std::size_t t = 0; t < tc; ++t) {
    const long kx = s.keypoints[2 * t], ky = s.keypoints[2 * t + 1];
    const double x0 = static_cast<double>(std::clamp<long>(kx - static_cast<long>(crop_w / 2), 0, static_cast<long>(w - crop_w)));
    const double y0 = static_cast<double>(std::clamp<long>(ky - static_cast<long>(crop_h / 2), 0, static_cast<long>(h - crop_h)));
    const double sy = static_cast<double>(crop_h) / static_cast<double>(h);
    const double sx = static_cast<double>(crop_w) / static_cast<double>(w);
    for (std::size_t c = 0; c < ch; ++c) {
      const float* plane = body.ptr() + (c * tc + t) * h * w;
      float* dst = out.ptr() + (c * tc + t) * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const double src_y = std::clamp(y0 + (static_cast<double>(y) + 0.5) * sy - 0.5, y0, y0 + static_cast<double>(crop_h) - 1);
        for (std::size_t x = 0; x < w; ++x) {
          const double src_x = std::clamp(x0 + (static_cast<double>(x) + 0.5) * sx - 0.5, x0, x0 + static_cast<double>(crop_w) - 1);
          dst[y * w + x] = static_cast<float>(data_detail::sample_zero(plane, h, w, src_y, src_x));
        }
      }
    }
  }
  return out;
}

/// Model input [C x T x H x W]: 2 channels for hand / upper_body, 4 for
/// combined (body gray, body depth, hand gray, hand depth).
inline Tensor<float> make_input(const GestureSample& s, InputMode mode) {
  switch (mode) {
    case InputMode::upper_body: return to_video(s);
    case InputMode::hand: return hand_crop(s);
    case InputMode::combined: {
      const Tensor<float> body = to_video(s), hand = hand_crop(s);
      Shape shape = body.shape();
      shape[0] *= 2;
      Tensor<float> out(shape);
      std::copy(body.ptr(), body.ptr() + body.size(), out.ptr());
      std::copy(hand.ptr(), hand.ptr() + hand.size(), out.ptr() + body.size());
      return out;
    }
  }
  throw std::logic_error("unknown input mode");
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double rotation_deg = 0;
  double shift_x = 0;
  double shift_y = 0;
  double zoom = 1;
};

inline AugmentParams draw_augment(std::mt19937_64& rng, const AugmentConfig& cfg = {}) {
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  AugmentParams p;
  p.rotation_deg = uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  p.shift_x = uniform(-cfg.max_shift_px, cfg.max_shift_px);
  p.shift_y = uniform(-cfg.max_shift_px, cfg.max_shift_px);
  p.zoom = uniform(cfg.min_zoom, cfg.max_zoom);
  return p;
}

/// Rotation and zoom about the frame centre followed by the shift, applied to
/// every frame and channel with bilinear sampling and zero fill.
inline GestureSample apply_augment(const GestureSample& s, const AugmentParams& p) {
  GestureSample out = s;
  const std::size_t h = s.height, w = s.width, planes = s.frames() * s.channels;
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  std::vector<float> plane(h * w);
  for (std::size_t k = 0; k < planes; ++k) {
    const std::uint8_t* src = s.pixels.data() + k * h * w;
    std::transform(src, src + h * w, plane.begin(), [](std::uint8_t v) { return static_cast<float>(v); });
    std::uint8_t* dst = out.pixels.data() + k * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double vx = static_cast<double>(x) - cx - p.shift_x;
        const double vy = static_cast<double>(y) - cy - p.shift_y;
        const double sx = (cos_t * vx + sin_t * vy) / p.zoom + cx;
        const double sy = (-sin_t * vx + cos_t * vy) / p.zoom + cy;
        const double v = data_detail::sample_zero(plane.data(), h, w, sy, sx);
        dst[y * w + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  for (std::size_t t = 0; t < s.frames(); ++t) {
    const double vx = s.keypoints[2 * t] - cx, vy = s.keypoints[2 * t + 1] - cy;
    const double nx = p.zoom * (cos_t * vx - sin_t * vy) + cx + p.shift_x;
    const double ny = p.zoom * (sin_t * vx + cos_t * vy) + cy + p.shift_y;
    out.keypoints[2 * t] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(nx), 0, static_cast<long>(w) - 1));
    out.keypoints[2 * t + 1] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(ny), 0, static_cast<long>(h) - 1));
  }
  return out;
}

inline GestureSample augment(const GestureSample& s, std::mt19937_64& rng, const AugmentConfig& cfg = {}) {
  return apply_augment(s, draw_augment(rng, cfg));
}

// ---------------------------------------------------------------------------
// .gkdd encoding

inline constexpr char kDatasetMagic[4] = {'G', 'K', 'D', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> serialize(const Dataset& d) {
  ByteWriter w;
  w.raw(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  const std::string manifest = to_json(d.manifest).dump();
  w.u32(static_cast<std::uint32_t>(manifest.size()));
  w.text(manifest);
  w.u32(static_cast<std::uint32_t>(d.train.size() + d.val.size() + d.test.size()));
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (const auto& s : *split) {
      w.u32(s.id);
      w.u16(s.label);
      w.u16(static_cast<std::uint16_t>(s.frames()));
      w.u8(s.channels);
      w.u8(s.height);
      w.u8(s.width);
      w.raw(s.keypoints.data(), s.keypoints.size());
      w.raw(s.pixels.data(), s.pixels.size());
    }
  }
  return std::move(w).bytes();
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kDatasetMagic)) {
    throw DecodeError(DecodeErrorKind::bad_magic, "not a .gkdd dataset file");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw DecodeError(DecodeErrorKind::bad_version, "dataset format version " + std::to_string(version));
  }
  Dataset d;
  const std::string manifest = r.text(r.u32());
  try {
    d.manifest = manifest_from_json(nlohmann::json::parse(manifest));
  } catch (const std::exception& e) {
    throw DecodeError(DecodeErrorKind::malformed, std::string("manifest: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  const auto& m = d.manifest;
  if (count != m.train + m.val + m.test) {
    throw DecodeError(DecodeErrorKind::malformed, "sample count disagrees with the manifest splits");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    GestureSample s;
    s.id = r.u32();
    s.label = r.u16();
    const std::uint16_t frames = r.u16();
    s.channels = r.u8();
    s.height = r.u8();
    s.width = r.u8();
    if (frames == 0 || s.channels != 2 || s.height != m.frame_size || s.width != m.frame_size ||
        s.label >= m.class_count) {
      throw DecodeError(DecodeErrorKind::malformed, "sample record " + std::to_string(i));
    }
    const std::size_t pixel_count = std::size_t{frames} * s.channels * s.height * s.width;
    r.need(2 * std::size_t{frames} + pixel_count);
    s.keypoints.resize(2 * std::size_t{frames});
    r.raw(s.keypoints.data(), s.keypoints.size());
    s.pixels.resize(pixel_count);
    r.raw(s.pixels.data(), s.pixels.size());
    auto& split = i < m.train ? d.train : (i < m.train + m.val ? d.val : d.test);
    split.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw DecodeError(DecodeErrorKind::malformed, "trailing bytes");
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  const auto bytes = serialize(d);
  write_file_atomic(path, bytes);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize_dataset(bytes);
}

}  // namespace gkd
