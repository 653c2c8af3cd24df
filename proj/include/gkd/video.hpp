#pragma once

// Temporal windowing of [C x T x H x W] videos.

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/tensor.hpp"

namespace gkd {

inline constexpr std::size_t kClipFrames = 32;
inline constexpr std::size_t kChunkFrames = 4;

namespace video_detail {

template <typename T>
void check_video(const Tensor<T>& video, const char* what) {
  require_shape(video.rank() == 4, std::string(what) + ": video must be C x T x H x W, got " +
                                       shape_string(video.shape()));
}

// Copies frames [src_begin, src_begin + count) of `video` into frames starting
// at dst_begin of `out`; both share C, H, W.
template <typename T>
void copy_frames(const Tensor<T>& video, std::size_t src_begin, std::size_t count, Tensor<T>& out,
                 std::size_t dst_begin) {
  const std::size_t channels = video.dim(0);
  const std::size_t frame = video.dim(2) * video.dim(3);
  const std::size_t t_in = video.dim(1);
  const std::size_t t_out = out.dim(1);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = video.ptr() + (c * t_in + src_begin) * frame;
    T* dst = out.ptr() + (c * t_out + dst_begin) * frame;
    std::copy(src, src + count * frame, dst);
  }
}

}  // namespace video_detail

/// Start index and zero-padding of the central `window`-frame crop of a
/// `frames`-long video: longer videos keep the middle frames, shorter ones get
/// floor((window - T) / 2) zero frames before and the remainder after.
struct WindowPlan {
  std::size_t source_begin = 0;
  std::size_t pad_before = 0;
  std::size_t pad_after = 0;
  std::size_t copied = 0;
};

inline WindowPlan plan_center_window(std::size_t frames, std::size_t window = kClipFrames) {
  if (frames == 0) throw std::invalid_argument("center window: empty video");
  WindowPlan plan;
  if (frames >= window) {
    plan.source_begin = (frames - window) / 2;
    plan.copied = window;
  } else {
    plan.pad_before = (window - frames) / 2;
    plan.pad_after = window - frames - plan.pad_before;
    plan.copied = frames;
  }
  return plan;
}

template <typename T>
Tensor<T> center_window(const Tensor<T>& video, std::size_t window = kClipFrames) {
  video_detail::check_video(video, "center_window");
  const WindowPlan plan = plan_center_window(video.dim(1), window);
  Tensor<T> out(Shape{video.dim(0), window, video.dim(2), video.dim(3)}, T{0});
  video_detail::copy_frames(video, plan.source_begin, plan.copied, out, plan.pad_before);
  return out;
}

inline std::size_t chunk_count(std::size_t frames, std::size_t chunk = kChunkFrames) {
  if (frames == 0) throw std::invalid_argument("chunk: empty video");
  return (frames + chunk - 1) / chunk;
}

/// Consecutive non-overlapping blocks; the last block is zero-padded at the end.
template <typename T>
std::vector<Tensor<T>> chunk(const Tensor<T>& video, std::size_t chunk_frames = kChunkFrames) {
  video_detail::check_video(video, "chunk");
  const std::size_t frames = video.dim(1);
  const std::size_t count = chunk_count(frames, chunk_frames);
  std::vector<Tensor<T>> blocks;
  blocks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor<T> block(Shape{video.dim(0), chunk_frames, video.dim(2), video.dim(3)}, T{0});
    const std::size_t begin = i * chunk_frames;
    video_detail::copy_frames(video, begin, std::min(chunk_frames, frames - begin), block, 0);
    blocks.push_back(std::move(block));
  }
  return blocks;
}

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  Shape shape{items.size()};
  const Shape& inner = items.front().shape();
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<T> out(shape);
  const std::size_t n = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    require_shape(items[i].shape() == inner, "stack: shape mismatch " +
                                                 shape_string(items[i].shape()) + " vs " +
                                                 shape_string(inner));
    std::copy(items[i].ptr(), items[i].ptr() + n, out.ptr() + i * n);
  }
  return out;
}

}  // namespace gkd
