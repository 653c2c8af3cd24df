#pragma once

// Magnitude pruning, half-precision storage and the .gkdm model file.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "gkd/binary_io.hpp"
#include "gkd/half.hpp"
#include "gkd/models.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

enum class Encoding : std::uint8_t { dense_f32 = 0, dense_f16 = 1, sparse_coo_f32 = 2 };

inline const char* to_string(Encoding e) {
  switch (e) {
    case Encoding::dense_f32: return "dense-f32";
    case Encoding::dense_f16: return "dense-f16";
    case Encoding::sparse_coo_f32: return "sparse-coo-f32";
  }
  return "?";
}

/// Flat-index coordinate storage. Indices are strictly increasing.
struct SparseTensor {
  Shape shape;
  std::vector<std::uint32_t> indices;
  std::vector<float> values;

  /// Keeps the nonzero elements with |v| >= threshold.
  static SparseTensor from_dense(const Tensor<float>& t, double threshold = 0.0) {
    if (t.size() > UINT32_MAX) throw std::length_error("tensor too large for u32 sparse indices");
    SparseTensor s{t.shape(), {}, {}};
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] != 0.0f && std::abs(static_cast<double>(t[i])) >= threshold) {
        s.indices.push_back(static_cast<std::uint32_t>(i));
        s.values.push_back(t[i]);
      }
    }
    return s;
  }

  Tensor<float> to_dense() const {
    Tensor<float> t(shape, 0.0f);
    for (std::size_t k = 0; k < indices.size(); ++k) t[indices[k]] = values[k];
    return t;
  }

  friend bool operator==(const SparseTensor&, const SparseTensor&) = default;
};

/// One tensor as stored on disk. `dense` holds the f32 values for dense-f32,
/// `half` the raw binary16 words for dense-f16, `sparse` the COO entries.
struct StoredTensor {
  std::string name;
  Encoding encoding = Encoding::dense_f32;
  Shape shape;
  std::vector<float> dense;
  std::vector<std::uint16_t> half;
  SparseTensor sparse;

  std::size_t element_count() const { return shape_size(shape); }

  std::size_t payload_bytes() const {
    switch (encoding) {
      case Encoding::dense_f32: return 4 * element_count();
      case Encoding::dense_f16: return 2 * element_count();
      case Encoding::sparse_coo_f32: return 8 + 8 * sparse.indices.size();
    }
    return 0;
  }

  Tensor<float> decode() const {
    switch (encoding) {
      case Encoding::dense_f32: return Tensor<float>(shape, dense);
      case Encoding::dense_f16: {
        std::vector<float> v(half.size());
        std::transform(half.begin(), half.end(), v.begin(), half_to_float);
        return Tensor<float>(shape, std::move(v));
      }
      case Encoding::sparse_coo_f32: return sparse.to_dense();
    }
    throw std::logic_error("unknown encoding");
  }
};

struct CompressedModel {
  ArchSpec spec;
  std::vector<StoredTensor> tensors;  // sorted by name

  std::size_t payload_bytes() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.payload_bytes();
    return n;
  }
  const StoredTensor& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::out_of_range("compressed model has no tensor '" + name + "'");
  }
};

inline CompressedModel compress_dense(const ModelParams<float>& model) {
  CompressedModel out{model.spec, {}};
  for (const auto& [name, t] : model.tensors) {
    StoredTensor s;
    s.name = name;
    s.shape = t.shape();
    s.dense = t.values();
    out.tensors.push_back(std::move(s));
  }
  return out;
}

/// Densified float32 parameters for compute.
inline ModelParams<float> decompress(const CompressedModel& m) {
  ModelParams<float> out{m.spec, {}};
  for (const auto& t : m.tensors) out.tensors.emplace(t.name, t.decode());
  std::vector<std::string> expected;
  for (const auto& slot : tensor_layout(m.spec)) {
    auto it = out.tensors.find(slot.name);
    if (it == out.tensors.end() || it->second.shape() != slot.shape) {
      throw DecodeError(DecodeErrorKind::malformed,
                        "tensor '" + slot.name + "' missing or misshapen for the architecture");
    }
  }
  if (out.tensors.size() != tensor_layout(m.spec).size()) {
    throw DecodeError(DecodeErrorKind::malformed, "unexpected extra tensors for the architecture");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pruning

struct TensorPruneStats {
  std::string name;
  std::size_t elements = 0;
  std::size_t removed = 0;
  bool stored_sparse = false;
};

struct PruneStats {
  std::vector<TensorPruneStats> tensors;
  std::size_t total_elements = 0;
  std::size_t total_removed = 0;
};

struct PruneResult {
  CompressedModel model;
  PruneStats stats;
};

/// Drops learnable elements with |w| < threshold. A tensor is stored sparse
/// only when its COO payload is strictly smaller than the dense one, so a
/// pruned file is never larger; running statistics are never pruned.
inline PruneResult prune(const ModelParams<float>& model, double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("prune threshold must be > 0");
  PruneResult r{compress_dense(model), {}};
  for (auto& s : r.model.tensors) {
    if (is_buffer_name(s.name)) continue;
    const Tensor<float>& t = model.at(s.name);
    SparseTensor sparse = SparseTensor::from_dense(t, threshold);
    std::size_t removed = 0;
    for (float v : t.data()) removed += std::abs(static_cast<double>(v)) < threshold;
    TensorPruneStats ts{s.name, t.size(), removed, false};
    if (8 + 8 * (ts.elements - ts.removed) < 4 * ts.elements) {
      s.encoding = Encoding::sparse_coo_f32;
      s.sparse = std::move(sparse);
      s.dense.clear();
      ts.stored_sparse = true;
    } else {
      for (float& v : s.dense)
        if (std::abs(static_cast<double>(v)) < threshold) v = 0.0f;
    }
    r.stats.total_elements += ts.elements;
    r.stats.total_removed += ts.removed;
    r.stats.tensors.push_back(std::move(ts));
  }
  return r;
}

struct HalfStats {
  std::size_t converted = 0;
  std::size_t clamped = 0;  // magnitudes beyond the binary16 range
};

/// Re-encodes every dense-f32 tensor as dense-f16; sparse tensors keep f32 values.
inline CompressedModel to_half(CompressedModel m, HalfStats* stats = nullptr) {
  HalfStats local;
  for (auto& t : m.tensors) {
    if (t.encoding != Encoding::dense_f32) continue;
    t.half.resize(t.dense.size());
    for (std::size_t i = 0; i < t.dense.size(); ++i) {
      bool clamped = false;
      t.half[i] = float_to_half(t.dense[i], &clamped);
      local.clamped += clamped;
    }
    local.converted += t.dense.size();
    t.dense.clear();
    t.encoding = Encoding::dense_f16;
  }
  if (stats) *stats = local;
  return m;
}

// ---------------------------------------------------------------------------
// .gkdm encoding

inline constexpr char kModelMagic[4] = {'G', 'K', 'D', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

inline std::vector<std::uint8_t> serialize(const CompressedModel& m) {
  ByteWriter w;
  w.raw(kModelMagic, 4);
  w.u32(kModelVersion);
  const std::string descriptor = to_json(m.spec).dump();
  w.u32(static_cast<std::uint32_t>(descriptor.size()));
  w.text(descriptor);
  std::vector<const StoredTensor*> order;
  for (const auto& t : m.tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->name < b->name; });
  w.u32(static_cast<std::uint32_t>(order.size()));
  for (const StoredTensor* t : order) {
    if (t->name.size() > UINT16_MAX) throw std::length_error("tensor name too long");
    w.u16(static_cast<std::uint16_t>(t->name.size()));
    w.text(t->name);
    w.u8(static_cast<std::uint8_t>(t->encoding));
    w.u8(static_cast<std::uint8_t>(t->shape.size()));
    for (std::size_t d : t->shape) w.u32(static_cast<std::uint32_t>(d));
    switch (t->encoding) {
      case Encoding::dense_f32:
        w.raw(t->dense.data(), 4 * t->dense.size());
        break;
      case Encoding::dense_f16:
        w.raw(t->half.data(), 2 * t->half.size());
        break;
      case Encoding::sparse_coo_f32:
        w.u64(t->sparse.indices.size());
        w.raw(t->sparse.indices.data(), 4 * t->sparse.indices.size());
        w.raw(t->sparse.values.data(), 4 * t->sparse.values.size());
        break;
    }
  }
  return std::move(w).bytes();
}

inline CompressedModel deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kModelMagic)) {
    throw DecodeError(DecodeErrorKind::bad_magic, "not a .gkdm model file");
  }
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw DecodeError(DecodeErrorKind::bad_version, "model format version " + std::to_string(version));
  }
  CompressedModel m;
  const std::string descriptor = r.text(r.u32());
  try {
    m.spec = arch_spec_from_json(nlohmann::json::parse(descriptor));
  } catch (const std::exception& e) {
    throw DecodeError(DecodeErrorKind::malformed, std::string("architecture descriptor: ") + e.what());
  }
  if (descriptor != to_json(m.spec).dump()) {
    throw DecodeError(DecodeErrorKind::malformed, "architecture descriptor is not in canonical form");
  }
  const std::uint32_t count = r.u32();
  std::string previous;
  for (std::uint32_t k = 0; k < count; ++k) {
    StoredTensor t;
    t.name = r.text(r.u16());
    if (k > 0 && t.name <= previous) {
      throw DecodeError(DecodeErrorKind::malformed, "tensor records not in canonical name order");
    }
    previous = t.name;
    const std::uint8_t encoding = r.u8();
    if (encoding > 2) {
      throw DecodeError(DecodeErrorKind::malformed, "unknown encoding " + std::to_string(encoding));
    }
    t.encoding = static_cast<Encoding>(encoding);
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw DecodeError(DecodeErrorKind::malformed, "tensor '" + t.name + "' has rank 0");
    std::uint64_t elements = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0) throw DecodeError(DecodeErrorKind::malformed, "zero dimension in '" + t.name + "'");
      t.shape.push_back(dim);
      elements *= dim;
      if (elements > UINT32_MAX) throw DecodeError(DecodeErrorKind::malformed, "tensor too large");
    }
    switch (t.encoding) {
      case Encoding::dense_f32:
        r.need(4 * elements);
        t.dense.resize(elements);
        r.raw(t.dense.data(), 4 * elements);
        break;
      case Encoding::dense_f16:
        r.need(2 * elements);
        t.half.resize(elements);
        r.raw(t.half.data(), 2 * elements);
        break;
      case Encoding::sparse_coo_f32: {
        const std::uint64_t n = r.u64();
        if (n > elements) {
          throw DecodeError(DecodeErrorKind::malformed, "sparse count exceeds tensor size");
        }
        r.need(8 * n);
        t.sparse.shape = t.shape;
        t.sparse.indices.resize(n);
        t.sparse.values.resize(n);
        r.raw(t.sparse.indices.data(), 4 * n);
        r.raw(t.sparse.values.data(), 4 * n);
        for (std::size_t i = 0; i < n; ++i) {
          if ((i > 0 && t.sparse.indices[i] <= t.sparse.indices[i - 1]) ||
              t.sparse.indices[i] >= elements) {
            throw DecodeError(DecodeErrorKind::non_monotone_indices,
                              "tensor '" + t.name + "' entry " + std::to_string(i));
          }
        }
        break;
      }
    }
    m.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw DecodeError(DecodeErrorKind::malformed,
                      std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const CompressedModel& m) {
  const auto bytes = serialize(m);
  write_file_atomic(path, bytes);
}

inline void save_model(const std::filesystem::path& path, const ModelParams<float>& m) {
  save_model(path, compress_dense(m));
}

inline CompressedModel load_compressed(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize(bytes);
}

inline ModelParams<float> load_model(const std::filesystem::path& path) {
  return decompress(load_compressed(path));
}

// ---------------------------------------------------------------------------
// Sparsity report

struct TensorSparsity {
  std::string name;
  std::size_t elements = 0;
  std::size_t below = 0;
  std::size_t zeros = 0;
  // Histogram of floor(log2|w|) over nonzero elements.
  std::map<int, std::size_t> exponent_histogram;
  double fraction_below() const {
    return elements ? static_cast<double>(below) / static_cast<double>(elements) : 0.0;
  }
};

struct SparsityReport {
  std::vector<TensorSparsity> tensors;
  std::size_t total_elements = 0;
  std::size_t total_below = 0;
  std::size_t dense_file_bytes = 0;
  std::size_t projected_file_bytes = 0;  // after prune() at the same threshold
  double fraction_below() const {
    return total_elements ? static_cast<double>(total_below) / static_cast<double>(total_elements)
                          : 0.0;
  }
};

inline SparsityReport sparsity_report(const ModelParams<float>& model, double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("sparsity threshold must be > 0");
  SparsityReport rep;
  for (const auto& [name, t] : model.tensors) {
    if (is_buffer_name(name)) continue;
    TensorSparsity ts;
    ts.name = name;
    ts.elements = t.size();
    for (float v : t.data()) {
      const double a = std::abs(static_cast<double>(v));
      if (a < threshold) ++ts.below;
      if (a == 0) {
        ++ts.zeros;
      } else {
        ++ts.exponent_histogram[std::ilogb(a)];
      }
    }
    rep.total_elements += ts.elements;
    rep.total_below += ts.below;
    rep.tensors.push_back(std::move(ts));
  }
  rep.dense_file_bytes = serialize(compress_dense(model)).size();
  rep.projected_file_bytes = serialize(prune(model, threshold).model).size();
  return rep;
}

}  // namespace gkd
