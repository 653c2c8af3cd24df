#pragma once

// Blocked single-threaded matrix multiply with a register-tiled micro-kernel.
//
// Every output element is accumulated in strictly ascending k order through a
// single accumulator, starting from zero (or from the existing C value when
// accumulating), so results are reproducible bit-for-bit for a given build.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace gkd {

enum class Trans : bool { no = false, yes = true };

namespace gemm_detail {

template <typename T>
struct Kernel {
  static constexpr std::size_t lanes = 64 / sizeof(T);
  typedef T vec __attribute__((vector_size(64)));
  static constexpr std::size_t mr = 8;
  static constexpr std::size_t nr = 2 * lanes;
  static constexpr std::size_t kc = 256;
  static constexpr std::size_t mc = 96;
  static constexpr std::size_t nc = 2048;
};

template <typename T>
inline typename Kernel<T>::vec load(const T* p) {
  typename Kernel<T>::vec v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T>
inline void store(T* p, const typename Kernel<T>::vec& v) {
  std::memcpy(p, &v, sizeof(v));
}

// C tile (mr x nr, row stride ldc) op= packed A panel * packed B panel.
template <typename T>
inline void micro_kernel(std::size_t kc, const T* __restrict ap, const T* __restrict bp, T* c,
                         std::size_t ldc, bool zero_init) {
  using K = Kernel<T>;
  using V = typename K::vec;
  constexpr std::size_t L = K::lanes;
  V acc0[K::mr];
  V acc1[K::mr];
  if (zero_init) {
    for (std::size_t r = 0; r < K::mr; ++r) {
      acc0[r] = V{};
      acc1[r] = V{};
    }
  } else {
    for (std::size_t r = 0; r < K::mr; ++r) {
      acc0[r] = load(c + r * ldc);
      acc1[r] = load(c + r * ldc + L);
    }
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const V b0 = load(bp + p * K::nr);
    const V b1 = load(bp + p * K::nr + L);
    const T* a = ap + p * K::mr;
    for (std::size_t r = 0; r < K::mr; ++r) {
      acc0[r] += a[r] * b0;
      acc1[r] += a[r] * b1;
    }
  }
  for (std::size_t r = 0; r < K::mr; ++r) {
    store(c + r * ldc, acc0[r]);
    store(c + r * ldc + L, acc1[r]);
  }
}

template <typename T>
struct Workspace {
  std::vector<T> a;
  std::vector<T> b;
  std::vector<T> tile;
};

template <typename T>
Workspace<T>& workspace() {
  thread_local Workspace<T> ws;
  return ws;
}

}  // namespace gemm_detail

/// C[m x n] = op(A) * op(B), or C += op(A) * op(B) when `accumulate`.
/// op(A) is m x k and op(B) is k x n; leading dimensions refer to the stored
/// (untransposed) row-major layout.
template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  using K = gemm_detail::Kernel<T>;
  constexpr std::size_t MR = K::mr;
  constexpr std::size_t NR = K::nr;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T{0});
    }
    return;
  }

  auto& ws = gemm_detail::workspace<T>();
  const bool ta = trans_a == Trans::yes;
  const bool tb = trans_b == Trans::yes;

  for (std::size_t jc = 0; jc < n; jc += K::nc) {
    const std::size_t nc = std::min(K::nc, n - jc);
    const std::size_t n_panels = (nc + NR - 1) / NR;
    for (std::size_t pc = 0; pc < k; pc += K::kc) {
      const std::size_t kc = std::min(K::kc, k - pc);
      const bool zero_init = pc == 0 && !accumulate;

      ws.b.resize(n_panels * kc * NR);
      for (std::size_t jp = 0; jp < n_panels; ++jp) {
        T* dst = ws.b.data() + jp * kc * NR;
        const std::size_t j0 = jc + jp * NR;
        const std::size_t width = std::min(NR, n - j0);
        if (!tb) {
          for (std::size_t p = 0; p < kc; ++p) {
            T* row = dst + p * NR;
            const T* src = b + (pc + p) * ldb + j0;
            std::copy(src, src + width, row);
            std::fill(row + width, row + NR, T{0});
          }
        } else {
          // Walk each source row contiguously; the panel itself stays in cache.
          if (width < NR) std::fill(dst, dst + kc * NR, T{0});
          for (std::size_t j = 0; j < width; ++j) {
            const T* src = b + (j0 + j) * ldb + pc;
            for (std::size_t p = 0; p < kc; ++p) dst[p * NR + j] = src[p];
          }
        }
      }

      for (std::size_t ic = 0; ic < m; ic += K::mc) {
        const std::size_t mc = std::min(K::mc, m - ic);
        const std::size_t m_panels = (mc + MR - 1) / MR;
        ws.a.resize(m_panels * kc * MR);
        for (std::size_t ip = 0; ip < m_panels; ++ip) {
          T* dst = ws.a.data() + ip * kc * MR;
          const std::size_t i0 = ic + ip * MR;
          const std::size_t height = std::min(MR, m - i0);
          if (!ta) {
            if (height < MR) std::fill(dst, dst + kc * MR, T{0});
            for (std::size_t i = 0; i < height; ++i) {
              const T* src = a + (i0 + i) * lda + pc;
              for (std::size_t p = 0; p < kc; ++p) dst[p * MR + i] = src[p];
            }
          } else {
            for (std::size_t p = 0; p < kc; ++p) {
              T* col = dst + p * MR;
              const T* src = a + (pc + p) * lda + i0;
              std::copy(src, src + height, col);
              std::fill(col + height, col + MR, T{0});
            }
          }
        }

        for (std::size_t jp = 0; jp < n_panels; ++jp) {
          const std::size_t j0 = jc + jp * NR;
          const std::size_t width = std::min(NR, n - j0);
          const T* bp = ws.b.data() + jp * kc * NR;
          for (std::size_t ip = 0; ip < m_panels; ++ip) {
            const std::size_t i0 = ic + ip * MR;
            const std::size_t height = std::min(MR, m - i0);
            const T* ap = ws.a.data() + ip * kc * MR;
            if (height == MR && width == NR) {
              gemm_detail::micro_kernel(kc, ap, bp, c + i0 * ldc + j0, ldc, zero_init);
            } else {
              ws.tile.assign(MR * NR, T{0});
              if (!zero_init) {
                for (std::size_t i = 0; i < height; ++i)
                  std::copy(c + (i0 + i) * ldc + j0, c + (i0 + i) * ldc + j0 + width,
                            ws.tile.data() + i * NR);
              }
              gemm_detail::micro_kernel(kc, ap, bp, ws.tile.data(), NR, zero_init);
              for (std::size_t i = 0; i < height; ++i)
                std::copy(ws.tile.data() + i * NR, ws.tile.data() + i * NR + width,
                          c + (i0 + i) * ldc + j0);
            }
          }
        }
      }
    }
  }
}

}  // namespace gkd
