#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace eeg2img {

/// Keeps large activation buffers on the heap instead of fresh mmap pages.
/// Training allocates and frees tens of megabytes per layer per step; with
/// glibc's defaults every such buffer is page-faulted in again. Call once at
/// process start. No-op on other C libraries.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace eeg2img
