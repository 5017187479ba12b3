#include "stmgt/runtime.hpp"

#include <malloc.h>

#include <cblas.h>

namespace stmgt {

void configure_runtime() {
  openblas_set_num_threads(1);
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
}

}  // namespace stmgt
