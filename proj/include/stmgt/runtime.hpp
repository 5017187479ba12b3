#pragma once

namespace stmgt {

/// Process-wide settings for executables that embed the library: pins BLAS
/// to one thread (results stay bitwise reproducible) and keeps freed memory
/// in the heap instead of returning it to the OS between training steps.
void configure_runtime();

}  // namespace stmgt
