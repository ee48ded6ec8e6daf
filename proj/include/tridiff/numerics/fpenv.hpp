#pragma once

namespace tridiff::num {

/// Flushes subnormal floats to zero on the calling thread and on threads it
/// creates afterwards. Long trainings otherwise slow down severalfold once
/// gradients and optimizer moments decay into the subnormal range. No-op on
/// targets without SSE.
void enable_flush_to_zero();

}  // namespace tridiff::num
