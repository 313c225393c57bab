"""Numpy selective-scan kernel (fallback when the extension is not built).

Layout: x, delta (batch, L, D); A (D, N); B, C (batch, L, N); h0 (batch, D, N).
The recurrence per channel d and state n is

    h_t = exp(delta_t A) h_{t-1} + delta_t phi(delta_t A) B_t x_t,   y_t = <C_t, h_t>

with phi(z) = expm1(z) / z, the exact zero-order-hold input coefficient.
Both exp(z) and phi(z) come from a single expm1 evaluation.
"""

from __future__ import annotations

import numpy as np

SMALL_Z = 1e-6


def zoh_coefficients(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (exp(z), expm1(z)/z) with the removable singularity at 0 patched."""
    em1 = np.expm1(z)
    small = np.abs(z) < SMALL_Z
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = em1 / z
    if small.any():
        zs = z[small]
        phi[small] = 1 + zs * (0.5 + zs / 6)
    return 1 + em1, phi


def selective_scan_fwd(x, delta, A, B, C, h0=None, store_states=False):
    batch, length, d = x.shape
    n = A.shape[1]
    a, phi = zoh_coefficients(delta[..., None] * A)
    u = (delta * x)[..., None] * phi * B[:, :, None, :]
    h = np.zeros((batch, d, n), dtype=x.dtype) if h0 is None else np.array(h0, dtype=x.dtype)
    y = np.empty((batch, length, d), dtype=x.dtype)
    states = np.empty((batch, length, d, n), dtype=x.dtype) if store_states else None
    for t in range(length):
        h = a[:, t] * h + u[:, t]
        y[:, t] = (h @ C[:, t, :, None])[..., 0]
        if store_states:
            states[:, t] = h
    return y, h, states
