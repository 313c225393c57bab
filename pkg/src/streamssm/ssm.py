"""Diagonal state-space core: zero-order-hold discretization and three scans.

Continuous dynamics h' = A h + B x, y = C h are discretized per token with
timestep ``delta``::

    A_bar = exp(delta * A)
    B_bar = (delta A)^-1 (exp(delta A) - 1) * delta B = delta * B * expm1(z) / z,  z = delta A

and evaluated by

* :func:`scan_naive` -- literal per-step loop; the ground-truth oracle,
* :func:`scan_step` -- one step of the same loop body (fold == naive, bitwise),
* :func:`scan_parallel` -- an associative (Hillis-Steele) prefix scan.

:func:`selective_scan` is the differentiable, batched form used by the blocks;
it fuses discretization into the compiled kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from streamssm import kernels
from streamssm.autograd import Tensor, is_grad_enabled, make_result

SMALL_Z = 1e-6


def _check_finite(name: str, arr: np.ndarray) -> None:
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")


@dataclass(frozen=True)
class SsmParams:
    """Per-head diagonal SSM parameters with per-token selectivity.

    Shapes: ``A`` (heads, state_dim); ``B``/``C`` (seq, heads, state_dim);
    ``delta`` (seq, heads).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "delta"):
            _check_finite(name, np.asarray(getattr(self, name)))
        heads, state_dim = self.A.shape
        seq = self.delta.shape[0]
        if self.delta.shape != (seq, heads):
            raise ValueError(f"delta shape {self.delta.shape} != {(seq, heads)}")
        for name in ("B", "C"):
            if getattr(self, name).shape != (seq, heads, state_dim):
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {(seq, heads, state_dim)}")
        if not (self.delta > 0).all():
            raise ValueError("delta must be strictly positive")

    @property
    def seq_len(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    """Discretized transition/input coefficients, shape (seq, heads, state_dim)
    or (heads, state_dim) for a single step."""

    A_bar: np.ndarray
    B_bar: np.ndarray

    def at(self, t: int) -> DiscreteSsm:
        return DiscreteSsm(self.A_bar[t], self.B_bar[t])


@dataclass
class ScanState:
    h: np.ndarray  # (heads, state_dim)

    @classmethod
    def zeros(cls, heads: int, state_dim: int, dtype=np.float64) -> ScanState:
        return cls(np.zeros((heads, state_dim), dtype=dtype))


def zoh_phi(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z, continuous through z = 0."""
    z = np.asarray(z)
    small = np.abs(z) < SMALL_Z
    zs = np.where(small, 1, z)
    return np.where(small, 1 + z * (0.5 + z / 6), np.expm1(zs) / zs)


def discretize(params: SsmParams) -> DiscreteSsm:
    z = params.delta[..., None] * params.A
    return DiscreteSsm(np.exp(z), params.delta[..., None] * params.B * zoh_phi(z))


def _check_scan_shapes(disc: DiscreteSsm, C: np.ndarray, x: np.ndarray, h: np.ndarray) -> None:
    if disc.A_bar.shape != disc.B_bar.shape or disc.A_bar.shape != C.shape:
        raise ValueError(f"A_bar {disc.A_bar.shape}, B_bar {disc.B_bar.shape}, C {C.shape} must agree")
    if x.shape != disc.A_bar.shape[:-1]:
        raise ValueError(f"x shape {x.shape} != {disc.A_bar.shape[:-1]}")
    if h.shape != disc.A_bar.shape[-2:]:
        raise ValueError(f"state shape {h.shape} != {disc.A_bar.shape[-2:]}")


def _step(a, b, c, x, h):
    h = a * h + b * x[:, None]
    return h, (c * h).sum(axis=-1)


def scan_step(disc_t: DiscreteSsm, C_t: np.ndarray, x_t: np.ndarray, h_prev: ScanState):
    """One recurrence step; returns ``(y_t, next_state)``."""
    _check_scan_shapes(disc_t, C_t, x_t, h_prev.h)
    h, y = _step(disc_t.A_bar, disc_t.B_bar, C_t, x_t, h_prev.h)
    return y, ScanState(h)


def scan_naive(disc: DiscreteSsm, C: np.ndarray, x: np.ndarray, h0: ScanState):
    """Per-step loop over the recurrence; returns ``(y, final_state)``."""
    _check_scan_shapes(disc, C, x, h0.h)
    if not np.isfinite(h0.h).all():
        raise ValueError("initial state must be finite")
    h = h0.h
    y = np.empty(x.shape, dtype=np.result_type(disc.A_bar, x, h))
    for t in range(x.shape[0]):
        h, y[t] = _step(disc.A_bar[t], disc.B_bar[t], C[t], x[t], h)
    return y, ScanState(h)


def scan_parallel(disc: DiscreteSsm, C: np.ndarray, x: np.ndarray, h0: ScanState):
    """Associative prefix scan over affine maps h -> a h + b.

    Composing (a1, b1) then (a2, b2) gives (a2 a1, a2 b1 + b2); log2(L)
    doubling sweeps replace the sequential loop.
    """
    _check_scan_shapes(disc, C, x, h0.h)
    if not np.isfinite(h0.h).all():
        raise ValueError("initial state must be finite")
    a = disc.A_bar.copy()
    b = disc.B_bar * x[..., None]
    b[0] = a[0] * h0.h + b[0]
    offset = 1
    length = x.shape[0]
    while offset < length:
        b[offset:] = a[offset:] * b[:-offset] + b[offset:]
        a[offset:] = a[offset:] * a[:-offset]
        offset *= 2
    return (C * b).sum(axis=-1), ScanState(b[-1].copy())


# differentiable batched form ---------------------------------------------------


def _phi_and_derivative(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """phi(z) = expm1(z)/z and phi'(z), both with small-|z| series."""
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1, z)
    em1 = np.expm1(zs)
    phi = np.where(small, 1 + z * (0.5 + z * (1 / 6 + z / 24)), em1 / zs)
    dphi = np.where(
        small,
        0.5 + z * (1 / 3 + z * (1 / 8 + z / 30)),
        (zs * (em1 + 1) - em1) / (zs * zs),
    )
    return phi, dphi


def selective_scan_backward(x, delta, A, B, C, h0, states, dy):
    """Vector-Jacobian products of ``y`` w.r.t. (x, delta, A, B, C).

    Reverse sweep: dh_t = C_t dy_t + a_{t+1} dh_{t+1}; the local partials
    use a = exp(delta A), g = delta phi(delta A) with dg/d(delta) = a and
    dg/dA = delta^2 phi'(delta A).
    """
    z = delta[..., None] * A
    a = np.exp(z)
    phi, dphi = _phi_and_derivative(z)
    g = delta[..., None] * phi
    batch, length, d = x.shape
    h_init = np.zeros_like(states[:, 0]) if h0 is None else h0
    h_prev = np.concatenate([h_init[:, None], states[:, :-1]], axis=1)

    dh_all = np.empty_like(states)
    dh = np.zeros_like(states[:, 0])
    for t in range(length - 1, -1, -1):
        dh = dh + dy[:, t, :, None] * C[:, t, None, :]
        dh_all[:, t] = dh
        dh = a[:, t] * dh

    dC = np.einsum("bldn,bld->bln", states, dy)
    da = dh_all * h_prev
    bx = B[:, :, None, :] * x[..., None]
    dg = dh_all * bx
    gB = g * B[:, :, None, :]
    dx = (dh_all * gB).sum(-1)
    dB = np.einsum("bldn,bld->bln", dh_all * g, x)
    ddelta = (da * a * A + dg * a).sum(-1)
    dA = (da * a * delta[..., None] + dg * (delta * delta)[..., None] * dphi).sum(axis=(0, 1))
    return dx, ddelta, dA, dB, dC


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, h0: np.ndarray | None = None):
    """Batched selective scan ``y_t = <C_t, h_t>`` with per-channel states.

    Shapes: x, delta (batch, L, D); A (D, N); B, C (batch, L, N);
    h0 (batch, D, N) or ``None``. Returns ``(y, h_last)``; ``h_last`` is a
    plain array (streaming state is never differentiated).
    """
    track = is_grad_enabled() and any(t.requires_grad for t in (x, delta, A, B, C))
    y, h_last, states = kernels.selective_scan_fwd(
        x.data, delta.data, A.data, B.data, C.data, h0, store_states=track
    )

    def backward(g):
        return selective_scan_backward(x.data, delta.data, A.data, B.data, C.data, h0, states, g)

    return make_result(y, (x, delta, A, B, C), backward), h_last
