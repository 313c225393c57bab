"""Causal Mamba block, bidirectional Bi-Mamba block, and their streaming state.

Both blocks are pre-norm residual units::

    xs, z = split(in_proj(rmsnorm(x)))
    u     = silu(causal_conv(xs))
    y     = selective_scan(u; delta, B, C from u) + D * u
    out   = x + out_proj(y * silu(z))

The Bi-Mamba block runs a second branch (its own conv, projections, A_log and
D) over the reversed sequence, reverses the result back and sums it with the
forward branch before the gate. ``in_proj``, ``out_proj`` and the norm are
shared between directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from streamssm import autograd as ag
from streamssm.autograd import Tensor, make_result
from streamssm.nn import MLP, Linear, Module, RMSNorm, parameter, uniform
from streamssm.ssm import selective_scan


@dataclass
class BlockStreamState:
    """Recurrent memory of one causal block.

    Attributes:
        h: scan state, shape (batch, inner_dim, state_dim).
        conv_tail: the last ``conv_k - 1`` conv inputs, shape
            (batch, conv_k - 1, inner_dim), oldest first.
    """

    h: np.ndarray
    conv_tail: np.ndarray

    @classmethod
    def zeros(cls, batch: int, inner_dim: int, state_dim: int, conv_k: int, dtype=np.float32) -> BlockStreamState:
        return cls(
            np.zeros((batch, inner_dim, state_dim), dtype=dtype),
            np.zeros((batch, conv_k - 1, inner_dim), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv_tail.nbytes

    def copy(self) -> BlockStreamState:
        return BlockStreamState(self.h.copy(), self.conv_tail.copy())


def causal_conv(x: Tensor, weight: Tensor, bias: Tensor, tail: np.ndarray | None = None):
    """Depthwise causal convolution along axis 1.

    Args:
        x: (batch, L, D) inputs.
        weight: (D, k) taps; tap ``k - 1`` multiplies the current position.
        bias: (D,).
        tail: (batch, k - 1, D) inputs preceding ``x``; zeros when ``None``.

    Returns:
        ``(out, new_tail)`` where ``new_tail`` holds the last ``k - 1`` inputs
        of the concatenated stream.
    """
    batch, length, d = x.shape
    k = weight.shape[1]
    if tail is None:
        tail = np.zeros((batch, k - 1, d), dtype=x.dtype)
    xpad = np.concatenate([tail, x.data], axis=1)
    w = weight.data
    out = np.broadcast_to(bias.data, (batch, length, d)).copy()
    for j in range(k):
        out += w[:, j] * xpad[:, j : j + length]

    def backward(g):
        dxpad = np.zeros_like(xpad)
        dw = np.empty_like(w)
        for j in range(k):
            dxpad[:, j : j + length] += g * w[:, j]
            dw[:, j] = (g * xpad[:, j : j + length]).sum(axis=(0, 1))
        return dxpad[:, k - 1 :], dw, g.sum(axis=(0, 1))

    new_tail = xpad[:, xpad.shape[1] - (k - 1) :].copy()
    return make_result(out, (x, weight, bias), backward), new_tail


def _dt_bias(rng: np.random.Generator, inner_dim: int, dt_min: float = 1e-3, dt_max: float = 0.1) -> np.ndarray:
    # softplus^-1 of a log-uniform timestep, so initial delta spans [dt_min, dt_max]
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=inner_dim))
    dt = np.maximum(dt, 1e-4)
    return dt + np.log(-np.expm1(-dt))


class SelectiveBranch(Module):
    """One scan direction: causal conv, input-dependent (delta, B, C), scan, D skip."""

    def __init__(self, inner_dim: int, state_dim: int, conv_k: int, dt_rank: int, rng: np.random.Generator, dtype):
        self.conv_weight = parameter(uniform(rng, (inner_dim, conv_k), 1.0 / math.sqrt(conv_k), dtype))
        self.conv_bias = parameter(uniform(rng, (inner_dim,), 1.0 / math.sqrt(conv_k), dtype))
        self.x_proj = Linear(inner_dim, dt_rank + 2 * state_dim, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(dt_rank, inner_dim, rng, dtype=dtype)
        self.dt_proj.weight.data = uniform(rng, (dt_rank, inner_dim), dt_rank**-0.5, dtype)
        self.dt_proj.bias.data = _dt_bias(rng, inner_dim).astype(dtype)
        a_init = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (inner_dim, 1))
        self.A_log = parameter(np.log(a_init).astype(dtype))
        self.D = parameter(np.ones(inner_dim, dtype=dtype))
        self._dt_rank = dt_rank
        self._state_dim = state_dim

    def __call__(self, xs: Tensor, state: BlockStreamState | None = None) -> tuple[Tensor, BlockStreamState]:
        u, tail = causal_conv(xs, self.conv_weight, self.conv_bias, None if state is None else state.conv_tail)
        u = ag.silu(u)
        dbc = self.x_proj(u)
        r, n = self._dt_rank, self._state_dim
        delta = ag.softplus(self.dt_proj(dbc[..., :r]))
        A = -ag.exp(self.A_log)
        y, h = selective_scan(u, delta, A, dbc[..., r : r + n], dbc[..., r + n :], None if state is None else state.h)
        return y + u * self.D, BlockStreamState(h, tail)


class _BlockBase(Module):
    def __init__(
        self,
        channels: int,
        state_dim: int,
        expand: int,
        conv_k: int,
        dt_rank: int | None,
        rng: np.random.Generator,
        dtype,
    ):
        self.channels = channels
        self.inner_dim = expand * channels
        self.state_dim = state_dim
        self.conv_k = conv_k
        self.dt_rank = math.ceil(channels / 16) if dt_rank is None else dt_rank
        self.norm = RMSNorm(channels, dtype=dtype)
        self.in_proj = Linear(channels, 2 * self.inner_dim, rng, bias=False, dtype=dtype)

    def _check_channels(self, x: Tensor) -> None:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xz = self.in_proj(self.norm(x))
        return xz[..., : self.inner_dim], xz[..., self.inner_dim :]


class MambaBlock(_BlockBase):
    """Causal selective-scan block over a (batch, L, channels) sequence."""

    def __init__(
        self,
        channels: int,
        state_dim: int = 16,
        expand: int = 2,
        conv_k: int = 4,
        dt_rank: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(channels, state_dim, expand, conv_k, dt_rank, rng, dtype)
        self.branch = SelectiveBranch(self.inner_dim, state_dim, conv_k, self.dt_rank, rng, dtype)
        self.out_proj = Linear(self.inner_dim, channels, rng, bias=False, dtype=dtype)

    def init_state(self, batch: int = 1) -> BlockStreamState:
        return BlockStreamState.zeros(batch, self.inner_dim, self.state_dim, self.conv_k, self.dtype)

    def check_state(self, state: BlockStreamState, batch: int) -> None:
        ref = self.init_state(batch)
        if state.h.shape != ref.h.shape or state.conv_tail.shape != ref.conv_tail.shape:
            raise ValueError(
                f"stream state shapes {state.h.shape}/{state.conv_tail.shape} do not match this block "
                f"({ref.h.shape}/{ref.conv_tail.shape}); state and model versions differ"
            )

    def forward(self, x: Tensor, state: BlockStreamState | None = None) -> tuple[Tensor, BlockStreamState]:
        """Run the block over a whole sequence, optionally continuing from ``state``.

        Returns the output sequence and the state after its last position.
        """
        x = ag.as_tensor(x)
        self._check_channels(x)
        if state is not None:
            self.check_state(state, x.shape[0])
        xs, z = self._split(x)
        y, new_state = self.branch(xs, state)
        return x + self.out_proj(y * ag.silu(z)), new_state

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def step(self, token: np.ndarray, state: BlockStreamState) -> tuple[np.ndarray, BlockStreamState]:
        """Advance one position.

        Args:
            token: (batch, channels) or (channels,).
            state: state from :meth:`init_state` or a previous step.

        Returns:
            ``(token_out, next_state)`` with ``token_out`` shaped like ``token``.
        """
        token = np.asarray(token)
        single = token.ndim == 1
        seq = token[None, None] if single else token[:, None]
        with ag.no_grad():
            out, nxt = self.forward(Tensor(seq), state)
        out = out.data[0, 0] if single else out.data[:, 0]
        return out, nxt


class BiMambaBlock(_BlockBase):
    """Bidirectional block: forward and backward scans summed before the gate."""

    def __init__(
        self,
        channels: int,
        state_dim: int = 16,
        expand: int = 2,
        conv_k: int = 4,
        dt_rank: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(channels, state_dim, expand, conv_k, dt_rank, rng, dtype)
        self.forward_branch = SelectiveBranch(self.inner_dim, state_dim, conv_k, self.dt_rank, rng, dtype)
        self.backward_branch = SelectiveBranch(self.inner_dim, state_dim, conv_k, self.dt_rank, rng, dtype)
        self.out_proj = Linear(self.inner_dim, channels, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        self._check_channels(x)
        xs, z = self._split(x)
        y_f, _ = self.forward_branch(xs)
        y_b, _ = self.backward_branch(ag.flip(xs, 1))
        y = y_f + ag.flip(y_b, 1)
        return x + self.out_proj(y * ag.silu(z))


def block_param_count(
    channels: int,
    expand: int = 2,
    state_dim: int = 16,
    conv_k: int = 4,
    dt_rank: int | None = None,
    bidirectional: bool = False,
) -> int:
    """Closed-form trainable parameter count of one block."""
    d = expand * channels
    r = math.ceil(channels / 16) if dt_rank is None else dt_rank
    shared = channels + channels * 2 * d + d * channels  # norm, in_proj, out_proj
    branch = d * conv_k + d + d * (r + 2 * state_dim) + r * d + d + d * state_dim + d
    return shared + (2 if bidirectional else 1) * branch


class MlpHead(MLP):
    """Per-frame head: affine, GELU, affine."""
