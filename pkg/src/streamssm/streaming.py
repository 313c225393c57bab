"""Frame-at-a-time inference with carried temporal-block state.

A :class:`StreamSession` holds one :class:`~streamssm.blocks.BlockStreamState`
per temporal block and the number of frames consumed. Each step patchifies one
frame, embeds it at its absolute frame index, runs the (stateless, frame-local)
spatial stage and advances every temporal block over the frame's P tokens. Work
per step is therefore independent of how many frames came before.

Snapshot layout (all little-endian)::

    offset  size  field
    0       8     magic b"SSMSESSN"
    8       2     format version (1)
    10      2     float width in bits (32 or 64)
    12      4     number of temporal blocks
    16      32    SHA-256 fingerprint of the model config
    48      8     frame counter (u64)
    56      ...   per block: h (inner_dim x state_dim), then conv tail
                  (conv_k - 1 x inner_dim), row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from streamssm import autograd as ag
from streamssm.autograd import Tensor
from streamssm.backbone import Backbone, TokenGrid
from streamssm.blocks import BlockStreamState

MAGIC = b"SSMSESSN"
VERSION = 1
_HEADER = struct.Struct("<8sHHI")
_COUNTER = struct.Struct("<Q")


class SessionError(ValueError):
    """A session, snapshot, or frame is inconsistent with the model."""


@dataclass
class FrameOutput:
    features: np.ndarray  # (C,)
    logits: np.ndarray  # (head_out_dim,)


@dataclass
class StreamSession:
    model: Backbone
    states: list[BlockStreamState]
    frame_counter: int = 0
    fingerprint: bytes = field(default=b"")

    @property
    def state_nbytes(self) -> int:
        return sum(s.nbytes for s in self.states)


def _require_streamable(model: Backbone) -> None:
    if model.config.temporal != "causal":
        raise SessionError("streaming needs a causal temporal stage")


def session_new(model: Backbone) -> StreamSession:
    """Fresh session: zero states, frame counter 0."""
    _require_streamable(model)
    states = [block.init_state(1) for block in model.temporal]
    return StreamSession(model, states, 0, model.config.fingerprint())


def _as_video(frame: np.ndarray, model: Backbone) -> np.ndarray:
    cfg = model.config
    frame = np.asarray(frame)
    if frame.shape != (cfg.in_chans, cfg.frame_h, cfg.frame_w):
        raise SessionError(f"frame shape {frame.shape} != {(cfg.in_chans, cfg.frame_h, cfg.frame_w)}")
    return frame[None, :, None]


def session_step(session: StreamSession, frame: np.ndarray, per_token: bool = False) -> FrameOutput:
    """Consume one (3, H, W) frame and return that frame's output.

    ``per_token=True`` advances each temporal block with one
    :meth:`MambaBlock.step` call per token instead of one call per frame; both
    are the same recurrence.

    The session is only mutated after the step has fully succeeded.
    """
    model = session.model
    if session.fingerprint != model.config.fingerprint():
        raise SessionError("session was created for a different model configuration")
    video = _as_video(frame, model)
    cfg = model.config
    with ag.no_grad():
        grid = model.spatial_stage(model.tokens_in(video, frame_offset=session.frame_counter))
        x = grid.data.reshape(1, cfg.patches, cfg.channels)
        new_states = []
        for block, state in zip(model.temporal, session.states):
            if per_token:
                tokens = x.data[0]
                outs = []
                for p in range(tokens.shape[0]):
                    y, state = block.step(tokens[p], state)
                    outs.append(y)
                x = Tensor(np.stack(outs)[None])
            else:
                x, state = block.forward(x, state)
            new_states.append(state)
        out = model.readout(TokenGrid(x.reshape(1, 1, cfg.patches, cfg.channels)))
    session.states = new_states
    session.frame_counter += 1
    return FrameOutput(out.features.data[0, 0], out.logits.data[0, 0])


def session_run(session: StreamSession, frames) -> list[FrameOutput]:
    """Step through an iterable of frames (or a (3, T, H, W) clip)."""
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = np.moveaxis(frames, 1, 0)
    return [session_step(session, f) for f in frames]


def _float_dtype(model: Backbone) -> np.dtype:
    return np.dtype(model.config.np_dtype).newbyteorder("<")


def session_save(session: StreamSession) -> bytes:
    dtype = _float_dtype(session.model)
    parts = [
        _HEADER.pack(MAGIC, VERSION, dtype.itemsize * 8, len(session.states)),
        session.fingerprint,
        _COUNTER.pack(session.frame_counter),
    ]
    for state in session.states:
        parts.append(np.ascontiguousarray(state.h[0], dtype=dtype).tobytes())
        parts.append(np.ascontiguousarray(state.conv_tail[0], dtype=dtype).tobytes())
    return b"".join(parts)


def session_load(data: bytes, model: Backbone) -> StreamSession:
    """Rebuild a session for ``model``; raises :class:`SessionError` on any mismatch."""
    _require_streamable(model)
    data = bytes(data)
    if len(data) < _HEADER.size + 32 + _COUNTER.size:
        raise SessionError("snapshot is truncated")
    magic, version, bits, n_blocks = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SessionError("not a session snapshot (bad magic)")
    if version != VERSION:
        raise SessionError(f"unsupported snapshot version {version}")
    dtype = _float_dtype(model)
    if bits != dtype.itemsize * 8:
        raise SessionError(f"snapshot holds {bits}-bit floats, model uses {dtype.itemsize * 8}-bit")
    if n_blocks != len(model.temporal):
        raise SessionError(f"snapshot has {n_blocks} temporal blocks, model has {len(model.temporal)}")
    offset = _HEADER.size
    fingerprint = data[offset : offset + 32]
    if fingerprint != model.config.fingerprint():
        raise SessionError("snapshot was taken with a different model configuration")
    offset += 32
    (counter,) = _COUNTER.unpack_from(data, offset)
    offset += _COUNTER.size
    states = []
    for block in model.temporal:
        ref = block.init_state(1)
        arrays = []
        for shape in (ref.h.shape[1:], ref.conv_tail.shape[1:]):
            count = int(np.prod(shape))
            end = offset + count * dtype.itemsize
            if end > len(data):
                raise SessionError("snapshot is truncated")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
            arrays.append(arr.astype(model.config.np_dtype)[None])
            offset = end
        states.append(BlockStreamState(*arrays))
    if offset != len(data):
        raise SessionError(f"snapshot has {len(data) - offset} trailing bytes")
    return StreamSession(model, states, counter, fingerprint)
