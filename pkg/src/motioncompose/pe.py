"""Positional encodings and the per-denoising-step blending policy.

Two encodings coexist: the classic sinusoidal absolute encoding, which is
added to embeddings and carries distance to the sequence start, and the
rotary relative encoding, which rotates queries/keys so attention scores
depend only on index differences. The blending schedule assigns the absolute
encoding to the noisiest denoising steps and the relative one afterwards.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from motioncompose import tensor as T

DEFAULT_BASE = 10000.0


class PEMode(enum.Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


@dataclass(frozen=True)
class BPESchedule:
    """Binary-step policy: ``ape_steps`` absolute steps, relative afterwards.

    Denoising steps are indexed from the noisiest (0) to the cleanest
    (``total_steps - 1``). ``ape_steps == 0`` degenerates to pure-relative
    sampling and ``ape_steps == total_steps`` to pure-absolute.
    """

    total_steps: int
    ape_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.ape_steps <= self.total_steps:
            raise ValueError(
                f"ape_steps must lie in [0, {self.total_steps}], got {self.ape_steps}"
            )

    def mode_at(self, t: int) -> PEMode:
        return bpe_mode_at(self, t)


def bpe_mode_at(schedule: BPESchedule, t: int) -> PEMode:
    """Mode for denoising step ``t`` (0 = noisiest)."""
    if not 0 <= t < schedule.total_steps:
        raise ValueError(
            f"denoising step {t} outside [0, {schedule.total_steps})"
        )
    return PEMode.ABSOLUTE if t < schedule.ape_steps else PEMode.RELATIVE


def sample_training_mode(rng: np.random.Generator, p_absolute: float = 0.5) -> PEMode:
    """Bernoulli draw between the two encodings for one training step."""
    if not 0.0 <= p_absolute <= 1.0:
        raise ValueError(f"p_absolute must lie in [0, 1], got {p_absolute}")
    return PEMode.ABSOLUTE if rng.random() < p_absolute else PEMode.RELATIVE


def sinusoidal_ape(positions, d: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """Sinusoidal absolute encoding, one row per position.

    Column ``2i`` holds ``sin(p / base**(2i/d))`` and column ``2i + 1`` the
    matching cosine.
    """
    if d <= 0 or d % 2 != 0:
        raise ValueError(f"embedding width must be even and positive, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos[:, None] * inv_freq[None, :]
    out = np.empty((pos.size, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def rope_tables(positions, d: int, base: float = DEFAULT_BASE):
    """Cosine/sine tables for rotary rotation at the given positions.

    Adjacent column pairs ``(2i, 2i + 1)`` share the angle
    ``p * base**(-2i/d)``, so the returned arrays can be used elementwise.
    """
    if d <= 0 or d % 2 != 0:
        raise ValueError(f"rotary width must be even and positive, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    return cos, sin


def pair_swap_matrix(d: int) -> np.ndarray:
    """Linear map sending ``(x0, x1, ...)`` to ``(-x1, x0, -x3, x2, ...)``."""
    m = np.zeros((d, d), dtype=np.float64)
    idx = np.arange(0, d, 2)
    m[idx + 1, idx] = -1.0
    m[idx, idx + 1] = 1.0
    return m


def rope_rotate(x, position, base: float = DEFAULT_BASE) -> np.ndarray:
    """Rotate a d-vector (or rows of an N x d array) by its position angle.

    Length-preserving: each adjacent coordinate pair is rotated by
    ``position * base**(-2i/d)``.
    """
    arr = np.asarray(x, dtype=np.float64)
    d = arr.shape[-1]
    single = arr.ndim == 1
    rows = arr.reshape(-1, d)
    positions = np.broadcast_to(np.asarray(position), (rows.shape[0],))
    cos, sin = rope_tables(positions, d, base=base)
    swapped = rows @ pair_swap_matrix(d)
    out = rows * cos + swapped * sin
    return out[0] if single else out.reshape(arr.shape)


def apply_rope(x: T.Tensor, cos: np.ndarray, sin: np.ndarray) -> T.Tensor:
    """Differentiable rotary rotation of the last axis of ``x``.

    ``cos``/``sin`` come from :func:`rope_tables` and broadcast against
    leading axes (e.g. a heads axis).
    """
    d = x.shape[-1]
    swapped = T.matmul(x, T.constant(pair_swap_matrix(d)))
    return T.add(T.mul(x, T.constant(cos)), T.mul(swapped, T.constant(sin)))
