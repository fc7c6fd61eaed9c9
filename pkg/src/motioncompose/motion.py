"""Motion sequences, composition specs, and their on-disk formats.

A motion is a frame-major float64 matrix (frames x pose features) with a
frame rate. A composition spec is the ordered list of (condition id,
duration) segments that drives masking, conditioning, and transition
extraction.

Binary motion files carry a fixed header (magic, version, frame/feature
counts, fps) followed by the row-major little-endian float64 payload; an
optional JSON sidecar records provenance (spec, sampler parameters, ledger,
seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MOTION_MAGIC = b"MCMOTN01"
MOTION_VERSION = 1


@dataclass
class Motion:
    """Frame-major pose matrix with its frame rate."""

    data: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"motion must be 2d (frames x features), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("motion contains non-finite values")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CompositionSpec:
    """Ordered (condition_id, length_frames) segments of one composition."""

    segments: tuple[tuple[int, int], ...]

    def __init__(self, segments):
        normalised = tuple((int(c), int(n)) for c, n in segments)
        if not normalised:
            raise ValueError("a composition needs at least one segment")
        for cond, length in normalised:
            if length < 1:
                raise ValueError(f"zero-length segment for condition {cond}")
            if cond < 0:
                raise ValueError(f"negative condition id {cond}")
        object.__setattr__(self, "segments", normalised)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def total_frames(self) -> int:
        return sum(length for _, length in self.segments)

    def boundaries(self) -> list[int]:
        """Interior boundary frame indices (starts of segments 1..k-1)."""
        out, acc = [], 0
        for _, length in self.segments[:-1]:
            acc += length
            out.append(acc)
        return out

    def frame_conditions(self) -> np.ndarray:
        """Condition id per frame."""
        return np.repeat(
            [cond for cond, _ in self.segments],
            [length for _, length in self.segments],
        )

    def segment_local_positions(self) -> np.ndarray:
        """Positions restarting at 0 inside every segment."""
        return np.concatenate(
            [np.arange(length) for _, length in self.segments]
        )

    def min_segment_length(self) -> int:
        return min(length for _, length in self.segments)

    def to_json(self) -> list[list[int]]:
        return [[cond, length] for cond, length in self.segments]

    @classmethod
    def from_json(cls, payload) -> "CompositionSpec":
        return cls([(int(c), int(n)) for c, n in payload])


def save_motion(path, motion: Motion, sidecar: dict | None = None) -> None:
    path = Path(path)
    header = MOTION_MAGIC + struct.pack(
        "<IIId",
        MOTION_VERSION,
        motion.n_frames,
        motion.n_features,
        motion.fps,
    )
    payload = np.ascontiguousarray(motion.data, dtype="<f8").tobytes()
    path.write_bytes(header + payload)
    if sidecar is not None:
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True)
        )


def load_motion(path) -> Motion:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MOTION_MAGIC) + 20 or raw[: len(MOTION_MAGIC)] != MOTION_MAGIC:
        raise ValueError(f"{path} is not a motion file")
    version, n, d, fps = struct.unpack_from("<IIId", raw, len(MOTION_MAGIC))
    if version != MOTION_VERSION:
        raise ValueError(f"unsupported motion file version {version}")
    offset = len(MOTION_MAGIC) + struct.calcsize("<IIId")
    expected = n * d * 8
    if len(raw) - offset != expected:
        raise ValueError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(n, d)
    return Motion(data=data.astype(np.float64), fps=fps)


def load_sidecar(path) -> dict | None:
    sidecar = Path(path).with_suffix(Path(path).suffix + ".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
