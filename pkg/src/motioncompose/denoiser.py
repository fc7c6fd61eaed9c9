"""Bidirectional transformer denoiser with per-frame conditioning.

The network projects noisy poses into an embedding stream, optionally adds a
sinusoidal absolute encoding (segment-local positions), and runs a stack of
pre-norm attention blocks followed by a projection back to pose space. The
conditioning scheme is selectable:

* ``pccat`` -- queries are a dense fusion of pose and condition+timestep;
  keys and values are projections of the poses alone, so the key/value space
  never mixes with the condition.
* ``sat`` -- pose and condition are fused first and queries, keys, and
  values are all projections of the fused embedding.
* ``cat`` -- a cross-attention sublayer reads per-frame condition tokens,
  followed by plain self-attention over poses.

Attention masks depend on the positional-encoding mode: block-diagonal over
segments when absolute, a symmetric band of width ``horizon`` when relative.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from motioncompose import pe
from motioncompose import tensor as T
from motioncompose.motion import CompositionSpec
from motioncompose.pe import PEMode

CHECKPOINT_MAGIC = b"MCDNSR01"
CHECKPOINT_VERSION = 1

MASK_BIAS = -1e30  # additive score for disallowed pairs; keeps rows normalised

CONDITIONING_SCHEMES = ("pccat", "sat", "cat")


@dataclass(frozen=True)
class DenoiserConfig:
    pose_dim: int
    vocab: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    horizon: int = 40
    conditioning: str = "pccat"
    dropout: float = 0.1
    ffn_mult: int = 2
    train_max_len: int | None = None

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_SCHEMES:
            raise ValueError(
                f"conditioning must be one of {CONDITIONING_SCHEMES}, got {self.conditioning!r}"
            )
        for name in ("pose_dim", "vocab", "d_model", "n_layers", "n_heads", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        # Rotary rotation acts on adjacent coordinate pairs inside each head.
        if self.d_model % (2 * self.n_heads) != 0:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by 2*n_heads={2 * self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def null_condition(self) -> int:
        """Reserved embedding row for classifier-free guidance."""
        return self.vocab


def horizon_band(n: int, horizon: int) -> np.ndarray:
    """Band predicate: frames i, j may attend iff ``|i - j| <= horizon - 1``.

    The exact boundary convention lives in this one function.
    """
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= horizon - 1


def build_mask(spec: CompositionSpec, mode: PEMode, horizon: int) -> np.ndarray:
    """Boolean attention mask for a composition under the given PE mode.

    Absolute mode confines attention to each segment (block diagonal);
    relative mode allows any pair within the horizon band, crossing segment
    boundaries.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    n = spec.total_frames
    if mode is PEMode.RELATIVE:
        return horizon_band(n, horizon)
    mask = np.zeros((n, n), dtype=bool)
    start = 0
    for _, length in spec.segments:
        mask[start : start + length, start : start + length] = True
        start += length
    return mask


def mask_to_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, MASK_BIAS)


def positions_for(spec: CompositionSpec, mode: PEMode) -> np.ndarray:
    """Absolute positions restart at 0 per segment; relative ones are global."""
    if mode is PEMode.ABSOLUTE:
        return spec.segment_local_positions()
    return np.arange(spec.total_frames)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Denoiser:
    """Clean-pose estimator: maps (x_t, t, conditions) to an x0 prediction."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        d, dp = config.d_model, config.pose_dim
        add = self._add_param

        add("in_proj.w", _glorot(rng, dp, d))
        add("in_proj.b", np.zeros(d))
        add("cond_emb", rng.normal(0.0, 0.02, size=(config.vocab + 1, d)))
        add("time.fc1.w", _glorot(rng, d, d))
        add("time.fc1.b", np.zeros(d))
        add("time.fc2.w", _glorot(rng, d, d))
        add("time.fc2.b", np.zeros(d))

        for i in range(config.n_layers):
            p = f"layers.{i}."
            add(p + "norm1.g", np.ones(d))
            add(p + "norm1.b", np.zeros(d))
            if config.conditioning == "pccat":
                add(p + "q.w", _glorot(rng, 2 * d, d))
                add(p + "q.b", np.zeros(d))
                add(p + "k.w", _glorot(rng, d, d))
                add(p + "v.w", _glorot(rng, d, d))
            elif config.conditioning == "sat":
                add(p + "fuse.w", _glorot(rng, 2 * d, d))
                add(p + "fuse.b", np.zeros(d))
                add(p + "q.w", _glorot(rng, d, d))
                add(p + "k.w", _glorot(rng, d, d))
                add(p + "v.w", _glorot(rng, d, d))
            else:  # cat
                add(p + "xq.w", _glorot(rng, d, d))
                add(p + "xk.w", _glorot(rng, d, d))
                add(p + "xv.w", _glorot(rng, d, d))
                add(p + "xout.w", _glorot(rng, d, d))
                add(p + "xout.b", np.zeros(d))
                add(p + "norm_sa.g", np.ones(d))
                add(p + "norm_sa.b", np.zeros(d))
                add(p + "q.w", _glorot(rng, d, d))
                add(p + "k.w", _glorot(rng, d, d))
                add(p + "v.w", _glorot(rng, d, d))
            add(p + "out.w", _glorot(rng, d, d))
            add(p + "out.b", np.zeros(d))
            f = config.ffn_mult * d
            add(p + "norm2.g", np.ones(d))
            add(p + "norm2.b", np.zeros(d))
            add(p + "ffn1.w", _glorot(rng, d, f))
            add(p + "ffn1.b", np.zeros(f))
            add(p + "ffn2.w", _glorot(rng, f, d))
            add(p + "ffn2.b", np.zeros(d))

        add("out_proj.w", _glorot(rng, d, dp))
        add("out_proj.b", np.zeros(dp))

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(np.asarray(value, dtype=np.float64), name=name)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- embedding helpers -------------------------------------------------

    def _timestep_embedding(self, t: int) -> T.Tensor:
        p = self.params
        raw = T.constant(pe.sinusoidal_ape([t], self.config.d_model))
        h = T.gelu(T.matmul(raw, p["time.fc1.w"]) + p["time.fc1.b"])
        return T.matmul(h, p["time.fc2.w"]) + p["time.fc2.b"]

    def _condition_tokens(self, cond_ids: np.ndarray, t: int) -> T.Tensor:
        """Per-frame condition embedding plus the timestep embedding."""
        onehot = np.zeros((cond_ids.size, self.config.vocab + 1))
        onehot[np.arange(cond_ids.size), cond_ids] = 1.0
        cond = T.matmul(T.constant(onehot), self.params["cond_emb"])
        return cond + self._timestep_embedding(t)

    # -- attention ----------------------------------------------------------

    def _split_heads(self, x: T.Tensor) -> T.Tensor:
        n = x.shape[0]
        h, dh = self.config.n_heads, self.config.head_dim
        return T.transpose(T.reshape(x, (n, h, dh)), (1, 0, 2))

    def _merge_heads(self, x: T.Tensor) -> T.Tensor:
        h, n, dh = x.shape
        return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))

    def _attend(self, q, k, v, mask_bias, rope_cs, probe, probe_key):
        """Masked multi-head attention; rotary rotation when tables given."""
        qh, kh, vh = map(self._split_heads, (q, k, v))
        if rope_cs is not None:
            cos, sin = rope_cs
            qh = pe.apply_rope(qh, cos, sin)
            kh = pe.apply_rope(kh, cos, sin)
        scale = 1.0 / np.sqrt(self.config.head_dim)
        scores = T.matmul(qh, T.transpose(kh, (0, 2, 1))) * scale
        weights = T.softmax(scores + T.constant(mask_bias))
        if probe is not None:
            probe.setdefault("attention", []).append(weights.data.copy())
            probe.setdefault(probe_key, []).append(k.data.copy())
        return self._merge_heads(T.matmul(weights, vh))

    def _block(self, i, stream, cond_tok, mask_bias, rope_cs, probe):
        p, cfg = self.params, self.config
        prefix = f"layers.{i}."
        h = T.layer_norm(stream) * p[prefix + "norm1.g"] + p[prefix + "norm1.b"]

        if cfg.conditioning == "pccat":
            q = T.matmul(T.concat([h, cond_tok], axis=1), p[prefix + "q.w"]) + p[prefix + "q.b"]
            k = T.matmul(h, p[prefix + "k.w"])
            v = T.matmul(h, p[prefix + "v.w"])
            ctx = self._attend(q, k, v, mask_bias, rope_cs, probe, "keys")
        elif cfg.conditioning == "sat":
            fused = T.matmul(T.concat([h, cond_tok], axis=1), p[prefix + "fuse.w"]) + p[prefix + "fuse.b"]
            q = T.matmul(fused, p[prefix + "q.w"])
            k = T.matmul(fused, p[prefix + "k.w"])
            v = T.matmul(fused, p[prefix + "v.w"])
            ctx = self._attend(q, k, v, mask_bias, rope_cs, probe, "keys")
        else:  # cat: cross-attention over condition tokens, then self-attention
            q = T.matmul(h, p[prefix + "xq.w"])
            kc = T.matmul(cond_tok, p[prefix + "xk.w"])
            vc = T.matmul(cond_tok, p[prefix + "xv.w"])
            cross = self._attend(q, kc, vc, mask_bias, rope_cs, probe, "cond_keys")
            stream = stream + (T.matmul(cross, p[prefix + "xout.w"]) + p[prefix + "xout.b"])
            h = T.layer_norm(stream) * p[prefix + "norm_sa.g"] + p[prefix + "norm_sa.b"]
            q = T.matmul(h, p[prefix + "q.w"])
            k = T.matmul(h, p[prefix + "k.w"])
            v = T.matmul(h, p[prefix + "v.w"])
            ctx = self._attend(q, k, v, mask_bias, rope_cs, probe, "keys")

        ctx = T.matmul(ctx, p[prefix + "out.w"]) + p[prefix + "out.b"]
        stream = stream + ctx

        h2 = T.layer_norm(stream) * p[prefix + "norm2.g"] + p[prefix + "norm2.b"]
        inner = T.gelu(T.matmul(h2, p[prefix + "ffn1.w"]) + p[prefix + "ffn1.b"])
        return stream + (T.matmul(inner, p[prefix + "ffn2.w"]) + p[prefix + "ffn2.b"])

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        x_t,
        t: int,
        cond_ids: np.ndarray | None,
        mode: PEMode,
        positions: np.ndarray,
        mask_bias: np.ndarray,
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
        probe: dict | None = None,
        rope_offset: int = 0,
    ) -> T.Tensor:
        """Differentiable clean-pose estimate for one sequence.

        ``x_t`` may be a Tensor (training) or array (sampling). ``cond_ids``
        of None selects the reserved null condition everywhere.
        """
        cfg, p = self.config, self.params
        x = x_t if isinstance(x_t, T.Tensor) else T.constant(x_t)
        n = x.shape[0]
        if train and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        if cond_ids is None:
            cond_ids = np.full(n, cfg.null_condition)
        cond_ids = np.asarray(cond_ids, dtype=np.int64)
        if cond_ids.shape != (n,):
            raise T.ShapeError(
                f"condition ids shape {cond_ids.shape} does not match {n} frames"
            )
        if mask_bias.shape != (n, n):
            raise T.ShapeError(
                f"mask shape {mask_bias.shape} does not match sequence length {n}"
            )

        stream = T.matmul(x, p["in_proj.w"]) + p["in_proj.b"]
        ape = None
        if mode is PEMode.ABSOLUTE:
            ape = T.constant(pe.sinusoidal_ape(positions, cfg.d_model))
            if train and cfg.dropout > 0:
                ape = T.dropout(ape, cfg.dropout, rng)
            stream = stream + ape

        cond_tok = self._condition_tokens(cond_ids, t)
        if mode is PEMode.ABSOLUTE and ape is not None and cfg.conditioning == "cat":
            cond_tok = cond_tok + ape

        rope_cs = None
        if mode is PEMode.RELATIVE:
            rope_cs = pe.rope_tables(positions + rope_offset, cfg.head_dim)

        if train and cfg.dropout > 0:
            stream = T.dropout(stream, cfg.dropout, rng)

        for i in range(cfg.n_layers):
            stream = self._block(i, stream, cond_tok, mask_bias, rope_cs, probe)

        return T.matmul(stream, p["out_proj.w"]) + p["out_proj.b"]

    def denoise(
        self,
        x_t: np.ndarray,
        t: int,
        spec: CompositionSpec,
        mode: PEMode,
        *,
        cfg_null: bool = False,
        probe: dict | None = None,
        rope_offset: int = 0,
    ) -> np.ndarray:
        """Sampling-time clean-pose estimate; deterministic, no dropout."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[0] != spec.total_frames:
            raise T.ShapeError(
                f"motion has {x_t.shape[0]} frames but spec covers {spec.total_frames}"
            )
        cond_ids = None if cfg_null else spec.frame_conditions()
        mask_bias = mask_to_bias(build_mask(spec, mode, self.config.horizon))
        positions = positions_for(spec, mode)
        with T.no_grad():
            out = self.forward(
                x_t,
                t,
                cond_ids,
                mode,
                positions,
                mask_bias,
                probe=probe,
                rope_offset=rope_offset,
            )
        result = out.data
        if not np.all(np.isfinite(result)):
            raise FloatingPointError("denoiser produced non-finite output")
        return result


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Denoiser) -> None:
    """Versioned binary: header (magic, version, config JSON), then raw
    parameter tensors in declaration order as little-endian float64."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    config_blob = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_blob)))
    buf.write(config_blob)
    for param in model.params.values():
        buf.write(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    version, blob_len = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = len(CHECKPOINT_MAGIC) + 8
    config = DenoiserConfig(**json.loads(raw[offset : offset + blob_len]))
    offset += blob_len
    model = Denoiser(config, np.random.default_rng(0))
    for param in model.params.values():
        nbytes = param.size * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError("checkpoint truncated")
        param.data = np.frombuffer(chunk, dtype="<f8").reshape(param.shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError("checkpoint has trailing bytes")
    return model
