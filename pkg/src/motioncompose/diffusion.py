"""Noise schedules, the forward/reverse diffusion process, and training.

The denoiser predicts the clean sequence directly; each reverse step forms
the usual posterior mean from that estimate:

    mu_t = (sqrt(abar_{t-1}) * beta_t / (1 - abar_t)) * x0_hat
         + (sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)) * x_t

with variance beta_t * (1 - abar_{t-1}) / (1 - abar_t) and no noise at the
final step. Classifier-free guidance extrapolates conditional and
unconditional clean-pose estimates before the posterior is formed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from motioncompose import pe
from motioncompose import tensor as T
from motioncompose.denoiser import Denoiser, build_mask, mask_to_bias, positions_for
from motioncompose.motion import CompositionSpec
from motioncompose.pe import BPESchedule, PEMode, sample_training_mode

BETA_MAX = 0.999


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention coefficients for T diffusion steps.

    ``alpha_bar`` has T + 1 entries with ``alpha_bar[0] == 1``; factory
    functions enforce strict decrease and near-total corruption at step T.
    Hand-built instances (e.g. degenerate test schedules) skip validation.
    """

    kind: str
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.size - 1

    def beta(self, t: int) -> float:
        return 1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]

    def validate(self) -> "NoiseSchedule":
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 0.01:
            raise ValueError(f"alpha_bar[T]={ab[-1]:.4g} must be below 0.01")
        return self


def cosine_schedule(total_steps: int, s: float = 0.008) -> NoiseSchedule:
    """Squared-cosine signal retention; per-step beta clipped to 0.999."""
    if total_steps < 2:
        raise ValueError(f"need at least 2 steps, got {total_steps}")
    t = np.arange(total_steps + 1, dtype=np.float64)
    f = np.cos(((t / total_steps + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind="cosine", alpha_bar=alpha_bar).validate()


def linear_schedule(total_steps: int) -> NoiseSchedule:
    """Linear betas, rescaled so corruption depth matches a 1000-step run."""
    if total_steps < 2:
        raise ValueError(f"need at least 2 steps, got {total_steps}")
    scale = 1000.0 / total_steps
    betas = np.linspace(1e-4 * scale, 0.02 * scale, total_steps)
    betas = np.clip(betas, 0.0, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind="linear", alpha_bar=alpha_bar).validate()


def make_schedule(kind: str, total_steps: int) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(total_steps)
    if kind == "linear":
        return linear_schedule(total_steps)
    raise ValueError(f"unknown schedule kind {kind!r}")


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt a clean sequence to step ``t``."""
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def p_sample_step(
    x_t: np.ndarray,
    t: int,
    x0_hat: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral reverse step from the clean-pose estimate.

    Deterministic at ``t == 1``; otherwise adds posterior-variance noise.
    """
    if not 1 <= t <= sched.total_steps:
        raise ValueError(f"reverse step {t} outside [1, {sched.total_steps}]")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta = 1.0 - ab_t / ab_prev
    alpha = 1.0 - beta
    denom = 1.0 - ab_t
    coef_x0 = np.sqrt(ab_prev) * beta / denom
    coef_xt = np.sqrt(alpha) * (1.0 - ab_prev) / denom
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t == 1:
        return mean
    var = beta * (1.0 - ab_prev) / denom
    return mean + np.sqrt(var) * rng.standard_normal(x_t.shape)


def cfg_combine(x_cond: np.ndarray, x_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided estimate ``x_uncond + w * (x_cond - x_uncond)``.

    ``w == 1`` returns the conditional estimate (guidance off); ``w == 0``
    the unconditional one.
    """
    if w == 1.0:
        return np.array(x_cond, copy=True)
    if w == 0.0:
        return np.array(x_uncond, copy=True)
    return x_uncond + w * (x_cond - x_uncond)


def guided_estimate(
    model: Denoiser,
    x_t: np.ndarray,
    t: int,
    spec: CompositionSpec,
    mode: PEMode,
    cfg_w: float,
    *,
    mask_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Two denoiser calls (conditional + null) combined by guidance."""
    if mask_bias is None:
        mask_bias = mask_to_bias(build_mask(spec, mode, model.config.horizon))
    positions = positions_for(spec, mode)
    with T.no_grad():
        cond = model.forward(
            x_t, t, spec.frame_conditions(), mode, positions, mask_bias
        ).data
        uncond = model.forward(x_t, t, None, mode, positions, mask_bias).data
    out = cfg_combine(cond, uncond, cfg_w)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("denoiser produced non-finite estimate")
    return out


def sample_sequence(
    model: Denoiser,
    sched: NoiseSchedule,
    length: int,
    condition: int,
    bpe: BPESchedule,
    cfg_w: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Plain single-condition ancestral sampler over one reverse chain."""
    spec = CompositionSpec([(condition, length)])
    total = sched.total_steps
    if bpe.total_steps != total:
        raise ValueError("blending schedule and noise schedule disagree on steps")
    x = rng.standard_normal((length, model.config.pose_dim))
    biases = {
        mode: mask_to_bias(build_mask(spec, mode, model.config.horizon))
        for mode in PEMode
    }
    for t in range(total, 0, -1):
        mode = bpe.mode_at(total - t)
        x0_hat = guided_estimate(
            model, x, t, spec, mode, cfg_w, mask_bias=biases[mode]
        )
        x = p_sample_step(x, t, x0_hat, sched, rng)
    return x


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    total_steps: int = 4000
    p_absolute: float = 0.5
    cond_dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.cond_dropout <= 0.5:
            raise ValueError(
                f"condition dropout must lie in (0, 0.5], got {self.cond_dropout}"
            )


class Adam:
    """Standard Adam over an ordered parameter dict."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad_or_zero()
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class Trainer:
    """Reconstruction training against the clean sequence."""

    def __init__(self, model: Denoiser, sched: NoiseSchedule, config: TrainConfig):
        self.model = model
        self.sched = sched
        self.config = config
        self.optimizer = Adam(
            model.params, config.lr, config.beta1, config.beta2, config.eps
        )
        self.last_mode: PEMode | None = None

    def train_step(self, batch, rng: np.random.Generator) -> float:
        """One optimisation step over a batch of (motion, spec) pairs.

        Samples a step index per element, one PE mode per batch, and drops
        conditions to the null row with the guidance-training probability.
        The loss is the mean squared reconstruction error.
        """
        cfg = self.config
        model = self.model
        mode = sample_training_mode(rng, cfg.p_absolute)
        self.last_mode = mode
        self.optimizer.zero_grad()

        losses = []
        for motion, spec in batch:
            x0 = motion.data
            t = int(rng.integers(1, self.sched.total_steps + 1))
            noise = rng.standard_normal(x0.shape)
            x_t = q_sample(x0, t, noise, self.sched)
            cond_ids = spec.frame_conditions()
            if rng.random() < cfg.cond_dropout:
                cond_ids = None
            mask_bias = mask_to_bias(build_mask(spec, mode, model.config.horizon))
            positions = positions_for(spec, mode)
            pred = model.forward(
                x_t, t, cond_ids, mode, positions, mask_bias, train=True, rng=rng
            )
            diff = pred - T.constant(x0)
            losses.append(T.tmean(diff * diff))

        loss = losses[0]
        for element in losses[1:]:
            loss = loss + element
        loss = loss / float(len(losses))
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(
                f"training loss diverged at optimiser step {self.optimizer.step_count}"
            )
        loss.backward()
        self.optimizer.step()
        return value


def train_loop(
    trainer: Trainer,
    sequences,
    steps: int,
    rng: np.random.Generator,
    log_path=None,
    log_every: int = 25,
) -> list[dict]:
    """Run optimisation steps over randomly drawn batches; CSV-friendly log."""
    history = []
    n = len(sequences)
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=trainer.config.batch_size)
        batch = [sequences[i] for i in idx]
        loss = trainer.train_step(batch, rng)
        if step % log_every == 0 or step == 1 or step == steps:
            history.append(
                {
                    "step": step,
                    "loss": loss,
                    "pe_mode": trainer.last_mode.value,
                    "lr": trainer.config.lr,
                }
            )
    if log_path is not None:
        write_training_log(log_path, history)
    return history


def write_training_log(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "pe_mode", "lr"])
        writer.writeheader()
        writer.writerows(history)
