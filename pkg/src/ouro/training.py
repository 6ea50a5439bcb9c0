"""Optimization: AdamW with decoupled decay, warmup+cosine schedule,
global-norm clipping, gradient accumulation, and the freezing audit that
keeps every non-trainable tensor untouched."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FreezingViolation, NumericError, TrainingAborted


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    warmup_steps: int = 100
    total_steps: int = 2000
    batch: int = 2
    accum: int = 16
    seq_len: int = 256
    seed: int = 0
    eps_adam: float = 1e-8
    lr_min_ratio: float = 0.1
    log_every: int = 50
    ckpt_every: int = 500

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.total_steps and not (0 < self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"warmup {self.warmup_steps} must lie inside (0, {self.total_steps})")
        for name in ("lr_peak", "clip_norm", "batch", "accum", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must sit in [0, 1), got {self.betas}")

    @property
    def lr_min(self) -> float:
        return self.lr_peak * self.lr_min_ratio


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, cosine decay to lr_min, clamped past the end."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if step >= cfg.total_steps:
        return cfg.lr_min
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. Non-finite gradients are a hard numeric
    failure; the caller attaches the step index.
    """
    total = 0.0
    with np.errstate(over="ignore"):
        for g in grads:
            total += float((g.astype(np.float64) ** 2).sum())
    if not np.isfinite(total):
        raise NumericError("non-finite gradient norm")
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    The constructor audits that no frozen tensor sneaks into the parameter
    list; each step audits that no frozen tensor accumulated a gradient.
    """

    def __init__(self, params: dict[str, T.Tensor], frozen: dict[str, T.Tensor],
                 cfg: TrainConfig):
        overlap = set(params) & set(frozen)
        if overlap:
            raise FreezingViolation(f"frozen tensors in optimizer list: {sorted(overlap)}")
        for name, p in params.items():
            if not p.requires_grad:
                raise FreezingViolation(f"optimizer given non-trainable tensor {name}")
        self.params = dict(params)
        self.frozen = dict(frozen)
        self.cfg = cfg
        self.step_count = 0
        self.moments = {name: (np.zeros_like(p.data, dtype=np.float64),
                               np.zeros_like(p.data, dtype=np.float64))
                        for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def materialize_grads(self) -> list[np.ndarray]:
        """Replace missing grads with zeros; returns the full grad list."""
        out = []
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out

    def step(self, lr: float) -> None:
        for name, t in self.frozen.items():
            if t.grad is not None:
                raise FreezingViolation(f"gradient reached frozen tensor {name}")
        b1, b2 = self.cfg.betas
        wd = self.cfg.weight_decay
        eps = self.cfg.eps_adam
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64)
            m, v = self.moments[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            update = lr * m_hat / (np.sqrt(v_hat) + eps) + lr * wd * p.data.astype(np.float64)
            p.data -= update.astype(p.dtype)


@dataclass
class TrainLog:
    """Per-step rows of (step, lr, loss, grad_norm, wall_ms)."""

    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r[2] for r in self.rows]

    def format_rows(self) -> str:
        return "\n".join(
            f"{s}\t{lr:.6g}\t{loss:.6f}\t{gn:.6f}\t{ms:.1f}" for s, lr, loss, gn, ms in self.rows)


def train_loop(loss_fn, trainables: dict[str, T.Tensor], frozen: dict[str, T.Tensor],
               next_batch, cfg: TrainConfig, on_log=None, on_checkpoint=None) -> TrainLog:
    """Run cfg.total_steps optimizer steps.

    loss_fn(inputs, targets) must build a fresh scalar loss on the active
    tape; next_batch(rng, batch) yields token blocks [B, T+1]. Each step
    accumulates cfg.accum micro-batches (each loss scaled by 1/accum so the
    summed gradient equals the mean), clips, and applies AdamW. A non-finite
    loss or gradient aborts with the failing step; earlier checkpoints are
    left as the last good state.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(trainables, frozen, cfg)
    log = TrainLog()
    for step in range(cfg.total_steps):
        started = time.monotonic()
        lr = lr_at(step + 1, cfg)
        opt.zero_grad()
        loss_value = 0.0
        for _ in range(cfg.accum):
            block = next_batch(rng, cfg.batch)
            inputs, targets = block[:, :-1], block[:, 1:]
            with T.Tape() as tape:
                loss = loss_fn(inputs, targets)
                tape.backward(T.scale(loss, 1.0 / cfg.accum))
            loss_value += loss.item() / cfg.accum
        if not math.isfinite(loss_value):
            raise TrainingAborted(step, f"loss became {loss_value}")
        grads = opt.materialize_grads()
        try:
            norm = clip_global_norm(grads, cfg.clip_norm)
        except NumericError as e:
            raise TrainingAborted(step, str(e)) from e
        opt.step(lr)
        row = (step, lr, loss_value, norm, (time.monotonic() - started) * 1e3)
        log.rows.append(row)
        if on_log is not None and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            on_log(row)
        if on_checkpoint is not None and cfg.ckpt_every > 0 and (step + 1) % cfg.ckpt_every == 0:
            on_checkpoint(step)
    return log


def evaluate_mean_loss(loss_fn, batches: list[np.ndarray]) -> float:
    """Mean loss over fixed token blocks, no tape, no parameter updates."""
    total = 0.0
    for block in batches:
        loss = loss_fn(block[:, :-1], block[:, 1:])
        total += loss.item()
    return total / len(batches)


def digest_tensors(tensors: dict[str, T.Tensor]) -> dict[str, str]:
    """SHA-256 of each tensor's raw bytes, keyed by name."""
    out = {}
    for name in sorted(tensors):
        out[name] = hashlib.sha256(tensors[name].data.tobytes()).hexdigest()
    return out


def grad_check(loss_builder, params: dict[str, T.Tensor], h: float = 1e-5,
               samples: int = 4, seed: int = 0) -> dict[str, float]:
    """Central finite differences vs the tape, per named parameter.

    Returns max relative error per name plus a 'worst' entry. Parameters
    must be f64; h rides the curvature/roundoff tradeoff at that precision.
    """
    for name, p in params.items():
        if p.dtype != T.F64:
            raise ConfigError(f"grad_check needs f64 parameters; {name} is {p.dtype}")
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        tape.backward(loss_builder())

    report: dict[str, float] = {}
    for name, p in params.items():
        if p.grad is None:
            report[name] = float("nan")
            continue
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        err = 0.0
        for idx in picks:
            keep = flat[idx]
            flat[idx] = keep + h
            fp = loss_builder().item()
            flat[idx] = keep - h
            fm = loss_builder().item()
            flat[idx] = keep
            num = (fp - fm) / (2.0 * h)
            err = max(err, abs(gflat[idx] - num) / max(abs(gflat[idx]) + abs(num), 1e-6))
        report[name] = err
    finite = [v for v in report.values() if not math.isnan(v)]
    report["worst"] = max(finite) if finite else float("nan")
    return report
