"""Per-step diagonal modulation of the frozen low-rank bases.

Two sources produce the per-target vectors delta_k: a compact hypernetwork
conditioned on the pooled hidden state and step embedding, or a static
trainable table indexed by step alone. Either way the contribution enters
as (alpha/r) * B diag(delta) A without ever materializing the dense update,
since delta differs per batch element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .model import ADAPT_TARGETS
from .surgery import LoraBasis, LoraBasisSet

N_TARGETS = len(ADAPT_TARGETS)


@dataclass
class ControllerParams:
    """Hypernetwork weights. Heads start at exactly zero, so every delta_k
    is zero at initialization and the recurrent block begins as identity
    plus its frozen weights. No linear carries a bias: a bias on any head
    would break that exact-zero start, and the zero step table keeps the
    property independent of step index."""

    proj: T.Tensor                 # [2s, d]
    style1: T.Tensor               # [2s, 3s]
    style2: T.Tensor               # [s, 2s]
    heads: list[T.Tensor]          # per target, [r, s], zero-init
    steps: T.Tensor                # [N_max, s], zero-init
    width: int
    rank: int
    n_max: int

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {
            "controller.proj": self.proj,
            "controller.style1": self.style1,
            "controller.style2": self.style2,
            "controller.steps": self.steps,
        }
        for i, h in enumerate(self.heads):
            out[f"controller.head.{i}"] = h
        return out


@dataclass
class StaticDiagTable:
    """Step-indexed modulation with no input conditioning."""

    table: T.Tensor                # [N_max, K, r], zero-init
    n_max: int

    def named_tensors(self) -> dict[str, T.Tensor]:
        return {"static.table": self.table}


@dataclass
class ModulationOutput:
    """delta vectors for one recurrence step, one [B, r] tensor per target."""

    delta: dict[str, T.Tensor]

    def as_array(self) -> np.ndarray:
        return np.stack([self.delta[t].data for t in ADAPT_TARGETS], axis=1)


def init_controller(d_model: int, width: int, rank: int, n_max: int,
                    seed: int, dtype=T.F32) -> ControllerParams:
    if min(d_model, width, rank, n_max) <= 0:
        raise ConfigError("controller dims must be positive")
    rng = np.random.default_rng(seed)
    s = width

    def w(out_dim, in_dim, name):
        return T.Tensor((rng.standard_normal((out_dim, in_dim)) * 0.02).astype(dtype),
                        requires_grad=True, name=name)

    heads = [T.zeros((rank, s), dtype=dtype, requires_grad=True, name=f"controller.head.{i}")
             for i in range(N_TARGETS)]
    return ControllerParams(
        proj=w(2 * s, d_model, "controller.proj"),
        style1=w(2 * s, 3 * s, "controller.style1"),
        style2=w(s, 2 * s, "controller.style2"),
        heads=heads,
        steps=T.zeros((n_max, s), dtype=dtype, requires_grad=True, name="controller.steps"),
        width=s,
        rank=rank,
        n_max=n_max,
    )


def init_static_table(rank: int, n_max: int, dtype=T.F32) -> StaticDiagTable:
    if min(rank, n_max) <= 0:
        raise ConfigError("table dims must be positive")
    table = T.zeros((n_max, N_TARGETS, rank), dtype=dtype, requires_grad=True,
                    name="static.table")
    return StaticDiagTable(table=table, n_max=n_max)


def controller_forward(pooled: T.Tensor, step: int, p: ControllerParams) -> ModulationOutput:
    """pooled [B, d] + step index -> per-target delta via the style pathway."""
    if not (0 <= step < p.n_max):
        raise ConfigError(f"step {step} outside [0, {p.n_max})")
    if pooled.data.ndim != 2:
        raise DimensionError(f"pooled state must be [B, d], got {pooled.shape}")
    b = pooled.shape[0]
    z = T.silu(T.linear(pooled, p.proj))                      # [B, 2s]
    e = T.tile_rows(T.index_select(p.steps, 0, [step]), b)    # [B, s]
    mixed = T.concat_last(z, e)                               # [B, 3s]
    style = T.linear(T.silu(T.linear(mixed, p.style1)), p.style2)  # [B, s]
    delta = {t: T.linear(style, p.heads[i]) for i, t in enumerate(ADAPT_TARGETS)}
    return ModulationOutput(delta=delta)


def static_forward(batch: int, step: int, table: StaticDiagTable) -> ModulationOutput:
    """Broadcast row `step` of the table over the batch."""
    if not (0 <= step < table.n_max):
        raise ConfigError(f"step {step} outside [0, {table.n_max})")
    row = T.tile_rows(T.index_select(table.table, 0, [step]), batch)  # [B, K, r]
    rank = table.table.shape[2]
    delta = {}
    for i, t in enumerate(ADAPT_TARGETS):
        delta[t] = T.reshape(T.index_select(row, 1, [i]), (batch, rank))
    return ModulationOutput(delta=delta)


def lora_apply(x: T.Tensor, basis: LoraBasis, delta: T.Tensor, scaling: float) -> T.Tensor:
    """(alpha/r) * ((x A^T) * delta) B^T, the additive contribution only.

    x: [B, T, in]; delta: [B, r] held fixed across the T positions.
    """
    r = basis.A.shape[0]
    if delta.data.ndim != 2 or delta.shape[1] != r:
        raise DimensionError(f"delta {delta.shape} does not match rank {r}")
    if x.data.ndim != 3:
        raise DimensionError(f"input must be [B, T, in], got {x.shape}")
    down = T.linear(x, basis.A)            # [B, T, r]
    scaled = T.scale_ranks(down, delta)    # per-example diagonal
    return T.scale(T.linear(scaled, basis.B), scaling)


def make_adapter(lora: LoraBasisSet, mod: ModulationOutput):
    """Adapter hook for layer_forward: adds each target's contribution."""
    scaling = lora.scaling

    def adapt(target: str, x: T.Tensor):
        basis = lora.bases.get(target)
        if basis is None:
            return None
        return lora_apply(x, basis, mod.delta[target], scaling)

    return adapt
