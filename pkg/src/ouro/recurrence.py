"""Recurrent wiring over the surgered model.

One retained middle layer runs N times. Each step pools the hidden state,
asks the modulation source for per-target delta vectors, pushes the result
through the frozen low-rank bases inside the layer, normalizes with that
step's own scale, and mixes old and new states through a learned sigmoid
gate biased so roughly 88% of the old state survives at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .model import ModelConfig, rope_tables, run_layers, layer_forward
from .modulation import (
    ControllerParams,
    StaticDiagTable,
    controller_forward,
    init_controller,
    init_static_table,
    make_adapter,
    static_forward,
)
from .surgery import SurgeryResult

VARIANTS = ("controller", "static", "nogate-controller", "baseline17")

GATE_BIAS_INIT = -2.0


@dataclass
class GateParams:
    """Convex-mix gate. W starts at zero so the initial gate value is
    sigmoid(bias) everywhere; bias -2 keeps ~88% of the old state."""

    W: T.Tensor   # [d, 2d], zero-init
    b: T.Tensor   # [d], every entry -2.0

    def named_tensors(self) -> dict[str, T.Tensor]:
        return {"gate.W": self.W, "gate.b": self.b}


@dataclass
class StepNormBank:
    """Independent RMS scale per recurrence step."""

    gammas: list[T.Tensor]   # each [d], ones-init, named stepnorm.{t}

    @property
    def n_max(self) -> int:
        return len(self.gammas)

    def named_tensors(self) -> dict[str, T.Tensor]:
        return {f"stepnorm.{t}": g for t, g in enumerate(self.gammas)}


def init_gate(d_model: int, dtype=T.F32) -> GateParams:
    w = T.zeros((d_model, 2 * d_model), dtype=dtype, requires_grad=True, name="gate.W")
    b = T.Tensor(np.full(d_model, GATE_BIAS_INIT, dtype=dtype), requires_grad=True, name="gate.b")
    return GateParams(W=w, b=b)


def init_stepnorms(d_model: int, n_max: int, dtype=T.F32) -> StepNormBank:
    gammas = [T.ones((d_model,), dtype=dtype, requires_grad=True, name=f"stepnorm.{t}")
              for t in range(n_max)]
    return StepNormBank(gammas=gammas)


def gated_mix(h_new: T.Tensor, h_old: T.Tensor, gp: GateParams) -> T.Tensor:
    """g * h_new + (1 - g) * h_old with g = sigmoid(W [h_new; h_old] + b)."""
    if h_new.shape != h_old.shape:
        raise DimensionError(f"gated_mix: shapes {h_new.shape} vs {h_old.shape}")
    joint = T.concat_last(h_new, h_old)
    g = T.sigmoid(T.add_bias(T.linear(joint, gp.W), gp.b))
    keep = T.sub(T.Tensor(np.ones(g.shape, dtype=g.dtype.type)), g)
    return T.add(T.mul(g, h_new), T.mul(keep, h_old))


@dataclass
class OuroborosModel:
    """Frozen surgered core plus the three trainable groups for one variant."""

    core: SurgeryResult
    variant: str
    n_max: int
    controller: ControllerParams | None
    static: StaticDiagTable | None
    gate: GateParams | None
    stepnorms: StepNormBank | None

    @property
    def cfg(self) -> ModelConfig:
        return self.core.cfg

    def trainable_tensors(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        if self.controller is not None:
            out.update(self.controller.named_tensors())
        if self.static is not None:
            out.update(self.static.named_tensors())
        if self.gate is not None:
            out.update(self.gate.named_tensors())
        if self.stepnorms is not None:
            out.update(self.stepnorms.named_tensors())
        return out

    def frozen_tensors(self) -> dict[str, T.Tensor]:
        return self.core.frozen_tensors()

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = self.frozen_tensors()
        out.update(self.trainable_tensors())
        return out


def init_ouroboros(core: SurgeryResult, variant: str, n_max: int,
                   controller_width: int = 128, seed: int = 0) -> OuroborosModel:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    cfg: ModelConfig = core.cfg
    dtype = core.embed.dtype
    controller = None
    static = None
    gate = None
    norms = None
    if variant in ("controller", "nogate-controller"):
        controller = init_controller(cfg.d_model, controller_width, core.lora.rank,
                                     n_max, seed, dtype)
    elif variant == "static":
        static = init_static_table(core.lora.rank, n_max, dtype)
    if variant in ("controller", "static"):
        gate = init_gate(cfg.d_model, dtype)
    if variant != "baseline17":
        norms = init_stepnorms(cfg.d_model, n_max, dtype)
    return OuroborosModel(core=core, variant=variant, n_max=n_max,
                          controller=controller, static=static, gate=gate,
                          stepnorms=norms)


def ouroboros_forward(model: OuroborosModel, tokens: np.ndarray, depth: int,
                      lora_enabled: bool = True, return_trace: bool = False):
    """Full pass: prelude, depth recurrent steps, coda, vocabulary logits.

    With return_trace, also hands back the hidden state after the prelude
    and after every step (as detached arrays) for drift diagnostics.
    """
    if depth == 0:
        raise ContractError("depth 0 leaves the recurrent block unused")
    if depth < 0:
        raise ContractError(f"depth must be positive, got {depth}")
    if depth > model.n_max:
        raise ConfigError(f"depth {depth} exceeds configured maximum {model.n_max}")
    if model.variant == "baseline17" and depth != 1:
        raise ConfigError("the no-recurrence baseline runs at depth 1 only")

    core = model.core
    cfg = core.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if t > cfg.max_seq:
        raise DimensionError(f"sequence length {t} exceeds max {cfg.max_seq}")
    cos, sin = rope_tables(t, cfg.head_dim, cfg.rope_theta, core.embed.dtype)

    flat = T.index_select(core.embed, 0, tokens.reshape(-1))
    h = T.reshape(flat, (b, t, cfg.d_model))
    h = run_layers(h, core.prelude, cfg, cos, sin)

    trace = [h.data.copy()] if return_trace else None
    full_mask = np.ones((b, t), dtype=h.dtype)

    for step in range(depth):
        if lora_enabled and model.controller is not None:
            pooled = T.mean_pool(h, full_mask)
            mod = controller_forward(pooled, step, model.controller)
        elif lora_enabled and model.static is not None:
            mod = static_forward(b, step, model.static)
        else:
            mod = None
        adapt = make_adapter(core.lora, mod) if mod is not None else None
        h_new = layer_forward(h, core.recurrent, cfg, cos, sin, adapt)
        if model.stepnorms is not None:
            h_new = T.rms_norm(h_new, model.stepnorms.gammas[step])
        if model.gate is not None:
            h = gated_mix(h_new, h, model.gate)
        else:
            h = h_new
        if return_trace:
            trace.append(h.data.copy())

    h = run_layers(h, core.coda, cfg, cos, sin)
    logits = T.linear(T.rms_norm(h, core.final_norm), core.head)
    if return_trace:
        return logits, trace
    return logits


# ---------------------------------------------------------------------------
# parameter census

QWEN3B_DIMS = {
    "d_model": 2048,
    "kv_dim": 256,
    "d_ffn": 11008,
    "n_max": 64,
    "rank": 32,
    "controller_width": 128,
}


def census_from_dims(d_model: int, kv_dim: int, d_ffn: int, n_max: int,
                     rank: int, controller_width: int) -> dict[str, int]:
    """Component parameter counts from dimensions alone (no model needed)."""
    s = controller_width
    controller = (2 * s) * d_model + (2 * s) * (3 * s) + s * (2 * s) \
        + len(_target_shapes(d_model, kv_dim, d_ffn)) * rank * s + n_max * s
    shapes = _target_shapes(d_model, kv_dim, d_ffn)
    lora = sum(rank * in_dim + out_dim * rank for out_dim, in_dim in shapes.values())
    return {
        "gate_weights": d_model * 2 * d_model,
        "gate_bias": d_model,
        "stepnorm": n_max * d_model,
        "controller": controller,
        "static_table": n_max * len(shapes) * rank,
        "lora_bases": lora,
    }


def _target_shapes(d_model: int, kv_dim: int, d_ffn: int) -> dict[str, tuple[int, int]]:
    return {
        "q": (d_model, d_model),
        "k": (kv_dim, d_model),
        "v": (kv_dim, d_model),
        "o": (d_model, d_model),
        "gate": (d_ffn, d_model),
        "up": (d_ffn, d_model),
        "down": (d_model, d_ffn),
    }


def census(model: OuroborosModel) -> dict[str, int]:
    """Named counts for every component group plus totals."""
    groups: dict[str, int] = {}

    def bucket(name: str) -> str:
        if name.startswith("controller."):
            return "controller"
        if name.startswith("static."):
            return "static_table"
        if name == "gate.W":
            return "gate_weights"
        if name == "gate.b":
            return "gate_bias"
        if name.startswith("stepnorm."):
            return "stepnorm"
        if name.startswith("lora."):
            return "lora_bases"
        return "frozen_core"

    for name, tensor in model.named_tensors().items():
        key = bucket(name)
        groups[key] = groups.get(key, 0) + tensor.size
    groups["trainable_total"] = sum(t.size for t in model.trainable_tensors().values())
    groups["frozen_total"] = sum(t.size for t in model.frozen_tensors().values())
    return groups


def census_text(groups: dict[str, int]) -> str:
    order = ["controller", "static_table", "gate_weights", "gate_bias", "stepnorm",
             "lora_bases", "frozen_core", "trainable_total", "frozen_total"]
    lines = [f"{key}\t{groups[key]}" for key in order if key in groups]
    return "\n".join(lines) + "\n"
