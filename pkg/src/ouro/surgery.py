"""Layer surgery: collapse a dense stack into prelude / recurrent / coda.

The removed middle layers leave a trace: their average weight difference
from the retained recurrent layer is factorized by a truncated SVD, and the
two factors become frozen low-rank bases through which later modulation
acts. Factorization runs in float64 regardless of model dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import ADAPT_TARGETS, BaseModel, LayerWeights


@dataclass(frozen=True)
class SplitSpec:
    """Which layers survive: [0, prelude) + {recurrent} + [n_layers - coda, n_layers)."""

    n_layers: int
    prelude: int
    recurrent: int
    coda: int

    def __post_init__(self):
        if self.prelude < 0 or self.coda < 0:
            raise ConfigError("prelude and coda counts must be non-negative")
        if self.prelude + self.coda >= self.n_layers:
            raise ConfigError(
                f"prelude {self.prelude} + coda {self.coda} leaves no middle in {self.n_layers} layers")
        if not (self.prelude <= self.recurrent < self.n_layers - self.coda):
            raise ConfigError(
                f"recurrent index {self.recurrent} outside middle span "
                f"[{self.prelude}, {self.n_layers - self.coda})")

    @property
    def removed(self) -> tuple[int, ...]:
        mid = range(self.prelude, self.n_layers - self.coda)
        return tuple(i for i in mid if i != self.recurrent)

    @property
    def retained(self) -> int:
        return self.prelude + 1 + self.coda

    def describe(self) -> str:
        return (f"layers={self.n_layers} prelude=[0,{self.prelude}) recurrent={self.recurrent} "
                f"coda=[{self.n_layers - self.coda},{self.n_layers}) removed={list(self.removed)}")


def toy_split(n_layers: int = 8) -> SplitSpec:
    """Default split for the 8-layer toy model: keep 2 + 1 + 2."""
    if n_layers < 5:
        raise ConfigError(f"toy split needs at least 5 layers, got {n_layers}")
    return SplitSpec(n_layers=n_layers, prelude=2, recurrent=n_layers // 2, coda=2)


def average_residual(layers: list[LayerWeights], spec: SplitSpec, target: str) -> np.ndarray:
    """Mean of (removed layer weight - recurrent layer weight) for one target, f64."""
    if not spec.removed:
        raise ConfigError("no removed layers: nothing to average")
    anchor = getattr(layers[spec.recurrent], target).data.astype(np.float64)
    acc = np.zeros_like(anchor)
    for idx in spec.removed:
        w = getattr(layers[idx], target).data.astype(np.float64)
        if w.shape != anchor.shape:
            raise ConfigError(f"layer {idx} target {target} shape {w.shape} != {anchor.shape}")
        acc += w - anchor
    return acc / len(spec.removed)


# ---------------------------------------------------------------------------
# truncated SVD via cyclic Jacobi on the smaller Gram matrix


def _jacobi_eigh(sym: np.ndarray, sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric f64 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors-as-columns), unordered. Off-diagonal
    mass shrinks quadratically per sweep; convergence is checked against the
    matrix scale so all-zero input terminates immediately.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.zeros(n), vecs
    for _ in range(sweeps):
        off = np.sqrt(max((a * a).sum() - (np.diag(a) ** 2).sum(), 0.0))
        if off <= 1e-15 * n * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) if theta != 0 else 1.0
                t /= abs(theta) + np.hypot(theta, 1.0)
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                # a <- J^T a J with the (p,q) plane rotation J
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                v_p = vecs[:, p].copy()
                v_q = vecs[:, q].copy()
                vecs[:, p] = c * v_p - s * v_q
                vecs[:, q] = s * v_p + c * v_q
    return np.diag(a).copy(), vecs


def _complete_orthonormal(cols: np.ndarray, have: int) -> np.ndarray:
    """Fill columns [have:] with unit vectors orthogonal to the rest.

    Candidates are canonical basis vectors, picked by largest residual after
    projecting out the existing columns; deterministic for a given prefix.
    """
    m, r = cols.shape
    out = cols.copy()
    for j in range(have, r):
        basis = np.eye(m)
        resid = basis - out[:, :j] @ (out[:, :j].T @ basis)
        norms = np.linalg.norm(resid, axis=0)
        pick = int(np.argmax(norms))
        vec = resid[:, pick]
        # One re-orthogonalization pass keeps the column set tight.
        vec = vec - out[:, :j] @ (out[:, :j].T @ vec)
        out[:, j] = vec / np.linalg.norm(vec)
    return out


def truncated_svd(mat: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets (U_r, s_r, V_r) of a real matrix, f64.

    Strategy: eigendecompose the smaller Gram matrix, then recover the other
    factor by projection. Ties keep their post-sort eigen order (stable
    sort); zero singular directions get a deterministic orthonormal
    completion. Signs are fixed so each V column's first non-negligible
    entry is positive.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ConfigError(f"truncated_svd expects a matrix, got shape {mat.shape}")
    m, n = mat.shape
    if not (1 <= r <= min(m, n)):
        raise ConfigError(f"rank {r} outside [1, {min(m, n)}] for shape {mat.shape}")

    # Singular values below this are Gram-noise: eigenvalue error ~eps*lam_max
    # turns into sqrt(eps)*s_max after the square root, so the cutoff must sit
    # well above that floor.
    def _zero_tol(s_top: float) -> float:
        return s_top * max(m, n) * 1e-8

    if n <= m:
        gram = mat.T @ mat
        evals, evecs = _jacobi_eigh(gram)
        order = np.argsort(-evals, kind="stable")[:r]
        v_r = evecs[:, order]
        s_r = np.sqrt(np.clip(evals[order], 0.0, None))
        u_r = np.zeros((m, r))
        good = 0
        tol = _zero_tol(s_r[0])
        for j in range(r):
            if s_r[j] > tol:
                u_r[:, j] = (mat @ v_r[:, j]) / s_r[j]
                good = j + 1
            else:
                s_r[j] = 0.0
        u_r = _complete_orthonormal(u_r, good)
    else:
        gram = mat @ mat.T
        evals, evecs = _jacobi_eigh(gram)
        order = np.argsort(-evals, kind="stable")[:r]
        u_r = evecs[:, order]
        s_r = np.sqrt(np.clip(evals[order], 0.0, None))
        v_r = np.zeros((n, r))
        good = 0
        tol = _zero_tol(s_r[0])
        for j in range(r):
            if s_r[j] > tol:
                v_r[:, j] = (mat.T @ u_r[:, j]) / s_r[j]
                good = j + 1
            else:
                s_r[j] = 0.0
        v_r = _complete_orthonormal(v_r, good)

    for j in range(r):
        nz = np.nonzero(np.abs(v_r[:, j]) > 1e-12)[0]
        if nz.size and v_r[nz[0], j] < 0:
            v_r[:, j] = -v_r[:, j]
            u_r[:, j] = -u_r[:, j]
    return u_r, s_r, v_r


# ---------------------------------------------------------------------------
# basis construction


@dataclass
class LoraBasis:
    """Frozen factor pair for one projection target."""

    A: T.Tensor                      # [r, in], orthonormal rows
    B: T.Tensor                      # [out, r], column norms = singular values
    tail_energy: float               # ||residual - B A||_F / ||residual||_F


@dataclass
class LoraBasisSet:
    rank: int
    alpha: float
    bases: dict[str, LoraBasis]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {}
        for target, basis in self.bases.items():
            out[f"lora.{target}.A"] = basis.A
            out[f"lora.{target}.B"] = basis.B
        return out


def build_bases(base: BaseModel, spec: SplitSpec, rank: int, alpha: float) -> LoraBasisSet:
    """Factorize every target's averaged residual into frozen (A, B) pairs."""
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    dtype = base.embed.dtype
    bases = {}
    for target in ADAPT_TARGETS:
        resid = average_residual(base.layers, spec, target)
        u_r, s_r, v_r = truncated_svd(resid, rank)
        a = v_r.T
        b = u_r * s_r[None, :]
        denom = np.linalg.norm(resid)
        tail = float(np.linalg.norm(resid - b @ a) / denom) if denom > 0 else 0.0
        bases[target] = LoraBasis(
            A=T.Tensor(a.astype(dtype), requires_grad=False, name=f"lora.{target}.A"),
            B=T.Tensor(b.astype(dtype), requires_grad=False, name=f"lora.{target}.B"),
            tail_energy=tail,
        )
    return LoraBasisSet(rank=rank, alpha=alpha, bases=bases)


def _clone_layer(lw: LayerWeights, prefix: str) -> LayerWeights:
    kwargs = {}
    for key, t in lw.named().items():
        kwargs[key] = T.Tensor(t.data.copy(), requires_grad=False, name=prefix + key)
    return LayerWeights(**kwargs)


@dataclass
class SurgeryResult:
    """Retained frozen pieces plus the basis set; input to recurrence assembly."""

    cfg: object
    spec: SplitSpec
    embed: T.Tensor
    prelude: list[LayerWeights]
    recurrent: LayerWeights
    coda: list[LayerWeights]
    final_norm: T.Tensor
    head: T.Tensor
    lora: LoraBasisSet

    def frozen_tensors(self) -> dict[str, T.Tensor]:
        out = {"embed": self.embed, "final_norm": self.final_norm, "head": self.head}
        for i, lw in enumerate(self.prelude):
            out.update({f"prelude.{i}.{k}": t for k, t in lw.named().items()})
        out.update({f"recurrent.{k}": t for k, t in self.recurrent.named().items()})
        for i, lw in enumerate(self.coda):
            out.update({f"coda.{i}.{k}": t for k, t in lw.named().items()})
        out.update(self.lora.named_tensors())
        return out


def run_surgery(base: BaseModel, spec: SplitSpec, rank: int, alpha: float) -> SurgeryResult:
    """Split the dense model and attach freshly factorized frozen bases.

    Every retained tensor is copied and marked frozen; the dense model is
    left untouched.
    """
    if spec.n_layers != base.cfg.n_layers:
        raise ConfigError(f"split is for {spec.n_layers} layers, model has {base.cfg.n_layers}")
    lora = build_bases(base, spec, rank, alpha)
    prelude = [_clone_layer(base.layers[i], f"prelude.{i}.") for i in range(spec.prelude)]
    recurrent = _clone_layer(base.layers[spec.recurrent], "recurrent.")
    coda_start = spec.n_layers - spec.coda
    coda = [_clone_layer(base.layers[i], f"coda.{i - coda_start}.") for i in range(coda_start, spec.n_layers)]
    return SurgeryResult(
        cfg=base.cfg,
        spec=spec,
        embed=T.Tensor(base.embed.data.copy(), requires_grad=False, name="embed"),
        prelude=prelude,
        recurrent=recurrent,
        coda=coda,
        final_norm=T.Tensor(base.final_norm.data.copy(), requires_grad=False, name="final_norm"),
        head=T.Tensor(base.head.data.copy(), requires_grad=False, name="head"),
        lora=lora,
    )


def manifest_text(result: SurgeryResult) -> str:
    """Human-readable record of what the surgery produced."""
    lines = [
        "surgery manifest",
        result.spec.describe(),
        f"rank={result.lora.rank} alpha={result.lora.alpha} scaling={result.lora.scaling}",
    ]
    for target in ADAPT_TARGETS:
        basis = result.lora.bases[target]
        lines.append(
            f"target={target} A={basis.A.shape} B={basis.B.shape} "
            f"tail_energy={basis.tail_energy:.6f}")
    return "\n".join(lines) + "\n"
