"""Operator commands: pretrain, surgery, train, eval, ablate, gradcheck, params.

Each subcommand reads its inputs, writes only under --out, and exits with a
class-specific code: 0 success, 2 bad usage or config, 3 numeric failure,
4 checkpoint or filesystem trouble.
"""

import argparse
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio as D
from . import model as M
from . import recurrence as R
from . import surgery as S
from . import tensor as T
from . import training as TR
from .errors import (CheckpointError, ConfigError, ContractError,
                     DimensionError, NumericError, TrainingAborted, UsageError)

OUT_ENV = "OURO_OUT"
LAYER_KEYS = ("attn_norm", "q", "k", "v", "o", "ffn_norm", "gate", "up", "down")

REPORT_COLUMNS = ("variant", "depth", "rank", "lr", "seed", "step",
                  "train_loss", "heldout_loss", "wall_seconds")


@dataclass
class RunReport:
    """Result rows shared by train and ablate; one row per logged step."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **kw) -> None:
        if set(kw) != set(REPORT_COLUMNS):
            raise ContractError(f"report row keys {sorted(kw)} != {sorted(REPORT_COLUMNS)}")
        key = (kw["variant"], kw["depth"], kw["rank"], kw["lr"], kw["seed"])
        for row in reversed(self.rows):
            if (row["variant"], row["depth"], row["rank"], row["lr"], row["seed"]) == key:
                if kw["step"] <= row["step"]:
                    raise ContractError(f"non-monotone step {kw['step']} for {key}")
                break
        self.rows.append(dict(kw))

    @staticmethod
    def _fmt(col: str, value) -> str:
        if col in ("train_loss", "heldout_loss"):
            return f"{value:.6f}"
        if col == "wall_seconds":
            return f"{value:.3f}"
        if col == "lr":
            return f"{value:.6g}"
        return str(value)

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for row in self.rows:
            lines.append("\t".join(self._fmt(c, row[c]) for c in REPORT_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        lines = []
        for row in self.rows:
            lines.append(" ".join(f"{c}={self._fmt(c, row[c])}" for c in REPORT_COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path, stem: str) -> None:
        (out_dir / f"{stem}.tsv").write_text(self.to_tsv())
        (out_dir / f"{stem}.records").write_text(self.to_records())


def pivot_text(report: RunReport) -> str:
    """variant x depth table of mean final held-out loss; failed cells marked."""
    final: dict[tuple, dict] = {}
    for row in report.rows:
        if row["seed"] == "mean":
            continue
        key = (row["variant"], row["depth"], row["rank"], row["lr"], row["seed"])
        if key not in final or row["step"] > final[key]["step"]:
            final[key] = row
    variants = sorted({k[0] for k in final})
    depths = sorted({k[1] for k in final})
    cells: dict[tuple, list] = {}
    for key, row in final.items():
        cells.setdefault((key[0], key[1]), []).append(row["heldout_loss"])
    lines = ["pivot: mean final heldout_loss by variant x depth"]
    header = ["variant"] + [f"N={n}" for n in depths]
    lines.append("\t".join(header))
    for v in variants:
        out = [v]
        for n in depths:
            vals = [x for x in cells.get((v, n), []) if math.isfinite(x)]
            out.append(f"{sum(vals) / len(vals):.6f}" if vals else "failed")
        lines.append("\t".join(out))
    return "\n".join(lines) + "\n"


# --- checkpoint assembly -----------------------------------------------------


def _dtype_tag(dtype) -> str:
    return "f64" if dtype == T.F64 else "f32"


def _tag_dtype(tag: str):
    if tag == "f64":
        return T.F64
    if tag == "f32":
        return T.F32
    raise CheckpointError(f"unknown dtype tag {tag!r}")


def _cfg_meta(cfg: M.ModelConfig) -> dict:
    return {"n_layers": cfg.n_layers, "d_model": cfg.d_model, "n_heads": cfg.n_heads,
            "n_kv_heads": cfg.n_kv_heads, "d_ffn": cfg.d_ffn, "vocab": cfg.vocab,
            "max_seq": cfg.max_seq, "rope_theta": cfg.rope_theta}


def _cfg_from_meta(meta: dict) -> M.ModelConfig:
    schema = D.config_schema(M.ModelConfig)
    raw = {k: v for k, v in meta.items() if k in schema}
    return M.ModelConfig(**D.coerce_fields(raw, schema))


def save_base(path, base: M.BaseModel) -> None:
    meta = {"kind": "base", "dtype": _dtype_tag(base.embed.dtype)}
    meta.update(_cfg_meta(base.cfg))
    D.save_state(path, base.named_tensors(), meta)


def load_base(path) -> M.BaseModel:
    arrays, meta = D.load_state(path)
    if meta.get("kind") != "base":
        raise CheckpointError(f"{path} is not a dense-model checkpoint")
    cfg = _cfg_from_meta(meta)
    base = M.init_base_model(cfg, seed=0, dtype=_tag_dtype(meta["dtype"]))
    D.restore_tensors(base.named_tensors(), arrays)
    return base


def _wrap(arrays: dict, name: str) -> T.Tensor:
    if name not in arrays:
        raise CheckpointError(f"checkpoint is missing tensor {name}")
    return T.Tensor(arrays[name], requires_grad=False, name=name)


def _wrap_layer(arrays: dict, prefix: str) -> M.LayerWeights:
    return M.LayerWeights(*(_wrap(arrays, prefix + k) for k in LAYER_KEYS))


def save_surgered(path, result: S.SurgeryResult, extra: dict | None = None) -> None:
    meta = {"kind": "ouroboros", "dtype": _dtype_tag(result.embed.dtype),
            "prelude": result.spec.prelude, "recurrent": result.spec.recurrent,
            "coda": result.spec.coda, "rank": result.lora.rank,
            "alpha": result.lora.alpha}
    meta.update(_cfg_meta(result.cfg))
    for target, basis in result.lora.bases.items():
        meta[f"tail.{target}"] = repr(basis.tail_energy)
    if extra:
        meta.update(extra)
    D.save_state(path, result.frozen_tensors(), meta)


def load_surgered(path) -> tuple[S.SurgeryResult, dict]:
    arrays, meta = D.load_state(path)
    if meta.get("kind") != "ouroboros":
        raise CheckpointError(f"{path} is not a surgered checkpoint")
    cfg = _cfg_from_meta(meta)
    spec = S.SplitSpec(cfg.n_layers, int(meta["prelude"]), int(meta["recurrent"]),
                       int(meta["coda"]))
    bases = {}
    for target in M.ADAPT_TARGETS:
        bases[target] = S.LoraBasis(A=_wrap(arrays, f"lora.{target}.A"),
                                    B=_wrap(arrays, f"lora.{target}.B"),
                                    tail_energy=float(meta[f"tail.{target}"]))
    result = S.SurgeryResult(
        cfg=cfg,
        spec=spec,
        embed=_wrap(arrays, "embed"),
        prelude=[_wrap_layer(arrays, f"prelude.{i}.") for i in range(spec.prelude)],
        recurrent=_wrap_layer(arrays, "recurrent."),
        coda=[_wrap_layer(arrays, f"coda.{i}.") for i in range(spec.coda)],
        final_norm=_wrap(arrays, "final_norm"),
        head=_wrap(arrays, "head"),
        lora=S.LoraBasisSet(rank=int(meta["rank"]), alpha=float(meta["alpha"]),
                            bases=bases),
    )
    return result, meta


def save_ouroboros(path, om: R.OuroborosModel, extra: dict | None = None) -> None:
    merged = {"variant": om.variant, "n_max": om.n_max,
              "controller_width": om.controller.width if om.controller else 0}
    if extra:
        merged.update(extra)
    named = dict(om.core.frozen_tensors())
    named.update(om.trainable_tensors())
    meta = {"kind": "ouroboros", "dtype": _dtype_tag(om.core.embed.dtype),
            "prelude": om.core.spec.prelude, "recurrent": om.core.spec.recurrent,
            "coda": om.core.spec.coda, "rank": om.core.lora.rank,
            "alpha": om.core.lora.alpha}
    meta.update(_cfg_meta(om.cfg))
    for target, basis in om.core.lora.bases.items():
        meta[f"tail.{target}"] = repr(basis.tail_energy)
    meta.update(merged)
    D.save_state(path, named, meta)


def load_ouroboros(path) -> tuple[R.OuroborosModel, dict]:
    core, meta = load_surgered(path)
    if "variant" not in meta:
        raise CheckpointError(f"{path} has no variant; run the train command first")
    arrays, _ = D.load_state(path)
    om = R.init_ouroboros(core, meta["variant"], int(meta["n_max"]),
                          controller_width=max(1, int(meta["controller_width"])), seed=0)
    trainables = om.trainable_tensors()
    D.restore_tensors(trainables, {k: v for k, v in arrays.items() if k in trainables})
    return om, meta


# --- shared plumbing ---------------------------------------------------------


def build_corpus(args) -> D.ByteCorpus:
    if getattr(args, "corpus_dir", None):
        train = D.load_corpus_dir(args.corpus_dir)
    else:
        train = D.synthetic_corpus(args.corpus_bytes, args.corpus_seed)
    return D.ByteCorpus(np.frombuffer(train, dtype=np.uint8).copy(), D.load_heldout())


# run-length defaults sized for a desk CPU; --config overrides any field
PIPELINE_DEFAULTS = dict(lr_peak=3e-4, warmup_steps=100, total_steps=2000,
                         batch=8, accum=1, seq_len=64, log_every=50, ckpt_every=0)


def train_config(args, **overrides) -> TR.TrainConfig:
    fields_ = dict(PIPELINE_DEFAULTS)
    fields_["seed"] = args.seed
    fields_.update(overrides)
    if args.config:
        raw = D.parse_kv(Path(args.config).read_text())
        fields_.update(D.coerce_fields(raw, D.config_schema(TR.TrainConfig)))
    if getattr(args, "steps", None) is not None:
        fields_["total_steps"] = args.steps
        fields_["warmup_steps"] = min(fields_["warmup_steps"],
                                      max(1, args.steps // 10))
    if getattr(args, "lr", None) is not None:
        fields_["lr_peak"] = args.lr
    return TR.TrainConfig(**fields_)


def _loss_fn_base(base: M.BaseModel):
    def loss_fn(inputs, targets):
        return T.cross_entropy(M.model_forward(base, inputs), targets)
    return loss_fn


def _loss_fn_ouro(om: R.OuroborosModel, depth: int):
    def loss_fn(inputs, targets):
        return T.cross_entropy(R.ouroboros_forward(om, inputs, depth), targets)
    return loss_fn


def _heldout_batches(corpus: D.ByteCorpus, seq_len: int) -> list[np.ndarray]:
    return [D.heldout_blocks(p, seq_len) for p in corpus.heldout]


def _probe_batches(corpus: D.ByteCorpus, cfg: TR.TrainConfig, n: int = 4) -> list:
    # fixed sample of the training stream, identical for every variant at a seed
    rng = np.random.default_rng((cfg.seed, 0xC0FFEE))
    return [D.next_batch(corpus, cfg.batch, cfg.seq_len, rng) for _ in range(n)]


def _print_log_row(row) -> None:
    step, lr, loss, norm, wall = row
    print(f"step {step:5d}  lr {lr:.3e}  loss {loss:.4f}  "
          f"grad_norm {norm:.3f}  {wall:.0f} ms")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -------------------------------------------------------------


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    dtype = T.F64 if args.f64 else T.F32
    base = M.init_base_model(M.ModelConfig(), seed=args.seed, dtype=dtype)
    corpus = build_corpus(args)
    cfg = train_config(args)
    base.set_requires_grad(True)
    log = TR.train_loop(_loss_fn_base(base), base.named_tensors(), {},
                        D.batcher(corpus, cfg.seq_len), cfg, on_log=_print_log_row)
    base.set_requires_grad(False)
    save_base(out / "base.ckpt", base)
    (out / "pretrain.log").write_text(log.format_rows())
    final = log.losses()[-1] if log.rows else float("nan")
    print(f"wrote {out / 'base.ckpt'}  final_loss={final:.6f}")
    return 0


def cmd_surgery(args) -> int:
    out = _out_dir(args)
    base = load_base(args.base)
    picked = (args.prelude, args.recurrent_index, args.coda)
    if any(v is not None for v in picked):
        if any(v is None for v in picked):
            raise UsageError("--prelude, --recurrent-index and --coda go together")
        spec = S.SplitSpec(base.cfg.n_layers, *picked)
    else:
        spec = S.toy_split(base.cfg.n_layers)
    result = S.run_surgery(base, spec, args.rank, args.alpha)
    save_surgered(out / "ouro.ckpt", result)
    print(S.manifest_text(result), end="")
    om = R.init_ouroboros(result, "controller", n_max=args.n_max,
                          controller_width=args.controller_width)
    print(R.census_text(R.census(om)), end="")
    print(f"wrote {out / 'ouro.ckpt'}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    core, _ = load_surgered(args.model)
    om = R.init_ouroboros(core, args.variant, n_max=args.n_max,
                          controller_width=args.controller_width, seed=args.seed)
    corpus = build_corpus(args)
    cfg = train_config(args)
    depth = args.depth
    loss_fn = _loss_fn_ouro(om, depth)
    probe = _probe_batches(corpus, cfg)
    heldout = _heldout_batches(corpus, cfg.seq_len)
    step0 = TR.evaluate_mean_loss(loss_fn, probe)
    print(f"variant={args.variant} depth={depth} step0_loss={step0!r}")

    report = RunReport()

    def on_log(row):
        _print_log_row(row)
        report.add(variant=args.variant, depth=depth, rank=core.lora.rank,
                   lr=row[1], seed=args.seed, step=row[0], train_loss=row[2],
                   heldout_loss=TR.evaluate_mean_loss(loss_fn, heldout),
                   wall_seconds=row[4] / 1e3)

    started = time.monotonic()
    log = TR.train_loop(loss_fn, om.trainable_tensors(), om.frozen_tensors(),
                        D.batcher(corpus, cfg.seq_len), cfg, on_log=on_log)
    wall = time.monotonic() - started
    final = TR.evaluate_mean_loss(loss_fn, probe)
    drop = (step0 - final) / step0 if step0 else float("nan")
    stem = f"{args.variant}_d{depth}"
    save_ouroboros(out / f"trained_{stem}.ckpt", om,
                   {"depth": depth, "trained_steps": cfg.total_steps})
    report.write(out, f"report_{stem}")
    summary = {"variant": args.variant, "depth": depth, "rank": core.lora.rank,
               "seed": args.seed, "steps": cfg.total_steps,
               "step0_loss": repr(step0), "final_loss": repr(final),
               "drop_pct": repr(100.0 * drop), "wall_seconds": repr(wall)}
    (out / f"summary_{stem}.cfg").write_text(D.format_kv(summary))
    print(f"final_loss={final!r} drop_pct={100.0 * drop:.2f} wall={wall:.1f}s")
    print(f"wrote {out / f'trained_{stem}.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    om, meta = load_ouroboros(args.model)
    depth = args.depth if args.depth is not None else int(meta.get("depth", 1))
    loss_fn = _loss_fn_ouro(om, depth)
    base17 = R.init_ouroboros(om.core, "baseline17", n_max=max(1, om.n_max))
    base_fn = _loss_fn_ouro(base17, 1)
    passages = D.load_heldout()
    wins = 0
    model_losses, base_losses = [], []
    for i, passage in enumerate(passages, 1):
        blocks = D.heldout_blocks(passage, args.seq_len)
        ours = TR.evaluate_mean_loss(loss_fn, [blocks])
        theirs = TR.evaluate_mean_loss(base_fn, [blocks])
        model_losses.append(ours)
        base_losses.append(theirs)
        beats = ours < theirs
        wins += int(beats)
        print(f"passage {i:02d}  loss {ours:.6f}  baseline {theirs:.6f}  "
              f"beats {'yes' if beats else 'no'}")
    mean = sum(model_losses) / len(model_losses)
    base_mean = sum(base_losses) / len(base_losses)
    print(f"mean  loss {mean:.6f}  baseline {base_mean:.6f}")
    print(f"beats_baseline {wins}/{len(passages)}")
    return 0


def _split_list(text: str, cast):
    return tuple(cast(part) for part in text.split(",") if part)


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    base = load_base(args.base)
    variants = _split_list(args.variants, str)
    depths = _split_list(args.depths, int)
    ranks = _split_list(args.ranks, int)
    lrs = _split_list(args.lrs, float)
    if not (variants and depths and ranks and lrs and args.seeds > 0):
        raise UsageError("ablation grid must be non-empty")
    n_max = args.n_max if args.n_max is not None else max(depths)
    corpus = build_corpus(args)
    split = S.toy_split(base.cfg.n_layers)
    report = RunReport()
    failed = 0
    for rank in ranks:
        try:
            core = S.run_surgery(base, split, rank, args.alpha)
        except (ConfigError, DimensionError) as e:
            print(f"rank {rank} failed: {e}", file=sys.stderr)
            for variant in variants:
                for depth in depths:
                    for lr in lrs:
                        for seed in range(args.seeds):
                            report.add(variant=variant, depth=depth, rank=rank,
                                       lr=lr, seed=seed, step=max(0, args.steps - 1),
                                       train_loss=float("nan"),
                                       heldout_loss=float("nan"), wall_seconds=0.0)
                            failed += 1
            continue
        heldout = _heldout_batches(corpus, args.seq_len)
        for variant in variants:
            for depth in depths:
                for lr in lrs:
                    seed_rows = []
                    for seed in range(args.seeds):
                        row = _ablate_cell(core, corpus, heldout, variant, depth,
                                           rank, lr, seed, n_max, args)
                        failed += int(math.isnan(row["train_loss"]))
                        report.add(**row)
                        seed_rows.append(row)
                    if args.seeds > 1:
                        report.add(variant=variant, depth=depth, rank=rank, lr=lr,
                                   seed="mean", step=max(0, args.steps - 1),
                                   train_loss=_mean(seed_rows, "train_loss"),
                                   heldout_loss=_mean(seed_rows, "heldout_loss"),
                                   wall_seconds=_mean(seed_rows, "wall_seconds"))
    report.write(out, "ablate")
    pivot = pivot_text(report)
    print(pivot, end="")
    (out / "ablate.pivot").write_text(pivot)
    if failed:
        print(f"flagged cells: {failed}", file=sys.stderr)
    return 0


def _mean(rows: list[dict], key: str) -> float:
    return sum(r[key] for r in rows) / len(rows)


def _ablate_cell(core, corpus, heldout, variant, depth, rank, lr, seed, n_max, args) -> dict:
    row = dict(variant=variant, depth=depth, rank=rank, lr=lr, seed=seed,
               step=max(0, args.steps - 1), train_loss=float("nan"),
               heldout_loss=float("nan"), wall_seconds=0.0)
    started = time.monotonic()
    try:
        om = R.init_ouroboros(core, variant, n_max=n_max,
                              controller_width=args.controller_width, seed=seed)
        cfg = TR.TrainConfig(lr_peak=lr, warmup_steps=max(1, args.steps // 10),
                             total_steps=args.steps, batch=args.batch, accum=1,
                             seq_len=args.seq_len, seed=seed,
                             log_every=max(1, args.steps), ckpt_every=0)
        loss_fn = _loss_fn_ouro(om, depth)
        log = TR.train_loop(loss_fn, om.trainable_tensors(), om.frozen_tensors(),
                            D.batcher(corpus, cfg.seq_len), cfg)
        row["train_loss"] = log.losses()[-1] if log.rows else float("nan")
        row["heldout_loss"] = TR.evaluate_mean_loss(loss_fn, heldout)
        row["step"] = max(0, cfg.total_steps - 1)
    except (TrainingAborted, NumericError, ConfigError, DimensionError) as e:
        print(f"cell {variant}/N={depth}/r={rank}/lr={lr}/seed={seed} "
              f"failed: {e}", file=sys.stderr)
    row["wall_seconds"] = time.monotonic() - started
    return row


GRADCHECK_CFG = M.ModelConfig(n_layers=7, d_model=16, n_heads=2, n_kv_heads=1,
                              d_ffn=32, vocab=31, max_seq=8)


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    base = M.init_base_model(GRADCHECK_CFG, seed=args.seed, dtype=T.F64)
    core = S.run_surgery(base, S.toy_split(7), rank=4, alpha=16.0)
    tokens = rng.integers(0, GRADCHECK_CFG.vocab, size=(2, 5))
    targets = rng.integers(0, GRADCHECK_CFG.vocab, size=(2, 5))
    report: dict[str, float] = {}
    for variant in ("controller", "static"):
        om = R.init_ouroboros(core, variant, n_max=2, controller_width=8,
                              seed=args.seed)
        params = om.trainable_tensors()
        for t in params.values():
            t.data += rng.standard_normal(t.shape) * 0.05

        def build(om=om):
            return T.cross_entropy(R.ouroboros_forward(om, tokens, 2), targets)

        got = TR.grad_check(build, params, samples=args.samples, seed=args.seed)
        got.pop("worst")
        report.update(got)
    worst = max(report.values())
    for name in sorted(report):
        print(f"{name}\t{report[name]:.3e}")
    print(f"worst\t{worst:.3e}")
    if not worst < 1e-4:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("gradient check passed")
    return 0


def cmd_params(args) -> int:
    if args.dims == "qwen3b":
        groups = R.census_from_dims(**R.QWEN3B_DIMS)
        groups["trainable_total"] = (groups["controller"] + groups["gate_weights"]
                                     + groups["gate_bias"] + groups["stepnorm"])
    else:
        base = M.init_base_model(M.ModelConfig(), seed=args.seed)
        core = S.run_surgery(base, S.toy_split(8), rank=args.rank, alpha=16.0)
        om = R.init_ouroboros(core, "controller", n_max=args.n_max,
                              controller_width=args.controller_width)
        groups = R.census(om)
    order = ["controller", "static_table", "gate_weights", "gate_bias", "stepnorm",
             "lora_bases", "frozen_core", "trainable_total", "frozen_total"]
    for key in order:
        if key in groups:
            print(f"{key}\t{groups[key]:,}")
    return 0


# --- argument plumbing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ouro",
        description="Recurrent-depth transformer pipeline on byte corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value overrides file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "."),
                        help="output directory")
    common.add_argument("--f64", action="store_true",
                        help="use float64 where a dtype is chosen")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--corpus-bytes", type=int, default=1 << 20)
    corpus.add_argument("--corpus-seed", type=int, default=0)
    corpus.add_argument("--corpus-dir", default=None,
                        help="concatenate *.txt files instead of the synthetic stream")

    p = sub.add_parser("pretrain", parents=[common, corpus],
                       help="train the dense toy model from scratch")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("surgery", parents=[common],
                       help="split a dense checkpoint and factorize the residual")
    p.add_argument("--base", required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--prelude", type=int, default=None)
    p.add_argument("--recurrent-index", type=int, default=None)
    p.add_argument("--coda", type=int, default=None)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--controller-width", type=int, default=16)
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("train", parents=[common, corpus],
                       help="train one variant's adapter groups")
    p.add_argument("--model", required=True, help="surgered checkpoint")
    p.add_argument("--variant", required=True, choices=R.VARIANTS)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--controller-width", type=int, default=16)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="held-out losses and beats-baseline counts")
    p.add_argument("--model", required=True, help="trained checkpoint")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--seq-len", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, corpus],
                       help="sweep variants x depths x ranks x lrs")
    p.add_argument("--base", required=True, help="dense checkpoint")
    p.add_argument("--variants", default="controller,static")
    p.add_argument("--depths", default="1,2,4,8,16")
    p.add_argument("--ranks", default="8,32,64")
    p.add_argument("--lrs", default="3e-4,1e-3")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--controller-width", type=int, default=16)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference audit of every trainable group")
    p.add_argument("--samples", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", parents=[common],
                       help="parameter census by component")
    p.add_argument("--dims", choices=("qwen3b",), default=None)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--controller-width", type=int, default=16)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, TrainingAborted) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as e:
        print(f"io failure: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
