"""Byte-level corpora, batch drawing, checkpoints, and config parsing.

Training data is raw bytes: every token is one byte, so the vocabulary is
fixed at 256 and no tokenizer state needs to be stored or versioned.
Checkpoints use a small self-describing binary container with a trailing
CRC so any corruption is detected at load time.
"""

import dataclasses
import struct
import typing
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, BadVersionError, CheckpointError,
                     ChecksumError, ConfigError)

MAGIC = b"OURO"
VERSION = 1

_DTYPE_CODES = {np.float32: 0, np.float64: 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass(frozen=True)
class ByteCorpus:
    """Training bytes plus held-out evaluation passages.

    The held-out passages may never occur verbatim inside the training
    stream; that containment check runs once at construction so every
    downstream evaluation can trust the split.
    """

    train: np.ndarray
    heldout: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.train.dtype != np.uint8 or self.train.ndim != 1:
            raise ConfigError("corpus train stream must be a 1-d uint8 array")
        blob = self.train.tobytes()
        for i, passage in enumerate(self.heldout):
            if not passage:
                raise ConfigError(f"held-out passage {i} is empty")
            if blob.find(passage) >= 0:
                raise ConfigError(f"held-out passage {i} leaks into the training stream")

    @property
    def n_bytes(self) -> int:
        return int(self.train.shape[0])


def make_corpus(train_bytes: bytes, heldout: tuple[bytes, ...] = ()) -> ByteCorpus:
    return ByteCorpus(np.frombuffer(train_bytes, dtype=np.uint8).copy(), tuple(heldout))


_ARTICLES = ("the", "a", "every", "one")
_NOUNS = ("kiln", "river", "lantern", "mill", "harbor", "ledger", "orchard", "signal")
_VERBS = ("turns", "holds", "feeds", "guards", "crosses", "measures", "warms", "maps")


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic word-soup stream with strong local statistics.

    Sentences follow a fixed article-noun-verb-article-noun template over
    small word pools, which keeps next-byte entropy low enough that a tiny
    model shows measurable progress within a short training run.
    """
    if n_bytes <= 0:
        raise ConfigError("corpus size must be positive")
    rng = np.random.default_rng(seed)
    parts = []
    size = 0
    while size < n_bytes:
        words = (_ARTICLES[rng.integers(len(_ARTICLES))],
                 _NOUNS[rng.integers(len(_NOUNS))],
                 _VERBS[rng.integers(len(_VERBS))],
                 _ARTICLES[rng.integers(len(_ARTICLES))],
                 _NOUNS[rng.integers(len(_NOUNS))])
        sentence = (" ".join(words) + ". ").encode("ascii")
        parts.append(sentence)
        size += len(sentence)
    return b"".join(parts)[:n_bytes]


def next_batch(corpus: ByteCorpus, batch: int, seq_len: int, rng) -> np.ndarray:
    """Draw [batch, seq_len + 1] token blocks from random offsets.

    Offsets are drawn one per sample, so splitting a batch into
    micro-batches consumes the identical rng stream and reproduces the
    same blocks.
    """
    span = seq_len + 1
    n = corpus.n_bytes
    if n < span:
        raise ConfigError(f"corpus of {n} bytes is too small for blocks of {span}")
    rows = []
    for _ in range(batch):
        off = int(rng.integers(0, n - span + 1))
        rows.append(corpus.train[off:off + span])
    return np.stack(rows).astype(np.int64)


def batcher(corpus: ByteCorpus, seq_len: int):
    """Adapt a corpus to the (rng, batch) callable the train loop expects."""
    def draw(rng, batch: int) -> np.ndarray:
        return next_batch(corpus, batch, seq_len, rng)
    return draw


def heldout_blocks(passage: bytes, seq_len: int) -> np.ndarray:
    """Cut one passage into non-overlapping [K, seq_len + 1] blocks."""
    span = seq_len + 1
    if len(passage) < span:
        raise ConfigError(f"passage of {len(passage)} bytes is shorter than {span}")
    k = len(passage) // span
    flat = np.frombuffer(passage[:k * span], dtype=np.uint8)
    return flat.reshape(k, span).astype(np.int64)


def load_heldout() -> tuple[bytes, ...]:
    """Evaluation passages bundled with the package, in filename order."""
    root = resources.files("ouro").joinpath("assets/heldout")
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".txt"))
    return tuple(root.joinpath(name).read_bytes() for name in names)


def load_corpus_dir(path) -> bytes:
    """Concatenate every *.txt under path in lexicographic filename order."""
    files = sorted(Path(path).glob("*.txt"), key=lambda p: p.name)
    if not files:
        raise ConfigError(f"no .txt files under {path}")
    return b"".join(p.read_bytes() for p in files)


# --- checkpoint container ---------------------------------------------------
#
# magic "OURO" | u32 version | u32 count
# per tensor:  u32 name_len | name utf-8 | u8 dtype | u32 rank | u64*rank dims
#              | payload (little-endian, C order)
# trailer:     u32 crc32 over every preceding byte
#
# Tensors are stored sorted by name so identical states produce identical
# files byte for byte.


def save_tensors(path, named: dict) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    items = sorted(named.items())
    buf += struct.pack("<I", len(items))
    for name, t in items:
        arr = t.data if isinstance(t, T.Tensor) else np.asarray(t)
        code = _DTYPE_CODES.get(arr.dtype.type)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<I", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<BI", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path} does not start with {MAGIC!r}")
    if len(data) < 16:
        raise ChecksumError("checkpoint is truncated")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        # distinguish an unsupported version from plain corruption
        version = struct.unpack("<I", data[4:8])[0]
        if version != VERSION:
            raise BadVersionError(f"checkpoint version {version}, expected {VERSION}")
        raise ChecksumError(f"crc mismatch in {path}")
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise BadVersionError(f"checkpoint version {version}, expected {VERSION}")
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        code = r.take(1)[0]
        if code not in _CODE_DTYPES:
            raise ChecksumError(f"unknown dtype code {code}")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(n * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(r.data):
        raise ChecksumError("trailing bytes after last tensor")
    return out


def restore_tensors(named: dict, arrays: dict) -> None:
    """Copy loaded arrays into live tensors in place, strictly by name."""
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing={missing} extra={extra}")
    for name, t in named.items():
        arr = arrays[name]
        if t.shape != arr.shape or t.dtype != arr.dtype:
            raise CheckpointError(
                f"{name}: stored {arr.dtype}{arr.shape}, model wants {t.dtype}{t.shape}")
        t.data[...] = arr


def save_state(path, named: dict, meta: dict) -> None:
    """Checkpoint plus a human-readable sidecar describing how to rebuild."""
    save_tensors(path, named)
    Path(str(path) + ".cfg").write_text(format_kv(meta))


def load_state(path) -> tuple[dict, dict]:
    sidecar = Path(str(path) + ".cfg")
    if not sidecar.exists():
        raise CheckpointError(f"missing sidecar {sidecar}")
    return load_tensors(path), parse_kv(sidecar.read_text())


# --- key=value configs -------------------------------------------------------


def parse_kv(text: str) -> dict:
    """Parse key=value lines; '#' starts a comment, blanks are skipped."""
    out = {}
    for ln_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln_no}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {ln_no}: empty key")
        if key in out:
            raise ConfigError(f"line {ln_no}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(fields: dict) -> str:
    lines = []
    for key in sorted(fields):
        value = fields[key]
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_tuple(text: str) -> tuple:
    return tuple(float(p) for p in text.strip("()").split(","))


def config_schema(cls) -> dict:
    """Map a config dataclass's fields to string-to-value casters."""
    casters = {}
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if tp is bool:
            casters[f.name] = _parse_bool
        elif tp in (int, float, str):
            casters[f.name] = tp
        elif typing.get_origin(tp) is tuple:
            casters[f.name] = _parse_float_tuple
        else:
            raise ConfigError(f"field {f.name} has unsupported config type {tp}")
    return casters


def coerce_fields(raw: dict, schema: dict) -> dict:
    """Apply a schema to parsed strings; unknown keys are hard errors."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, text in raw.items():
        try:
            out[key] = schema[key](text)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
    return out
