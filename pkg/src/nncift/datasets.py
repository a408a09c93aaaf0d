"""Embedding datasets, their on-disk formats, and seeded quadrant partitions.

Two interchangeable file formats hold an embedding matrix:

* EMB1 binary: bytes 0-7 magic ``NNCIFT1\\0``, bytes 8-11 little-endian
  uint32 row count, bytes 12-15 little-endian uint32 dim, then
  ``count * dim`` IEEE-754 float32 little-endian values, row-major.
* JSON lines: one object per row, ``{"idx": int, "vec": [float, ...]}``,
  rows in ascending ``idx`` with no gaps.

Rows are opaque vectors; whatever produced them (and from which text) is
upstream of this module.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .errors import DataValidationError, FileFormatError, PayloadLengthError, RecordNotFoundError

EMB1_MAGIC = b"NNCIFT1\x00"
_EMB1_HEADER = struct.Struct("<8sII")

Quadrant = Literal["Q1", "Q2", "Q3", "Q4"]


def exact_ceil(fraction: float | int | str, count: int) -> int:
    """Ceiling of ``fraction * count`` computed on the decimal the caller wrote.

    Binary float products overshoot for inputs like 0.07 * 100
    (7.000000000000001), which would bump the ceiling by one; routing
    through Fraction(str(...)) keeps ceil(0.07 * 100) == 7.
    """
    if isinstance(fraction, int):
        return fraction * count
    return math.ceil(Fraction(str(fraction)) * count)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-major table of fixed-dimension float32 vectors."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=np.float32))
        if rows.ndim != 2:
            raise ValueError(f"embedding rows must be 2-D, got shape {rows.shape}")
        if rows.shape[1] < 1:
            raise ValueError("embedding dim must be >= 1")
        if rows.size and not np.all(np.isfinite(rows)):
            raise DataValidationError("embedding rows contain non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def row(self, idx: int) -> np.ndarray:
        return self.rows[idx]


@dataclass(frozen=True, eq=False)
class DatasetPair:
    """A fine-tuning pool and the target set that steers selection from it.

    Gradient feature matrices (for gradient-matching valuation) and text
    records keyed by row index (for probe-backed valuation) are optional;
    methods that need them check at use time.
    """

    fine_tune: EmbeddingMatrix
    target: EmbeddingMatrix
    fine_tune_gradients: EmbeddingMatrix | None = None
    target_gradients: EmbeddingMatrix | None = None
    fine_tune_texts: dict[int, tuple[str, str]] | None = None
    target_texts: dict[int, tuple[str, str]] | None = None

    def __post_init__(self):
        if self.fine_tune.dim != self.target.dim:
            raise ValueError(
                f"embedding dims differ: {self.fine_tune.dim} vs {self.target.dim}"
            )
        if self.fine_tune_gradients is not None and self.fine_tune_gradients.count != self.fine_tune.count:
            raise ValueError("fine_tune gradient count does not match fine_tune rows")
        if self.target_gradients is not None and self.target_gradients.count != self.target.count:
            raise ValueError("target gradient count does not match target rows")
        if (
            self.fine_tune_gradients is not None
            and self.target_gradients is not None
            and self.fine_tune_gradients.dim != self.target_gradients.dim
        ):
            raise ValueError("gradient feature dims differ between sides")

    @property
    def m(self) -> int:
        return self.fine_tune.count

    @property
    def n(self) -> int:
        return self.target.count

    def text(self, side: Literal["fine_tune", "target"], idx: int) -> tuple[str, str]:
        records = self.fine_tune_texts if side == "fine_tune" else self.target_texts
        if records is None or idx not in records:
            raise RecordNotFoundError(f"no text record for {side} index {idx}")
        return records[idx]


@dataclass(frozen=True, eq=False)
class QuadrantPartition:
    """Seeded ID/OOD split of both dataset sides.

    Index arrays are sorted; ``id_*`` and ``ood_*`` are disjoint and
    together cover [0, count) on their side.
    """

    u: float
    seed: int
    id_f: np.ndarray
    ood_f: np.ndarray
    id_t: np.ndarray
    ood_t: np.ndarray

    @property
    def m(self) -> int:
        return len(self.id_f) + len(self.ood_f)

    @property
    def n(self) -> int:
        return len(self.id_t) + len(self.ood_t)


def _fisher_yates(count: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.arange(count, dtype=np.int64)
    for k in range(count - 1, 0, -1):
        r = int(rng.integers(0, k + 1))
        idx[k], idx[r] = idx[r], idx[k]
    return idx


def _split_side(count: int, u: float | str, seed: int, side: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, side))))
    order = _fisher_yates(count, rng)
    n_id = exact_ceil(u, count)
    return np.sort(order[:n_id]), np.sort(order[n_id:])


def partition(pair: DatasetPair, u: float | str, seed: int) -> QuadrantPartition:
    """Split both sides into ID/OOD index sets, ID taking the first
    ceil(u * count) positions of a seeded Fisher-Yates shuffle."""
    u_value = float(Fraction(str(u)))
    if not 0.0 <= u_value <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u!r}")
    id_f, ood_f = _split_side(pair.m, u, seed, side=0)
    id_t, ood_t = _split_side(pair.n, u, seed, side=1)
    return QuadrantPartition(u=u_value, seed=seed, id_f=id_f, ood_f=ood_f, id_t=id_t, ood_t=ood_t)


def quadrant_index_sets(part: QuadrantPartition, quadrant: Quadrant) -> tuple[np.ndarray, np.ndarray]:
    """Row and column index arrays whose cross product is the quadrant."""
    sets = {
        "Q1": (part.id_f, part.id_t),
        "Q2": (part.id_f, part.ood_t),
        "Q3": (part.ood_f, part.id_t),
        "Q4": (part.ood_f, part.ood_t),
    }
    if quadrant not in sets:
        raise ValueError(f"unknown quadrant {quadrant!r}")
    return sets[quadrant]


def quadrant_pairs(part: QuadrantPartition, quadrant: Quadrant) -> Iterator[tuple[int, int]]:
    """Stream the quadrant's (fine_tune, target) index pairs in ascending order."""
    rows, cols = quadrant_index_sets(part, quadrant)
    for i in rows:
        for j in cols:
            yield int(i), int(j)


def quadrant_size(part: QuadrantPartition, quadrant: Quadrant) -> int:
    rows, cols = quadrant_index_sets(part, quadrant)
    return len(rows) * len(cols)


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a matrix to ``path``; ``.jsonl`` suffix selects the JSON-lines
    format, anything else the EMB1 binary format."""
    path = Path(path)
    if path.suffix == ".jsonl":
        if matrix.count == 0:
            raise ValueError("JSON-lines format cannot represent an empty matrix; use EMB1")
        with open(path, "w", encoding="utf-8") as fh:
            for idx in range(matrix.count):
                vec = [float(x) for x in matrix.rows[idx]]
                fh.write(json.dumps({"idx": idx, "vec": vec}) + "\n")
        return
    payload = matrix.rows.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_EMB1_HEADER.pack(EMB1_MAGIC, matrix.count, matrix.dim))
        fh.write(payload)


def _load_emb1(raw: bytes, path: Path) -> EmbeddingMatrix:
    if len(raw) < _EMB1_HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than the 16-byte header")
    magic, count, dim = _EMB1_HEADER.unpack_from(raw)
    if magic != EMB1_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if dim < 1:
        raise FileFormatError(f"{path}: dim must be >= 1, header says {dim}")
    expected = count * dim * 4
    body = raw[_EMB1_HEADER.size:]
    if len(body) != expected:
        raise PayloadLengthError(
            f"{path}: payload is {len(body)} bytes, header declares {expected}"
        )
    rows = np.frombuffer(body, dtype="<f4").reshape(count, dim)
    if rows.size and not np.all(np.isfinite(rows)):
        raise DataValidationError(f"{path}: payload contains non-finite values")
    return EmbeddingMatrix(rows=rows.copy())


def _load_jsonl(path: Path) -> EmbeddingMatrix:
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno + 1}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "idx" not in record or "vec" not in record:
                raise FileFormatError(f"{path}:{lineno + 1}: expected object with idx and vec")
            if record["idx"] != len(rows):
                raise FileFormatError(
                    f"{path}:{lineno + 1}: idx {record['idx']} out of order (expected {len(rows)})"
                )
            rows.append(record["vec"])
    if not rows:
        raise FileFormatError(f"{path}: no rows; empty matrices need the EMB1 format")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FileFormatError(f"{path}: rows have mixed lengths {sorted(widths)}")
    return EmbeddingMatrix(rows=np.array(rows, dtype=np.float32))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Load a matrix from either supported format, sniffing the EMB1 magic."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] == EMB1_MAGIC:
        return _load_emb1(raw, path)
    if path.suffix == ".jsonl" or raw.lstrip()[:1] in (b"{", b""):
        return _load_jsonl(path)
    raise FileFormatError(f"{path}: bad magic {raw[:8]!r}")


def save_texts(records: dict[int, tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx in sorted(records):
            prompt, response = records[idx]
            fh.write(json.dumps({"idx": idx, "prompt": prompt, "response": response}) + "\n")


def load_texts(path: str | Path) -> dict[int, tuple[str, str]]:
    """Load indexed (prompt, response) records from a JSON-lines file."""
    path = Path(path)
    records: dict[int, tuple[str, str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno + 1}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or not {"idx", "prompt", "response"} <= obj.keys():
                raise FileFormatError(f"{path}:{lineno + 1}: expected idx/prompt/response object")
            idx = obj["idx"]
            if not isinstance(idx, int) or idx < 0:
                raise FileFormatError(f"{path}:{lineno + 1}: idx must be a nonnegative integer")
            if idx in records:
                raise FileFormatError(f"{path}:{lineno + 1}: duplicate idx {idx}")
            records[idx] = (str(obj["prompt"]), str(obj["response"]))
    return records
