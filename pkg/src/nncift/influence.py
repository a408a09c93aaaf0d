"""Ground-truth influence values for sample pairs and single samples.

Four valuation methods share this module:

* delift: probe the target's log-probabilities with and without an
  in-context example; the value is how much the example shrinks the
  distance to the target.
* delift_se: cosine similarity of precomputed pair embeddings.
* less: cosine similarity of precomputed (optionally projected)
  gradient features.
* selectit: pointwise certainty score aggregated over rating prompts
  and model scales, weighted by parameter count.

Partial (quadrant-restricted) results live in a masked matrix that
serializes to the NNCIFTK binary format: magic ``NNCIFTK\\0``, u32 LE m,
u32 LE n, m*n float32 LE values row-major, then ceil(m*n/8) mask bytes
(bit set = cell valid), cells in row-major order, least significant bit
first within each byte.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datasets import DatasetPair
from .errors import (
    DataValidationError,
    FileFormatError,
    PayloadLengthError,
    RecordNotFoundError,
)
from .probes import CostLedger, Provider

NNK_MAGIC = b"NNCIFTK\x00"
_NNK_HEADER = struct.Struct("<8sII")

PAIRWISE_METHODS = ("delift", "delift_se", "less")
POINTWISE_METHODS = ("selectit",)


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    """m x n influence values with a per-cell validity mask.

    Invalid cells are stored as 0.0 so serialized bytes depend only on
    the valid content.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} != values shape {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise DataValidationError("valid cells contain non-finite values")
        values = np.where(mask, values, np.float32(0.0))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values: np.ndarray) -> "InfluenceMatrix":
        values = np.asarray(values)
        return cls(values=values, mask=np.ones(values.shape, dtype=bool))

    @property
    def m(self) -> int:
        return int(self.values.shape[0])

    @property
    def n(self) -> int:
        return int(self.values.shape[1])

    @property
    def fully_valid(self) -> bool:
        return bool(self.mask.all())

    def valid_count(self) -> int:
        return int(self.mask.sum())

    def overlay(self, other: "InfluenceMatrix") -> "InfluenceMatrix":
        """This matrix with other's valid cells written on top."""
        if other.values.shape != self.values.shape:
            raise ValueError("shape mismatch in overlay")
        return InfluenceMatrix(
            values=np.where(other.mask, other.values, self.values),
            mask=self.mask | other.mask,
        )

    def to_bytes(self) -> bytes:
        header = _NNK_HEADER.pack(NNK_MAGIC, self.m, self.n)
        payload = self.values.astype("<f4", copy=False).tobytes(order="C")
        mask_bytes = np.packbits(self.mask.reshape(-1), bitorder="little").tobytes()
        return header + payload + mask_bytes

    @classmethod
    def from_bytes(cls, raw: bytes, origin: str = "<bytes>") -> "InfluenceMatrix":
        if len(raw) < _NNK_HEADER.size:
            raise PayloadLengthError(f"{origin}: shorter than the 16-byte header")
        magic, m, n = _NNK_HEADER.unpack_from(raw)
        if magic != NNK_MAGIC:
            raise FileFormatError(f"{origin}: bad magic {magic!r}")
        cells = m * n
        value_bytes = cells * 4
        mask_len = (cells + 7) // 8
        expected = _NNK_HEADER.size + value_bytes + mask_len
        if len(raw) != expected:
            raise PayloadLengthError(f"{origin}: file is {len(raw)} bytes, expected {expected}")
        values = np.frombuffer(raw, dtype="<f4", count=cells, offset=_NNK_HEADER.size)
        packed = np.frombuffer(raw, dtype=np.uint8, offset=_NNK_HEADER.size + value_bytes)
        mask = np.unpackbits(packed, count=cells, bitorder="little").astype(bool)
        return cls(values=values.reshape(m, n).copy(), mask=mask.reshape(m, n))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_influence(matrix: InfluenceMatrix, path: str | Path) -> None:
    Path(path).write_bytes(matrix.to_bytes())


def load_influence(path: str | Path) -> InfluenceMatrix:
    path = Path(path)
    return InfluenceMatrix.from_bytes(path.read_bytes(), origin=str(path))


@dataclass(frozen=True, eq=False)
class PointwiseScores:
    """Scores for a subset of the m samples on the fine-tuning side."""

    m: int
    indices: np.ndarray
    values: np.ndarray
    norm_stats: tuple[float, float] | None = None

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ValueError("indices and values must be 1-D and aligned")
        if len(np.unique(indices)) != len(indices):
            raise ValueError("duplicate indices")
        if indices.size and (indices.min() < 0 or indices.max() >= self.m):
            raise ValueError("index out of range")
        if not np.all(np.isfinite(values)):
            raise DataValidationError("scores contain non-finite values")
        if self.norm_stats is not None and self.norm_stats[0] > self.norm_stats[1]:
            raise ValueError("norm_stats min must be <= max")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    def to_matrix(self) -> InfluenceMatrix:
        """Pack into an m x 1 masked matrix so pointwise runs reuse the
        pairwise artifact format."""
        values = np.zeros((self.m, 1), dtype=np.float32)
        mask = np.zeros((self.m, 1), dtype=bool)
        values[self.indices, 0] = self.values.astype(np.float32)
        mask[self.indices, 0] = True
        return InfluenceMatrix(values=values, mask=mask)

    @classmethod
    def from_matrix(cls, matrix: InfluenceMatrix, norm_stats=None) -> "PointwiseScores":
        if matrix.n != 1:
            raise ValueError("pointwise matrices must have a single column")
        indices = np.nonzero(matrix.mask[:, 0])[0]
        return cls(
            m=matrix.m,
            indices=indices,
            values=matrix.values[indices, 0].astype(np.float64),
            norm_stats=norm_stats,
        )


@dataclass(frozen=True)
class ScaleEntry:
    """One valuation model size: label, parameter count, and its probe."""

    label: str
    parameter_count: int
    probe: Provider

    def __post_init__(self):
        if self.parameter_count <= 0:
            raise ValueError("parameter_count must be positive")


@dataclass(frozen=True)
class ModelScaleSpec:
    entries: tuple[ScaleEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("at least one scale entry required")
        object.__setattr__(self, "entries", entries)

    def weights(self) -> list[float]:
        total = sum(e.parameter_count for e in self.entries)
        return [e.parameter_count / total for e in self.entries]


def distance_from_logprobs(logprobs: Sequence[float]) -> float:
    """1 minus the length-normalized geometric-mean target probability.

    0 means the model assigns probability 1 to every target token; the
    value approaches 1 as the target becomes unpredictable.
    """
    if len(logprobs) == 0:
        raise ValueError("logprobs must be non-empty")
    if any(lp > 0 for lp in logprobs):
        raise DataValidationError("log-probabilities must be <= 0")
    return 1.0 - math.exp(math.fsum(logprobs) / len(logprobs))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, exact at the poles: equal vectors give 1.0,
    negated give -1.0 (sqrt(x*x) == x in IEEE-754 double)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(a @ a)
    nb = float(b @ b)
    if na == 0.0 or nb == 0.0:
        raise DataValidationError("cosine undefined for zero-norm vectors")
    return float(a @ b) / math.sqrt(na * nb)


def _delift_context(i_prompt: str, i_response: str, j_prompt: str) -> str:
    return f"{i_prompt}\n{i_response}\n\n{j_prompt}"


def delift_pair(
    i: int,
    j: int,
    pair: DatasetPair,
    probe: Provider,
    ledger: CostLedger,
    noctx_cache: dict[int, float] | None = None,
) -> float:
    """How much sample i, used as an in-context example, shrinks the
    distance between the model's prediction and target j's response.

    Positive means the example helps. The context-free term depends only
    on j; passing a cache dict across calls avoids re-probing it.
    """
    i_prompt, i_response = pair.text("fine_tune", i)
    j_prompt, j_response = pair.text("target", j)
    if noctx_cache is not None and j in noctx_cache:
        d_noctx = noctx_cache[j]
    else:
        lp = probe.target_logprobs(j_prompt, j_response, ledger, key=str(j))
        d_noctx = distance_from_logprobs(lp)
        if noctx_cache is not None:
            noctx_cache[j] = d_noctx
    ctx = _delift_context(i_prompt, i_response, j_prompt)
    lp_ctx = probe.target_logprobs(ctx, j_response, ledger, key=f"{i}:{j}")
    d_ctx = distance_from_logprobs(lp_ctx)
    return d_noctx - d_ctx


def delift_se_pair(i: int, j: int, pair: DatasetPair) -> float:
    """Cosine similarity of the two samples' pair embeddings."""
    return cosine(pair.fine_tune.row(i), pair.target.row(j))


def less_pair(i: int, j: int, pair: DatasetPair) -> float:
    """Cosine similarity of the two samples' gradient features."""
    if pair.fine_tune_gradients is None or pair.target_gradients is None:
        raise RecordNotFoundError("gradient features not loaded for both sides")
    return cosine(pair.fine_tune_gradients.row(i), pair.target_gradients.row(j))


def random_project(vec: np.ndarray, seed: int, d: int) -> np.ndarray:
    """Seeded Rademacher projection to d dimensions, scaled by 1/sqrt(d)
    so squared norms are preserved in expectation."""
    if d < 1:
        raise ValueError("projection dim must be >= 1")
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    rng = np.random.Generator(np.random.PCG64(seed))
    signs = rng.integers(0, 2, size=(d, vec.shape[0])).astype(np.float64) * 2.0 - 1.0
    return (signs @ vec) / math.sqrt(d)


def _render_prompt(template: str, prompt_text: str) -> str:
    if "{prompt}" in template:
        return template.replace("{prompt}", prompt_text)
    if not template:
        return prompt_text
    return f"{template}\n{prompt_text}"


def selectit_point(
    i: int,
    prompts: Sequence[str],
    scales: ModelScaleSpec,
    pair: DatasetPair,
    ledger: CostLedger,
) -> float:
    """Certainty score for sample i: per-position max next-token
    probabilities averaged along the response, averaged over rating
    prompts, then combined across model scales proportionally to
    parameter count. Sums use math.fsum, so prompt and scale order
    cannot change the result."""
    if not prompts:
        raise ValueError("at least one prompt template required")
    prompt_text, response_text = pair.text("fine_tune", i)
    sentence_scores: list[float] = []
    for entry in scales.entries:
        per_prompt: list[float] = []
        for p, template in enumerate(prompts):
            context = _render_prompt(template, prompt_text)
            probs = entry.probe.token_max_probs(context, response_text, ledger, key=f"{i}:{p}")
            if not probs:
                raise DataValidationError(f"empty token list for sample {i}, prompt {p}")
            per_prompt.append(math.fsum(probs) / len(probs))
        sentence_scores.append(math.fsum(per_prompt) / len(per_prompt))
    weighted = math.fsum(
        entry.parameter_count * s for entry, s in zip(scales.entries, sentence_scores)
    )
    total = sum(entry.parameter_count for entry in scales.entries)
    return weighted / total


def compute_influence(
    method: str,
    cells: Iterable[tuple[int, int]],
    pair: DatasetPair,
    probe: Provider | None = None,
    ledger: CostLedger | None = None,
) -> InfluenceMatrix:
    """Fill exactly the requested cells of the m x n influence matrix.

    delift probes the model through `probe` (context-free terms cached
    per j); delift_se and less read precomputed inputs and cost zero
    probe calls.
    """
    if method not in PAIRWISE_METHODS:
        raise ValueError(f"unknown pairwise method {method!r}")
    if method == "delift" and (probe is None or ledger is None):
        raise ValueError("delift requires a probe and a ledger")
    values = np.zeros((pair.m, pair.n), dtype=np.float32)
    mask = np.zeros((pair.m, pair.n), dtype=bool)
    noctx_cache: dict[int, float] = {}
    for i, j in cells:
        try:
            if method == "delift":
                value = delift_pair(i, j, pair, probe, ledger, noctx_cache)
            elif method == "delift_se":
                value = delift_se_pair(i, j, pair)
            else:
                value = less_pair(i, j, pair)
        except Exception as exc:
            raise type(exc)(f"at cell ({i}, {j}): {exc}") from exc
        values[i, j] = value
        mask[i, j] = True
    return InfluenceMatrix(values=values, mask=mask)


def compute_pointwise(
    method: str,
    indices: Iterable[int],
    prompts: Sequence[str],
    scales: ModelScaleSpec,
    pair: DatasetPair,
    ledger: CostLedger,
) -> PointwiseScores:
    """One score per requested fine-tuning index; cost grows as
    len(indices) * len(prompts) * len(scales) forward calls."""
    if method not in POINTWISE_METHODS:
        raise ValueError(f"unknown pointwise method {method!r}")
    index_list = [int(i) for i in indices]
    scores: list[float] = []
    for i in index_list:
        try:
            scores.append(selectit_point(i, prompts, scales, pair, ledger))
        except Exception as exc:
            raise type(exc)(f"at index {i}: {exc}") from exc
    return PointwiseScores(
        m=pair.m,
        indices=np.array(index_list, dtype=np.int64),
        values=np.array(scores, dtype=np.float64),
    )
