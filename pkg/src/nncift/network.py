"""The trainable influence estimator: a two-layer perceptron.

Architecture: in_dim -> hidden (ReLU) -> 1 (logistic), so estimates are
confined to (0, 1). Training minimizes mean squared error against
influence values observed on the ID x ID corner; targets are affinely
mapped into [0, 1] first and the map travels with the parameters so
estimates and targets stay comparable.

Everything here is plain numpy with analytic gradients; the training
loop is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .datasets import DatasetPair, EmbeddingMatrix, QuadrantPartition, quadrant_index_sets
from .errors import CoverageError, DataValidationError, FileFormatError, TrainingError
from .influence import InfluenceMatrix, PointwiseScores
from .probes import CostLedger

QUADRANTS = ("Q1", "Q2", "Q3", "Q4")


@dataclass
class MlpParams:
    w1: np.ndarray  # hidden x in_dim
    b1: np.ndarray  # hidden
    w2: np.ndarray  # 1 x hidden
    b2: np.ndarray  # 1

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        hidden, in_dim = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape != (1, hidden) or self.b2.shape != (1,):
            raise ValueError("parameter shapes are inconsistent")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise DataValidationError("parameters contain non-finite values")

    @property
    def in_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[0])

    @property
    def parameter_count(self) -> int:
        return self.in_dim * self.hidden + self.hidden + self.hidden + 1

    @property
    def first_layer_parameter_count(self) -> int:
        # The hidden layer alone; reported alongside parameter_count
        # because the two are easy to conflate when quoting model size.
        return self.in_dim * self.hidden + self.hidden

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass(frozen=True)
class NormStats:
    """Affine map between raw influence targets and the unit interval."""

    min: float
    max: float

    def __post_init__(self):
        if not (math.isfinite(self.min) and math.isfinite(self.max)):
            raise DataValidationError("norm stats must be finite")
        if self.min > self.max:
            raise ValueError("norm min must be <= max")

    @classmethod
    def fit(cls, targets: np.ndarray) -> "NormStats":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.size == 0:
            raise ValueError("cannot fit norm stats to an empty target set")
        return cls(min=float(targets.min()), max=float(targets.max()))

    @property
    def degenerate(self) -> bool:
        return self.min == self.max

    def normalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.degenerate:
            return np.full_like(values, 0.5)
        return (values - self.min) / (self.max - self.min)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return self.min + values * (self.max - self.min)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    def optimizer_metadata(self) -> dict:
        return {
            "name": "adam",
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }


@dataclass(frozen=True)
class TrainResult:
    params: MlpParams
    epoch_losses: list[float]
    norm: NormStats


def init_params(seed: int, in_dim: int, hidden: int = 100) -> MlpParams:
    """Seeded scaled-uniform (Glorot) initialization, zero biases."""
    if in_dim < 1 or hidden < 1:
        raise ValueError("dims must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    lim1 = math.sqrt(6.0 / (in_dim + hidden))
    lim2 = math.sqrt(6.0 / (hidden + 1))
    return MlpParams(
        w1=rng.uniform(-lim1, lim1, size=(hidden, in_dim)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(1, hidden)),
        b2=np.zeros(1),
    )


def _logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_batch(params: MlpParams, x: np.ndarray):
    z1 = x @ params.w1.T + params.b1
    h = np.maximum(z1, 0.0)
    z2 = h @ params.w2.T + params.b2
    y = _logistic(z2)
    return y, z1, h


def forward(params: MlpParams, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != params.in_dim:
        raise ValueError(f"input has {x.shape[0]} features, net expects {params.in_dim}")
    if not np.all(np.isfinite(x)):
        raise DataValidationError("input contains non-finite values")
    y, _, _ = _forward_batch(params, x.reshape(1, -1))
    return float(y[0, 0])


def loss_and_gradients(params: MlpParams, x: np.ndarray, targets: np.ndarray):
    """Batch MSE and its exact analytic gradients.

    Returns (mse, grads) with grads shaped like the parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    if x.shape[0] != targets.shape[0]:
        raise ValueError("batch and targets misaligned")
    batch = x.shape[0]
    y, z1, h = _forward_batch(params, x)
    diff = y - targets
    mse = float(np.mean(diff**2))
    # d mse / d z2, through the logistic
    dz2 = (2.0 / batch) * diff * y * (1.0 - y)
    dw2 = dz2.T @ h
    db2 = dz2.sum(axis=0)
    dh = dz2 @ params.w2
    dz1 = dh * (z1 > 0.0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return mse, MlpParams(w1=dw1, b1=db1, w2=dw2, b2=db2)


class _Adam:
    def __init__(self, params: MlpParams, config: TrainConfig):
        self.config = config
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: MlpParams, grads: MlpParams) -> None:
        c = self.config
        self.t += 1
        for k, (arr, g) in enumerate(zip(params.arrays(), grads.arrays())):
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g**2
            m_hat = self.m[k] / (1.0 - c.beta1**self.t)
            v_hat = self.v[k] / (1.0 - c.beta2**self.t)
            arr -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


def train(
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    params: MlpParams | None = None,
) -> TrainResult:
    """Fit the estimator to (feature, influence) pairs from the ID corner.

    Targets are mapped into [0,1] by their observed range before
    training; the map is returned so estimates can be compared and
    inverted consistently. Mini-batch order is seeded; the whole run is
    deterministic for a fixed config.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if features.ndim != 2 or features.shape[0] == 0:
        raise TrainingError("empty training set: the ID corner has no cells (u too small)")
    if features.shape[0] != targets.shape[0]:
        raise ValueError("features and targets misaligned")
    if not np.all(np.isfinite(targets)):
        raise DataValidationError("targets contain non-finite values")
    norm = NormStats.fit(targets)
    t_norm = norm.normalize(targets)
    if params is None:
        params = init_params(config.seed, in_dim=features.shape[1], hidden=config.hidden)
    else:
        params = params.copy()
    if params.in_dim != features.shape[1]:
        raise ValueError(f"net expects {params.in_dim} features, got {features.shape[1]}")
    optimizer = _Adam(params, config)
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 1))))
    count = features.shape[0]
    losses = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(count)
        for start in range(0, count, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            _, grads = loss_and_gradients(params, features[batch_idx], t_norm[batch_idx])
            optimizer.step(params, grads)
        y, _, _ = _forward_batch(params, features)
        losses.append(float(np.mean((y.reshape(-1) - t_norm) ** 2)))
    return TrainResult(params=params, epoch_losses=losses, norm=norm)


def build_pair_features(pair: DatasetPair, cells: Iterable[tuple[int, int]]) -> np.ndarray:
    """Feature vectors for (i, j) cells: the two embeddings concatenated."""
    idx = np.array(list(cells), dtype=np.int64).reshape(-1, 2)
    fi = pair.fine_tune.rows[idx[:, 0]].astype(np.float64)
    tj = pair.target.rows[idx[:, 1]].astype(np.float64)
    return np.hstack([fi, tj])


def _batched_forward(params: MlpParams, features: np.ndarray, chunk: int = 8192) -> np.ndarray:
    outputs = np.empty(features.shape[0], dtype=np.float64)
    for start in range(0, features.shape[0], chunk):
        y, _, _ = _forward_batch(params, features[start:start + chunk])
        outputs[start:start + chunk] = y.reshape(-1)
    return outputs


def estimate_pairwise(
    params: MlpParams,
    pair: DatasetPair,
    cells: Iterable[tuple[int, int]],
    ledger: CostLedger,
) -> InfluenceMatrix:
    """Estimate the requested cells with the tiny network.

    Charges estimator_forwards, one per cell, and never forward_calls:
    keeping the two meters separate is the whole point of the approach.
    Outputs live in the normalized [0,1] target space.
    """
    if params.in_dim != 2 * pair.fine_tune.dim:
        raise ValueError(
            f"net expects in_dim {params.in_dim}, pair embeddings give {2 * pair.fine_tune.dim}"
        )
    cell_list = list(cells)
    values = np.zeros((pair.m, pair.n), dtype=np.float32)
    mask = np.zeros((pair.m, pair.n), dtype=bool)
    if cell_list:
        features = build_pair_features(pair, cell_list)
        outputs = _batched_forward(params, features)
        idx = np.array(cell_list, dtype=np.int64)
        values[idx[:, 0], idx[:, 1]] = outputs.astype(np.float32)
        mask[idx[:, 0], idx[:, 1]] = True
    ledger.add_estimator_forwards(len(cell_list))
    return InfluenceMatrix(values=values, mask=mask)


def estimate_pointwise(
    params: MlpParams,
    embeddings: EmbeddingMatrix,
    indices: Iterable[int],
    norm: NormStats,
    ledger: CostLedger,
) -> PointwiseScores:
    """Estimate pointwise scores; raw (0,1) outputs are mapped back
    through the stored target range so they are comparable with
    ground-truth scores."""
    if params.in_dim != embeddings.dim:
        raise ValueError(f"net expects in_dim {params.in_dim}, embeddings give {embeddings.dim}")
    index_list = [int(i) for i in indices]
    if index_list:
        features = embeddings.rows[index_list].astype(np.float64)
        outputs = _batched_forward(params, features)
        scores = norm.denormalize(outputs)
    else:
        scores = np.zeros(0)
    ledger.add_estimator_forwards(len(index_list))
    return PointwiseScores(
        m=embeddings.count,
        indices=np.array(index_list, dtype=np.int64),
        values=scores,
        norm_stats=(norm.min, norm.max),
    )


def mse_by_quadrant(
    estimates: InfluenceMatrix,
    truth: InfluenceMatrix,
    part: QuadrantPartition,
) -> dict[str, float]:
    """Mean squared difference per quadrant; empty quadrants yield NaN."""
    if estimates.values.shape != truth.values.shape:
        raise ValueError("estimate and truth shapes differ")
    out: dict[str, float] = {}
    for quadrant in QUADRANTS:
        rows, cols = quadrant_index_sets(part, quadrant)
        if len(rows) == 0 or len(cols) == 0:
            out[quadrant] = math.nan
            continue
        grid = np.ix_(rows, cols)
        if not estimates.mask[grid].all() or not truth.mask[grid].all():
            raise CoverageError(f"{quadrant} has invalid cells in estimates or truth")
        diff = estimates.values[grid].astype(np.float64) - truth.values[grid].astype(np.float64)
        out[quadrant] = float(np.mean(diff**2))
    return out


def baseline_estimates(kind: str, shape: tuple[int, int], seed: int = 0) -> InfluenceMatrix:
    """The two reference predictors: seeded uniform noise and constant 0."""
    m, n = shape
    if m < 0 or n < 0:
        raise ValueError("shape must be nonnegative")
    if kind == "predict_zero":
        values = np.zeros((m, n), dtype=np.float32)
    elif kind == "random_uniform":
        rng = np.random.Generator(np.random.PCG64(seed))
        values = rng.random((m, n)).astype(np.float32)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return InfluenceMatrix.full(values)


def save_params(
    result: TrainResult | None,
    path: str | Path,
    params: MlpParams | None = None,
    norm: NormStats | None = None,
    seed: int | None = None,
    optimizer: dict | None = None,
) -> None:
    """Write parameters (and the target-range map) as JSON; floats are
    serialized with full round-trip precision, so reload is bit-exact."""
    if result is not None:
        params = result.params
        norm = result.norm
    if params is None:
        raise ValueError("nothing to save")
    doc = {
        "in_dim": params.in_dim,
        "hidden": params.hidden,
        "parameter_count": params.parameter_count,
        "first_layer_parameter_count": params.first_layer_parameter_count,
        "seed": seed,
        "optimizer": optimizer or {},
        "w1": params.w1.tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "b2": params.b2.tolist(),
        "norm_stats": [norm.min, norm.max] if norm is not None else None,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_params(path: str | Path) -> tuple[MlpParams, NormStats | None, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON: {exc}") from exc
    required = {"in_dim", "hidden", "w1", "b1", "w2", "b2"}
    if not isinstance(doc, dict) or not required <= doc.keys():
        raise FileFormatError(f"{path}: missing required parameter fields")
    try:
        params = MlpParams(
            w1=np.array(doc["w1"], dtype=np.float64),
            b1=np.array(doc["b1"], dtype=np.float64),
            w2=np.array(doc["w2"], dtype=np.float64),
            b2=np.array(doc["b2"], dtype=np.float64),
        )
    except (ValueError, TypeError) as exc:
        raise FileFormatError(f"{path}: malformed parameter arrays: {exc}") from exc
    if params.in_dim != doc["in_dim"] or params.hidden != doc["hidden"]:
        raise FileFormatError(
            f"{path}: declared dims ({doc['in_dim']}, {doc['hidden']}) do not match arrays"
        )
    norm = None
    if doc.get("norm_stats") is not None:
        stats = doc["norm_stats"]
        if not isinstance(stats, list) or len(stats) != 2:
            raise FileFormatError(f"{path}: norm_stats must be a [min, max] pair")
        norm = NormStats(min=float(stats[0]), max=float(stats[1]))
    meta = {k: doc.get(k) for k in ("seed", "optimizer", "parameter_count",
                                    "first_layer_parameter_count")}
    return params, norm, meta
