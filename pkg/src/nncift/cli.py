"""Config-driven pipeline runner.

Three individually runnable steps share one run directory and one flat
JSON config:

1. ``valuate``        probe the ID corner, write q1.nnk + ledger.json
2. ``train-estimate`` fit the estimator on that corner and estimate the
                      rest, write params.json + full.nnk (+ mse.json
                      when full ground truth is evaluated)
3. ``select``         pick the fine-tuning subset, write selection.json

``pipeline`` composes the three and emits report.json / report.txt with
a ledger verification verdict; given u_sweep/v_sweep lists it runs one
pipeline per (u, v) cell in a subdirectory each.

Exit codes: 0 success, 2 config error, 3 training error, 4 selection
error, 5 probe error. Anything unmapped exits 1.

Artifacts q1.nnk, full.nnk, params.json, and selection.json are byte
deterministic for a fixed config and seed; ledger.json and the reports
carry wall-clock times and are not.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datasets import (
    DatasetPair,
    EmbeddingMatrix,
    QuadrantPartition,
    load_embeddings,
    load_texts,
    partition,
    quadrant_pairs,
)
from .errors import (
    ConfigError,
    CoverageError,
    DataValidationError,
    FileFormatError,
    NnciftError,
    ProbeError,
    RecordNotFoundError,
    SelectionError,
    TrainingError,
)
from .influence import (
    PAIRWISE_METHODS,
    POINTWISE_METHODS,
    InfluenceMatrix,
    ModelScaleSpec,
    PointwiseScores,
    ScaleEntry,
    compute_influence,
    compute_pointwise,
    load_influence,
    save_influence,
)
from .network import (
    TrainConfig,
    baseline_estimates,
    build_pair_features,
    estimate_pairwise,
    estimate_pointwise,
    mse_by_quadrant,
    save_params,
    train,
)
from .probes import CostLedger, build_provider, record_gradient_cost
from .reporting import REPORT_JSON, build_cost_report, emit_report, verify_ledger
from .selection import (
    budget_from_fraction,
    facility_location_greedy,
    normalize_kernel,
    topk_pointwise,
    topk_rowmax,
)

Q1_FILE = "q1.nnk"
FULL_FILE = "full.nnk"
PARAMS_FILE = "params.json"
MSE_FILE = "mse.json"
SELECTION_FILE = "selection.json"
LEDGER_FILE = "ledger.json"
SWEEP_FILE = "sweep.json"

METHOD_SELECTOR = {
    "delift": "facility_location",
    "delift_se": "facility_location",
    "less": "topk_rowmax",
    "selectit": "topk_pointwise",
}

_PROVIDER_KINDS = ("synthetic", "file", "http")
_TRAIN_KEYS = frozenset(
    {"epochs", "learning_rate", "batch_size", "hidden", "beta1", "beta2", "eps"}
)
_SCALE_KEYS = frozenset({"label", "parameter_count", "probe"})
_DEFAULT_PROMPTS = ["Rate the quality of the following instruction sample.\n{prompt}"]

_CONFIG_KEYS = frozenset(
    {
        "method",
        "u",
        "v",
        "seed",
        "fine_tune_embeddings",
        "target_embeddings",
        "fine_tune_gradients",
        "target_gradients",
        "fine_tune_texts",
        "target_texts",
        "probe",
        "train",
        "prompts",
        "scales",
        "pure_estimates",
        "evaluate_truth",
        "per_call_cost",
        "u_sweep",
        "v_sweep",
        "out_dir",
    }
)


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved run: defaults filled, overrides applied.

    ``resolved`` is the JSON-native echo of every field; its canonical
    serialization (minus out_dir, which is where the run lands, not
    what it is) hashes to the run's identity.
    """

    method: str
    u: float | int | str
    v: float | int | str
    seed: int
    fine_tune_embeddings: str
    target_embeddings: str | None
    fine_tune_gradients: str | None
    target_gradients: str | None
    fine_tune_texts: str | None
    target_texts: str | None
    probe: dict
    train_overrides: dict
    prompts: list[str]
    scales: list[dict]
    pure_estimates: bool
    evaluate_truth: bool
    per_call_cost: dict | None
    u_sweep: list | None
    v_sweep: list | None
    out_dir: Path
    resolved: dict

    @property
    def config_hash(self) -> str:
        material = {k: v for k, v in self.resolved.items() if k != "out_dir"}
        canonical = json.dumps(material, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def run_id(self) -> str:
        return self.config_hash[:12]

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train_overrides)


def _check_fraction(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{name} must be a number in [0, 1], got {value!r}")
    try:
        parsed = Fraction(str(value))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{name} must be a number in [0, 1], got {value!r}") from exc
    if not 0 <= parsed <= 1:
        raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")


def _default_scales(seed: int) -> list[dict]:
    # two synthetic valuation-model sizes; the seeds keep them distinct
    return [
        {"label": "1b", "parameter_count": 1_000_000_000,
         "probe": {"provider": "synthetic", "seed": seed + 1}},
        {"label": "3b", "parameter_count": 3_000_000_000,
         "probe": {"provider": "synthetic", "seed": seed + 2}},
    ]


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def resolve_config(
    doc: dict,
    out_override: str | Path | None = None,
    seed_override: int | None = None,
) -> RunConfig:
    """Validate a flat config document and fill every default.

    Pure: touches no files, so an invalid method fails before any work.
    """
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")

    method = doc.get("method")
    known = PAIRWISE_METHODS + POINTWISE_METHODS
    if method not in known:
        raise ConfigError(f"method must be one of {', '.join(known)}, got {method!r}")

    u = doc.get("u", 0.05)
    v = doc.get("v", 0.3)
    _check_fraction("u", u)
    _check_fraction("v", v)

    seed = seed_override if seed_override is not None else doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    fine_path = doc.get("fine_tune_embeddings")
    if not fine_path:
        raise ConfigError("fine_tune_embeddings path is required")
    target_path = doc.get("target_embeddings")
    if method in PAIRWISE_METHODS and not target_path:
        raise ConfigError(f"{method} needs target_embeddings")

    grads_f = doc.get("fine_tune_gradients")
    grads_t = doc.get("target_gradients")
    if method == "less" and not (grads_f and grads_t):
        raise ConfigError("less needs fine_tune_gradients and target_gradients")

    probe = dict(doc.get("probe") or {"provider": "synthetic"})
    kind = probe.get("provider")
    if kind not in _PROVIDER_KINDS:
        raise ConfigError(f"probe provider must be one of {', '.join(_PROVIDER_KINDS)}")
    if kind == "synthetic":
        probe.setdefault("seed", seed)

    texts_f = doc.get("fine_tune_texts")
    texts_t = doc.get("target_texts")
    if kind != "synthetic":
        # only the synthetic provider can score generated placeholder text
        if method == "delift" and not (texts_f and texts_t):
            raise ConfigError("delift with a non-synthetic provider needs text records on both sides")
        if method == "selectit" and not texts_f:
            raise ConfigError("selectit with a non-synthetic provider needs fine_tune_texts")

    train_overrides = dict(doc.get("train") or {})
    bad = sorted(set(train_overrides) - _TRAIN_KEYS)
    if bad:
        raise ConfigError(f"unknown train fields: {', '.join(bad)}")

    prompts = list(doc.get("prompts") or _DEFAULT_PROMPTS)
    if not prompts or not all(isinstance(p, str) and p for p in prompts):
        raise ConfigError("prompts must be a non-empty list of non-empty strings")

    scales = doc.get("scales")
    if scales is None:
        if method in POINTWISE_METHODS and kind != "synthetic":
            raise ConfigError("selectit with a non-synthetic provider needs explicit scales")
        scales = _default_scales(seed)
    if not isinstance(scales, list) or not scales:
        raise ConfigError("scales must be a non-empty list")
    scales = [dict(s) if isinstance(s, dict) else s for s in scales]
    for entry in scales:
        if not isinstance(entry, dict):
            raise ConfigError("each scale must be a mapping")
        bad = sorted(set(entry) - _SCALE_KEYS)
        if bad:
            raise ConfigError(f"unknown scale fields: {', '.join(bad)}")
        if "label" not in entry or "parameter_count" not in entry:
            raise ConfigError("each scale needs a label and a parameter_count")
        count = entry["parameter_count"]
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise ConfigError("scale parameter_count must be a positive integer")

    pure_estimates = doc.get("pure_estimates", False)
    if not isinstance(pure_estimates, bool):
        raise ConfigError("pure_estimates must be a boolean")
    evaluate_truth = doc.get("evaluate_truth")
    if evaluate_truth is None:
        evaluate_truth = kind != "http"
    if not isinstance(evaluate_truth, bool):
        raise ConfigError("evaluate_truth must be a boolean")

    per_call_cost = doc.get("per_call_cost")
    if per_call_cost is not None and not isinstance(per_call_cost, dict):
        raise ConfigError("per_call_cost must be a mapping")

    u_sweep = doc.get("u_sweep")
    v_sweep = doc.get("v_sweep")
    for name, sweep in (("u_sweep", u_sweep), ("v_sweep", v_sweep)):
        if sweep is None:
            continue
        if not isinstance(sweep, list) or not sweep:
            raise ConfigError(f"{name} must be a non-empty list")
        for value in sweep:
            _check_fraction(name, value)

    out_dir = Path(out_override) if out_override else Path(doc.get("out_dir") or "nncift-run")

    resolved = {
        "method": method,
        "u": u,
        "v": v,
        "seed": seed,
        "fine_tune_embeddings": fine_path,
        "target_embeddings": target_path,
        "fine_tune_gradients": grads_f,
        "target_gradients": grads_t,
        "fine_tune_texts": texts_f,
        "target_texts": texts_t,
        "probe": probe,
        "train": train_overrides,
        "prompts": prompts,
        "scales": scales,
        "pure_estimates": pure_estimates,
        "evaluate_truth": evaluate_truth,
        "per_call_cost": per_call_cost,
        "u_sweep": u_sweep,
        "v_sweep": v_sweep,
        "out_dir": str(out_dir),
    }
    return RunConfig(
        method=method,
        u=u,
        v=v,
        seed=seed,
        fine_tune_embeddings=fine_path,
        target_embeddings=target_path,
        fine_tune_gradients=grads_f,
        target_gradients=grads_t,
        fine_tune_texts=texts_f,
        target_texts=texts_t,
        probe=probe,
        train_overrides=train_overrides,
        prompts=prompts,
        scales=scales,
        pure_estimates=pure_estimates,
        evaluate_truth=evaluate_truth,
        per_call_cost=per_call_cost,
        u_sweep=u_sweep,
        v_sweep=v_sweep,
        out_dir=out_dir,
        resolved=resolved,
    )


def _generated_texts(count: int, side: str) -> dict[int, tuple[str, str]]:
    return {
        i: (f"{side} prompt {i}", f"placeholder {side} response {i}")
        for i in range(count)
    }


def _load_inputs(config: RunConfig) -> DatasetPair:
    fine = load_embeddings(config.fine_tune_embeddings)
    if config.target_embeddings:
        target = load_embeddings(config.target_embeddings)
    else:
        target = EmbeddingMatrix(np.zeros((0, fine.dim), dtype=np.float32))
    kwargs = {}
    if config.method == "less":
        kwargs["fine_tune_gradients"] = load_embeddings(config.fine_tune_gradients)
        kwargs["target_gradients"] = load_embeddings(config.target_gradients)
    if config.method in ("delift", "selectit"):
        kwargs["fine_tune_texts"] = (
            load_texts(config.fine_tune_texts)
            if config.fine_tune_texts
            else _generated_texts(fine.count, "fine_tune")
        )
    if config.method == "delift":
        kwargs["target_texts"] = (
            load_texts(config.target_texts)
            if config.target_texts
            else _generated_texts(target.count, "target")
        )
    return DatasetPair(fine_tune=fine, target=target, **kwargs)


def _build_scales(config: RunConfig) -> ModelScaleSpec:
    entries = []
    for spec in config.scales:
        probe_spec = {**config.probe, **spec.get("probe", {})}
        entries.append(
            ScaleEntry(
                label=str(spec["label"]),
                parameter_count=int(spec["parameter_count"]),
                probe=build_provider(probe_spec),
            )
        )
    return ModelScaleSpec(entries=tuple(entries))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _write_ledger(out: Path, config: RunConfig, ledger: CostLedger, evaluation: dict | None = None) -> None:
    doc = {"config_hash": config.config_hash, **ledger.as_dict(), "evaluation": evaluation}
    _write_json(out / LEDGER_FILE, doc)


def _read_run_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"{path} not found; run the earlier pipeline step first")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON: {exc}") from exc


def _load_ledger(out: Path, config: RunConfig) -> CostLedger:
    doc = _read_run_json(out / LEDGER_FILE)
    if doc.get("config_hash") != config.config_hash:
        raise ConfigError(
            f"{out / LEDGER_FILE} was produced by a different config; rerun valuate"
        )
    return CostLedger.from_dict(doc)


def _nan_to_none(group: dict) -> dict:
    return {
        k: (None if isinstance(v, float) and math.isnan(v) else v)
        for k, v in group.items()
    }


def cmd_valuate(config: RunConfig) -> Path:
    """Step 1: ground-truth influence on the ID corner only."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pair = _load_inputs(config)
    part = partition(pair, config.u, config.seed)
    ledger = CostLedger()
    with ledger.time_phase("valuate"):
        if config.method in PAIRWISE_METHODS:
            provider = build_provider(config.probe) if config.method == "delift" else None
            cells = list(quadrant_pairs(part, "Q1"))
            matrix = compute_influence(config.method, cells, pair, probe=provider, ledger=ledger)
            if config.method == "less":
                # the features' upstream cost, charged once on ingestion
                record_gradient_cost(pair.m + pair.n, ledger)
        else:
            scales = _build_scales(config)
            indices = [int(i) for i in part.id_f]
            scores = compute_pointwise(config.method, indices, config.prompts, scales, pair, ledger)
            matrix = scores.to_matrix()
    save_influence(matrix, out / Q1_FILE)
    _write_ledger(out, config, ledger)
    print(f"wrote {out / Q1_FILE} ({matrix.valid_count()} valid cells)")
    return out


def _pairwise_train_estimate(
    config: RunConfig,
    pair: DatasetPair,
    part: QuadrantPartition,
    q1: InfluenceMatrix,
    ledger: CostLedger,
    out: Path,
) -> None:
    if q1.values.shape != (pair.m, pair.n):
        raise ConfigError(
            f"{out / Q1_FILE} is {q1.m}x{q1.n} but the embeddings give {pair.m}x{pair.n}"
        )
    cells = list(quadrant_pairs(part, "Q1"))
    idx = np.array(cells, dtype=np.int64).reshape(-1, 2)
    if len(cells) and not q1.mask[idx[:, 0], idx[:, 1]].all():
        raise ConfigError(f"{out / Q1_FILE} does not cover the ID corner; stale artifact?")
    targets = q1.values[idx[:, 0], idx[:, 1]].astype(np.float64) if len(cells) else np.zeros(0)
    features = build_pair_features(pair, cells)

    train_config = config.train_config()
    with ledger.time_phase("train"):
        result = train(features, targets, train_config)
    save_params(result, out / PARAMS_FILE, seed=config.seed,
                optimizer=train_config.optimizer_metadata())
    norm = result.norm

    all_cells = [(i, j) for i in range(pair.m) for j in range(pair.n)]
    if config.pure_estimates:
        est_cells = all_cells
    else:
        id_f = {int(i) for i in part.id_f}
        id_t = {int(j) for j in part.id_t}
        est_cells = [(i, j) for i, j in all_cells if i not in id_f or j not in id_t]
    with ledger.time_phase("estimate"):
        estimates = estimate_pairwise(result.params, pair, est_cells, ledger)
    if config.pure_estimates:
        full = estimates
    else:
        # ground truth was already paid for; keep it on Q1, normalized
        # into the same space the estimates live in
        q1_norm_values = norm.normalize(q1.values.astype(np.float64)).astype(np.float32)
        q1_norm = InfluenceMatrix(
            values=np.where(q1.mask, q1_norm_values, 0.0).astype(np.float32),
            mask=q1.mask.copy(),
        )
        full = estimates.overlay(q1_norm)
    if not full.fully_valid:
        raise CoverageError("merged influence matrix has invalid cells")
    save_influence(full, out / FULL_FILE)

    evaluation = None
    if config.evaluate_truth:
        eval_ledger = CostLedger()
        with eval_ledger.time_phase("evaluate"):
            provider = build_provider(config.probe) if config.method == "delift" else None
            truth = compute_influence(config.method, all_cells, pair, probe=provider, ledger=eval_ledger)
            truth_norm = InfluenceMatrix.full(
                norm.normalize(truth.values.astype(np.float64)).astype(np.float32)
            )
            estimates_all = estimate_pairwise(result.params, pair, all_cells, eval_ledger)
            shape = (pair.m, pair.n)
            mse_doc = {
                "space": "normalized",
                "trained": mse_by_quadrant(estimates_all, truth_norm, part),
                "random_uniform": mse_by_quadrant(
                    baseline_estimates("random_uniform", shape, config.seed), truth_norm, part
                ),
                "predict_zero": mse_by_quadrant(
                    baseline_estimates("predict_zero", shape, config.seed), truth_norm, part
                ),
            }
        evaluation = eval_ledger.as_dict()
        _write_json(
            out / MSE_FILE,
            {k: _nan_to_none(v) if isinstance(v, dict) else v for k, v in mse_doc.items()},
        )
    _write_ledger(out, config, ledger, evaluation=evaluation)


def _pointwise_train_estimate(
    config: RunConfig,
    pair: DatasetPair,
    part: QuadrantPartition,
    q1: InfluenceMatrix,
    ledger: CostLedger,
    out: Path,
) -> None:
    if q1.n != 1 or q1.m != pair.m:
        raise ConfigError(
            f"{out / Q1_FILE} is {q1.m}x{q1.n} but pointwise runs need {pair.m}x1"
        )
    truth_scores = PointwiseScores.from_matrix(q1)
    if not np.array_equal(truth_scores.indices, part.id_f):
        raise ConfigError(f"{out / Q1_FILE} does not cover the ID rows; stale artifact?")

    id_indices = [int(i) for i in part.id_f]
    features = pair.fine_tune.rows[id_indices].astype(np.float64)
    train_config = config.train_config()
    with ledger.time_phase("train"):
        result = train(features, truth_scores.values, train_config)
    save_params(result, out / PARAMS_FILE, seed=config.seed,
                optimizer=train_config.optimizer_metadata())
    norm = result.norm

    if config.pure_estimates:
        est_indices = list(range(pair.m))
    else:
        est_indices = [int(i) for i in part.ood_f]
    with ledger.time_phase("estimate"):
        estimates = estimate_pointwise(result.params, pair.fine_tune, est_indices, norm, ledger)
    full = estimates.to_matrix() if config.pure_estimates else estimates.to_matrix().overlay(q1)
    if not full.fully_valid:
        raise CoverageError("merged score column has invalid cells")
    save_influence(full, out / FULL_FILE)

    evaluation = None
    if config.evaluate_truth:
        eval_ledger = CostLedger()
        with eval_ledger.time_phase("evaluate"):
            scales = _build_scales(config)
            everything = list(range(pair.m))
            truth_all = compute_pointwise(
                config.method, everything, config.prompts, scales, pair, eval_ledger
            )
            estimates_all = estimate_pointwise(
                result.params, pair.fine_tune, everything, norm, eval_ledger
            )
            truth_normed = norm.normalize(truth_all.values)
            id_mask = np.zeros(pair.m, dtype=bool)
            id_mask[part.id_f] = True

            def group_mse(predictions: np.ndarray) -> dict:
                groups = {}
                for label, mask in (("id", id_mask), ("ood", ~id_mask)):
                    groups[label] = (
                        float(np.mean((predictions[mask] - truth_normed[mask]) ** 2))
                        if mask.any()
                        else None
                    )
                return groups

            noise = baseline_estimates("random_uniform", (pair.m, 1), config.seed)
            mse_doc = {
                "space": "normalized",
                "trained": group_mse(norm.normalize(estimates_all.values)),
                "random_uniform": group_mse(noise.values[:, 0].astype(np.float64)),
                "predict_zero": group_mse(np.zeros(pair.m)),
            }
        evaluation = eval_ledger.as_dict()
        _write_json(out / MSE_FILE, mse_doc)
    _write_ledger(out, config, ledger, evaluation=evaluation)


def cmd_train_estimate(config: RunConfig) -> Path:
    """Step 2: fit on the corner, estimate everything else, merge."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pair = _load_inputs(config)
    part = partition(pair, config.u, config.seed)
    q1_path = out / Q1_FILE
    if not q1_path.exists():
        raise ConfigError(f"{q1_path} not found; run valuate first")
    q1 = load_influence(q1_path)
    ledger = _load_ledger(out, config)
    if config.method in PAIRWISE_METHODS:
        _pairwise_train_estimate(config, pair, part, q1, ledger, out)
    else:
        _pointwise_train_estimate(config, pair, part, q1, ledger, out)
    print(f"wrote {out / FULL_FILE} and {out / PARAMS_FILE}")
    return out


def cmd_select(config: RunConfig) -> Path:
    """Step 3: subset selection from the merged influence values."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    full_path = out / FULL_FILE
    if not full_path.exists():
        raise ConfigError(f"{full_path} not found; run train-estimate first")
    full = load_influence(full_path)
    budget = budget_from_fraction(config.v, full.m)
    selector = METHOD_SELECTOR[config.method]
    try:
        if selector == "facility_location":
            kernel = normalize_kernel(full)
            result = facility_location_greedy(kernel, budget)
            kernel_hash = kernel.content_hash()
        elif selector == "topk_rowmax":
            result = topk_rowmax(full, budget)
            kernel_hash = full.content_hash()
        else:
            result = topk_pointwise(PointwiseScores.from_matrix(full), budget)
            kernel_hash = full.content_hash()
    except ValueError as exc:
        raise SelectionError(str(exc)) from exc
    doc = {
        "method": config.method,
        "selector": selector,
        "budget": result.budget,
        "v": config.resolved["v"],
        "indices": list(result.indices),
        "objective_values": list(result.objective_values),
        "seed": config.seed,
        "kernel_hash": kernel_hash,
    }
    _write_json(out / SELECTION_FILE, doc)
    print(f"wrote {out / SELECTION_FILE} ({len(result.indices)} of {full.m} rows)")
    return out


def _emit_final_report(config: RunConfig) -> Path:
    out = config.out_dir
    pair = _load_inputs(config)
    ledger_doc = _read_run_json(out / LEDGER_FILE)
    selection_doc = _read_run_json(out / SELECTION_FILE)
    mse_path = out / MSE_FILE
    mse_doc = _read_run_json(mse_path) if mse_path.exists() else None

    snapshot = {
        key: ledger_doc.get(key)
        for key in ("forward_calls", "backward_calls", "estimator_forwards", "wall_ms")
    }
    pointwise = config.method in POINTWISE_METHODS
    cost = build_cost_report(
        config.method,
        pair.m,
        pair.n,
        config.u,
        snapshot,
        prompts=len(config.prompts) if pointwise else None,
        scales=len(config.scales) if pointwise else None,
        per_call_cost=config.per_call_cost,
    )
    check = verify_ledger(cost, allow_retries=config.probe.get("provider") == "http")
    quadrant_mse = None
    if mse_doc is not None:
        quadrant_mse = {
            k: mse_doc[k]
            for k in ("trained", "random_uniform", "predict_zero")
            if k in mse_doc
        }
    dataset = {
        "m": pair.m,
        "n": pair.n,
        "u": config.resolved["u"],
        "v": config.resolved["v"],
        "fine_tune_embeddings": config.fine_tune_embeddings,
        "target_embeddings": config.target_embeddings,
    }
    report_path = emit_report(
        out,
        config.config_hash,
        config.method,
        dataset,
        cost,
        check,
        selection_doc,
        quadrant_mse=quadrant_mse,
        evaluation=ledger_doc.get("evaluation"),
        metadata={"config": config.resolved},
    )
    print(f"report: {report_path} (ledger {'pass' if check.passed else 'FAIL'})")
    return report_path


def _sweep_cell(config: RunConfig, u, v) -> RunConfig:
    doc = dict(config.resolved)
    doc["u"] = u
    doc["v"] = v
    doc["u_sweep"] = None
    doc["v_sweep"] = None
    doc["out_dir"] = str(config.out_dir / f"u{u}_v{v}")
    return resolve_config(doc)


def _run_sweep(config: RunConfig) -> Path:
    u_values = config.u_sweep if config.u_sweep else [config.resolved["u"]]
    v_values = config.v_sweep if config.v_sweep else [config.resolved["v"]]
    config.out_dir.mkdir(parents=True, exist_ok=True)
    cells = []
    for u in u_values:
        for v in v_values:
            cell = _sweep_cell(config, u, v)
            cmd_pipeline(cell)
            report = _read_run_json(cell.out_dir / REPORT_JSON)
            cells.append(
                {
                    "u": u,
                    "v": v,
                    "out_dir": cell.resolved["out_dir"],
                    "run_id": report["run_id"],
                    "savings_ratio": report["cost"]["savings_ratio"],
                    "ledger_passed": report["ledger_check"]["passed"],
                    "selected": len(report["selection"]["indices"]),
                }
            )
    _write_json(config.out_dir / SWEEP_FILE, {"config_hash": config.config_hash, "cells": cells})
    print(f"sweep: {len(cells)} pipeline cells under {config.out_dir}")
    return config.out_dir


def cmd_pipeline(config: RunConfig) -> Path:
    """Steps 1-3 in order, then the cost report, or a (u, v) sweep."""
    if config.u_sweep or config.v_sweep:
        return _run_sweep(config)
    if Fraction(str(config.u)) == 0:
        raise ConfigError("pipeline runs need u > 0")
    cmd_valuate(config)
    cmd_train_estimate(config)
    cmd_select(config)
    _emit_final_report(config)
    return config.out_dir


_COMMANDS = {
    "valuate": cmd_valuate,
    "train-estimate": cmd_train_estimate,
    "select": cmd_select,
    "pipeline": cmd_pipeline,
}


def exit_code_for(exc: NnciftError) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (FileFormatError, DataValidationError)):
        return 2
    if isinstance(exc, TrainingError):
        return 3
    if isinstance(exc, SelectionError):
        return 4
    if isinstance(exc, (ProbeError, RecordNotFoundError)):
        return 5
    return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nncift",
        description="influence valuation, estimation, and subset selection",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("valuate", "probe ground-truth influence on the ID corner"),
        ("train-estimate", "train the estimator and fill in the rest"),
        ("select", "pick the fine-tuning subset"),
        ("pipeline", "run all three steps and write the report"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="path to the flat JSON run config")
        sub.add_argument("--out", default=None, help="run directory (overrides config out_dir)")
        sub.add_argument("--seed", type=int, default=None, help="seed override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        doc = read_config_file(args.config)
        config = resolve_config(doc, out_override=args.out, seed_override=args.seed)
        _COMMANDS[args.command](config)
    except NnciftError as exc:
        print(f"error [{type(exc).__name__}] {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
