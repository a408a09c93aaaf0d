"""Cost prediction, ledger verification, and run reports.

The cost model counts probe calls exactly, under this package's
conventions:

* delift, full valuation: M*N + N forwards (the context-free term is
  cached once per target).
* delift, ID-corner valuation at fraction u: ceil(uM)*ceil(uN) +
  ceil(uN) forwards.
* delift_se: zero probe calls (pair embeddings are ingested).
* less: zero forwards, M+N backwards (the gradient features' upstream
  cost, charged on ingestion).
* selectit: one forward per (sample, prompt, scale); M*P*S full,
  ceil(uM)*P*S for the ID corner.

Counts are abstract per-call units, not FLOPs; an optional per-call
cost pair weights them when model sizes differ. Estimator forwards are
tracked separately from probe forwards on purpose: conflating the two
counters would hide exactly the distinction the savings claim rests on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .datasets import exact_ceil
from .errors import ReportError

REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"

_METHODS = ("delift", "delift_se", "less", "selectit")


def predicted_counts(
    method: str,
    m: int,
    n: int,
    u: float | str | None = None,
    prompts: int | None = None,
    scales: int | None = None,
) -> tuple[int, int]:
    """Exact (forwards, backwards) a valuation should cost.

    u=None prices the full valuation; a fraction prices the ID-corner
    valuation used to train the estimator.
    """
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}")
    if m < 0 or n < 0:
        raise ValueError("sizes must be nonnegative")
    if method == "delift":
        if u is None:
            return m * n + n, 0
        return exact_ceil(u, m) * exact_ceil(u, n) + exact_ceil(u, n), 0
    if method == "delift_se":
        return 0, 0
    if method == "less":
        return 0, m + n
    if prompts is None or scales is None:
        raise ValueError("selectit cost needs prompt and scale counts")
    if u is None:
        return m * prompts * scales, 0
    return exact_ceil(u, m) * prompts * scales, 0


def savings_ratio(
    method: str,
    m: int,
    n: int,
    u: float | str,
    prompts: int | None = None,
    scales: int | None = None,
    measured_forwards: int | None = None,
) -> float:
    """1 minus the fraction of full-valuation probe forwards actually
    spent. Methods whose full valuation is free (delift_se, less) have
    nothing to save: 0.0 by convention."""
    full_fwd, _ = predicted_counts(method, m, n, None, prompts, scales)
    if full_fwd == 0:
        return 0.0
    if measured_forwards is None:
        measured_forwards, _ = predicted_counts(method, m, n, u, prompts, scales)
    return 1.0 - measured_forwards / full_fwd


@dataclass(frozen=True)
class CostReport:
    method: str
    m: int
    n: int
    u: float | None
    predicted_forwards: int
    predicted_backwards: int
    measured: dict
    full_forwards: int
    savings_ratio: float
    per_call_cost: dict | None = None

    def as_dict(self) -> dict:
        doc = {
            "method": self.method,
            "m": self.m,
            "n": self.n,
            "u": self.u,
            "predicted_forwards": self.predicted_forwards,
            "predicted_backwards": self.predicted_backwards,
            "measured_forwards": self.measured.get("forward_calls"),
            "measured_backwards": self.measured.get("backward_calls"),
            "estimator_forwards": self.measured.get("estimator_forwards"),
            "wall_ms": self.measured.get("wall_ms", {}),
            "full_valuation_forwards": self.full_forwards,
            "savings_ratio": self.savings_ratio,
        }
        if self.per_call_cost is not None:
            fwd_unit = float(self.per_call_cost.get("forward", 1.0))
            bwd_unit = float(self.per_call_cost.get("backward", 1.0))
            doc["weighted"] = {
                "forward_unit_cost": fwd_unit,
                "backward_unit_cost": bwd_unit,
                "full_valuation": self.full_forwards * fwd_unit,
                "measured": (
                    self.measured.get("forward_calls", 0) * fwd_unit
                    + self.measured.get("backward_calls", 0) * bwd_unit
                ),
            }
        return doc


def build_cost_report(
    method: str,
    m: int,
    n: int,
    u: float | str,
    ledger_snapshot: dict,
    prompts: int | None = None,
    scales: int | None = None,
    per_call_cost: dict | None = None,
) -> CostReport:
    fwd, bwd = predicted_counts(method, m, n, u, prompts, scales)
    full_fwd, _ = predicted_counts(method, m, n, None, prompts, scales)
    measured_fwd = ledger_snapshot.get("forward_calls", 0)
    return CostReport(
        method=method,
        m=m,
        n=n,
        u=float(u) if u is not None else None,
        predicted_forwards=fwd,
        predicted_backwards=bwd,
        measured=ledger_snapshot,
        full_forwards=full_fwd,
        savings_ratio=savings_ratio(
            method, m, n, u, prompts, scales, measured_forwards=measured_fwd
        ),
        per_call_cost=per_call_cost,
    )


@dataclass(frozen=True)
class LedgerCheck:
    passed: bool
    diff: dict

    def as_dict(self) -> dict:
        return {"passed": self.passed, "diff": self.diff}


def verify_ledger(report: CostReport, allow_retries: bool = False) -> LedgerCheck:
    """Compare measured probe counts against predictions.

    Exact equality is the contract for synthetic and file providers;
    allow_retries tolerates extra forwards (an http provider charging
    failed attempts can only overshoot, never undershoot).
    """
    measured_fwd = report.measured.get("forward_calls", 0)
    measured_bwd = report.measured.get("backward_calls", 0)
    fwd_ok = (
        measured_fwd >= report.predicted_forwards
        if allow_retries
        else measured_fwd == report.predicted_forwards
    )
    bwd_ok = measured_bwd == report.predicted_backwards
    diff = {
        "forward_calls": {
            "predicted": report.predicted_forwards,
            "measured": measured_fwd,
            "delta": measured_fwd - report.predicted_forwards,
        },
        "backward_calls": {
            "predicted": report.predicted_backwards,
            "measured": measured_bwd,
            "delta": measured_bwd - report.predicted_backwards,
        },
    }
    return LedgerCheck(passed=bool(fwd_ok and bwd_ok), diff=diff)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _format_mse_cell(value) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "   n/a  "
    return f"{value:8.4f}"


def render_text_report(doc: dict) -> str:
    lines = []
    lines.append(f"run {doc['run_id']}  method {doc['method']}")
    ds = doc["dataset"]
    lines.append(f"dataset: M={ds['m']} N={ds['n']} u={ds['u']} v={ds['v']}")
    lines.append("")
    mse = doc.get("quadrant_mse")
    if mse is not None:
        groups = [q for q in ("Q1", "Q2", "Q3", "Q4") if q in mse["trained"]]
        groups = groups or sorted(mse["trained"])
        lines.append("MSE                   trained   random     zero")
        for group in groups:
            row = [
                _format_mse_cell(mse["trained"].get(group)),
                _format_mse_cell(mse["random_uniform"].get(group)),
                _format_mse_cell(mse["predict_zero"].get(group)),
            ]
            lines.append(f"  {group:<4}              " + "  ".join(row))
    else:
        lines.append("quadrant MSE: not evaluated (no full ground truth)")
    lines.append("")
    cost = doc["cost"]
    lines.append("cost")
    lines.append(
        f"  probe forwards    predicted {cost['predicted_forwards']}  "
        f"measured {cost['measured_forwards']}"
    )
    lines.append(
        f"  probe backwards   predicted {cost['predicted_backwards']}  "
        f"measured {cost['measured_backwards']}"
    )
    lines.append(f"  estimator forwards          {cost['estimator_forwards']}")
    lines.append(f"  full valuation would cost   {cost['full_valuation_forwards']} forwards")
    lines.append(f"  savings vs full valuation   {100.0 * cost['savings_ratio']:.2f}%")
    lines.append(f"  ledger check                {'pass' if doc['ledger_check']['passed'] else 'FAIL'}")
    lines.append("")
    sel = doc["selection"]
    lines.append(
        f"selection: {len(sel['indices'])} of {ds['m']} rows via {sel['selector']}, "
        f"budget {sel['budget']}"
    )
    if sel["objective_values"]:
        lines.append(f"  final objective {sel['objective_values'][-1]:.6f}")
    return "\n".join(lines) + "\n"


def emit_report(
    out_dir: str | Path,
    config_hash: str,
    method: str,
    dataset: dict,
    cost: CostReport | None,
    ledger_check: LedgerCheck | None,
    selection: dict | None,
    quadrant_mse: dict | None = None,
    evaluation: dict | None = None,
    metadata: dict | None = None,
) -> Path:
    """Write report.json and report.txt into out_dir.

    cost, ledger_check, and selection are required run artifacts;
    missing ones raise a single error naming all absences. quadrant_mse
    is optional because full ground truth is not always affordable.
    """
    missing = [
        name
        for name, value in (
            ("cost", cost),
            ("ledger_check", ledger_check),
            ("selection", selection),
        )
        if value is None
    ]
    if missing:
        raise ReportError(f"missing run artifacts: {', '.join(missing)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "run_id": config_hash[:12],
        "config_hash": config_hash,
        "method": method,
        "dataset": dataset,
        "quadrant_mse": quadrant_mse,
        "cost": cost.as_dict(),
        "ledger_check": ledger_check.as_dict(),
        "selection": selection,
        "evaluation": evaluation,
        "metadata": metadata or {},
    }
    doc = _json_safe(doc)
    report_path = out_dir / REPORT_JSON
    report_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    (out_dir / REPORT_TEXT).write_text(render_text_report(doc))
    return report_path
