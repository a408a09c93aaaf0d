"""Pluggable model-signal providers and the call-count ledger.

A provider answers three kinds of probe: per-token log-probabilities of a
target continuation, per-step maximum next-token probabilities, and text
embeddings. Every answered probe increments the shared ledger, which is
the ground truth for all cost claims downstream.

Providers:

* synthetic: pure function of (seed, request); responses are hashed into
  valid ranges, embeddings are seeded unit-norm Gaussian directions.
* file: replays responses stored in a JSON-lines record file, keyed by
  the caller-supplied record key. Never touches the network.
* http: JSON-over-HTTP client with bounded in-flight requests, retries,
  and per-attempt cost accounting.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import requests

from .errors import (
    ConfigError,
    DataValidationError,
    FileFormatError,
    ProbeError,
    ProtocolError,
    RecordNotFoundError,
)

KIND_LOGPROBS = "target_logprobs"
KIND_MAX_PROBS = "token_max_probs"
KIND_EMBED = "embed"
PROBE_KINDS = (KIND_LOGPROBS, KIND_MAX_PROBS, KIND_EMBED)

TOKEN_ENV_VAR = "NNCIFT_HTTP_TOKEN"


@dataclass(frozen=True)
class ProbeRequest:
    """One probe: what signal, conditioned on what context, about what target."""

    kind: str
    context: str = ""
    target: str = ""

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if self.kind in (KIND_LOGPROBS, KIND_MAX_PROBS) and not self.target:
            raise ValueError(f"{self.kind} requires a non-empty target")


@dataclass
class CostLedger:
    """Monotone counters for probe calls plus per-phase wall time.

    forward_calls and backward_calls meter the expensive valuation model
    (abstract F and B units); estimator_forwards meters the tiny trained
    network and is deliberately a separate counter.
    """

    forward_calls: int = 0
    backward_calls: int = 0
    estimator_forwards: int = 0
    wall_ms: dict[str, float] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_forward(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters are monotone; n must be >= 0")
        with self._lock:
            self.forward_calls += n

    def add_backward(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters are monotone; n must be >= 0")
        with self._lock:
            self.backward_calls += n

    def add_estimator_forwards(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters are monotone; n must be >= 0")
        with self._lock:
            self.estimator_forwards += n

    @contextmanager
    def time_phase(self, phase: str) -> Iterator[None]:
        start = time.monotonic()
        try:
            yield
        finally:
            elapsed_ms = (time.monotonic() - start) * 1000.0
            with self._lock:
                self.wall_ms[phase] = self.wall_ms.get(phase, 0.0) + elapsed_ms

    def as_dict(self) -> dict:
        with self._lock:
            return {
                "forward_calls": self.forward_calls,
                "backward_calls": self.backward_calls,
                "estimator_forwards": self.estimator_forwards,
                "wall_ms": dict(self.wall_ms),
            }

    @classmethod
    def from_dict(cls, doc: dict) -> "CostLedger":
        """Resume a ledger serialized by as_dict; counters keep accumulating."""
        ledger = cls(
            forward_calls=int(doc.get("forward_calls", 0)),
            backward_calls=int(doc.get("backward_calls", 0)),
            estimator_forwards=int(doc.get("estimator_forwards", 0)),
            wall_ms={str(k): float(v) for k, v in doc.get("wall_ms", {}).items()},
        )
        if min(ledger.forward_calls, ledger.backward_calls, ledger.estimator_forwards) < 0:
            raise ValueError("counters are monotone; snapshot must be >= 0")
        return ledger


def record_gradient_cost(n: int, ledger: CostLedger) -> None:
    """Charge the ledger for n backward passes paid upstream when the
    gradient features now being ingested were computed."""
    if n < 0:
        raise ValueError("gradient cost must be >= 0")
    ledger.add_backward(n)


class SyntheticProvider:
    """Deterministic provider: every response is a pure function of
    (seed, request), so repeated runs are byte-identical."""

    name = "synthetic"

    def __init__(self, seed: int = 0, dim: int = 32):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.seed = int(seed)
        self._dim = int(dim)

    @property
    def embed_dim(self) -> int:
        return self._dim

    def _unit(self, kind: str, context: str, target: str, pos: int) -> float:
        payload = json.dumps(
            [self.seed, kind, context, target, pos], ensure_ascii=False
        ).encode("utf-8")
        digest = hashlib.sha256(payload).digest()
        return int.from_bytes(digest[:8], "big") / 2.0**64

    @staticmethod
    def _token_count(target: str) -> int:
        return max(1, len(target.split()))

    def target_logprobs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        req = ProbeRequest(KIND_LOGPROBS, context, target)
        ledger.add_forward(1)
        return [
            math.log(0.02 + 0.96 * self._unit(req.kind, context, target, pos))
            for pos in range(self._token_count(target))
        ]

    def token_max_probs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        req = ProbeRequest(KIND_MAX_PROBS, context, target)
        ledger.add_forward(1)
        return [
            0.02 + 0.96 * self._unit(req.kind, context, target, pos)
            for pos in range(self._token_count(target))
        ]

    def embed(self, text: str, ledger: CostLedger, key: str | None = None) -> np.ndarray:
        ProbeRequest(KIND_EMBED, "", text if text else "")
        ledger.add_forward(1)
        digest = hashlib.sha256(
            json.dumps([self.seed, KIND_EMBED, text], ensure_ascii=False).encode("utf-8")
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
        vec = rng.standard_normal(self._dim)
        norm = math.sqrt(float(vec @ vec))
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float64)


class FileProvider:
    """Replays probe responses from a record file.

    Record file: JSON lines, each {"key": "i" or "i:j", "kind": str,
    "values": [real]}; (kind, key) pairs unique. Lookup requires the
    caller to pass the record key.
    """

    name = "file"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[tuple[str, str], list[float]] = {}
        self._dim: int | None = None
        self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                where = f"{self.path}:{lineno + 1}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FileFormatError(f"{where}: invalid JSON: {exc}") from exc
                if not isinstance(obj, dict) or not {"key", "kind", "values"} <= obj.keys():
                    raise FileFormatError(f"{where}: expected key/kind/values object")
                kind, key = obj["kind"], obj["key"]
                if kind not in PROBE_KINDS:
                    raise FileFormatError(f"{where}: unknown kind {kind!r}")
                if not isinstance(key, str) or not key:
                    raise FileFormatError(f"{where}: key must be a non-empty string")
                values = obj["values"]
                if not isinstance(values, list) or not values:
                    raise FileFormatError(f"{where}: values must be a non-empty list")
                if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values):
                    raise DataValidationError(f"{where}: values must be finite numbers")
                if (kind, key) in self._records:
                    raise FileFormatError(f"{where}: duplicate record ({kind!r}, {key!r})")
                self._validate_range(kind, values, where)
                if kind == KIND_EMBED:
                    if self._dim is None:
                        self._dim = len(values)
                    elif self._dim != len(values):
                        raise FileFormatError(
                            f"{where}: embed dim {len(values)} conflicts with {self._dim}"
                        )
                self._records[(kind, key)] = [float(v) for v in values]

    @staticmethod
    def _validate_range(kind: str, values: list, where: str) -> None:
        if kind == KIND_LOGPROBS and any(v > 0 for v in values):
            raise DataValidationError(f"{where}: log-probabilities must be <= 0")
        if kind == KIND_MAX_PROBS and any(not 0 < v <= 1 for v in values):
            raise DataValidationError(f"{where}: probabilities must lie in (0, 1]")

    @property
    def embed_dim(self) -> int | None:
        return self._dim

    def _lookup(self, kind: str, key: str | None) -> list[float]:
        if key is None:
            raise ValueError("file provider lookups require a record key")
        if (kind, key) not in self._records:
            raise RecordNotFoundError(f"{self.path}: no {kind!r} record for key {key!r}")
        return self._records[(kind, key)]

    def target_logprobs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        ProbeRequest(KIND_LOGPROBS, context, target)
        values = self._lookup(KIND_LOGPROBS, key)
        ledger.add_forward(1)
        return list(values)

    def token_max_probs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        ProbeRequest(KIND_MAX_PROBS, context, target)
        values = self._lookup(KIND_MAX_PROBS, key)
        ledger.add_forward(1)
        return list(values)

    def embed(self, text: str, ledger: CostLedger, key: str | None = None) -> np.ndarray:
        values = self._lookup(KIND_EMBED, key)
        ledger.add_forward(1)
        return np.asarray(values, dtype=np.float64)


class HttpProvider:
    """JSON-over-HTTP probe client.

    Endpoints: POST /v1/logprobs {"context","target"} -> {"token_logprobs"};
    POST /v1/token_max_probs {"context","target"} -> {"max_probs"};
    POST /v1/embed {"text"} -> {"vector"}.

    Transport failures and 5xx responses are retried with exponential
    backoff; every attempt charges one forward call because the serving
    cost was paid whether or not the answer arrived. Other HTTP errors
    and malformed bodies fail immediately.
    """

    name = "http"

    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.25,
        max_in_flight: int = 8,
        dim: int | None = None,
    ):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV_VAR)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._declared_dim = dim
        self._session = requests.Session()

    @property
    def embed_dim(self) -> int | None:
        return self._declared_dim

    def _post(self, endpoint: str, body: dict, ledger: CostLedger) -> dict:
        url = f"{self.base_url}{endpoint}"
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last_error: Exception | None = None
        for attempt in range(self.retries):
            ledger.add_forward(1)
            try:
                with self._gate:
                    resp = self._session.post(url, json=body, timeout=self.timeout, headers=headers)
            except requests.RequestException as exc:
                last_error = ProbeError(f"{url}: attempt {attempt + 1} failed: {exc}")
            else:
                if resp.status_code >= 500:
                    last_error = ProbeError(
                        f"{url}: attempt {attempt + 1} got status {resp.status_code}"
                    )
                elif resp.status_code != 200:
                    raise ProbeError(f"{url}: status {resp.status_code}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{url}: response is not JSON: {exc}") from exc
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * (2.0**attempt))
        raise last_error  # type: ignore[misc]

    @staticmethod
    def _extract(payload: dict, field_name: str, url_hint: str) -> list[float]:
        values = payload.get(field_name)
        if not isinstance(values, list) or not values:
            raise ProtocolError(f"{url_hint}: missing or empty {field_name!r}")
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in values):
            raise ProtocolError(f"{url_hint}: {field_name!r} must be finite numbers")
        return [float(v) for v in values]

    def target_logprobs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        ProbeRequest(KIND_LOGPROBS, context, target)
        payload = self._post("/v1/logprobs", {"context": context, "target": target}, ledger)
        values = self._extract(payload, "token_logprobs", self.base_url)
        if any(v > 0 for v in values):
            raise DataValidationError(f"{self.base_url}: log-probabilities must be <= 0")
        return values

    def token_max_probs(self, context: str, target: str, ledger: CostLedger, key: str | None = None) -> list[float]:
        ProbeRequest(KIND_MAX_PROBS, context, target)
        payload = self._post("/v1/token_max_probs", {"context": context, "target": target}, ledger)
        values = self._extract(payload, "max_probs", self.base_url)
        if any(not 0 < v <= 1 for v in values):
            raise DataValidationError(f"{self.base_url}: probabilities must lie in (0, 1]")
        return values

    def embed(self, text: str, ledger: CostLedger, key: str | None = None) -> np.ndarray:
        payload = self._post("/v1/embed", {"text": text}, ledger)
        values = self._extract(payload, "vector", self.base_url)
        if self._declared_dim is not None and len(values) != self._declared_dim:
            raise ProtocolError(
                f"{self.base_url}: embed dim {len(values)} != declared {self._declared_dim}"
            )
        if self._declared_dim is None:
            self._declared_dim = len(values)
        return np.asarray(values, dtype=np.float64)


Provider = SyntheticProvider | FileProvider | HttpProvider


def build_provider(spec: dict) -> Provider:
    """Construct a provider from a configuration mapping; selection is
    explicit, never sniffed."""
    if not isinstance(spec, dict) or "provider" not in spec:
        raise ConfigError("probe spec must be a mapping with a 'provider' field")
    kind = spec["provider"]
    if kind == "synthetic":
        return SyntheticProvider(seed=spec.get("seed", 0), dim=spec.get("dim", 32))
    if kind == "file":
        if "records" not in spec:
            raise ConfigError("file provider requires a 'records' path")
        return FileProvider(spec["records"])
    if kind == "http":
        if "base_url" not in spec:
            raise ConfigError("http provider requires a 'base_url'")
        return HttpProvider(
            base_url=spec["base_url"],
            token=spec.get("token"),
            timeout=spec.get("timeout", 30.0),
            retries=spec.get("retries", 3),
            backoff=spec.get("backoff", 0.25),
            max_in_flight=spec.get("max_in_flight", 8),
            dim=spec.get("dim"),
        )
    raise ConfigError(f"unknown provider kind {kind!r}")
