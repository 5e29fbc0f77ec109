"""Monitoring-log frames, CSV ingestion, the synthetic generator and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional

import numpy as np

from .errors import (
    CheckpointShapeError,
    CheckpointVersionError,
    DataError,
    MalformedRowError,
    MissingFileError,
    MonotonicityError,
    SpecError,
    StorageError,
)

CHECKPOINT_VERSION = "attnmixer-ckpt-v1"


@dataclass(frozen=True)
class SeriesFrame:
    timestamps: tuple
    features: np.ndarray
    kpi: np.ndarray
    columns: tuple
    kpi_name: str = "kpi"

    def __post_init__(self):
        n = len(self.timestamps)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.kpi.shape != (n,):
            raise DataError(
                f"frame shape mismatch: {n} timestamps, features {self.features.shape}, kpi {self.kpi.shape}")
        if len(self.columns) != self.features.shape[1]:
            raise DataError("one column name per feature is required")
        if len(set(self.columns)) != len(self.columns):
            raise DataError(f"duplicate feature column names: {self.columns}")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.kpi))):
            raise DataError("frame contains NaN or Inf")
        self.features.setflags(write=False)
        self.kpi.setflags(write=False)

    @property
    def N(self) -> int:
        return len(self.timestamps)

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def table(self) -> np.ndarray:
        """Features with the KPI appended as the last column."""
        return np.column_stack([self.features, self.kpi])

    def with_values(self, features, kpi) -> "SeriesFrame":
        return SeriesFrame(self.timestamps, np.array(features, dtype=float), np.array(kpi, dtype=float),
                           self.columns, self.kpi_name)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def load_csv(path) -> SeriesFrame:
    """Read ``timestamp,v1,...,vD,kpi``. Missing values are rejected, not imputed."""
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3:
        raise MalformedRowError(1, "header needs timestamp, at least one feature and a KPI column")
    width = len(header)
    stamps, values = [], []
    prev = None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise MalformedRowError(lineno, f"expected {width} fields, got {len(row)}")
        try:
            ts = datetime.fromisoformat(row[0].strip())
        except ValueError:
            raise MalformedRowError(lineno, f"unparsable timestamp {row[0]!r}") from None
        try:
            nums = [float(v) for v in row[1:]]
        except ValueError:
            raise MalformedRowError(lineno, "unparsable number") from None
        if not all(math.isfinite(v) for v in nums):
            raise MalformedRowError(lineno, "missing or non-finite value")
        if prev is not None and ts <= prev:
            raise MonotonicityError(lineno, f"timestamp {row[0]!r} does not increase")
        prev = ts
        stamps.append(row[0].strip())
        values.append(nums)
    if not values:
        raise DataError(f"{path}: no data rows")
    arr = np.array(values, dtype=float)
    return SeriesFrame(tuple(stamps), arr[:, :-1].copy(), arr[:, -1].copy(), tuple(header[1:-1]), header[-1])


def write_csv(frame: SeriesFrame, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", *frame.columns, frame.kpi_name])
            for ts, feats, y in zip(frame.timestamps, frame.features, frame.kpi):
                w.writerow([ts, *(_fmt(v) for v in feats), _fmt(y)])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    """Lag-1 linear system driven by a shock process.

    x_t = A x_{t-1} + B u_t + eps_t,   u_t = a u_{t-1} + shock_t,   kpi_t = c . x_t
    where shock_t is positive with probability ``shock_prob`` (exponential size).
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    N: int = 4000
    ar_coef: float = 0.9
    shock_prob: float = 0.02
    shock_scale: float = 1.0
    noise: float = 0.05
    burn_in: int = 100
    x0: Optional[np.ndarray] = None
    start: str = "2020-01-01T00:00:00"
    step_seconds: int = 60

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.A.shape != (D, D) or self.B.shape != (D,) or self.c.shape != (D,):
            raise SpecError(f"inconsistent shapes: A {self.A.shape}, B {self.B.shape}, c {self.c.shape}")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
            if self.x0.shape != (D,):
                raise SpecError("x0 must have one entry per variate")
        rho = max(abs(np.linalg.eigvals(self.A))) if D else 0.0
        if rho >= 1.0:
            raise SpecError(f"A is not stable: spectral radius {rho:.4f} >= 1")
        if not abs(self.ar_coef) < 1.0:
            raise SpecError(f"driver AR coefficient must be inside (-1, 1), got {self.ar_coef}")
        if not 0.0 <= self.shock_prob <= 1.0:
            raise SpecError("shock_prob must be a probability")
        if self.noise < 0 or self.N < 1 or self.burn_in < 0:
            raise SpecError("noise, N and burn_in must be non-negative (N positive)")

    @property
    def D(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class GroundTruthGraph:
    """Directed (source, target) variate pairs: ``target`` depends on ``source``."""

    D: int
    edges: frozenset = field(default_factory=frozenset)

    def adjacency(self) -> np.ndarray:
        """``adj[target, source]`` is True for an edge; aligned with attention rows."""
        adj = np.zeros((self.D, self.D), dtype=bool)
        for s, t in self.edges:
            adj[t, s] = True
        return adj

    def to_json(self) -> dict:
        return {"D": self.D, "edges": sorted([list(e) for e in self.edges])}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthGraph":
        return cls(int(d["D"]), frozenset((int(s), int(t)) for s, t in d["edges"]))


def ground_truth(spec: SynthSpec) -> GroundTruthGraph:
    """Edges from the nonzero pattern of A (lag couplings) and B (driver injection).

    B routes the driver series into the variate it drives most strongly
    (the driver channel itself); every other nonzero B entry is an edge from
    that channel.
    """
    edges = set()
    tgt, src = np.nonzero(spec.A)
    edges.update(zip(src.tolist(), tgt.tolist()))
    nz = np.flatnonzero(spec.B)
    if nz.size:
        driver = driver_channel(spec)
        edges.update((driver, int(j)) for j in nz if j != driver)
    return GroundTruthGraph(spec.D, frozenset(edges))


def driver_channel(spec: SynthSpec) -> int:
    return int(np.argmax(np.abs(spec.B)))


def gen_synthetic(spec: SynthSpec, seed: int = 0):
    """Simulate ``spec``; returns ``(frame, graph)``. Deterministic for a seed."""
    rng = np.random.default_rng(seed)
    D, total = spec.D, spec.N + spec.burn_in
    x = np.zeros(D) if spec.x0 is None else spec.x0.copy()
    u = 0.0
    out = np.empty((total, D))
    # draw all randomness up front so the stream does not depend on the path
    shocks = (rng.random(total) < spec.shock_prob) * rng.exponential(spec.shock_scale, total)
    eps = rng.standard_normal((total, D)) * spec.noise
    for t in range(total):
        u = spec.ar_coef * u + shocks[t]
        x = spec.A @ x + spec.B * u + eps[t]
        out[t] = x
    feats = out[spec.burn_in:]
    kpi = feats @ spec.c
    if not np.all(np.isfinite(feats)) or np.max(np.abs(feats), initial=0.0) >= 1e6:
        raise SpecError("simulation left the bounded regime")
    t0 = datetime.fromisoformat(spec.start)
    stamps = tuple((t0 + timedelta(seconds=spec.step_seconds * i)).isoformat() for i in range(spec.N))
    frame = SeriesFrame(stamps, feats.copy(), kpi, tuple(f"v{i + 1}" for i in range(D)))
    return frame, ground_truth(spec)


def g1_spec(**overrides) -> SynthSpec:
    """Default desk-scale benchmark: D=8, N=4000.

    v1 is the observed driver channel (think precipitation); the driver also
    lands on v2-v4 in the same step. Six lag couplings carry v2-v4 (and two
    quiet channels) into v5, v6 and v8, which make up the KPI, so the KPI
    reacts one step after the driver is visible in the features.
    """
    D = 8
    A = np.diag([0.0, 0.5, 0.5, 0.5, 0.2, 0.2, 0.6, 0.2])
    for target, source, w in ((4, 1, 0.6), (5, 2, 0.6), (7, 3, 0.6), (4, 6, 0.4), (5, 4, 0.2), (6, 5, 0.3)):
        A[target, source] = w
    B = np.zeros(D)
    B[[0, 1, 2, 3]] = [1.0, 0.8, 0.8, 0.8]
    c = np.zeros(D)
    c[[4, 5, 7]] = [0.4, 0.3, 0.3]
    kw = dict(A=A, B=B, c=c, N=4000, ar_coef=0.7, shock_prob=0.02, shock_scale=1.0, noise=0.05)
    kw.update(overrides)
    return SynthSpec(**kw)


# ---------------------------------------------------------------- checkpoints

def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _decode_array(name, d) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        values = np.array(d["values"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointShapeError(f"{name}: malformed array entry ({exc})") from None
    if int(np.prod(shape)) != values.size:
        raise CheckpointShapeError(f"{name}: shape {list(shape)} does not hold {values.size} values")
    return values.reshape(shape)


def save_params(path, params, config, **extra):
    """Write a JSON checkpoint. ``extra`` entries (scaler, data settings, adam) are stored verbatim."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {name: _encode_array(t.data) for name, t in params.items()},
    }
    doc.update(extra)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_params(path, config=None):
    """Read a checkpoint; returns ``(params, config, doc)``.

    If ``config`` is given, its structure (T, D, K, ...) must match the stored one.
    """
    from .model import MixerConfig, init_params, parameter_shapes, structure

    if not os.path.exists(path):
        raise MissingFileError(f"no such checkpoint: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
    stored = MixerConfig.from_dict(doc["config"])
    if config is not None and structure(config) != structure(stored):
        raise CheckpointShapeError(
            f"checkpoint was saved for T={stored.T}, D={stored.D}, K={stored.K}; "
            f"requested T={config.T}, D={config.D}, K={config.K}")
    params = init_params(stored)
    expected = parameter_shapes(stored)
    stored_params = doc.get("params", {})
    if set(stored_params) != set(expected):
        raise CheckpointShapeError(f"parameter names differ: {sorted(set(stored_params) ^ set(expected))}")
    for name, shape in expected.items():
        arr = _decode_array(name, stored_params[name])
        if arr.shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {list(arr.shape)}, model needs {list(shape)}")
        params[name].data[...] = arr
    return params, stored, doc
