"""Metrics, residual anomaly flags, attention statistics/export and linear baselines."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import GroundTruthGraph
from .errors import ConfigError, DataError, RSquaredUndefinedError, ShapeError, SolverError, StorageError

ATTENTION_EXPORT_VERSION = "attnmixer-attention-v1"

ATTENTION_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "rounds"],
    "properties": {
        "version": {"const": ATTENTION_EXPORT_VERSION},
        "config": {
            "type": "object",
            "required": ["T", "D", "K"],
            "properties": {k: {"type": "integer", "minimum": 1} for k in ("T", "D", "K")},
        },
        "rounds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["m_s", "m_t"],
                "properties": {
                    "m_s": {"anyOf": [{"type": "null"}, {"$ref": "#/$defs/matrix"}]},
                    "m_t": {"anyOf": [{"type": "null"}, {"$ref": "#/$defs/matrix"}]},
                },
            },
        },
        "stats": {"type": "object"},
    },
    "$defs": {
        "matrix": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        }
    },
}


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    r2: float
    rmse: float
    mae: float
    n: int


def metrics(y, y_hat) -> Metrics:
    y = np.asarray(y, dtype=float).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    if y.shape != y_hat.shape or y.size == 0:
        raise ShapeError(f"metrics: need equal non-empty lengths, got {y.size} and {y_hat.size}")
    resid = y - y_hat
    rmse = math.sqrt(float(np.mean(resid ** 2)))
    mae = float(np.mean(np.abs(resid)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise RSquaredUndefinedError(rmse, mae, y.size)
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return Metrics(r2, rmse, mae, y.size)


def metrics_or_partial(y, y_hat) -> Metrics:
    """Like :func:`metrics` but reports R^2 as NaN for constant truth."""
    try:
        return metrics(y, y_hat)
    except RSquaredUndefinedError as exc:
        return Metrics(float("nan"), exc.rmse, exc.mae, exc.n)


# ---------------------------------------------------------------- anomalies

@dataclass
class AnomalyVerdict:
    residuals: np.ndarray
    threshold: float
    flags: np.ndarray


def anomaly_score(y, y_hat, calibration_residuals, q: float = 0.99) -> AnomalyVerdict:
    """Flag steps whose |y - y_hat| exceeds the q-quantile of calibration residuals.

    Calibration residuals are used as given; callers normally pass absolute
    validation residuals.
    """
    calib = np.asarray(calibration_residuals, dtype=float).reshape(-1)
    if calib.size == 0:
        raise DataError("anomaly_score: calibration residuals are empty")
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile must lie in (0, 1), got {q}")
    threshold = float(np.quantile(calib, q, method="linear"))
    resid = np.abs(np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)).reshape(-1)
    return AnomalyVerdict(resid, threshold, resid > threshold)


# ---------------------------------------------------------------- attention statistics

def _as_stack(m) -> np.ndarray:
    a = np.asarray(getattr(m, "data", m), dtype=float)
    return a.reshape((-1,) + a.shape[-2:])


def row_entropy(p: np.ndarray) -> np.ndarray:
    return -np.sum(p * np.log(p + 1e-12), axis=-1)


def row_gini(p: np.ndarray) -> np.ndarray:
    """Gini coefficient of each row (0 for uniform, (n-1)/n for one-hot)."""
    s = np.sort(p, axis=-1)
    n = s.shape[-1]
    i = np.arange(1, n + 1)
    total = s.sum(axis=-1)
    return np.sum((2 * i - n - 1) * s, axis=-1) / (n * np.where(total > 0, total, 1.0))


def top_k_mass(p: np.ndarray, k: int = 1) -> np.ndarray:
    s = np.sort(p, axis=-1)[..., ::-1]
    return s[..., :k].sum(axis=-1) / s.sum(axis=-1)


@dataclass
class MatrixStats:
    entropy: float
    gini: float
    top_k: float


@dataclass
class SparsityStats:
    spatial: list
    temporal: list
    edge_mass_ratio: Optional[float] = None
    k: int = 1

    def to_json(self) -> dict:
        def one(s):
            return None if s is None else {"entropy": s.entropy, "gini": s.gini, "top_k": s.top_k}
        return {"k": self.k, "spatial": [one(s) for s in self.spatial],
                "temporal": [one(s) for s in self.temporal], "edge_mass_ratio": self.edge_mass_ratio}


def matrix_stats(m, k: int = 1) -> MatrixStats:
    """Statistics averaged over every row of every matrix in the (possibly batched) stack."""
    p = _as_stack(m)
    return MatrixStats(float(row_entropy(p).mean()), float(row_gini(p).mean()), float(top_k_mass(p, k).mean()))


def edge_mass_ratio(m_s, graph: GroundTruthGraph) -> float:
    """Mean attention on true edges / mean on non-edges, off-diagonal only.

    Row ``i`` of the spatial attention is what variate ``i`` receives, so an
    edge source -> target is read at ``[target, source]``.
    """
    p = _as_stack(m_s).mean(axis=0)
    if p.shape != (graph.D, graph.D):
        raise ShapeError(f"graph has D={graph.D} but attention is {p.shape}")
    adj = graph.adjacency()
    off = ~np.eye(graph.D, dtype=bool)
    on_edge = p[adj & off]
    off_edge = p[~adj & off]
    if on_edge.size == 0 or off_edge.size == 0:
        raise DataError("edge mass ratio needs at least one edge and one non-edge off the diagonal")
    return float(on_edge.mean() / off_edge.mean())


def attention_stats(record, graph: Optional[GroundTruthGraph] = None, k: int = 1) -> SparsityStats:
    spatial, temporal = [], []
    for r in record.rounds:
        spatial.append(None if r.m_s is None else matrix_stats(r.m_s, k))
        temporal.append(None if r.m_t is None else matrix_stats(r.m_t, k))
    ratio = None
    if graph is not None:
        if graph.D != record.D:
            raise ShapeError(f"graph has D={graph.D}, record has D={record.D}")
        if record.rounds and record.rounds[0].m_s is not None:
            ratio = edge_mass_ratio(record.rounds[0].m_s, graph)
    return SparsityStats(spatial, temporal, ratio, k)


def _matrix_json(m) -> str:
    rows = (",".join(format(float(v), ".17g") for v in row) for row in m)
    return "[" + ",".join("[" + r + "]" for r in rows) + "]"


def export_attention(record, path, stats: Optional[SparsityStats] = None):
    """Write the captured attention (averaged over a batch) as JSON.

    Layout: ``{version, config: {T, D, K}, rounds: [{m_s, m_t}], stats?}``.
    """
    if not record.rounds:
        raise DataError("export_attention: empty record")
    parts = []
    for r in record.rounds:
        cells = []
        for key, m in (("m_s", r.m_s), ("m_t", r.m_t)):
            body = "null" if m is None else _matrix_json(_as_stack(m).mean(axis=0))
            cells.append(f'"{key}": {body}')
        parts.append("{" + ", ".join(cells) + "}")
    head = {"version": ATTENTION_EXPORT_VERSION, "config": {"T": record.T, "D": record.D, "K": record.K}}
    text = "{" + json.dumps(head)[1:-1] + ', "rounds": [' + ",\n".join(parts) + "]"
    if stats is not None:
        text += ', "stats": ' + json.dumps(stats.to_json())
    text += "}\n"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_attention(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- baselines

def _lagged(series: np.ndarray, p: int, H: int):
    """Design rows [s_{t-p+1} .. s_t] with target s_{t+H}."""
    n = len(series) - p - H + 1
    if n < 1:
        raise DataError(f"series of length {len(series)} too short for order {p}, horizon {H}")
    idx = np.arange(n)[:, None] + np.arange(p)[None, :]
    return series[idx], series[np.arange(n) + p - 1 + H]


def _least_squares(F: np.ndarray, y: np.ndarray, alpha: float = 0.0, intercept: bool = True):
    if intercept:
        f_mean, y_mean = F.mean(axis=0), y.mean()
        F, y = F - f_mean, y - y_mean
    gram = F.T @ F + alpha * np.eye(F.shape[1])
    if alpha == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SolverError("singular normal equations (alpha=0)")
    try:
        w = np.linalg.solve(gram, F.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"normal equations could not be solved: {exc}") from exc
    b = float(y_mean - f_mean @ w) if intercept else 0.0
    return w, b


@dataclass
class LinearPredictor:
    """``predict(history)`` takes trailing values (AR/MA) or flattened windows (ridge)."""

    kind: str
    weights: np.ndarray
    intercept: float
    order: int

    def predict(self, history) -> np.ndarray:
        h = np.asarray(history, dtype=float)
        if self.kind == "ridge":
            h = h.reshape(len(h), -1)
            return h @ self.weights + self.intercept
        h = np.atleast_2d(h)[:, -self.order:]
        if h.shape[1] < self.order:
            raise DataError(f"{self.kind} needs {self.order} trailing values, got {h.shape[1]}")
        if self.kind == "ma":
            return h.mean(axis=1)
        return h @ self.weights + self.intercept


def baseline_ar(train_kpi, p: int = 2, H: int = 1, intercept: bool = True) -> LinearPredictor:
    """AR(p) by ordinary least squares, fitted directly for horizon H."""
    F, y = _lagged(np.asarray(train_kpi, dtype=float), p, H)
    w, b = _least_squares(F, y, 0.0, intercept)
    return LinearPredictor("ar", w, b, p)


def baseline_ma(train_kpi, window: int = 3) -> LinearPredictor:
    """Trailing mean of the last ``window`` values (nothing to fit)."""
    if window < 1 or len(train_kpi) < window:
        raise DataError(f"moving average needs at least {window} values")
    return LinearPredictor("ma", np.full(window, 1.0 / window), 0.0, window)


def baseline_ridge(X_train, y_train, alpha: float = 1e-3, intercept: bool = True) -> LinearPredictor:
    """Solve (X^T X + alpha I) w = X^T y on flattened (centred) windows."""
    X = np.asarray(X_train, dtype=float)
    F = X.reshape(len(X), -1)
    w, b = _least_squares(F, np.asarray(y_train, dtype=float), alpha, intercept)
    return LinearPredictor("ridge", w, b, F.shape[1])
