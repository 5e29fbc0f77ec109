"""Windowing, splitting, scaling, the training objective, Adam and early stopping."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SeriesFrame
from .errors import ConfigError, DataError, DomainError, NumericInputError, TrainingDivergenceError
from .model import AttentionRecord, MixerConfig, MixerParams, init_params, mixer_forward

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.7, 0.15, 0.15)
ENTROPY_EPS = 1e-12


# ---------------------------------------------------------------- datasets

@dataclass
class WindowedDataset:
    """Samples ``X[i]`` (T x D) with target ``y[i]`` at row ``target_rows[i]`` of the source frame.

    Window i covers frame rows ``starts[i] .. starts[i] + T - 1`` and its
    target sits H rows after the window's last row.
    """

    X: np.ndarray
    y: np.ndarray
    kpi_hist: np.ndarray
    starts: np.ndarray
    T: int
    H: int

    def __len__(self):
        return len(self.y)

    @property
    def target_rows(self) -> np.ndarray:
        return self.starts + self.T - 1 + self.H

    def subset(self, sl: slice) -> "WindowedDataset":
        return WindowedDataset(self.X[sl], self.y[sl], self.kpi_hist[sl], self.starts[sl], self.T, self.H)


def make_windows(frame: SeriesFrame, T: int, H: int) -> WindowedDataset:
    if T < 1 or H < 0:
        raise ConfigError(f"need T >= 1 and H >= 0, got T={T}, H={H}")
    n = frame.N - T - H + 1
    if n < 1:
        raise DataError(f"frame of length {frame.N} is too short for T={T}, H={H}")
    starts = np.arange(n)
    idx = starts[:, None] + np.arange(T)[None, :]
    return WindowedDataset(
        X=frame.features[idx],
        y=frame.kpi[starts + T - 1 + H].copy(),
        kpi_hist=frame.kpi[idx],
        starts=starts,
        T=T,
        H=H,
    )


def split_sizes(n: int, ratios=DEFAULT_RATIOS):
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} samples cannot be split {ratios} without an empty segment")
    return n_train, n_val, n_test


def chrono_split(ds: WindowedDataset, ratios=DEFAULT_RATIOS):
    """Contiguous (train, val, test) segments in time order; no shuffling."""
    n_train, n_val, _ = split_sizes(len(ds), ratios)
    return (ds.subset(slice(0, n_train)),
            ds.subset(slice(n_train, n_train + n_val)),
            ds.subset(slice(n_train + n_val, None)))


@dataclass
class Scaler:
    """Per-column min-max scaling; the KPI is the last column."""

    lo: np.ndarray
    hi: np.ndarray

    def _span(self):
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0), span > 0

    def transform(self, table: np.ndarray) -> np.ndarray:
        span, ok = self._span()
        return np.where(ok, (table - self.lo) / span, 0.0)

    def inverse(self, table: np.ndarray) -> np.ndarray:
        span, ok = self._span()
        return np.where(ok, table * span + self.lo, self.lo)

    def inverse_kpi(self, y: np.ndarray) -> np.ndarray:
        span = self.hi[-1] - self.lo[-1]
        return y * span + self.lo[-1] if span > 0 else np.full_like(y, self.lo[-1])

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_json(cls, d) -> "Scaler":
        return cls(np.array(d["min"], dtype=float), np.array(d["max"], dtype=float))


def fit_scaler(train_table: np.ndarray) -> Scaler:
    train_table = np.asarray(train_table, dtype=float)
    if train_table.ndim != 2 or len(train_table) == 0:
        raise DataError("scaler needs a non-empty 2-D training table")
    return Scaler(train_table.min(axis=0), train_table.max(axis=0))


def apply_scaler(scaler: Scaler, frame: SeriesFrame) -> SeriesFrame:
    scaled = scaler.transform(frame.table())
    return frame.with_values(scaled[:, :-1], scaled[:, -1])


def training_rows(n_train: int, T: int, H: int) -> int:
    """Number of leading frame rows touched by the first ``n_train`` windows (inputs and targets)."""
    return n_train - 1 + T + H


@dataclass
class PreparedData:
    scaler: Scaler
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    frame: SeriesFrame


def prepare(frame: SeriesFrame, T: int, H: int, ratios=DEFAULT_RATIOS, scaler: Optional[Scaler] = None) -> PreparedData:
    """Split chronologically, fit the scaler on training rows only, and window the scaled frame."""
    n_train, _, _ = split_sizes(frame.N - T - H + 1 if frame.N >= T + H else 0, ratios)
    if scaler is None:
        scaler = fit_scaler(frame.table()[: training_rows(n_train, T, H)])
    scaled = apply_scaler(scaler, frame)
    train, val, test = chrono_split(make_windows(scaled, T, H), ratios)
    return PreparedData(scaler, train, val, test, scaled)


# ---------------------------------------------------------------- objective

def smpr_loss(record: AttentionRecord, mode: str = "entropy") -> Tensor:
    """Sparsity penalty on the captured attention, summed over rounds and blocks.

    ``literal`` is the entrywise l1 norm; since every row is a softmax it
    always equals K*(D+T) and carries no gradient. ``entropy`` uses the mean
    row entropy instead. Batched records are averaged over the batch.
    """
    mats = [m for _, _, m in record.matrices()]
    if not mats:
        raise ConfigError("smpr_loss: record holds no attention matrices")
    total = None
    for m in mats:
        if mode == "literal":
            term = ad.sum(ad.absolute(m), axis=(-2, -1))
        elif mode == "entropy":
            plogp = ad.mul(m, ad.log(ad.add(m, ENTROPY_EPS)))
            term = ad.scale(ad.mean(ad.sum(plogp, axis=-1), axis=-1), -1.0)
        else:
            raise ConfigError(f"unknown smpr mode {mode!r}")
        total = term if total is None else ad.add(total, term)
    return ad.mean(total)


def total_loss(y, y_hat: Tensor, record: Optional[AttentionRecord], lam: float, mode: str = "entropy") -> Tensor:
    """Batch mean of (y - y_hat)^2 plus ``lam`` times the SMPR term."""
    y = np.asarray(y, dtype=float).reshape(y_hat.shape)
    loss = ad.mean(ad.square(ad.sub(y_hat, y)))
    if lam > 0:
        loss = ad.add(loss, ad.scale(smpr_loss(record, mode), lam))
    return loss


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
                "m": {k: a.tolist() for k, a in self.m.items()},
                "v": {k: a.tolist() for k, a in self.v.items()}}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- training

@dataclass
class TrainSettings:
    H: int = 1
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 15
    ratios: tuple = DEFAULT_RATIOS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.lr <= 0 or self.H < 0:
            raise ConfigError(f"invalid training settings: {self}")
        self.ratios = tuple(float(r) for r in self.ratios)


@dataclass
class TrainReport:
    train_loss: list
    val_mse: list
    best_epoch: int
    stop_epoch: int
    max_epochs: int
    test_metrics: object = None
    val_metrics: object = None
    wall_time: float = 0.0
    scaler: Optional[Scaler] = None


def predict(params: MixerParams, config: MixerConfig, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Forecasts for a stack of windows, no graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            y_hat, _ = mixer_forward(X[i:i + batch_size], params, config)
            out.append(y_hat.data.reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def _mse(a, b) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def _run_epoch(params, config, data, settings, state, rng, need_record):
    """One shuffled pass of Adam updates; returns (mean training loss, validation MSE)."""
    n = len(data.train)
    order = rng.permutation(n)
    running = 0.0
    for i in range(0, n, settings.batch_size):
        idx = order[i:i + settings.batch_size]
        y_hat, record = mixer_forward(data.train.X[idx], params, config, capture=need_record)
        loss = total_loss(data.train.y[idx], y_hat, record, config.lam, config.smpr_mode)
        value = float(loss.data)
        if not math.isfinite(value):
            return value, math.nan
        ad.zero_grad(params.values())
        grads = ad.backward(loss)
        adam_step(params.tensors, grads, state, settings.lr)
        running += value * len(idx)
    return running / n, _mse(predict(params, config, data.val.X), data.val.y)


def train(config: MixerConfig, frame: SeriesFrame, settings: Optional[TrainSettings] = None, data: Optional[PreparedData] = None):
    """Fit a model with Adam and early stopping on validation MSE.

    Returns ``(best_params, report)``. Deterministic given ``config.seed``.
    """
    from .evaluate import metrics_or_partial

    settings = settings or TrainSettings()
    t0 = time.perf_counter()
    if data is None:
        data = prepare(frame, config.T, settings.H, settings.ratios)
    if data.train.X.shape[-1] != config.D:
        raise ConfigError(f"config has D={config.D} but the data has {data.train.X.shape[-1]} features")
    params = init_params(config)
    best = params.arrays()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    need_record = config.lam > 0
    train_curve, val_curve = [], []
    best_val, best_epoch, epoch = math.inf, 0, 0
    for epoch in range(1, settings.epochs + 1):
        try:
            train_loss, val = _run_epoch(params, config, data, settings, state, rng, need_record)
        except (NumericInputError, DomainError) as exc:
            raise TrainingDivergenceError(epoch, f"non-finite values at epoch {epoch}: {exc}") from exc
        if not math.isfinite(train_loss):
            raise TrainingDivergenceError(epoch)
        if not math.isfinite(val):
            raise TrainingDivergenceError(epoch, f"non-finite validation error at epoch {epoch}")
        train_curve.append(train_loss)
        val_curve.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = params.arrays()
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val)
        if epoch - best_epoch >= settings.patience:
            break
    params.load_arrays(best)
    ad.zero_grad(params.values())
    report = TrainReport(train_curve, val_curve, best_epoch, epoch, settings.epochs, scaler=data.scaler)
    report.val_metrics = metrics_or_partial(data.val.y, predict(params, config, data.val.X))
    report.test_metrics = metrics_or_partial(data.test.y, predict(params, config, data.test.X))
    report.wall_time = time.perf_counter() - t0
    return params, report
