"""AttentionMixer: cascaded spatial/temporal attention blocks with a GRU decoder."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

SMPR_MODES = ("literal", "entropy")
LN_EPS = 1e-5


@dataclass
class MixerConfig:
    T: int = 16
    D: int = 8
    K: int = 2
    gru_hidden: int = 32
    smpr_mode: str = "entropy"
    lam: float = 5e-5
    tie_qk: bool = False
    disable_samp: bool = False
    disable_tamp: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.T < 2 or self.D < 2:
            raise ConfigError(f"need T >= 2 and D >= 2, got T={self.T}, D={self.D}")
        if self.K < 1:
            raise ConfigError(f"need K >= 1, got {self.K}")
        if self.gru_hidden < 1:
            raise ConfigError(f"gru_hidden must be positive, got {self.gru_hidden}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.smpr_mode not in SMPR_MODES:
            raise ConfigError(f"smpr_mode must be one of {SMPR_MODES}, got {self.smpr_mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "MixerConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class BlockParams:
    """Weights of one attention block.

    ``k_w``/``k_b`` alias ``q_w``/``q_b`` when tied. An untied key map has no
    bias: it would shift each row of logits by a constant, which softmax
    discards, so its gradient is identically zero.
    """

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Optional[Tensor]
    v_w: Tensor
    v_b: Tensor
    gain: Tensor
    bias: Tensor


@dataclass
class GRUParams:
    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor
    out_w: Tensor
    out_b: Tensor


class MixerParams:
    """Named learnable tensors of one model.

    Names are unique; a tied query/key map is stored once under its ``q``
    name and reused for the key role.
    """

    def __init__(self, config: MixerConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def names(self):
        return list(self.tensors)

    def copy(self) -> "MixerParams":
        return MixerParams(self.config, {n: ad.parameter(t.data.copy(), n) for n, t in self.tensors.items()})

    def load_arrays(self, arrays: dict):
        for name, t in self.tensors.items():
            t.data[...] = arrays[name]

    def arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def block(self, kind: str, k: int) -> BlockParams:
        pre = f"{kind}.{k}"
        g = self.tensors
        qk = "q" if self.config.tie_qk else "k"
        return BlockParams(
            g[f"{pre}.q.weight"], g[f"{pre}.q.bias"],
            g[f"{pre}.{qk}.weight"], g.get(f"{pre}.{qk}.bias"),
            g[f"{pre}.v.weight"], g[f"{pre}.v.bias"],
            g[f"{pre}.norm.gain"], g[f"{pre}.norm.bias"],
        )

    def decoder(self) -> GRUParams:
        g = self.tensors
        return GRUParams(*(g[f"gru.{n}"] for n in ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")),
                         g["head.weight"], g["head.bias"])


def structure(config: MixerConfig) -> tuple:
    """Fields that determine the parameter set."""
    return (config.T, config.D, config.K, config.gru_hidden, config.tie_qk,
            config.disable_samp, config.disable_tamp)


def parameter_shapes(config: MixerConfig) -> dict:
    """Ordered name -> shape map for a config (creation order fixes the RNG stream)."""
    shapes = {}
    maps = ("q", "v") if config.tie_qk else ("q", "k", "v")
    for k in range(config.K):
        for kind, n, skip in (("samp", config.T, config.disable_samp), ("tamp", config.D, config.disable_tamp)):
            if skip:
                continue
            for m in maps:
                shapes[f"{kind}.{k}.{m}.weight"] = (n, n)
                if m != "k":
                    shapes[f"{kind}.{k}.{m}.bias"] = (1, n)
            shapes[f"{kind}.{k}.norm.gain"] = (1, n)
            shapes[f"{kind}.{k}.norm.bias"] = (1, n)
    H, D = config.gru_hidden, config.D
    for gate in ("z", "r", "h"):
        shapes[f"gru.w_{gate}"] = (D, H)
    for gate in ("z", "r", "h"):
        shapes[f"gru.u_{gate}"] = (H, H)
    for gate in ("z", "r", "h"):
        shapes[f"gru.b_{gate}"] = (1, H)
    shapes["head.weight"] = (H, 1)
    shapes["head.bias"] = (1, 1)
    return shapes


def init_params(config: MixerConfig) -> MixerParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gain."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("norm.gain"):
            value = np.ones(shape)
        elif leaf in ("bias", "b_z", "b_r", "b_h") or name.endswith("norm.bias"):
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.parameter(value, name)
    return MixerParams(config, tensors)


# ---------------------------------------------------------------- blocks

def _attention_block(x: Tensor, p: BlockParams, scale: float):
    q = ad.affine(x, p.q_w, p.q_b)
    k = ad.matmul(x, p.k_w) if p.k_b is None else ad.affine(x, p.k_w, p.k_b)
    v = ad.affine(x, p.v_w, p.v_b)
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / scale)
    attn = ad.softmax_rows(logits)
    update = ad.matmul(attn, v)
    out = ad.layer_norm(ad.add(x, update), p.gain, p.bias, LN_EPS)
    return out, attn, logits


def samp_forward(s_in, p: BlockParams, scale: Optional[float] = None):
    """Spatial block on a D x T state (each variate is a node).

    Returns ``(S_out, M_S, logits)``; ``scale`` defaults to sqrt(T).
    """
    s_in = ad.as_tensor(s_in)
    T = s_in.shape[-1]
    if p.q_w.shape != (T, T):
        raise ShapeError(f"samp_forward: state rows have length {T} but maps are {p.q_w.shape}")
    return _attention_block(s_in, p, math.sqrt(T) if scale is None else scale)


def tamp_forward(t_in, p: BlockParams, scale: Optional[float] = None):
    """Temporal block on a T x D state (each step is a node); ``scale`` defaults to sqrt(D)."""
    t_in = ad.as_tensor(t_in)
    D = t_in.shape[-1]
    if p.q_w.shape != (D, D):
        raise ShapeError(f"tamp_forward: state rows have length {D} but maps are {p.q_w.shape}")
    return _attention_block(t_in, p, math.sqrt(D) if scale is None else scale)


def gru_decode(t_out, dec: GRUParams) -> Tensor:
    """Run a GRU over the rows of ``t_out`` from h=0; affine readout of the last state."""
    t_out = ad.as_tensor(t_out)
    # input projections for all steps at once: same FLOPs as per-step products
    xz = ad.matmul(t_out, dec.w_z)
    xr = ad.matmul(t_out, dec.w_r)
    xh = ad.matmul(t_out, dec.w_h)
    h = ad.gru_sequence(xz, xr, xh, dec.u_z, dec.u_r, dec.u_h, dec.b_z, dec.b_r, dec.b_h)
    return ad.affine(h, dec.out_w, dec.out_b)


# ---------------------------------------------------------------- full model

@dataclass
class RoundAttention:
    m_s: Optional[Tensor] = None
    m_t: Optional[Tensor] = None
    logits_s: Optional[Tensor] = None
    logits_t: Optional[Tensor] = None


@dataclass
class AttentionRecord:
    T: int
    D: int
    rounds: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.rounds)

    def matrices(self):
        """Yield (round, kind, tensor) for every captured attention matrix."""
        for k, r in enumerate(self.rounds):
            if r.m_s is not None:
                yield k, "s", r.m_s
            if r.m_t is not None:
                yield k, "t", r.m_t


def mixer_forward(x, params: MixerParams, config: MixerConfig, capture: bool = False):
    """Forward a T x D window (or a B x T x D batch) to a KPI estimate.

    Returns ``(y_hat, record)`` where ``y_hat`` has shape (..., 1, 1) and
    ``record`` is an AttentionRecord if ``capture`` else None.
    """
    x = ad.as_tensor(x)
    if x.shape[-2:] != (config.T, config.D):
        raise ShapeError(f"mixer_forward: expected windows of shape ({config.T}, {config.D}), got {x.shape}")
    if params.config is not config and structure(params.config) != structure(config):
        raise ShapeError("mixer_forward: parameters were built for a different model structure")
    record = AttentionRecord(config.T, config.D) if capture else None
    s_in = ad.transpose(x)
    t_out = x
    for k in range(config.K):
        rnd = RoundAttention()
        if config.disable_samp:
            s_out = s_in
        else:
            s_out, rnd.m_s, rnd.logits_s = samp_forward(s_in, params.block("samp", k))
        t_in = ad.transpose(s_out)
        if config.disable_tamp:
            t_out = t_in
        else:
            t_out, rnd.m_t, rnd.logits_t = tamp_forward(t_in, params.block("tamp", k))
        s_in = ad.transpose(t_out)
        if record is not None:
            record.rounds.append(rnd)
    return gru_decode(t_out, params.decoder()), record


# ---------------------------------------------------------------- complexity

@dataclass
class FlopReport:
    samp_flops: int
    tamp_flops: int
    decoder_flops: int

    @property
    def total(self) -> int:
        return self.samp_flops + self.tamp_flops + self.decoder_flops


def count_flops(config: MixerConfig) -> FlopReport:
    """Closed-form matmul FLOPs for one single-sample forward pass."""
    T, D, K, H = config.T, config.D, config.K, config.gru_hidden
    samp = 0 if config.disable_samp else K * (6 * D * T * T + 4 * T * D * D)
    tamp = 0 if config.disable_tamp else K * (6 * T * D * D + 4 * D * T * T)
    # per step: three input products (2DH each) and three recurrent ones (2H^2 each); plus readout
    decoder = T * (6 * D * H + 6 * H * H) + 2 * H
    return FlopReport(samp, tamp, decoder)


def measure_flops(config: MixerConfig) -> int:
    """Run one instrumented single-sample forward and return its matmul FLOPs."""
    params = init_params(config)
    x = np.zeros((config.T, config.D))
    with ad.no_grad(), ad.count_flops() as counter:
        mixer_forward(x, params, config)
    return counter.count
