import math

import numpy as np
import pytest

from attnmixer.model import MixerConfig, init_params


def randomize(params, seed, scale=0.3):
    """Perturb every parameter so biases and gains are not trivially 0/1."""
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.data += rng.normal(0.0, scale, t.shape)
    return params


def random_model(seed, **kw):
    cfg = MixerConfig(seed=seed, **kw)
    return cfg, randomize(init_params(cfg), seed + 1000)


def random_block(n, rng, zero_qk=False, tied=False):
    """Standalone attention-block weights for an n-dimensional feature axis."""
    from attnmixer import autodiff as ad
    from attnmixer.model import BlockParams

    def m():
        return ad.parameter(np.zeros((n, n)) if zero_qk else rng.normal(size=(n, n)), "w")

    def b():
        return ad.parameter(np.zeros((1, n)) if zero_qk else rng.normal(size=(1, n)), "b")

    qw, qb = m(), b()
    kw = qw if tied else m()
    kb = qb if tied else None
    return BlockParams(qw, qb, kw, kb, ad.parameter(rng.normal(size=(n, n)), "v"),
                       ad.parameter(rng.normal(size=(1, n)), "vb"),
                       ad.parameter(1 + 0.1 * rng.normal(size=(1, n)), "g"),
                       ad.parameter(0.1 * rng.normal(size=(1, n)), "c"))


# ---------------------------------------------------------------- scalar-loop oracles

def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def block_oracle(S, wq, bq, wk, bk, wv, bv, gain, beta, scale, eps=1e-5):
    """One attention block written index by index from the defining equations."""
    n, d = len(S), len(S[0])

    def mlp(W, b):
        return [[math.fsum(S[i][a] * W[a][c] for a in range(d)) + (b[0][c] if b is not None else 0.0)
                 for c in range(d)] for i in range(n)]

    Q, K, V = mlp(wq, bq), mlp(wk, bk), mlp(wv, bv)
    logits = [[math.fsum(Q[i][c] * K[j][c] for c in range(d)) / scale for j in range(n)] for i in range(n)]
    M = []
    for i in range(n):
        exps = [math.exp(v) for v in logits[i]]
        tot = math.fsum(exps)
        M.append([e / tot for e in exps])
    U = [[math.fsum(M[i][j] * V[j][c] for j in range(n)) for c in range(d)] for i in range(n)]
    out = []
    for i in range(n):
        r = [S[i][c] + U[i][c] for c in range(d)]
        mu = math.fsum(r) / d
        var = math.fsum((v - mu) ** 2 for v in r) / d
        out.append([(r[c] - mu) / math.sqrt(var + eps) * gain[0][c] + beta[0][c] for c in range(d)])
    return np.array(out), np.array(M), np.array(logits)


def block_oracle_from(S, p, scale):
    arr = lambda t: None if t is None else t.data.tolist()  # noqa: E731
    return block_oracle(np.asarray(S).tolist(), arr(p.q_w), arr(p.q_b), arr(p.k_w), arr(p.k_b),
                        arr(p.v_w), arr(p.v_b), arr(p.gain), arr(p.bias), scale)


def gru_oracle(X, dec):
    """GRU recurrence over rows of X from h = 0, scalar loops; returns the readout."""
    g = {k: getattr(dec, k).data for k in ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "out_w", "out_b")}
    H = g["u_z"].shape[0]
    D = g["w_z"].shape[0]
    h = [0.0] * H
    for x in np.asarray(X):
        def pre(w, u, b, hv):
            return [math.fsum([*(x[a] * g[w][a][j] for a in range(D)), *(hv[i] * g[u][i][j] for i in range(H))])
                    + g[b][0][j] for j in range(H)]
        z = [_sig(v) for v in pre("w_z", "u_z", "b_z", h)]
        r = [_sig(v) for v in pre("w_r", "u_r", "b_r", h)]
        rh = [r[j] * h[j] for j in range(H)]
        c = [math.tanh(v) for v in pre("w_h", "u_h", "b_h", rh)]
        h = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(H)]
    return math.fsum(h[j] * g["out_w"][j][0] for j in range(H)) + g["out_b"][0][0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"CRITERION {n}: FAIL - did not run to completion"))
