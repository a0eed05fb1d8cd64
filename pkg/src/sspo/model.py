"""Desk-scale signal-conditioned autoregressive policy in numpy (float64).

Layout: patch encoder (pre-norm transformer, bidirectional) -> two-layer GELU
projector -> causal pre-norm transformer decoder over ``[H_ecg ; query ;
target]`` -> linear head. All gradients are hand-written reverse mode.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    channels: int = 4
    patch_len: int = 16
    enc_layers: int = 2
    enc_dim: int = 32
    dec_layers: int = 2
    dec_dim: int = 32
    heads: int = 4
    max_seq: int = 96
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.enc_dim % self.heads or self.dec_dim % self.heads:
            raise ValueError("enc_dim and dec_dim must be divisible by heads")
        if min(self.vocab_size, self.channels, self.patch_len, self.max_seq) < 1:
            raise ValueError("vocab_size, channels, patch_len and max_seq must be positive")


def _block_shapes(prefix: str, d: int, ratio: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wqkv", (d, 3 * d)),
        (f"{prefix}.attn.bqkv", (3 * d,)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.w1", (d, ratio * d)),
        (f"{prefix}.mlp.b1", (ratio * d,)),
        (f"{prefix}.mlp.w2", (ratio * d, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, d = cfg.enc_dim, cfg.dec_dim
    shapes = [
        ("enc.patch.w", (cfg.patch_len * cfg.channels, e)),
        ("enc.patch.b", (e,)),
        ("enc.pos", (cfg.max_seq, e)),
    ]
    for i in range(cfg.enc_layers):
        shapes += _block_shapes(f"enc.{i}", e, cfg.mlp_ratio)
    shapes += [
        ("enc.lnf.g", (e,)),
        ("enc.lnf.b", (e,)),
        ("proj.w1", (e, d)),
        ("proj.b1", (d,)),
        ("proj.w2", (d, d)),
        ("proj.b2", (d,)),
        ("dec.tok", (cfg.vocab_size, d)),
        ("dec.pos", (cfg.max_seq, d)),
    ]
    for i in range(cfg.dec_layers):
        shapes += _block_shapes(f"dec.{i}", d, cfg.mlp_ratio)
    shapes += [
        ("dec.lnf.g", (d,)),
        ("dec.lnf.b", (d,)),
        ("head.w", (d, cfg.vocab_size)),
        ("head.b", (cfg.vocab_size,)),
    ]
    return shapes


class PolicyParams:
    """All trainable arrays as named views into one flat float64 vector."""

    def __init__(self, cfg: ModelConfig, vec: np.ndarray | None = None):
        self.cfg = cfg
        self.shapes = param_shapes(cfg)
        n = sum(int(np.prod(s)) for _, s in self.shapes)
        if vec is None:
            vec = np.zeros(n)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n,):
            raise ValueError(f"expected flat vector of length {n}, got {vec.shape}")
        self.vec = vec
        self._views: dict[str, np.ndarray] = {}
        self._offsets: dict[str, tuple[int, int]] = {}
        off = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            self._views[name] = vec[off : off + size].reshape(shape)
            self._offsets[name] = (off, off + size)
            off += size

    @classmethod
    def init(cls, cfg: ModelConfig) -> "PolicyParams":
        p = cls(cfg)
        rng = np.random.default_rng(cfg.seed)
        n_res = 2 * max(cfg.enc_layers, cfg.dec_layers, 1)
        for name, shape in p.shapes:
            leaf = name.rsplit(".", 1)[-1]
            if name.endswith((".g",)):
                p[name][...] = 1.0
            elif leaf.startswith("b") or name.endswith(".b"):
                continue
            elif name in ("enc.pos", "dec.pos", "dec.tok", "head.w"):
                p[name][...] = rng.normal(0.0, 0.02, shape)
            else:
                std = 1.0 / math.sqrt(shape[0])
                if name.endswith(("attn.wo", "mlp.w2")):
                    std /= math.sqrt(n_res)
                p[name][...] = rng.normal(0.0, std, shape)
        return p

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        if value is not view:
            view[...] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._views)

    def __len__(self) -> int:
        return self.vec.size

    def slice_of(self, name: str) -> slice:
        a, b = self._offsets[name]
        return slice(a, b)

    def name_of(self, index: int) -> str:
        for name, (a, b) in self._offsets.items():
            if a <= index < b:
                return name
        raise IndexError(index)

    def flatten(self) -> np.ndarray:
        return self.vec.copy()

    @classmethod
    def unflatten(cls, cfg: ModelConfig, vec: np.ndarray) -> "PolicyParams":
        return cls(cfg, np.array(vec, dtype=np.float64, copy=True))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.cfg, self.vec.copy())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(self.cfg)


# ---------------------------------------------------------------- primitives


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(red)
    db = dy.sum(red)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _linear_bwd(dy, x, w):
    d_in = dy.shape[-1]
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, d_in)
    db = dy.reshape(-1, d_in).sum(0)
    return dy @ w.T, dw, db


def _causal_mask(s: int) -> np.ndarray:
    return np.triu(np.ones((s, s), dtype=bool), k=1)


def _attn_fwd(x, p, prefix, heads, causal):
    bsz, s, d = x.shape
    dh = d // heads
    qkv = x @ p[f"{prefix}.wqkv"] + p[f"{prefix}.bqkv"]
    qkv = qkv.reshape(bsz, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if causal:
        scores = np.where(_causal_mask(s), -np.inf, scores)
    scores = scores - scores.max(-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(-1, keepdims=True)
    o = att @ v
    om = o.transpose(0, 2, 1, 3).reshape(bsz, s, d)
    y = om @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return y, (x, q, k, v, att, om, scale)


def _attn_bwd(dy, cache, p, prefix, grad):
    x, q, k, v, att, om, scale = cache
    bsz, heads, s, dh = q.shape
    dom, dwo, dbo = _linear_bwd(dy, om, p[f"{prefix}.wo"])
    grad[f"{prefix}.wo"] += dwo
    grad[f"{prefix}.bo"] += dbo
    do = dom.reshape(bsz, s, heads, dh).transpose(0, 2, 1, 3)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, s, 3 * heads * dh)
    dx, dw, db = _linear_bwd(dqkv, x, p[f"{prefix}.wqkv"])
    grad[f"{prefix}.wqkv"] += dw
    grad[f"{prefix}.bqkv"] += db
    return dx


def _block_fwd(x, p, prefix, heads, causal):
    a_in, ln1 = _ln_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    a_out, attn = _attn_fwd(a_in, p, f"{prefix}.attn", heads, causal)
    x1 = x + a_out
    m_in, ln2 = _ln_fwd(x1, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    pre = m_in @ p[f"{prefix}.mlp.w1"] + p[f"{prefix}.mlp.b1"]
    act = gelu(pre)
    x2 = x1 + act @ p[f"{prefix}.mlp.w2"] + p[f"{prefix}.mlp.b2"]
    return x2, (ln1, attn, ln2, m_in, pre, act)


def _block_bwd(dx2, cache, p, prefix, grad):
    ln1, attn, ln2, m_in, pre, act = cache
    dact, dw2, db2 = _linear_bwd(dx2, act, p[f"{prefix}.mlp.w2"])
    grad[f"{prefix}.mlp.w2"] += dw2
    grad[f"{prefix}.mlp.b2"] += db2
    dpre = dact * gelu_grad(pre)
    dm_in, dw1, db1 = _linear_bwd(dpre, m_in, p[f"{prefix}.mlp.w1"])
    grad[f"{prefix}.mlp.w1"] += dw1
    grad[f"{prefix}.mlp.b1"] += db1
    dx1_ln, dg, db = _ln_bwd(dm_in, ln2)
    grad[f"{prefix}.ln2.g"] += dg
    grad[f"{prefix}.ln2.b"] += db
    dx1 = dx2 + dx1_ln
    da_in = _attn_bwd(dx1, attn, p, f"{prefix}.attn", grad)
    dx_ln, dg, db = _ln_bwd(da_in, ln1)
    grad[f"{prefix}.ln1.g"] += dg
    grad[f"{prefix}.ln1.b"] += db
    return dx1 + dx_ln


# ------------------------------------------------------------ encoder/projector


def _patchify(signals: np.ndarray, patch_len: int) -> np.ndarray:
    bsz, t, c = signals.shape
    if t % patch_len or t == 0:
        raise ValueError(f"signal length {t} is not a positive multiple of patch_len {patch_len}")
    return signals.reshape(bsz, t // patch_len, patch_len * c)


def _encode_fwd(signals, p):
    cfg = p.cfg
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 3 or signals.shape[2] != cfg.channels:
        raise ValueError(f"expected signals of shape (B, T, {cfg.channels}), got {signals.shape}")
    patches = _patchify(signals, cfg.patch_len)
    n_patch = patches.shape[1]
    if n_patch > cfg.max_seq:
        raise ValueError("too many patches for max_seq")
    h = patches @ p["enc.patch.w"] + p["enc.patch.b"] + p["enc.pos"][:n_patch]
    caches = []
    for i in range(cfg.enc_layers):
        h, c = _block_fwd(h, p, f"enc.{i}", cfg.heads, causal=False)
        caches.append(c)
    z, lnf = _ln_fwd(h, p["enc.lnf.g"], p["enc.lnf.b"])
    return z, (patches, caches, lnf)


def _encode_bwd(dz, cache, p, grad):
    patches, caches, lnf = cache
    dh, dg, db = _ln_bwd(dz, lnf)
    grad["enc.lnf.g"] += dg
    grad["enc.lnf.b"] += db
    for i in reversed(range(p.cfg.enc_layers)):
        dh = _block_bwd(dh, caches[i], p, f"enc.{i}", grad)
    n_patch = patches.shape[1]
    grad["enc.pos"][:n_patch] += dh.sum(0)
    dpatches, dw, db = _linear_bwd(dh, patches, p["enc.patch.w"])
    grad["enc.patch.w"] += dw
    grad["enc.patch.b"] += db
    # patches are a reshape of the signal, so this is d/d(signal)
    return dpatches.reshape(patches.shape[0], -1, p.cfg.channels)


def _project_fwd(z, p):
    pre = z @ p["proj.w1"] + p["proj.b1"]
    act = gelu(pre)
    return act @ p["proj.w2"] + p["proj.b2"], (z, pre, act)


def _project_bwd(dh, cache, p, grad):
    z, pre, act = cache
    dact, dw2, db2 = _linear_bwd(dh, act, p["proj.w2"])
    grad["proj.w2"] += dw2
    grad["proj.b2"] += db2
    dz, dw1, db1 = _linear_bwd(dact * gelu_grad(pre), z, p["proj.w1"])
    grad["proj.w1"] += dw1
    grad["proj.b1"] += db1
    return dz


def encode_signal(x: np.ndarray, params: PolicyParams) -> np.ndarray:
    """Patch-level features (L x enc_dim) for one T x C record."""
    z, _ = _encode_fwd(np.asarray(x)[None], params)
    return z[0]


def project(z: np.ndarray, params: PolicyParams) -> np.ndarray:
    h, _ = _project_fwd(np.asarray(z, dtype=np.float64), params)
    return h


def assemble_input(h_ecg: np.ndarray, query_ids: Sequence[int], params: PolicyParams) -> np.ndarray:
    """``[H_ecg ; embed(query)]`` with learned positions over the joint sequence."""
    cfg = params.cfg
    ids = np.asarray(query_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("query id out of vocabulary range")
    s = h_ecg.shape[0] + ids.size
    if s > cfg.max_seq:
        raise ValueError(f"assembled length {s} exceeds max_seq {cfg.max_seq}")
    x = np.concatenate([h_ecg, params["dec.tok"][ids]], axis=0)
    return x + params["dec.pos"][:s]


# ------------------------------------------------------------------- decoder


def _decode_fwd(x, p):
    """Causal decoder over an already embedded (B, S, D) sequence -> log-probs (B, S, V)."""
    cfg = p.cfg
    caches = []
    h = x
    for i in range(cfg.dec_layers):
        h, c = _block_fwd(h, p, f"dec.{i}", cfg.heads, causal=True)
        caches.append(c)
    y, lnf = _ln_fwd(h, p["dec.lnf.g"], p["dec.lnf.b"])
    logits = y @ p["head.w"] + p["head.b"]
    return log_softmax(logits), (caches, lnf, y)


def _decode_bwd(dlogits, cache, p, grad):
    caches, lnf, y = cache
    dy, dw, db = _linear_bwd(dlogits, y, p["head.w"])
    grad["head.w"] += dw
    grad["head.b"] += db
    dh, dg, db = _ln_bwd(dy, lnf)
    grad["dec.lnf.g"] += dg
    grad["dec.lnf.b"] += db
    for i in reversed(range(p.cfg.dec_layers)):
        dh = _block_bwd(dh, caches[i], p, f"dec.{i}", grad)
    return dh


def forward_logprobs(
    input_seq: np.ndarray, target_ids: Sequence[int], params: PolicyParams
) -> np.ndarray:
    """log p(y_t | I, y_<t) for each target token, given an assembled input."""
    tgt = np.asarray(target_ids, dtype=np.int64).reshape(-1)
    n_in = input_seq.shape[0]
    s = n_in + tgt.size
    if s > params.cfg.max_seq:
        raise ValueError(f"sequence length {s} exceeds max_seq {params.cfg.max_seq}")
    if n_in < 1:
        raise ValueError("input sequence must be non-empty")
    x = np.concatenate([input_seq, params["dec.tok"][tgt] + params["dec.pos"][n_in:s]], axis=0)
    logp, _ = _decode_fwd(x[None], params)
    return logp[0, np.arange(n_in - 1, s - 1), tgt]


# --------------------------------------------------------- batched training path


@dataclass
class SeqBatch:
    """Signals plus right-padded ``query + target`` token rows."""

    signals: np.ndarray
    tokens: np.ndarray
    n_query: np.ndarray
    n_target: np.ndarray

    @classmethod
    def make(
        cls,
        signals: Sequence[np.ndarray],
        queries: Sequence[Sequence[int]],
        targets: Sequence[Sequence[int]],
        pad_id: int = 0,
    ) -> "SeqBatch":
        if not (len(signals) == len(queries) == len(targets)) or not len(signals):
            raise ValueError("batch must be non-empty with matching lengths")
        n_q = np.array([len(q) for q in queries], dtype=np.int64)
        n_t = np.array([len(t) for t in targets], dtype=np.int64)
        width = int((n_q + n_t).max())
        tokens = np.full((len(signals), width), pad_id, dtype=np.int64)
        for b, (q, t) in enumerate(zip(queries, targets)):
            row = list(q) + list(t)
            tokens[b, : len(row)] = row
        return cls(np.stack([np.asarray(s, dtype=np.float64) for s in signals]), tokens, n_q, n_t)

    @property
    def target_mask(self) -> np.ndarray:
        j = np.arange(self.tokens.shape[1])[None, :]
        return (j >= self.n_query[:, None]) & (j < (self.n_query + self.n_target)[:, None])

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class _Trace:
    enc: tuple
    proj: tuple
    dec: tuple
    logp_all: np.ndarray
    n_patch: int
    batch: SeqBatch = field(repr=False)


def batch_logprobs(params: PolicyParams, batch: SeqBatch) -> tuple[np.ndarray, _Trace]:
    """Per-token log-probs (B, N); entries outside the target mask are 0."""
    cfg = params.cfg
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of vocabulary range")
    z, enc_c = _encode_fwd(batch.signals, params)
    h, proj_c = _project_fwd(z, params)
    n_patch = h.shape[1]
    s = n_patch + batch.tokens.shape[1]
    if s > cfg.max_seq:
        raise ValueError(f"sequence length {s} exceeds max_seq {cfg.max_seq}")
    x = np.concatenate([h, params["dec.tok"][batch.tokens]], axis=1) + params["dec.pos"][:s]
    logp_all, dec_c = _decode_fwd(x, params)
    # token j is predicted from sequence position n_patch + j - 1
    pred = logp_all[:, n_patch - 1 : s - 1, :]
    tok_lp = np.take_along_axis(pred, batch.tokens[..., None], axis=-1)[..., 0]
    tok_lp = np.where(batch.target_mask, tok_lp, 0.0)
    return tok_lp, _Trace(enc_c, proj_c, dec_c, logp_all, n_patch, batch)


def batch_logprob_grad(params: PolicyParams, trace: _Trace, weights: np.ndarray) -> PolicyParams:
    """Gradient of ``sum(weights * token_logprobs)`` w.r.t. every parameter."""
    batch = trace.batch
    w = np.where(batch.target_mask, weights, 0.0)
    n_patch = trace.n_patch
    bsz, n_tok = batch.tokens.shape
    grad = params.zeros_like()
    dlogits = np.zeros_like(trace.logp_all)
    probs = np.exp(trace.logp_all[:, n_patch - 1 : n_patch - 1 + n_tok, :])
    d_pred = -w[..., None] * probs
    bi, ji = np.nonzero(w)
    d_pred[bi, ji, batch.tokens[bi, ji]] += w[bi, ji]
    dlogits[:, n_patch - 1 : n_patch - 1 + n_tok, :] = d_pred
    dx = _decode_bwd(dlogits, trace.dec, params, grad)
    s = dx.shape[1]
    grad["dec.pos"][:s] += dx.sum(0)
    np.add.at(grad["dec.tok"], batch.tokens.reshape(-1), dx[:, n_patch:, :].reshape(-1, dx.shape[-1]))
    dz = _project_bwd(dx[:, :n_patch, :], trace.proj, params, grad)
    _encode_bwd(dz, trace.enc, params, grad)
    return grad


# ------------------------------------------------------------------ sampling


@dataclass
class SampleResult:
    ids: list[list[int]]
    logprobs: list[np.ndarray]
    finished: list[bool]


def prefix_embeddings(params: PolicyParams, signals: np.ndarray, query_ids: Sequence[int]) -> np.ndarray:
    """Assembled inputs (B, L + |q|, D) for a batch of signals sharing one query."""
    z, _ = _encode_fwd(signals, params)
    h, _ = _project_fwd(z, params)
    return np.stack([assemble_input(hb, query_ids, params) for hb in h])


class _KVCache:
    """Per-layer key/value buffers for incremental causal decoding."""

    def __init__(self, params: PolicyParams, prefix: np.ndarray):
        cfg = params.cfg
        bsz, s0, _ = prefix.shape
        dh = cfg.dec_dim // cfg.heads
        self.k = np.zeros((cfg.dec_layers, bsz, cfg.heads, cfg.max_seq, dh))
        self.v = np.zeros_like(self.k)
        logp, (caches, _, _) = _decode_fwd(prefix, params)
        for i, c in enumerate(caches):
            _, q, k, v, *_ = c[1]
            self.k[i, :, :, :s0] = k
            self.v[i, :, :, :s0] = v
        self.n = s0
        self.last_logp = logp[:, -1, :]

    def step(self, params: PolicyParams, x: np.ndarray) -> np.ndarray:
        """Feed one embedded position per row (B, D); returns next-token log-probs (B, V)."""
        cfg = params.cfg
        bsz, d = x.shape
        heads, dh = cfg.heads, d // cfg.heads
        n = self.n
        h = x
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}"
            a_in, _ = _ln_fwd(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
            qkv = (a_in @ params[f"{pre}.attn.wqkv"] + params[f"{pre}.attn.bqkv"]).reshape(bsz, 3, heads, dh)
            self.k[i, :, :, n] = qkv[:, 1]
            self.v[i, :, :, n] = qkv[:, 2]
            keys = self.k[i, :, :, : n + 1]
            scores = np.einsum("bhd,bhsd->bhs", qkv[:, 0], keys) / math.sqrt(dh)
            scores -= scores.max(-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(-1, keepdims=True)
            o = np.einsum("bhs,bhsd->bhd", att, self.v[i, :, :, : n + 1]).reshape(bsz, d)
            h = h + o @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]
            m_in, _ = _ln_fwd(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
            act = gelu(m_in @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"])
            h = h + act @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"]
        y, _ = _ln_fwd(h, params["dec.lnf.g"], params["dec.lnf.b"])
        self.n = n + 1
        self.last_logp = log_softmax(y @ params["head.w"] + params["head.b"])
        return self.last_logp


def sample_batch(
    params: PolicyParams,
    prefix: np.ndarray,
    eos_id: int,
    max_new: int,
    temperature: float = 1.0,
    greedy: bool = False,
    rng: np.random.Generator | None = None,
) -> SampleResult:
    """Ancestral sampling continuing each row of ``prefix`` (B, S0, D).

    Reported log-probs are those of the untempered policy, so they match
    ``forward_logprobs`` on the sampled continuation.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy=True for argmax decoding)")
    if not greedy and rng is None:
        raise ValueError("rng required for stochastic sampling")
    cfg = params.cfg
    bsz, s0, _ = prefix.shape
    max_new = max(0, min(max_new, cfg.max_seq - s0))
    ids = np.full((bsz, max_new), eos_id, dtype=np.int64)
    lps = np.zeros((bsz, max_new))
    done = np.zeros(bsz, dtype=bool)
    kv = _KVCache(params, prefix) if max_new else None
    rows = np.arange(bsz)
    n_steps = 0
    for step in range(max_new):
        last = kv.last_logp
        if greedy:
            nxt = last.argmax(-1)
        else:
            scaled = last / temperature if temperature != 1.0 else last
            cdf = np.cumsum(np.exp(log_softmax(scaled)), axis=-1)
            u = rng.random(bsz) * cdf[:, -1]
            nxt = np.minimum((cdf < u[:, None]).sum(-1), cfg.vocab_size - 1)
        nxt = np.where(done, eos_id, nxt)
        ids[:, step] = nxt
        lps[:, step] = last[rows, nxt]
        n_steps = step + 1
        done = done | (nxt == eos_id)
        if done.all() or step + 1 == max_new:
            break
        kv.step(params, params["dec.tok"][nxt] + params["dec.pos"][s0 + step])
    out_ids, out_lp, fin = [], [], []
    for b in range(bsz):
        row = ids[b, :n_steps].tolist()
        n = row.index(eos_id) + 1 if eos_id in row else len(row)
        out_ids.append(row[:n])
        out_lp.append(lps[b, :n].copy())
        fin.append(eos_id in row)
    return SampleResult(out_ids, out_lp, fin)


def sample_group(
    input_seq: np.ndarray,
    g: int,
    temperature: float,
    max_new: int,
    params: PolicyParams,
    rng_seed: int,
    eos_id: int,
    greedy: bool = False,
) -> SampleResult:
    """``g`` independent continuations of one assembled input."""
    if g < 1:
        raise ValueError("group size must be >= 1")
    prefix = np.repeat(np.asarray(input_seq)[None], g, axis=0)
    rng = np.random.default_rng(rng_seed)
    return sample_batch(params, prefix, eos_id, max_new, temperature, greedy, rng)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"SSPOCKPT1\n"


def save_checkpoint(path: str | Path, params: PolicyParams, extra: dict | None = None) -> None:
    header = {"config": asdict(params.cfg), "n_params": len(params), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.vec.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        vec = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    cfg = ModelConfig(**header["config"])
    if vec.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter vector")
    return PolicyParams(cfg, vec), header["extra"]
