"""Global attention predictor: forward pass, objective and exact gradients.

Objects are fused into one embedding each (identifier + semantic MLP +
linear spatial code), the prompt is encoded by a small transformer, and a
decoder of spatial self-attention, cross-attention to the prompt and a
feed-forward block maps every object to a logit. A softmax over objects
gives the predicted importance map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attention import ImportanceMap
from ..errors import DimensionMismatch, NonFiniteActivation, StaleCache
from . import layers as F
from .params import DIST_EDGES, GapConfig, GapParams

KL_EPS = 1e-12


@dataclass
class ForwardCache:
    """Activations kept by a forward pass over a padded batch.

    ``ns`` and ``ms`` hold the true object and prompt lengths per sample;
    ``ahat`` is the padded ``(B, n_max)`` prediction, zero on padding.
    """

    cfg: GapConfig
    ns: tuple
    ms: tuple
    ahat: np.ndarray
    steps: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.ns[0]

    @property
    def m(self) -> int:
        return self.ms[0]

    @property
    def batch_size(self) -> int:
        return len(self.ns)


@dataclass(frozen=True)
class LossParts:
    total: float
    kl: float
    rank: float


def distance_buckets(centers: np.ndarray) -> np.ndarray:
    """Bucket index of every pairwise center distance; accepts ``(..., n, 3)``."""
    diff = centers[..., :, None, :] - centers[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return np.searchsorted(DIST_EDGES, dist, side="right")


def _check_inputs(sample, cfg: GapConfig):
    n = sample.n
    if sample.identifier_emb.shape != (n, cfg.hidden_dim):
        raise DimensionMismatch(
            f"identifier embeddings {sample.identifier_emb.shape} do not match hidden_dim {cfg.hidden_dim}"
        )
    if sample.emb_3d.shape != (n, cfg.d_p) or sample.emb_2d.shape != (n, cfg.d_v):
        raise DimensionMismatch("semantic embedding dims do not match the network")
    if sample.centers.shape != (n, 3) or sample.sizes.shape != (n, 3):
        raise DimensionMismatch("centers and sizes must be (n, 3)")
    m = len(sample.prompt_ids)
    if m < 1 or m > cfg.max_prompt_len:
        raise DimensionMismatch(f"prompt length {m} outside [1, {cfg.max_prompt_len}]")
    if np.any(sample.prompt_ids < 0) or np.any(sample.prompt_ids >= cfg.vocab_size):
        raise DimensionMismatch("prompt token id outside the vocabulary")


def _pack(samples, cfg: GapConfig) -> dict:
    """Zero-pad samples into dense batch arrays plus validity masks."""
    for s in samples:
        _check_inputs(s, cfg)
    B = len(samples)
    ns = tuple(s.n for s in samples)
    ms = tuple(len(s.prompt_ids) for s in samples)
    n, m = max(ns), max(ms)
    ident = np.zeros((B, n, cfg.hidden_dim))
    sem_in = np.zeros((B, n, cfg.d_p + cfg.d_v))
    geo = np.zeros((B, n, 6))
    prompt = np.zeros((B, m), dtype=np.int64)
    for b, s in enumerate(samples):
        k = ns[b]
        ident[b, :k] = s.identifier_emb
        sem_in[b, :k, :cfg.d_p] = s.emb_3d
        sem_in[b, :k, cfg.d_p:] = s.emb_2d
        geo[b, :k, :3] = s.centers
        geo[b, :k, 3:] = s.sizes
        prompt[b, :ms[b]] = s.prompt_ids
    return {
        "ns": ns, "ms": ms, "ident": ident, "sem_in": sem_in, "geo": geo, "prompt": prompt,
        "obj_mask": np.arange(n)[None, :] < np.array(ns)[:, None],
        "prompt_mask": np.arange(m)[None, :] < np.array(ms)[:, None],
    }


def _fuse(batch: dict, p: GapParams, steps: dict | None = None) -> np.ndarray:
    sem_in, geo = batch["sem_in"], batch["geo"]
    g, gc = F.gelu_fwd(sem_in @ p["sem.w1"] + p["sem.b1"])
    sem = g @ p["sem.w2"] + p["sem.b2"]
    fused = batch["ident"] + sem + geo @ p["spatial.w"]
    if steps is not None:
        steps["fuse"] = (sem_in, gc, g, geo)
    return fused


def fuse_embeddings(sample, params: GapParams) -> np.ndarray:
    """``F_i = E^o_i + MLP([E^p_i; E^v_i]) + W_l [c_i; z_i]`` for every object."""
    return _fuse(_pack([sample], params.cfg), params)[0]


def _encode_text(batch: dict, p: GapParams, steps: dict) -> np.ndarray:
    cfg = p.cfg
    prompt, mask = batch["prompt"], batch["prompt_mask"]
    x = p["text.tok"][prompt] + p["text.pos"][: prompt.shape[1]]
    for l in range(cfg.encoder_layers):
        pre = f"enc{l}."
        h, c1 = F.layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a, c2 = F.mha_fwd(h, h, p, pre + "attn.", cfg.num_heads, mask)
        x = x + a
        h, c3 = F.layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f, c4 = F.ffn_fwd(h, p, pre + "ffn.")
        x = x + f
        steps[pre] = (c1, c2, c3, c4)
    mem, c = F.layernorm_fwd(x, p["enc.lnf.g"], p["enc.lnf.b"])
    steps["enc.lnf"] = c
    return mem


def gap_forward_batch(samples, params: GapParams):
    """Predict importance maps for several samples in one padded pass.

    Returns ``(maps, cache)`` with one :class:`ImportanceMap` per sample.
    Padding never reaches real objects: padded keys are masked out of every
    attention and padded logits are ``-inf`` before the softmax.
    """
    cfg = params.cfg
    p = params
    samples = list(samples)
    if not samples:
        raise ValueError("cannot run the predictor on an empty batch")
    batch = _pack(samples, cfg)
    steps: dict = {}
    x = _fuse(batch, p, steps)
    mem = _encode_text(batch, p, steps)
    buckets = distance_buckets(batch["geo"][..., :3])
    obj_mask, prompt_mask = batch["obj_mask"], batch["prompt_mask"]
    for l in range(cfg.decoder_layers):
        pre = f"dec{l}."
        h, c1 = F.layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a, c2 = F.mha_fwd(h, h, p, pre + "self.", cfg.num_heads, obj_mask, buckets)
        x = x + a
        h, c3 = F.layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        a, c4 = F.mha_fwd(h, mem, p, pre + "cross.", cfg.num_heads, prompt_mask)
        x = x + a
        h, c5 = F.layernorm_fwd(x, p[pre + "ln3.g"], p[pre + "ln3.b"])
        f, c6 = F.ffn_fwd(h, p, pre + "ffn.")
        x = x + f
        steps[pre] = (c1, c2, c3, c4, c5, c6)
    y, cf = F.layernorm_fwd(x, p["dec.lnf.g"])
    logits = y @ p["head.w"]
    if not np.all(np.isfinite(logits[obj_mask])):
        raise NonFiniteActivation("non-finite logits in forward pass")
    ahat = F.softmax(np.where(obj_mask, logits, -np.inf))
    steps["head"] = (cf, y)
    steps["prompt"] = batch["prompt"]
    cache = ForwardCache(cfg, batch["ns"], batch["ms"], ahat, steps)
    maps = [ImportanceMap(ahat[b, :k]) for b, k in enumerate(batch["ns"])]
    return maps, cache


def gap_forward(sample, params: GapParams):
    """Predict the object importance map; returns ``(ImportanceMap, cache)``."""
    maps, cache = gap_forward_batch([sample], params)
    return maps[0], cache


def objective(target, ahat, lam: float, margin: float) -> LossParts:
    """KL fidelity plus pairwise rank hinge; ``target`` is used as given."""
    a = np.asarray(target, dtype=np.float64)
    q = np.asarray(ahat, dtype=np.float64)
    pos = a > 0
    kl = float(np.sum(a[pos] * (np.log(a[pos]) - np.log(np.maximum(q[pos], KL_EPS)))))
    # both maps are simplices, so a negative value is only rounding
    kl = max(kl, 0.0)
    viol = q[None, :] - q[:, None] + margin  # [i, j] = q_j - q_i + margin
    active = (a[:, None] > a[None, :]) & (viol > 0)
    rank = float(np.sum(viol[active]))
    return LossParts(kl + lam * rank, kl, rank)


def objective_grad(target, ahat, lam: float, margin: float) -> np.ndarray:
    """Gradient of :func:`objective` with respect to ``ahat``."""
    a = np.asarray(target, dtype=np.float64)
    q = np.asarray(ahat, dtype=np.float64)
    g = np.zeros_like(q)
    live = (a > 0) & (q > KL_EPS)
    g[live] = -a[live] / q[live]
    viol = q[None, :] - q[:, None] + margin
    active = (a[:, None] > a[None, :]) & (viol > 0)
    g += lam * (active.sum(axis=0) - active.sum(axis=1))
    return g


def gap_backward(cache: ForwardCache, target, params: GapParams, lam: float | None = None,
                 margin: float | None = None, upstream=None, weights=None, input_grad: bool = False):
    """Exact gradient of the objective through the whole network.

    For a single-sample cache ``target`` is one map. For a batch it is a
    list of maps and the result is the gradient of ``sum_b weights[b] *
    loss_b``; ``weights`` default to ``1/B`` (the batch mean). ``upstream``
    replaces the gradient with respect to the predicted map(s), which is
    how linearity is tested. With ``input_grad`` the gradient with respect
    to the fused object embeddings is returned as well, as ``(grads, d_fused)``
    with one ``(n, d)`` array per sample.
    """
    cfg = params.cfg
    if cache.cfg != cfg:
        raise StaleCache("cache was produced with a different configuration")
    B = cache.batch_size
    single = B == 1 and np.ndim(target) == 1
    targets = [target] if single else list(target)
    if len(targets) != B:
        raise StaleCache(f"{len(targets)} targets for a cache of {B} samples")
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    for t, k in zip(targets, cache.ns):
        if t.shape != (k,):
            raise StaleCache(f"target has shape {t.shape}, cache covers {k} objects")
    if upstream is not None:
        upstream = [upstream] if single else list(upstream)
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64)
    lam = cfg.lam if lam is None else lam
    margin = cfg.margin if margin is None else margin
    p = params
    grads = params.zeros_like()
    st = cache.steps
    ahat = cache.ahat
    d = cfg.hidden_dim

    dq = np.zeros_like(ahat)
    for b, k in enumerate(cache.ns):
        g = objective_grad(targets[b], ahat[b, :k], lam, margin) if upstream is None else upstream[b]
        dq[b, :k] = w[b] * np.asarray(g, dtype=np.float64)
    dlogits = F.softmax_bwd(dq, ahat)
    cf, y = st["head"]
    grads["head.w"] += y.reshape(-1, d).T @ dlogits.ravel()
    dy = dlogits[..., None] * p["head.w"]
    dx = F.layernorm_bwd(dy, cf, p["dec.lnf.g"], grads["dec.lnf.g"])

    dmem = None
    for l in reversed(range(cfg.decoder_layers)):
        pre = f"dec{l}."
        c1, c2, c3, c4, c5, c6 = st[pre]
        dh = F.ffn_bwd(dx, c6, p, grads, pre + "ffn.")
        dx = dx + F.layernorm_bwd(dh, c5, p[pre + "ln3.g"], grads[pre + "ln3.g"], grads[pre + "ln3.b"])
        dh, dm = F.mha_bwd(dx, c4, p, grads, pre + "cross.")
        dmem = dm if dmem is None else dmem + dm
        dx = dx + F.layernorm_bwd(dh, c3, p[pre + "ln2.g"], grads[pre + "ln2.g"], grads[pre + "ln2.b"])
        dh = F.mha_bwd(dx, c2, p, grads, pre + "self.", self_attention=True)
        dx = dx + F.layernorm_bwd(dh, c1, p[pre + "ln1.g"], grads[pre + "ln1.g"], grads[pre + "ln1.b"])

    prompt = st["prompt"]
    if dmem is None:
        dmem = np.zeros(prompt.shape + (d,))
    dt = F.layernorm_bwd(dmem, st["enc.lnf"], p["enc.lnf.g"], grads["enc.lnf.g"], grads["enc.lnf.b"])
    for l in reversed(range(cfg.encoder_layers)):
        pre = f"enc{l}."
        c1, c2, c3, c4 = st[pre]
        dh = F.ffn_bwd(dt, c4, p, grads, pre + "ffn.")
        dt = dt + F.layernorm_bwd(dh, c3, p[pre + "ln2.g"], grads[pre + "ln2.g"], grads[pre + "ln2.b"])
        dh = F.mha_bwd(dt, c2, p, grads, pre + "attn.", self_attention=True)
        dt = dt + F.layernorm_bwd(dh, c1, p[pre + "ln1.g"], grads[pre + "ln1.g"], grads[pre + "ln1.b"])
    np.add.at(grads["text.tok"], prompt.ravel(), dt.reshape(-1, d))
    grads["text.pos"][: prompt.shape[1]] += dt.sum(axis=0)

    d_fused = [dx[b, :k].copy() for b, k in enumerate(cache.ns)]
    sem_in, gc, g, geo = st["fuse"]
    dx2 = dx.reshape(-1, d)
    grads["spatial.w"] += geo.reshape(-1, 6).T @ dx2
    grads["sem.w2"] += g.reshape(-1, d).T @ dx2
    grads["sem.b2"] += dx2.sum(axis=0)
    dh = F.gelu_bwd(dx @ p["sem.w2"].T, gc).reshape(-1, d)
    grads["sem.w1"] += sem_in.reshape(-1, sem_in.shape[-1]).T @ dh
    grads["sem.b1"] += dh.sum(axis=0)
    if input_grad:
        return grads, (d_fused[0] if single else d_fused)
    return grads


def loss_and_grad(sample, target, params: GapParams, lam=None, margin=None):
    """Forward, objective and gradient for one sample with a prepared target."""
    lam = params.cfg.lam if lam is None else lam
    margin = params.cfg.margin if margin is None else margin
    ahat, cache = gap_forward(sample, params)
    parts = objective(target, ahat.scores, lam, margin)
    grads = gap_backward(cache, target, params, lam, margin)
    return parts, grads


def sample_loss(sample, target, params: GapParams, lam=None, margin=None) -> float:
    lam = params.cfg.lam if lam is None else lam
    margin = params.cfg.margin if margin is None else margin
    ahat, _ = gap_forward(sample, params)
    return objective(target, ahat.scores, lam, margin).total


def gap_macs(cfg: GapConfig, n: int, m: int) -> float:
    """Multiply-accumulate count of one forward pass.

    Uses the same accounting as :class:`~objprune.sap.FlopsModel`: one unit
    per multiply-accumulate in projections, attention and feed-forward.
    """
    d, f = cfg.hidden_dim, cfg.ffn_dim
    fuse = n * (cfg.d_p + cfg.d_v) * d + n * d * d + n * 6 * d
    enc = cfg.encoder_layers * (4 * m * d * d + 2 * m * m * d + 2 * m * d * f)
    dec_self = 4 * n * d * d + 2 * n * n * d
    dec_cross = 2 * n * d * d + 2 * m * d * d + 2 * n * m * d
    dec_ffn = 2 * n * d * f
    dec = cfg.decoder_layers * (dec_self + dec_cross + dec_ffn)
    return float(fuse + enc + dec + n * d)
