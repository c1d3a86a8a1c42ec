"""Mini-batch training of the predictor against oracle importance maps."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import sharpen
from ..errors import DivergedLoss, EmptyDataset
from .model import gap_backward, gap_forward_batch, objective
from .optim import AdamW, cosine_lr
from .params import GapConfig, GapParams, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: GapParams
    history: list = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "kl", "rank", "total"])
        for row in self.history:
            w.writerow([row["epoch"], row["split"], repr(row["kl"]), repr(row["rank"]), repr(row["total"])])
        return buf.getvalue()


def _decay_mask(params: GapParams) -> np.ndarray:
    mask = np.zeros(params.total_count, dtype=bool)
    for name, (_, shape) in params.index.items():
        if len(shape) == 2 and not name.endswith(".dist"):
            mask[params.segment_slice(name)] = True
    return mask


def prepare_targets(oracles, temperature: float) -> list:
    return [sharpen(a, temperature).scores for a in oracles]


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def predict_many(params: GapParams, samples, batch_size: int = 64) -> list:
    """Predicted maps for many samples, evaluated in padded batches."""
    samples = list(samples)
    order = sorted(range(len(samples)), key=lambda i: samples[i].n)
    out = [None] * len(samples)
    for chunk in _chunks(order, batch_size):
        maps, _ = gap_forward_batch([samples[i] for i in chunk], params)
        for i, m in zip(chunk, maps):
            out[i] = m.scores
    return out


def evaluate(params: GapParams, samples, targets) -> dict:
    """Mean objective terms over a dataset; ``targets`` are already sharpened."""
    cfg = params.cfg
    sums = np.zeros(3)
    for ahat, t in zip(predict_many(params, samples), targets):
        parts = objective(t, ahat, cfg.lam, cfg.margin)
        sums += (parts.kl, parts.rank, parts.total)
    sums /= max(len(samples), 1)
    return {"kl": sums[0], "rank": sums[1], "total": sums[2]}


BUCKET_SPAN = 8


def axis_symmetry(sample, rng):
    """Copy of ``sample`` under a random signed permutation of the x, y, z axes.

    Centers are permuted and sign-flipped, box sizes only permuted. Norms,
    pairwise distances and volumes are unchanged, so answers and planted
    relevance stay valid.
    """
    perm = rng.permutation(3)
    signs = rng.choice(np.array([-1.0, 1.0]), size=3)
    out = copy.copy(sample)
    out.centers = sample.centers[:, perm] * signs
    out.sizes = sample.sizes[:, perm]
    return out


def epoch_batches(rng, sizes, batch_size: int) -> list:
    """Shuffled mini-batches of similar object counts.

    The epoch permutation is cut into windows of ``BUCKET_SPAN`` batches;
    each window is sorted by object count (stable) before being split, so a
    batch pads to a nearby length. The batch order is then shuffled again.
    """
    order = rng.permutation(len(sizes))
    window = batch_size * BUCKET_SPAN
    batches = []
    for w in range(0, len(order), window):
        chunk = order[w:w + window]
        chunk = chunk[np.argsort(np.asarray(sizes)[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train(dataset, cfg: GapConfig, val=None, params: GapParams | None = None) -> TrainResult:
    """Fit the predictor on ``(sample, oracle map)`` pairs.

    Targets are sharpened with ``cfg.temperature`` once up front. Shuffling,
    gradient accumulation and reduction order are fixed by ``cfg.seed``, so
    repeated runs produce identical parameters.
    """
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    samples = [s for s, _ in dataset]
    targets = prepare_targets([np.asarray(a) for _, a in dataset], cfg.temperature)
    if val is not None:
        val_samples = [s for s, _ in val]
        val_targets = prepare_targets([np.asarray(a) for _, a in val], cfg.temperature)

    params = init_params(cfg) if params is None else params.copy()
    opt = AdamW(params.total_count, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, _decay_mask(params))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5117]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA116]))
    N = len(samples)
    sizes = [s.n for s in samples]
    window = cfg.batch_size * BUCKET_SPAN
    steps_per_epoch = sum(math.ceil(min(window, N - w) / cfg.batch_size) for w in range(0, N, window))
    total_steps = cfg.epochs * steps_per_epoch

    history = []

    def record(epoch, split, stats):
        history.append({"epoch": epoch, "split": split, **stats})
        log.info("epoch %d %s kl=%.5f rank=%.5f total=%.5f", epoch, split, stats["kl"], stats["rank"], stats["total"])

    record(0, "train", evaluate(params, samples, targets))
    if val is not None:
        record(0, "val", evaluate(params, val_samples, val_targets))

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        for idx in epoch_batches(rng, sizes, cfg.batch_size):
            batch = [samples[i] for i in idx]
            if cfg.augment:
                batch = [axis_symmetry(x, aug_rng) for x in batch]
            batch_targets = [targets[i] for i in idx]
            maps, cache = gap_forward_batch(batch, params)
            for ahat, t in zip(maps, batch_targets):
                parts = objective(t, ahat.scores, cfg.lam, cfg.margin)
                if not math.isfinite(parts.total):
                    raise DivergedLoss(f"non-finite loss at epoch {epoch}")
                sums += (parts.kl, parts.rank, parts.total)
            grad = gap_backward(cache, batch_targets, params).flat
            if not np.all(np.isfinite(grad)):
                raise DivergedLoss(f"non-finite gradient at epoch {epoch}")
            lr = cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps)
            opt.step(params.flat, grad, lr)
            step += 1
        if not params.all_finite():
            raise DivergedLoss(f"parameters became non-finite at epoch {epoch}")
        sums /= N
        record(epoch, "train", {"kl": sums[0], "rank": sums[1], "total": sums[2]})
        if val is not None:
            record(epoch, "val", evaluate(params, val_samples, val_targets))
    return TrainResult(params, history)


def predict(params: GapParams, sample) -> np.ndarray:
    return predict_many(params, [sample])[0]


def topk_recall(pred, oracle, k: int = 10) -> float:
    """Fraction of the oracle's top-k objects that are in the predicted top-k."""
    pred = np.asarray(pred)
    oracle = np.asarray(oracle)
    k = min(k, len(oracle))
    top_pred = set(np.argsort(-pred, kind="stable")[:k].tolist())
    top_true = set(np.argsort(-oracle, kind="stable")[:k].tolist())
    return len(top_pred & top_true) / k
