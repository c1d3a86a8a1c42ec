"""Attention aggregation into object-centric importance maps.

A target model's causal attention over the sequence ``[visual, prompt,
generated]`` is averaged over layers and heads, split into the three
blocks that visual tokens receive attention from, pooled per object
triplet and normalized onto the simplex.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateAttention,
    DimensionMismatch,
    EmptyGeneration,
    EmptyPrompt,
    EmptyStack,
    ZeroConfidence,
)

ROW_TOL = 1e-9


@dataclass(frozen=True)
class ImportanceMap:
    """Per-object importance distribution (non-negative, sums to one)."""

    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)

    def __len__(self):
        return len(self.scores)

    def validate(self, tol: float = 1e-9) -> None:
        s = self.scores
        if s.ndim != 1 or len(s) == 0:
            raise DimensionMismatch("importance map must be a non-empty vector")
        if np.any(s < 0) or abs(s.sum() - 1.0) > tol:
            raise ValueError("importance map is not on the simplex")

    def to_json(self) -> dict:
        return {"scores": self.scores.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ImportanceMap":
        return cls(np.asarray(obj["scores"], dtype=np.float64))


@dataclass(frozen=True)
class ComponentScores:
    """Per-visual-token scores from the three attention sources."""

    self_scores: np.ndarray
    prompt_scores: np.ndarray
    text_scores: np.ndarray

    @property
    def global_scores(self) -> np.ndarray:
        return self.self_scores + self.prompt_scores + self.text_scores


@dataclass
class AttentionStack:
    """Dense per-layer, per-head causal attention over one sequence.

    ``matrices`` has shape ``(L, H, N, N)`` with ``N = 3n + m + t``; row ``i``
    holds the attention distribution of query token ``i``.
    """

    matrices: np.ndarray
    n: int
    m: int
    t: int
    confidences: np.ndarray

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)

    @property
    def L(self) -> int:
        return self.matrices.shape[0]

    @property
    def H(self) -> int:
        return self.matrices.shape[1]

    @property
    def size(self) -> int:
        return 3 * self.n + self.m + self.t

    def validate(self, tol: float = ROW_TOL) -> None:
        a = self.matrices
        if a.ndim != 4 or a.shape[2] != a.shape[3]:
            raise DimensionMismatch(f"expected (L, H, N, N) matrices, got {a.shape}")
        if a.shape[2] != self.size:
            raise DimensionMismatch(
                f"matrix size {a.shape[2]} != 3n+m+t = {self.size}"
            )
        if self.confidences.shape != (self.t,):
            raise DimensionMismatch("need one confidence per generated token")
        if np.any(self.confidences <= 0) or np.any(self.confidences > 1):
            raise ValueError("confidences must lie in (0, 1]")
        if a.size == 0:
            return
        upper = np.triu(np.ones(a.shape[2:], dtype=bool), k=1)
        if np.any(a[..., upper] != 0):
            raise ValueError("attention is not causal")
        if np.any(a < 0):
            raise ValueError("negative attention weight")
        if np.max(np.abs(a.sum(axis=-1) - 1.0)) > tol:
            raise ValueError("attention rows are not stochastic")

    # -- serialization -------------------------------------------------

    def to_json(self) -> dict:
        return {
            "L": self.L,
            "H": self.H,
            "n": self.n,
            "m": self.m,
            "t": self.t,
            "layout": "row-major",
            "confidences": self.confidences.tolist(),
            "matrices": [
                self.matrices[l, h].ravel(order="C").tolist()
                for l in range(self.L)
                for h in range(self.H)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttentionStack":
        if obj.get("layout", "row-major") != "row-major":
            raise ValueError(f"unsupported layout {obj['layout']!r}")
        L, H = int(obj["L"]), int(obj["H"])
        n, m, t = int(obj["n"]), int(obj["m"]), int(obj["t"])
        size = 3 * n + m + t
        flat = np.asarray(obj["matrices"], dtype=np.float64)
        if flat.shape != (L * H, size * size):
            raise DimensionMismatch("matrix payload does not match L, H, n, m, t")
        return cls(flat.reshape(L, H, size, size), n, m, t, obj["confidences"])

    def save(self, path: str | Path) -> None:
        """Write raw little-endian float64 payload plus a JSON manifest.

        ``path`` names the binary file; the manifest goes next to it with a
        ``.json`` suffix appended.
        """
        path = Path(path)
        path.write_bytes(self.matrices.astype("<f8").tobytes(order="C"))
        manifest = {
            "L": self.L,
            "H": self.H,
            "n": self.n,
            "m": self.m,
            "t": self.t,
            "layout": "row-major",
            "dtype": "<f8",
            "shape": list(self.matrices.shape),
            "confidences": self.confidences.tolist(),
        }
        Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "AttentionStack":
        path = Path(path)
        manifest = json.loads(Path(str(path) + ".json").read_text())
        data = np.frombuffer(path.read_bytes(), dtype=manifest["dtype"])
        mats = data.reshape(manifest["shape"]).astype(np.float64)
        return cls(mats, manifest["n"], manifest["m"], manifest["t"], manifest["confidences"])


def aggregate_mean(stack) -> np.ndarray:
    """Uniform average of all layer/head matrices.

    Accepts an :class:`AttentionStack` or a raw ``(L, H, N, N)`` array.
    """
    mats = stack.matrices if isinstance(stack, AttentionStack) else np.asarray(stack, dtype=np.float64)
    if mats.ndim != 4:
        raise DimensionMismatch(f"expected (L, H, N, N), got {mats.shape}")
    if mats.shape[0] * mats.shape[1] == 0:
        raise EmptyStack("no layers or heads to aggregate")
    # fixed reduction order -> bit-reproducible
    total = np.zeros(mats.shape[2:], dtype=np.float64)
    for l in range(mats.shape[0]):
        for h in range(mats.shape[1]):
            total += mats[l, h]
    return total / (mats.shape[0] * mats.shape[1])


def self_importance(a_mean: np.ndarray, num_visual: int) -> np.ndarray:
    """Masked column mean over the visual-visual block.

    Column ``j`` (0-based) is averaged over the ``num_visual - j`` rows
    ``i >= j`` that may attend to it.
    """
    a_mean = np.asarray(a_mean, dtype=np.float64)
    v = int(num_visual)
    if a_mean.ndim != 2 or a_mean.shape[0] < v or a_mean.shape[1] < v:
        raise DimensionMismatch("attention matrix smaller than visual block")
    block = np.tril(a_mean[:v, :v])
    counts = v - np.arange(v)
    return block.sum(axis=0) / counts


def prompt_importance(a_prompt: np.ndarray) -> np.ndarray:
    a_prompt = np.asarray(a_prompt, dtype=np.float64)
    if a_prompt.ndim != 2:
        raise DimensionMismatch("prompt block must be 2-D")
    if a_prompt.shape[0] == 0:
        raise EmptyPrompt("prompt has no tokens")
    return a_prompt.mean(axis=0)


def text_importance(a_text: np.ndarray, confidences: np.ndarray) -> np.ndarray:
    """Confidence-weighted column average over generated-token rows."""
    a_text = np.asarray(a_text, dtype=np.float64)
    s = np.asarray(confidences, dtype=np.float64)
    if a_text.ndim != 2:
        raise DimensionMismatch("text block must be 2-D")
    if a_text.shape[0] == 0:
        raise EmptyGeneration("no generated tokens")
    if s.shape != (a_text.shape[0],):
        raise DimensionMismatch("need one confidence per generated row")
    total = s.sum()
    if total == 0:
        raise ZeroConfidence("confidences sum to zero")
    return (s @ a_text) / total


def component_scores(stack: AttentionStack) -> ComponentScores:
    a = aggregate_mean(stack)
    v = 3 * stack.n
    p_end = v + stack.m
    return ComponentScores(
        self_scores=self_importance(a, v),
        prompt_scores=prompt_importance(a[v:p_end, :v]),
        text_scores=text_importance(a[p_end:, :v], stack.confidences),
    )


def pool_triplets(token_scores: np.ndarray) -> np.ndarray:
    token_scores = np.asarray(token_scores, dtype=np.float64)
    if len(token_scores) % 3:
        raise DimensionMismatch("visual token count is not a multiple of 3")
    return token_scores.reshape(-1, 3).mean(axis=1)


def normalize(scores: np.ndarray) -> np.ndarray:
    total = scores.sum()
    if not total > 0:
        raise DegenerateAttention("importance mass is zero")
    return scores / total


def build_oracle(stack: AttentionStack, components: ComponentScores | None = None) -> ImportanceMap:
    """Ground-truth object importance: sum of components, triplet-pooled, simplex-normalized."""
    if components is None:
        components = component_scores(stack)
    pooled = pool_triplets(components.global_scores)
    return ImportanceMap(normalize(pooled))


def sharpen(a, temperature: float = 0.5) -> ImportanceMap:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    a = np.asarray(a, dtype=np.float64)
    if temperature == 1.0:
        return ImportanceMap(a.copy())
    # work in log space so tiny entries don't underflow before renormalizing
    out = np.zeros_like(a)
    pos = a > 0
    logs = np.log(a[pos]) / temperature
    w = np.exp(logs - logs.max())
    out[pos] = w / w.sum()
    return ImportanceMap(out)
