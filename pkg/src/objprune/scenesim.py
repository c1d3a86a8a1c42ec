"""Deterministic synthetic scenes and a planted-relevance teacher.

Every scene has a single answer object picked by a closed-vocabulary query.
A per-object relevance score (answer bonus, proximity to the answer, class
salience, object volume) is planted into the attention stacks emitted by
:func:`planted_teacher_stack`, so the aggregated oracle importance is known
by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .attention import AttentionStack
from .errors import DimensionMismatch, SchemaMismatch

SCHEMA_VERSION = 1

# vocabulary layout
PAD, BOS, EOS = 0, 1, 2
VERB_FIND, VERB_NEAREST, VERB_LARGEST = 3, 4, 5
QUERY_VERB = {"class": VERB_FIND, "nearest_origin": VERB_NEAREST, "largest": VERB_LARGEST}
CLASS_TOKEN0 = 8
MAX_OBJECTS = 256

# box sides are log-uniform on [0.2, 2]; moments of the log volume
LOGVOL_MEAN = 3 * 0.5 * (np.log(0.2) + np.log(2.0))
LOGVOL_STD = np.sqrt(3) * np.log(10.0) / np.sqrt(12)


@dataclass(frozen=True)
class SceneDims:
    d_id: int = 64
    d_p: int = 32
    d_v: int = 32
    n_classes: int = 8
    n_filler: int = 64
    world_seed: int = 0

    @property
    def filler0(self) -> int:
        return CLASS_TOKEN0 + self.n_classes

    @property
    def vocab_size(self) -> int:
        return self.filler0 + self.n_filler


@dataclass(frozen=True)
class PlantConfig:
    """Weights of the planted per-object relevance score."""

    answer_gain: float = 3.5
    proximity_gain: float = 1.5
    proximity_scale: float = 2.0
    salience_gain: float = 1.0
    volume_gain: float = 0.5
    temperature: float = 4.0


@dataclass(frozen=True)
class PlantedRelevance:
    relevance: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "relevance", np.asarray(self.relevance, dtype=np.float64))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        r = self.relevance
        if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
            raise ValueError("planted relevance must be on the simplex")


@dataclass
class SceneSample:
    identifier_emb: np.ndarray  # (n, d_id)
    emb_3d: np.ndarray  # (n, d_p)
    emb_2d: np.ndarray  # (n, d_v)
    centers: np.ndarray  # (n, 3)
    sizes: np.ndarray  # (n, 3)
    classes: np.ndarray  # (n,)
    prompt_ids: np.ndarray
    generated_ids: np.ndarray
    target_ids: list
    query: str
    query_class: int = -1
    relevance: np.ndarray | None = None
    seed: int = 0
    sample_id: int = 0

    _ARRAYS = ("identifier_emb", "emb_3d", "emb_2d", "centers", "sizes")
    _INTS = ("classes", "prompt_ids", "generated_ids")

    def __post_init__(self):
        for name in self._ARRAYS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in self._INTS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=np.float64)
        self.target_ids = [int(i) for i in self.target_ids]

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def m(self) -> int:
        return len(self.prompt_ids)

    @property
    def t(self) -> int:
        return len(self.generated_ids)

    @property
    def text_len(self) -> int:
        return self.m + self.t

    def validate(self) -> None:
        n = self.n
        if n < 1:
            raise SchemaMismatch("scene needs at least one object")
        for name in self._ARRAYS + ("classes",):
            if len(getattr(self, name)) != n:
                raise SchemaMismatch(f"{name} has wrong number of rows")
        if self.centers.shape != (n, 3) or self.sizes.shape != (n, 3):
            raise SchemaMismatch("centers and sizes must be (n, 3)")
        if np.any(self.sizes <= 0):
            raise SchemaMismatch("box sizes must be positive")
        if not self.target_ids or any(not 0 <= i < n for i in self.target_ids):
            raise SchemaMismatch("target ids out of range")
        if self.m < 1 or self.t < 1:
            raise SchemaMismatch("prompt and generation must be non-empty")

    def permuted(self, perm) -> "SceneSample":
        """Reorder objects; ``perm[k]`` is the old index of new object ``k``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return SceneSample(
            identifier_emb=self.identifier_emb[perm],
            emb_3d=self.emb_3d[perm],
            emb_2d=self.emb_2d[perm],
            centers=self.centers[perm],
            sizes=self.sizes[perm],
            classes=self.classes[perm],
            prompt_ids=self.prompt_ids.copy(),
            generated_ids=self.generated_ids.copy(),
            target_ids=sorted(int(inv[i]) for i in self.target_ids),
            query=self.query,
            query_class=self.query_class,
            relevance=None if self.relevance is None else self.relevance[perm],
            seed=self.seed,
            sample_id=self.sample_id,
        )

    def to_json(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for name in self._ARRAYS + self._INTS:
            out[name] = getattr(self, name).tolist()
        out.update(
            target_ids=list(self.target_ids),
            query=self.query,
            query_class=int(self.query_class),
            relevance=None if self.relevance is None else self.relevance.tolist(),
            seed=int(self.seed),
            sample_id=int(self.sample_id),
        )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSample":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(f"unsupported schema version {obj.get('schema_version')!r}")
        fields = {k: obj[k] for k in cls._ARRAYS + cls._INTS}
        s = cls(
            **fields,
            target_ids=obj["target_ids"],
            query=obj["query"],
            query_class=obj.get("query_class", -1),
            relevance=obj.get("relevance"),
            seed=obj.get("seed", 0),
            sample_id=obj.get("sample_id", 0),
        )
        s.validate()
        return s


SAMPLE_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version", "identifier_emb", "emb_3d", "emb_2d", "centers", "sizes",
        "classes", "prompt_ids", "generated_ids", "target_ids", "query", "relevance",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "identifier_emb": {"type": "array", "minItems": 1, "items": {"type": "array", "items": {"type": "number"}}},
        "emb_3d": {"type": "array", "minItems": 1, "items": {"type": "array", "items": {"type": "number"}}},
        "emb_2d": {"type": "array", "minItems": 1, "items": {"type": "array", "items": {"type": "number"}}},
        "centers": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}},
        "sizes": {"type": "array", "items": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}},
        "classes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "prompt_ids": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "generated_ids": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "target_ids": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "query": {"enum": sorted(QUERY_VERB)},
        "relevance": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "config_hash": {"type": "string"},
    },
}


@lru_cache(maxsize=8)
def _world(dims: SceneDims):
    """Shared tables: identifier embeddings, class prototypes, class salience."""
    rng = np.random.default_rng(np.random.SeedSequence([dims.world_seed, 0xC1A55]))
    ids = rng.normal(0.0, 1.0 / np.sqrt(dims.d_id), (MAX_OBJECTS, dims.d_id))
    proto_p = rng.normal(0.0, 1.0, (dims.n_classes, dims.d_p))
    proto_v = rng.normal(0.0, 1.0, (dims.n_classes, dims.d_v))
    salience = rng.uniform(-1.0, 1.0, dims.n_classes)
    for arr in (ids, proto_p, proto_v, salience):
        arr.setflags(write=False)
    return ids, proto_p, proto_v, salience


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def planted_scores(sample: SceneSample, dims: SceneDims, plant: PlantConfig = PlantConfig()) -> np.ndarray:
    """Raw relevance score per object; the answer always ranks first."""
    _, _, _, salience = _world(dims)
    n = sample.n
    score = np.zeros(n)
    target = sample.target_ids[0]
    score[target] += plant.answer_gain
    dist = np.linalg.norm(sample.centers - sample.centers[target], axis=1)
    score += plant.proximity_gain * np.exp(-dist / plant.proximity_scale)
    score += plant.salience_gain * salience[sample.classes]
    logvol = np.log(np.prod(sample.sizes, axis=1))
    z = (logvol - LOGVOL_MEAN) / LOGVOL_STD
    score += plant.volume_gain * np.clip(z, -1.0, 1.0)
    return score


def planted_relevance(sample: SceneSample, dims: SceneDims, plant: PlantConfig = PlantConfig()) -> np.ndarray:
    z = planted_scores(sample, dims, plant) / plant.temperature
    w = np.exp(z - z.max())
    return w / w.sum()


def generate_scene(n: int, dims: SceneDims = SceneDims(), seed: int = 0, query: str | None = None,
                   plant: PlantConfig = PlantConfig(), sample_id: int = 0) -> SceneSample:
    """Reproducible scene with ``n`` objects and one analytically known answer."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > MAX_OBJECTS:
        raise ValueError(f"at most {MAX_OBJECTS} objects")
    ids, proto_p, proto_v, _ = _world(dims)
    rng = np.random.default_rng(seed)
    if query is None:
        query = ("class", "nearest_origin", "largest")[rng.integers(3)]
    if query not in QUERY_VERB:
        raise ValueError(f"unknown query {query!r}")

    classes = rng.integers(dims.n_classes, size=n)
    centers = rng.uniform(-5.0, 5.0, (n, 3))
    sizes = np.exp(rng.uniform(np.log(0.2), np.log(2.0), (n, 3)))
    target = int(rng.integers(n))
    query_class = -1

    if query == "class":
        query_class = int(classes[target])
        others = np.arange(n) != target
        clash = others & (classes == query_class)
        while np.any(clash):
            classes[clash] = rng.integers(dims.n_classes, size=int(clash.sum()))
            clash = others & (classes == query_class)
    elif query == "nearest_origin" and n > 1:
        r = np.linalg.norm(centers, axis=1)
        closest_other = np.min(np.delete(r, target))
        if r[target] > 0.8 * closest_other:
            centers[target] *= 0.8 * closest_other / r[target]
    elif query == "largest" and n > 1:
        vol = np.prod(sizes, axis=1)
        biggest_other = np.max(np.delete(vol, target))
        if vol[target] < 1.3 * biggest_other:
            sizes[target] *= (1.3 * biggest_other / vol[target]) ** (1.0 / 3.0)

    emb_3d = proto_p[classes] + 0.3 * rng.normal(size=(n, dims.d_p))
    emb_2d = proto_v[classes] + 0.3 * rng.normal(size=(n, dims.d_v))

    prompt = [BOS]
    prompt += list(dims.filler0 + rng.integers(dims.n_filler, size=int(rng.integers(0, 4))))
    prompt.append(QUERY_VERB[query])
    if query == "class":
        prompt.append(CLASS_TOKEN0 + query_class)
    prompt += list(dims.filler0 + rng.integers(dims.n_filler, size=int(rng.integers(0, 4))))
    prompt.append(EOS)
    t = int(rng.integers(1, 9))
    generated = dims.filler0 + rng.integers(dims.n_filler, size=t)

    sample = SceneSample(
        identifier_emb=ids[:n],
        emb_3d=emb_3d,
        emb_2d=emb_2d,
        centers=centers,
        sizes=sizes,
        classes=classes,
        prompt_ids=np.asarray(prompt),
        generated_ids=generated,
        target_ids=[target],
        query=query,
        query_class=query_class,
        seed=seed,
        sample_id=sample_id,
    )
    sample.relevance = planted_relevance(sample, dims, plant)
    return sample


def answer_ids(sample: SceneSample) -> list:
    """Recompute the answer directly from geometry and classes."""
    if sample.query == "class":
        return [int(i) for i in np.flatnonzero(sample.classes == sample.query_class)]
    if sample.query == "nearest_origin":
        return [int(np.argmin(np.linalg.norm(sample.centers, axis=1)))]
    return [int(np.argmax(np.prod(sample.sizes, axis=1)))]


def neutral_self_block(size: int) -> np.ndarray:
    """Causal row-stochastic matrix whose masked column means are all equal.

    Off-diagonal entries are ``1/(N+1)`` and the diagonal of row ``i``
    (1-based) is ``(N+2-i)/(N+1)``; every column ``j`` then has mean
    ``2/(N+1)`` over its ``N-j+1`` unmasked rows.
    """
    N = size
    a = np.tril(np.full((N, N), 1.0 / (N + 1)), k=-1)
    a[np.diag_indices(N)] = (N + 2 - np.arange(1, N + 1)) / (N + 1)
    return a


def _last_row_tilt(size: int, q: np.ndarray) -> np.ndarray:
    """Zero-sum tilt of the last visual row that shifts each column mean by
    ``rho * (q_j - c)``, with ``rho`` at half its non-negativity limit."""
    N = size
    w = N - np.arange(N)  # unmasked rows per column
    c = float(np.dot(w, q) / w.sum())
    tilt = w * (q - c)
    base = np.full(N, 1.0 / (N + 1))
    base[-1] = 2.0 / (N + 1)
    neg = tilt < 0
    if not np.any(neg):
        return np.zeros(N)
    rho = 0.5 * float(np.min(base[neg] / -tilt[neg]))
    return rho * tilt


def teacher_base_logits(sample: SceneSample, relevance: np.ndarray, gain: float = 4.0) -> np.ndarray:
    """Noise-free logits (``-inf`` above the diagonal) for one teacher head."""
    n, m, t = sample.n, sample.m, sample.t
    v = 3 * n
    N = v + m + t
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.shape != (n,):
        raise DimensionMismatch("relevance length must equal object count")
    with np.errstate(divide="ignore"):
        plant = np.repeat(gain * np.log(n * rel), 3)

    logits = np.full((N, N), -np.inf)
    self_block = neutral_self_block(v)
    q = np.exp(plant - plant.max())
    q /= q.sum()
    self_block[-1] += _last_row_tilt(v, q)
    with np.errstate(divide="ignore"):
        logits[:v, :v] = np.log(np.tril(self_block))
    logits[v:, :v] = plant
    rows = np.arange(v, N)
    cols = np.arange(v, N)
    text_part = np.zeros((N - v, N - v))
    text_part[cols[None, :] > rows[:, None]] = -np.inf
    logits[v:, v:] = text_part
    return logits


def planted_teacher_stack(sample: SceneSample, relevance: PlantedRelevance, L: int = 4, H: int = 4,
                          gain: float = 4.0) -> AttentionStack:
    """Causal softmax attention biased toward the planted relevance.

    Self-attention among visual tokens uses a position-neutral base so that
    causal masking does not favour early objects; prompt and generated rows
    put ``gain * log(n * relevance)`` on every visual column of an object.
    """
    base = teacher_base_logits(sample, relevance.relevance, gain)
    N = base.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([relevance.seed, 0x7EAC]))
    noise = rng.normal(0.0, 1.0, (L, H, N, N)) if relevance.noise_sigma > 0 else 0.0
    logits = base[None, None] + relevance.noise_sigma * noise
    finite = np.isfinite(base)
    logits = np.where(finite, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    conf = 1.5 - rng.uniform(0.5, 1.0, sample.t)  # (0.5, 1]
    mats = np.broadcast_to(w, (L, H, N, N)).copy()
    return AttentionStack(mats, sample.n, sample.m, sample.t, conf)


def teacher_answer_under_pruning(sample: SceneSample, schedule) -> bool:
    kept = set(int(i) for i in schedule.final_retained)
    return all(i in kept for i in sample.target_ids)


def generate_dataset(count: int, seed: int, n_range=(8, 64), dims: SceneDims = SceneDims(),
                     plant: PlantConfig = PlantConfig(), start: int = 0) -> list:
    out = []
    for idx in range(start, start + count):
        s = sample_seed(seed, idx)
        n = int(np.random.default_rng(s ^ 0x5EED).integers(n_range[0], n_range[1] + 1))
        out.append(generate_scene(n, dims, s, plant=plant, sample_id=idx))
    return out


def dumps_jsonl(samples) -> str:
    return "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in samples)


def loads_jsonl(text: str) -> list:
    return [SceneSample.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
