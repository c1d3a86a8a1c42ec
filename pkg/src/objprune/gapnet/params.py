"""Configuration and flat, segment-indexed parameter storage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

N_DIST_BUCKETS = 8
# log-spaced upper edges of the center-distance buckets; the last bucket is open
DIST_EDGES = np.geomspace(0.25, 16.0, N_DIST_BUCKETS - 1)


@dataclass(frozen=True)
class GapConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_mult: int = 4
    lam: float = 0.02
    margin: float = 0.01
    temperature: float = 0.5
    lr: float = 8e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 64
    warmup_steps: int = 0
    seed: int = 0
    vocab_size: int = 80
    max_prompt_len: int = 32
    d_p: int = 32
    d_v: int = 32
    augment: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.lam < 0 or self.margin < 0:
            raise ValueError("lambda and margin must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden_dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GapConfig":
        return cls(**obj)


def segment_shapes(cfg: GapConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list that defines the flat layout."""
    d, f, H = cfg.hidden_dim, cfg.ffn_dim, cfg.num_heads
    segs = [
        ("spatial.w", (6, d)),
        ("sem.w1", (cfg.d_p + cfg.d_v, d)),
        ("sem.b1", (d,)),
        ("sem.w2", (d, d)),
        ("sem.b2", (d,)),
        ("text.tok", (cfg.vocab_size, d)),
        ("text.pos", (cfg.max_prompt_len, d)),
    ]

    def attn(prefix):
        # no key bias: it shifts each query's logits uniformly and cancels in the softmax
        return [(f"{prefix}.{p}{s}", (d, d) if s == "w" else (d,))
                for p in "qkvo" for s in ("w", "b") if p + s != "kb"]

    def ln(prefix):
        return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]

    def ffn(prefix):
        return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]

    for l in range(cfg.encoder_layers):
        p = f"enc{l}"
        segs += ln(p + ".ln1") + attn(p + ".attn") + ln(p + ".ln2") + ffn(p + ".ffn")
    segs += ln("enc.lnf")
    for l in range(cfg.decoder_layers):
        p = f"dec{l}"
        segs += ln(p + ".ln1") + attn(p + ".self") + [(p + ".self.dist", (H, N_DIST_BUCKETS))]
        segs += ln(p + ".ln2") + attn(p + ".cross") + ln(p + ".ln3") + ffn(p + ".ffn")
    # final norm has no shift: a shared logit offset cancels in the softmax
    segs += [("dec.lnf.g", (d,)), ("head.w", (d,))]
    return segs


class GapParams:
    """All network weights in one float64 vector with named views.

    ``params[name]`` returns a reshaped view into :attr:`flat`, so in-place
    updates of the flat vector are visible through every segment.
    """

    def __init__(self, cfg: GapConfig, flat: np.ndarray | None = None):
        self.cfg = cfg
        self.index: dict[str, tuple[int, tuple]] = {}
        off = 0
        for name, shape in segment_shapes(cfg):
            self.index[name] = (off, shape)
            off += int(np.prod(shape))
        self.total_count = off
        if flat is None:
            flat = np.zeros(off)
        self.flat = flat

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    @flat.setter
    def flat(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (self.total_count,):
            raise ValueError(f"flat vector has {value.shape}, expected ({self.total_count},)")
        self._flat = value
        self._views = {
            name: value[off: off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.index.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self[name]
        if value is not view:
            view[...] = value

    def __contains__(self, name):
        return name in self.index

    def names(self):
        return list(self.index)

    def segment_slice(self, name: str) -> slice:
        off, shape = self.index[name]
        return slice(off, off + int(np.prod(shape)))

    def zeros_like(self) -> "GapParams":
        return GapParams(self.cfg, np.zeros(self.total_count))

    def copy(self) -> "GapParams":
        return GapParams(self.cfg, self.flat.copy())

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    # -- checkpoints ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "segments": {
                name: {"shape": list(shape), "values": self[name].ravel().tolist()}
                for name, (_, shape) in self.index.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GapParams":
        cfg = GapConfig.from_json(obj["config"])
        p = cls(cfg)
        for name, seg in obj["segments"].items():
            if name not in p.index:
                raise KeyError(f"unknown segment {name!r}")
            if tuple(seg["shape"]) != p.index[name][1]:
                raise ValueError(f"shape mismatch for {name}")
            p[name][...] = np.asarray(seg["values"], dtype=np.float64).reshape(seg["shape"])
        return p

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        obj = self.to_json()
        if extra:
            obj.update(extra)
        Path(path).write_text(json.dumps(obj, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GapParams":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save_binary(self, path: str | Path, extra: dict | None = None) -> None:
        """Raw little-endian float64 values plus a ``<path>.json`` manifest."""
        path = Path(path)
        path.write_bytes(self.flat.astype("<f8").tobytes())
        manifest = {
            "config": self.cfg.to_json(),
            "dtype": "<f8",
            "layout": "row-major",
            "segments": [
                {"name": name, "offset": off, "shape": list(shape)}
                for name, (off, shape) in self.index.items()
            ],
        }
        if extra:
            manifest.update(extra)
        Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True))

    @classmethod
    def load_binary(cls, path: str | Path) -> "GapParams":
        path = Path(path)
        manifest = json.loads(Path(str(path) + ".json").read_text())
        p = cls(GapConfig.from_json(manifest["config"]))
        expected = [{"name": n, "offset": o, "shape": list(s)} for n, (o, s) in p.index.items()]
        if manifest["segments"] != expected:
            raise ValueError("segment layout in manifest does not match the configuration")
        p.flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        return p


def init_params(cfg: GapConfig, seed: int | None = None) -> GapParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = GapParams(cfg)
    for name, (_, shape) in p.index.items():
        leaf = name.rsplit(".", 1)[1]
        if name.endswith(".g"):
            p[name][...] = 1.0
        elif name in ("text.tok",):
            p[name][...] = rng.normal(0.0, 1.0, shape)
        elif name == "text.pos":
            p[name][...] = rng.normal(0.0, 0.1, shape)
        elif leaf == "dist":
            p[name][...] = 0.0
        elif len(shape) == 2:
            p[name][...] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        elif name == "head.w":
            p[name][...] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        # biases and norm shifts start at zero
    return p
