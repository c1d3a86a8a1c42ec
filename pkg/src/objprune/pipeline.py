"""The six pipeline stages: gen, extract, train, search, eval and report.

Each stage reads its upstream manifest, refuses to continue if the
upstream configuration hash differs from the one implied by the current
configuration, writes its outputs and then a manifest of its own. All
outputs are byte-deterministic for a fixed configuration.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import config as C
from .attention import build_oracle, component_scores
from .errors import ConfigHashMismatch, EmptyDataset, MissingArtifact, SchemaMismatch
from .gapnet import GapParams, predict_many, topk_recall, train
from .sap import build_schedule, fixed_ratio_baseline, keep_all_schedule, visual_flops
from .scenesim import (
    PlantedRelevance,
    generate_dataset,
    loads_jsonl,
    planted_teacher_stack,
    teacher_answer_under_pruning,
)
from .search import PruningStrategy, init_baseline_from_static, search

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METHODS = ("gap_sap", "gap_fixed", "oracle_fixed", "random")
METRICS = ("flops_reduction", "avg_pruning_ratio", "topk_recall", "accuracy", "accuracy_retention")
STAGE_DIR = {"gen": "data", "extract": "oracle", "train": "checkpoints", "search": "checkpoints", "eval": "reports"}


# -- file plumbing ------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode()
    path.write_bytes(data)
    return _sha256(data)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def stage_dir(cfg: dict, stage: str) -> Path:
    return Path(cfg["paths"][STAGE_DIR[stage]])


def manifest_path(cfg: dict, stage: str) -> Path:
    return stage_dir(cfg, stage) / f"{stage}.manifest.json"


def _write_manifest(cfg: dict, stage: str, files: dict, **extra) -> dict:
    up = C.upstream_stage(stage)
    manifest = {
        "stage": stage,
        "config_hash": C.stage_hash(cfg, stage),
        "upstream_hash": C.stage_hash(cfg, up) if up else None,
        "files": files,
        **extra,
    }
    _write(manifest_path(cfg, stage), _json_text(manifest))
    return manifest


def read_manifest(cfg: dict, stage: str) -> dict:
    """Load a stage manifest and check it belongs to the current configuration."""
    path = manifest_path(cfg, stage)
    if not path.exists():
        raise MissingArtifact(f"no {stage} output at {path}; run `objprune {stage}` first")
    manifest = json.loads(path.read_text())
    expected = C.stage_hash(cfg, stage)
    if manifest.get("config_hash") != expected:
        raise ConfigHashMismatch(
            f"{stage} artifacts in {path.parent} were made with config hash "
            f"{manifest.get('config_hash', '?')[:12]}, current config gives {expected[:12]}"
        )
    for name, digest in manifest["files"].items():
        f = path.parent / name
        if not f.exists():
            raise MissingArtifact(f"{f} listed in the {stage} manifest is missing")
        if _sha256(f.read_bytes()) != digest:
            raise ConfigHashMismatch(f"{f} does not match the digest in its manifest")
    return manifest


def _require_upstream(cfg: dict, stage: str) -> dict:
    return read_manifest(cfg, C.upstream_stage(stage))


def split_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), 0xDA7A]).generate_state(1)[0])


def load_split(cfg: dict, split: str) -> list:
    path = stage_dir(cfg, "gen") / f"{split}.jsonl"
    if not path.exists():
        raise MissingArtifact(f"dataset split missing: {path}")
    try:
        return loads_jsonl(path.read_text())
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: {exc}") from exc


def load_oracles(cfg: dict, split: str, samples) -> list:
    path = stage_dir(cfg, "extract") / f"{split}.jsonl"
    if not path.exists():
        raise MissingArtifact(f"oracle maps missing: {path}")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line]
    if [r["sample_id"] for r in rows] != [s.sample_id for s in samples]:
        raise SchemaMismatch(f"{path} is not aligned with the {split} dataset")
    return [np.asarray(r["scores"], dtype=np.float64) for r in rows]


# -- stages ----------------------------------------------------------------------------

def cmd_gen(cfg: dict) -> dict:
    """Generate the train, val and test splits as JSON lines."""
    sc = cfg["scene"]
    dims, plant = C.scene_dims(cfg), C.plant_config(cfg)
    h = C.stage_hash(cfg, "gen")
    files, counts = {}, {}
    for split in SPLITS:
        count = sc[f"{split}_count"]
        data = generate_dataset(count, split_seed(cfg["seed"], split), (sc["n_min"], sc["n_max"]), dims, plant)
        text = "".join(json.dumps({**s.to_json(), "config_hash": h}, sort_keys=True) + "\n" for s in data)
        files[f"{split}.jsonl"] = _write(stage_dir(cfg, "gen") / f"{split}.jsonl", text)
        counts[split] = count
        log.info("gen: %d %s samples", count, split)
    return _write_manifest(cfg, "gen", files, count=sum(counts.values()), splits=counts, seed=cfg["seed"])


def _spearman(x, y) -> float:
    if len(x) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def cmd_extract(cfg: dict) -> dict:
    """Run the planted teacher on every sample and store oracle maps plus an audit CSV."""
    _require_upstream(cfg, "extract")
    t = cfg["teacher"]
    h = C.stage_hash(cfg, "extract")
    files = {}
    total = 0
    for split in SPLITS:
        samples = load_split(cfg, split)
        total += len(samples)
        lines, audit = [], []
        for s in samples:
            stack = planted_teacher_stack(
                s, PlantedRelevance(s.relevance, t["noise_sigma"], s.seed), t["layers"], t["heads"], t["gain"]
            )
            comps = component_scores(stack)
            oracle = build_oracle(stack, comps).scores
            lines.append(json.dumps({
                "sample_id": s.sample_id,
                "scores": oracle.tolist(),
                "self_scores": comps.self_scores.tolist(),
                "prompt_scores": comps.prompt_scores.tolist(),
                "text_scores": comps.text_scores.tolist(),
                "config_hash": h,
            }, sort_keys=True) + "\n")
            audit.append([s.sample_id, s.n, repr(_spearman(oracle, s.relevance)), h])
        out = stage_dir(cfg, "extract")
        files[f"{split}.jsonl"] = _write(out / f"{split}.jsonl", "".join(lines))
        files[f"audit_{split}.csv"] = _write(
            out / f"audit_{split}.csv", _csv_text(["sample_id", "n", "spearman_vs_plant", "config_hash"], audit)
        )
        log.info("extract: %d %s oracle maps", len(samples), split)
    if total == 0:
        raise EmptyDataset("the dataset has no samples")
    return _write_manifest(cfg, "extract", files)


def cmd_train(cfg: dict) -> dict:
    """Fit the predictor on the train split, tracking the val split."""
    _require_upstream(cfg, "train")
    gcfg = C.gap_config(cfg)
    tr = load_split(cfg, "train")
    va = load_split(cfg, "val")
    train_set = list(zip(tr, load_oracles(cfg, "train", tr)))
    val_set = list(zip(va, load_oracles(cfg, "val", va))) or None
    res = train(train_set, gcfg, val=val_set)
    h = C.stage_hash(cfg, "train")
    out = stage_dir(cfg, "train")
    ckpt = res.params.to_json()
    ckpt["config_hash"] = h
    files = {
        "gap.json": _write(out / "gap.json", json.dumps(ckpt, sort_keys=True) + "\n"),
        "loss.csv": _write(out / "loss.csv", _csv_text(
            ["epoch", "split", "kl", "rank", "total", "config_hash"],
            [[r["epoch"], r["split"], repr(float(r["kl"])), repr(float(r["rank"])), repr(float(r["total"])), h]
             for r in res.history],
        )),
    }
    return _write_manifest(cfg, "train", files)


def load_params(cfg: dict) -> GapParams:
    path = stage_dir(cfg, "train") / "gap.json"
    if not path.exists():
        raise MissingArtifact(f"checkpoint missing: {path}")
    obj = json.loads(path.read_text())
    obj.pop("config_hash", None)
    return GapParams.from_json(obj)


def static_counts(cfg: dict, budget: dict) -> np.ndarray:
    """Fixed-ratio retention profile at the largest scene size."""
    n_ref = cfg["scene"]["n_max"]
    fm = C.flops_model(cfg)
    return fixed_ratio_baseline(np.full(n_ref, 1.0 / n_ref), budget["drop_layer"], budget["ratio"], fm.depth).counts


def cmd_search(cfg: dict) -> dict:
    """Search one SAP strategy per eval budget on the val split.

    The FLOPs budget of each point is the cost of the matching fixed-ratio
    schedule (guided by the predictor) on the same batch, so both arms of
    the evaluation are compared at equal theoretical cost.
    """
    read_manifest(cfg, "train")
    params = load_params(cfg)
    fm = C.flops_model(cfg)
    va = load_split(cfg, "val")
    if not va:
        raise EmptyDataset("search needs a non-empty val split")
    preds = predict_many(params, va)
    batch = [(a, s.text_len) for a, s in zip(preds, va)]
    full = sum(visual_flops(fm, s.n, s.text_len) for s in va)
    h = C.stage_hash(cfg, "search")
    results, trace = {}, []
    for b in cfg["eval"]["budgets"]:
        fixed = sum(
            visual_flops(fm, s.n, s.text_len, fixed_ratio_baseline(a, b["drop_layer"], b["ratio"], fm.depth))
            for a, s in zip(preds, va)
        )
        fraction = fixed / full
        base = init_baseline_from_static(static_counts(cfg, b), preds)
        res = search(batch, base, C.search_config(cfg, budget=fraction), fm)
        results[b["name"]] = {**res.to_json(), "budget_fraction": fraction, "base_thresholds": base.tolist()}
        trace += [[b["name"], it, repr(lo), repr(hi), repr(c), h] for it, lo, hi, c in res.trace]
        log.info("search %s: alpha*=%.5f feasible=%s", b["name"], res.alpha_star, res.feasible)
    out = stage_dir(cfg, "search")
    files = {
        "search.json": _write(out / "search.json", _json_text({"config_hash": h, "budgets": results})),
        "search_trace.csv": _write(out / "search_trace.csv", _csv_text(
            ["budget", "iteration", "alpha_low", "alpha_high", "cost", "config_hash"], trace)),
    }
    return _write_manifest(cfg, "search", files)


def random_scores(seed: int, sample) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x8A4D, sample.sample_id]))
    return rng.random(sample.n)


def evaluate_arms(cfg: dict, samples, oracles, preds, strategies: dict) -> list:
    """Rows ``(budget, method, metric, value)`` for every budget and method."""
    fm = C.flops_model(cfg)
    k = cfg["eval"]["topk"]
    full = sum(visual_flops(fm, s.n, s.text_len) for s in samples)
    base_acc = np.mean([teacher_answer_under_pruning(s, keep_all_schedule(s.n, fm.depth)) for s in samples])
    rand = [random_scores(cfg["seed"], s) for s in samples]
    rows = []
    for b in cfg["eval"]["budgets"]:
        guides = {"gap_sap": preds, "gap_fixed": preds, "oracle_fixed": oracles, "random": rand}
        for method in METHODS:
            scheds = []
            for g in guides[method]:
                if method == "gap_sap":
                    scheds.append(build_schedule(g, strategies[b["name"]]))
                else:
                    scheds.append(fixed_ratio_baseline(g, b["drop_layer"], b["ratio"], fm.depth))
            pruned = sum(visual_flops(fm, s.n, s.text_len, sc) for s, sc in zip(samples, scheds))
            acc = float(np.mean([teacher_answer_under_pruning(s, sc) for s, sc in zip(samples, scheds)]))
            values = {
                "flops_reduction": 1.0 - pruned / full,
                "avg_pruning_ratio": float(np.mean([sc.average_pruning_ratio() for sc in scheds])),
                "topk_recall": float(np.mean([topk_recall(g, o, k) for g, o in zip(guides[method], oracles)])),
                "accuracy": acc,
                "accuracy_retention": acc / base_acc if base_acc > 0 else float("nan"),
            }
            rows += [(b["name"], method, m, float(values[m])) for m in METRICS]
    return rows


def load_strategies(cfg: dict) -> dict:
    read_manifest(cfg, "search")
    obj = json.loads((stage_dir(cfg, "search") / "search.json").read_text())
    return {name: PruningStrategy.from_json(r["strategy"]) for name, r in obj["budgets"].items()}


def cmd_eval(cfg: dict) -> dict:
    """Score every arm on the test split and write the report CSV."""
    strategies = load_strategies(cfg)
    read_manifest(cfg, "extract")
    params = load_params(cfg)
    te = load_split(cfg, "test")
    if not te:
        raise EmptyDataset("eval needs a non-empty test split")
    oracles = load_oracles(cfg, "test", te)
    missing = [b["name"] for b in cfg["eval"]["budgets"] if b["name"] not in strategies]
    if missing:
        raise MissingArtifact(f"no searched strategy for budgets {missing}")
    rows = evaluate_arms(cfg, te, oracles, predict_many(params, te), strategies)
    h = C.stage_hash(cfg, "eval")
    text = _csv_text(["budget", "method", "metric", "value", "config_hash"],
                     [[b, m, k, repr(v), h] for b, m, k, v in rows])
    files = {"eval.csv": _write(stage_dir(cfg, "eval") / "eval.csv", text)}
    return _write_manifest(cfg, "eval", files)


def read_eval_rows(cfg: dict) -> list:
    read_manifest(cfg, "eval")
    with open(stage_dir(cfg, "eval") / "eval.csv", newline="") as fh:
        return [(r["budget"], r["method"], r["metric"], float(r["value"])) for r in csv.DictReader(fh)]


def cmd_report(cfg: dict) -> str:
    """Render the eval CSV as markdown tables, one per metric; returns the text."""
    rows = read_eval_rows(cfg)
    table = {(b, m, k): v for b, m, k, v in rows}
    budgets = list(dict.fromkeys(b for b, _, _, _ in rows))
    lines = ["# Evaluation report", "", f"config_hash: {C.stage_hash(cfg, 'eval')}", ""]
    for metric in METRICS:
        lines += [f"## {metric}", "", "| budget | " + " | ".join(METHODS) + " |",
                  "|---" * (len(METHODS) + 1) + "|"]
        for b in budgets:
            lines.append(f"| {b} | " + " | ".join(f"{table[(b, m, metric)]:.4f}" for m in METHODS) + " |")
        lines.append("")
    text = "\n".join(lines)
    _write(stage_dir(cfg, "eval") / "report.md", text)
    return text


COMMANDS = {
    "gen": cmd_gen,
    "extract": cmd_extract,
    "train": cmd_train,
    "search": cmd_search,
    "eval": cmd_eval,
    "report": cmd_report,
}
