import csv
import json

import jsonschema
import pytest

from objprune import pipeline
from objprune.cli import main
from objprune.config import DEFAULT_CONFIG, apply_override, load_config, stage_hash
from objprune.errors import ConfigError, ConfigHashMismatch, EmptyDataset
from objprune.sap import fixed_ratio_baseline
from objprune.scenesim import SAMPLE_SCHEMA, teacher_answer_under_pruning

TINY = {
    "seed": 7,
    "scene": {"train_count": 24, "val_count": 8, "test_count": 8, "n_min": 4, "n_max": 16},
    "gap": {"hidden_dim": 8, "num_heads": 2, "encoder_layers": 1, "decoder_layers": 1,
            "ffn_mult": 1, "epochs": 1, "batch_size": 8, "max_prompt_len": 16},
    "search": {"max_iters": 60},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(TINY))
    cfg["paths"] = {k: str(tmp_path / k) for k in ("data", "oracle", "checkpoints", "reports")}
    for key, value in (extra or {}).items():
        cfg.setdefault(key, {}).update(value) if isinstance(value, dict) else cfg.__setitem__(key, value)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(path, *stages, sets=()):
    flags = [f for s in sets for f in ("--set", s)]
    for stage in stages:
        code = main([stage, "--config", str(path), *flags])
        if code:
            return code
    return 0


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    """One complete tiny pipeline run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("run")
    path = write_config(root)
    assert run(path, *pipeline.COMMANDS) == 0
    return root, load_config(path)


# -- configuration ----------------------------------------------------------------

def test_unknown_key_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scene": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_override_only_replaces_leaves():
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    apply_override(cfg, "gap.lr=0.5")
    assert cfg["gap"]["lr"] == 0.5
    with pytest.raises(ConfigError):
        apply_override(cfg, "gap=1")
    with pytest.raises(ConfigError):
        apply_override(cfg, "gap.new_leaf=1")


def test_paths_must_be_distinct():
    with pytest.raises(ConfigError):
        load_config(overrides=["paths.oracle=run/data"])


def test_env_may_only_redirect_paths(tmp_path):
    cfg = load_config(environ={"OBJPRUNE_DATA_DIR": str(tmp_path / "d"), "OBJPRUNE_SEED": "5"})
    assert cfg["paths"]["data"] == str(tmp_path / "d")
    assert cfg["seed"] == DEFAULT_CONFIG["seed"]


def test_derived_fields_cannot_be_set(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gap": {"vocab_size": 3}}))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_stage_hash_chains_downstream():
    a = load_config()
    b = load_config(overrides=["teacher.noise_sigma=0.5"])
    assert stage_hash(a, "gen") == stage_hash(b, "gen")
    for stage in ("extract", "train", "search", "eval"):
        assert stage_hash(a, stage) != stage_hash(b, stage)


# -- exit codes -------------------------------------------------------------------

def test_config_error_exits_2(tmp_path, capsys):
    assert main(["gen", "--set", "scene.nope=1"]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_artifact_exits_3(tmp_path):
    assert run(write_config(tmp_path), "train") == 3


def test_hash_mismatch_exits_2(tmp_path):
    path = write_config(tmp_path)
    assert run(path, "gen") == 0
    assert run(path, "extract", sets=["seed=8"]) == 2


def test_tampered_file_is_refused(tmp_path):
    path = write_config(tmp_path)
    assert run(path, "gen") == 0
    f = tmp_path / "data" / "val.jsonl"
    f.write_text(f.read_text() + "\n")
    with pytest.raises(ConfigHashMismatch):
        pipeline.read_manifest(load_config(path), "gen")


def test_env_path_override_is_used(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    monkeypatch.setenv("OBJPRUNE_DATA_DIR", str(tmp_path / "elsewhere"))
    assert run(path, "gen") == 0
    assert (tmp_path / "elsewhere" / "train.jsonl").exists()
    assert not (tmp_path / "data").exists()


# -- generation and extraction ----------------------------------------------------

def test_gen_manifest_records_count_and_seed(tmp_path):
    path = write_config(tmp_path, {"scene": {"train_count": 100, "val_count": 0, "test_count": 0}})
    assert run(path, "gen") == 0
    m = json.loads((tmp_path / "data" / "gen.manifest.json").read_text())
    assert m["count"] == 100 and m["seed"] == 7
    assert m["config_hash"] == stage_hash(load_config(path), "gen")


def test_generated_lines_validate_and_respect_range(done):
    root, _ = done
    for split in pipeline.SPLITS:
        for line in (root / "data" / f"{split}.jsonl").read_text().splitlines():
            obj = json.loads(line)
            jsonschema.validate(obj, SAMPLE_SCHEMA)
            assert 4 <= len(obj["centers"]) <= 16


def test_noise_free_audit_spearman_is_one(tmp_path):
    path = write_config(tmp_path, {"teacher": {"noise_sigma": 0.0}})
    assert run(path, "gen", "extract") == 0
    with open(tmp_path / "oracle" / "audit_train.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24
    assert all(float(r["spearman_vs_plant"]) == pytest.approx(1.0, abs=1e-12) for r in rows)


def test_empty_dataset_raises(tmp_path):
    path = write_config(tmp_path, {"scene": {"train_count": 0, "val_count": 0, "test_count": 0}})
    assert run(path, "gen") == 0
    with pytest.raises(EmptyDataset):
        pipeline.cmd_extract(load_config(path))
    assert run(path, "extract") == 1


def test_reextraction_is_idempotent(done):
    root, cfg = done
    before = {p.name: p.read_bytes() for p in (root / "oracle").iterdir()}
    pipeline.cmd_extract(cfg)
    assert {p.name: p.read_bytes() for p in (root / "oracle").iterdir()} == before


def test_every_csv_carries_the_config_hash(done):
    root, _ = done
    for f in root.rglob("*.csv"):
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and all(len(r["config_hash"]) == 64 for r in rows), f.name


def test_every_output_embeds_its_stage_hash(done):
    root, cfg = done
    for stage in ("gen", "extract", "train", "search", "eval"):
        manifest = pipeline.read_manifest(cfg, stage)
        for name in manifest["files"]:
            text = (pipeline.stage_dir(cfg, stage) / name).read_text()
            if name.endswith(".jsonl"):
                assert all(json.loads(line)["config_hash"] == manifest["config_hash"]
                           for line in text.splitlines()), name
            else:
                assert manifest["config_hash"] in text, name
    assert stage_hash(cfg, "eval") in (root / "reports" / "report.md").read_text()


# -- evaluation -------------------------------------------------------------------

def eval_table(cfg):
    return {(b, m, k): v for b, m, k, v in pipeline.read_eval_rows(cfg)}


def test_eval_has_every_cell(done):
    _, cfg = done
    table = eval_table(cfg)
    for b in cfg["eval"]["budgets"]:
        for m in pipeline.METHODS:
            for k in pipeline.METRICS:
                assert (b["name"], m, k) in table


def test_keep_all_budget_has_no_reduction(done):
    _, cfg = done
    table = eval_table(cfg)
    for m in pipeline.METHODS:
        assert table[("keep_all", m, "flops_reduction")] == pytest.approx(0.0, abs=1e-12)
        assert table[("keep_all", m, "accuracy_retention")] == 1.0


def test_search_respects_its_budget(done):
    root, _ = done
    obj = json.loads((root / "checkpoints" / "search.json").read_text())
    for res in obj["budgets"].values():
        if res["feasible"]:
            assert res["achieved_flops"] <= res["budget_flops"]


def test_report_rerun_is_bit_identical(done):
    root, cfg = done
    first = (root / "reports" / "report.md").read_bytes()
    pipeline.cmd_report(cfg)
    assert (root / "reports" / "report.md").read_bytes() == first


def test_random_below_oracle_at_ninety_percent(tmp_path):
    path = write_config(tmp_path, {"scene": {"train_count": 0, "val_count": 0, "test_count": 100}})
    assert run(path, "gen", "extract") == 0
    cfg = load_config(path)
    te = pipeline.load_split(cfg, "test")
    oracles = pipeline.load_oracles(cfg, "test", te)

    def acc(guides):
        return sum(teacher_answer_under_pruning(s, fixed_ratio_baseline(g, 2, 0.95, 32))
                   for s, g in zip(te, guides)) / len(te)

    assert acc([pipeline.random_scores(cfg["seed"], s) for s in te]) < acc(oracles)


# -- determinism ------------------------------------------------------------------

def test_full_rerun_is_byte_identical(done, tmp_path):
    root, _ = done
    path = write_config(tmp_path)
    assert run(path, *pipeline.COMMANDS) == 0
    for sub in ("data", "oracle", "checkpoints", "reports"):
        for f in (root / sub).iterdir():
            assert (tmp_path / sub / f.name).read_bytes() == f.read_bytes(), f"{sub}/{f.name}"
