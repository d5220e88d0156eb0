"""End-to-end command-line tests: the synth -> augment -> train -> eval ->
predict pipeline on a tiny dataset, config precedence, exit codes, cache
resolution, and the built-in selftest."""

import json
import time

import numpy as np
import pytest

from kid import cli
from kid import numcore as nc
from kid.dataset import KnowledgeBase, load_samples
from kid.fsio import read_json
from kid.provider import CacheProvider, OracleProvider, build_augmented_dataset
from kid.model import CHECKPOINT_MAGIC


TINY_TRAIN = [
    "--d-model", "8", "--n-layers", "1", "--n-heads", "2", "--d-ff", "16",
    "--max-len", "320", "--batch-size", "8", "--max-epochs", "1",
]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One pipeline run shared by the assertion tests below."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert cli.main(["synth", "--out", str(data), "--n-entities", "4",
                     "--n-train", "24", "--n-val", "8", "--n-test", "8",
                     "--seed", "3"]) == 0
    for split in ("train", "val", "test"):
        assert cli.main(["augment",
                         "--data", str(data / f"{split}.jsonl"),
                         "--out", str(data / f"{split}_n1.jsonl"),
                         "--provider", "oracle", "--kb", str(data / "kb.json"),
                         "--n", "1"]) == 0
    run = root / "run"
    assert cli.main(["train",
                     "--train", str(data / "train_n1.jsonl"),
                     "--val", str(data / "val_n1.jsonl"),
                     "--task", str(data / "task.json"),
                     "--out", str(run), "--seed", "0"] + TINY_TRAIN) == 0
    return root


def test_synth_outputs(ws):
    data = ws / "data"
    manifest = read_json(data / "manifest.json")
    assert manifest["n_train"] == 24
    assert manifest["provenance"]["command"] == "synth"
    assert manifest["provenance"]["config"]["seed"] == 3
    samples = load_samples(data / "train.jsonl")
    assert len(samples) == 24
    assert all(s.label in ("non-harmful", "harmful") for s in samples)
    assert all(s.aug_text is None for s in samples)
    assert (data / "task.json").is_file() and (data / "kb.json").is_file()


def test_augment_outputs(ws):
    data = ws / "data"
    samples = load_samples(data / "train_n1.jsonl")
    assert all(s.aug_text for s in samples)
    assert all(s.aug_text.count("⟨") == 1 for s in samples)
    manifest = read_json(data / "train_n1.manifest.json")
    assert manifest["n_samples"] == 24
    assert manifest["failed_ids"] == []
    assert manifest["provider_name"] == "oracle"
    assert manifest["provenance"]["command"] == "augment"


def test_train_outputs(ws):
    run = ws / "run"
    blob = (run / "checkpoint.kid").read_bytes()
    assert blob.startswith(CHECKPOINT_MAGIC)
    lines = (run / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,L_gen,L_cls,L_total"
    assert len(lines) == 1 + 3  # 24 samples / batch 8, one epoch
    summary = read_json(run / "summary.json")
    assert summary["n_steps"] == 3
    assert summary["provenance"]["command"] == "train"
    assert summary["provenance"]["config"]["d_model"] == 8


def test_eval_report(ws, capsys):
    data, run = ws / "data", ws / "run"
    out = ws / "eval.json"
    assert cli.main(["eval", "--data", str(data / "test_n1.jsonl"),
                     "--checkpoint", str(run / "checkpoint.kid"),
                     "--task", str(data / "task.json"),
                     "--out", str(out)]) == 0
    report = read_json(out)
    assert report["n_samples"] == 8
    assert report["decision"] == "cls"
    assert 0.0 <= report["accuracy"] <= 1.0
    assert 0.0 <= report["macro_f1"] <= 1.0
    assert report["auc"] is not None and 0.0 <= report["auc"] <= 1.0
    assert "accuracy=" in capsys.readouterr().out


def test_eval_semantic_decision(ws):
    data, run = ws / "data", ws / "run"
    out = ws / "eval_sem.json"
    assert cli.main(["eval", "--data", str(data / "test_n1.jsonl"),
                     "--checkpoint", str(run / "checkpoint.kid"),
                     "--task", str(data / "task.json"),
                     "--decision", "semantic", "--out", str(out)]) == 0
    assert read_json(out)["decision"] == "semantic"


def test_predict_two_step(ws):
    data, run = ws / "data", ws / "run"
    out = ws / "preds.jsonl"
    assert cli.main(["predict", "--data", str(data / "test.jsonl"),
                     "--checkpoint", str(run / "checkpoint.kid"),
                     "--task", str(data / "task.json"),
                     "--provider", "oracle", "--kb", str(data / "kb.json"),
                     "--n", "1", "--out", str(out)]) == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 8
    for row in rows:
        assert set(row) == {"id", "probs", "decided", "semantic_text", "heads_agree"}
    assert [r["id"] for r in rows] == [s.id for s in load_samples(data / "test.jsonl")]
    manifest = read_json(ws / "preds.manifest.json")
    assert 0.0 <= manifest["heads_agreement"] <= 1.0


def test_predict_plain_without_provider(ws):
    data, run = ws / "data", ws / "run"
    out = ws / "preds_plain.jsonl"
    assert cli.main(["predict", "--data", str(data / "test.jsonl"),
                     "--checkpoint", str(run / "checkpoint.kid"),
                     "--task", str(data / "task.json"),
                     "--n", "0", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 8


def test_ablate_tiny_grid(ws):
    data = ws / "data"
    out = ws / "ablate"
    assert cli.main(["ablate",
                     "--train", str(data / "train.jsonl"),
                     "--val", str(data / "val.jsonl"),
                     "--test", str(data / "test.jsonl"),
                     "--task", str(data / "task.json"),
                     "--provider", "oracle", "--kb", str(data / "kb.json"),
                     "--n-values", "0,1", "--modes", "dual", "--seeds", "0",
                     "--out", str(out)] + TINY_TRAIN) == 0
    grid = (out / "grid.csv").read_text().splitlines()
    assert grid[0] == "n,format,mode,seed,metric,value"
    assert len(grid) == 1 + 2 + 2  # 2 cells x 1 seed, plus a mean row per cell
    summary = read_json(out / "summary.json")
    assert set(summary["cells"]) == {"N0-inline-dual", "N1-inline-dual"}
    assert summary["cells"]["N1-inline-dual"]["p_vs_reference"] == {}  # single seed
    plot = (out / "plot_data.csv").read_text().splitlines()
    assert plot[0] == "n,format,mode,mean"
    assert len(plot) == 3
    assert read_json(out / "provenance.json")["command"] == "ablate"


# ---- config handling ----

def test_flags_beat_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_entities": 4, "n_train": 10, "n_val": 4,
                               "n_test": 4, "seed": 5}))
    out = tmp_path / "d"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out),
                     "--seed", "7"]) == 0
    prov = read_json(out / "manifest.json")["provenance"]
    assert prov["config"]["seed"] == 7  # flag wins
    assert prov["config"]["n_train"] == 10  # config beats default
    assert len(load_samples(out / "train.jsonl")) == 10


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["synth", "--config", str(cfg),
                     "--out", str(tmp_path / "d")]) == 1
    assert "bogus" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["synth", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 1


# ---- exit codes ----

def test_missing_required_option(capsys):
    assert cli.main(["train"]) == 1
    assert "--train" in capsys.readouterr().err


def test_unknown_command():
    assert cli.main(["frobnicate"]) == 1


def test_no_command_prints_help(capsys):
    assert cli.main([]) == 1
    assert "command" in capsys.readouterr().out


def test_bad_provider_spec(ws):
    data = ws / "data"
    assert cli.main(["augment", "--data", str(data / "val.jsonl"),
                     "--out", str(ws / "x.jsonl"),
                     "--provider", "ftp://nope", "--n", "1"]) == 1


def test_invalid_train_mode(ws):
    data = ws / "data"
    assert cli.main(["train", "--train", str(data / "train_n1.jsonl"),
                     "--val", str(data / "val_n1.jsonl"),
                     "--out", str(ws / "bad"), "--mode", "sideways"]
                    + TINY_TRAIN) == 1


def test_unreachable_teacher_exits_2_and_writes_nothing(ws, capsys):
    data = ws / "data"
    out = ws / "unreachable.jsonl"
    rc = cli.main(["augment", "--data", str(data / "val.jsonl"),
                   "--out", str(out),
                   "--provider", "http://127.0.0.1:9",
                   "--timeout", "0.3", "--max-retries", "0", "--n", "1"])
    assert rc == 2
    assert not out.exists()
    assert "external service error" in capsys.readouterr().err


def test_internal_error_exits_3(monkeypatch, tmp_path):
    def boom(resolved):
        raise RuntimeError("wires crossed")
    monkeypatch.setitem(cli._COMMANDS, "synth",
                        (boom,) + cli._COMMANDS["synth"][1:])
    assert cli.main(["synth", "--out", str(tmp_path / "d")]) == 3


# ---- cache resolution ----

def test_cache_dir_env_resolves_relative_paths(ws, tmp_path, monkeypatch):
    data = ws / "data"
    cache_dir = tmp_path / "caches"
    cache_dir.mkdir()
    kb = KnowledgeBase.from_json(read_json(data / "kb.json"))
    warm = CacheProvider(cache_dir / "warm.jsonl", base=OracleProvider(kb))
    build_augmented_dataset(load_samples(data / "val.jsonl"), warm, 1)

    monkeypatch.setenv(cli.CACHE_DIR_ENV, str(cache_dir))
    out = tmp_path / "from_cache.jsonl"
    assert cli.main(["augment", "--data", str(data / "val.jsonl"),
                     "--out", str(out),
                     "--provider", "cache:warm.jsonl", "--n", "1"]) == 0
    assert all(s.aug_text for s in load_samples(out))
    manifest = read_json(tmp_path / "from_cache.manifest.json")
    assert manifest["provider_name"] == "cache"


def test_cache_miss_during_predict_exits_1(ws, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.CACHE_DIR_ENV, str(tmp_path))
    (tmp_path / "empty.jsonl").write_text("")
    data, run = ws / "data", ws / "run"
    rc = cli.main(["predict", "--data", str(data / "test.jsonl"),
                   "--checkpoint", str(run / "checkpoint.kid"),
                   "--task", str(data / "task.json"),
                   "--provider", "cache:empty.jsonl", "--n", "1",
                   "--out", str(tmp_path / "y.jsonl")])
    assert rc == 1
    assert not (tmp_path / "y.jsonl").exists()


# ---- mock teacher ----

def test_mock_teacher_serves_and_stops(ws, capsys):
    data = ws / "data"
    t0 = time.monotonic()
    assert cli.main(["mock-teacher", "--kb", str(data / "kb.json"),
                     "--max-seconds", "0.2"]) == 0
    assert time.monotonic() - t0 < 5.0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("http://127.0.0.1:")


# ---- selftest ----

def test_selftest_passes_quickly(capsys):
    t0 = time.monotonic()
    assert cli.main(["selftest"]) == 0
    elapsed = time.monotonic() - t0
    out = capsys.readouterr().out
    for line in ("PASS grad:matmul", "PASS grad:dual_loss", "PASS parser:round_trip",
                 "PASS metrics:oracles", "PASS templates:bijection",
                 "PASS checkpoint:round_trip"):
        assert line in out
    assert out.strip().splitlines()[-1].startswith("OK")
    assert elapsed < 60.0


def test_selftest_catches_corrupted_gradient(monkeypatch, capsys):
    # break one pullback rule; the matching check must fail by name
    def bad_exp(x):
        e = np.exp(x.data)
        out = nc.Tensor(e)

        def back(g):
            return (g * e * 1.01,)

        return nc._record("exp", out, (x,), back)

    monkeypatch.setattr(nc, "exp", bad_exp)
    assert cli.main(["selftest"]) == 3
    out = capsys.readouterr().out
    assert "FAIL grad:exp" in out
    assert out.strip().splitlines()[-1].startswith("FAILED")
