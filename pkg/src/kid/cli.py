"""Command-line front end: reproducible experiment commands wiring the
dataset, provider, model, train, infer, and ablation modules.

Exit codes: 0 success, 1 validation error, 2 external-service error,
3 internal failure. Flags override config-file values, which override
built-in defaults. All file outputs are atomic.
"""

from __future__ import annotations

import argparse
import os
import pathlib
import sys
import time
from dataclasses import replace

import numpy as np

from . import fsio
from . import knowledge_format as kf
from . import numcore as nc
from .ablation import AblationError, Cell, run_ablation
from .dataset import (
    KnowledgeBase,
    MemeSample,
    SynthConfig,
    TaskSpec,
    generate_synthetic,
    load_samples,
    save_samples,
    synthetic_task,
)
from .infer import (
    build_template,
    cls_probs_many,
    decide_from_probs,
    decode_semantic_many,
    predict_many,
)
from .metrics import accuracy, auc, macro_f1, paired_t_test
from .model import DualHeadModel, ModelConfig
from .provider import (
    AugmentFailureRateError,
    CacheMissError,
    CacheProvider,
    HttpStatusError,
    MalformedTeacherOutput,
    OracleProvider,
    TransportError,
    build_augmented_dataset,
)
from .mock_teacher import MockTeacherConfig, start_mock_teacher
from .train import TrainConfig, TrainError, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_EXTERNAL = 2
EXIT_INTERNAL = 3

CACHE_DIR_ENV = "KID_CACHE_DIR"


class CliError(Exception):
    """Bad arguments, config, or input files. Exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---- config plumbing ----

def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = pathlib.Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    obj = fsio.read_json(p)
    if not isinstance(obj, dict):
        raise CliError("config file must hold a JSON object")
    return obj


def _merge(args: argparse.Namespace, config: dict, defaults: dict) -> dict:
    """Flag (if given) beats config file beats default."""
    unknown = set(config) - set(defaults)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in config:
            resolved[key] = config[key]
        else:
            resolved[key] = default
    return resolved


def _require(resolved: dict, *keys: str) -> None:
    for k in keys:
        if resolved[k] is None:
            raise CliError(f"missing required option --{k.replace('_', '-')}")


def _provenance(command: str, resolved: dict) -> dict:
    return {"command": command, "config": {k: v for k, v in resolved.items()}}


def _ints(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v != ""]


def _strs(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v for v in str(value).split(",") if v != ""]


def resolve_cache_path(path: str) -> pathlib.Path:
    """Relative cache paths live under $KID_CACHE_DIR when it is set."""
    p = pathlib.Path(path)
    base = os.environ.get(CACHE_DIR_ENV)
    if not p.is_absolute() and base:
        return pathlib.Path(base) / p
    return p


def build_provider(spec: str, kb_path: str | None, *, timeout: float = 10.0,
                   max_retries: int = 2):
    if spec == "oracle":
        if kb_path is None:
            raise CliError("oracle provider needs --kb")
        kb = KnowledgeBase.from_json(fsio.read_json(kb_path))
        return OracleProvider(kb)
    if spec.startswith("cache:"):
        return CacheProvider(resolve_cache_path(spec[len("cache:"):]))
    if spec.startswith(("http://", "https://")):
        from .provider import HttpTeacherProvider
        return HttpTeacherProvider(spec, timeout=timeout, max_retries=max_retries)
    if spec.startswith("http:"):
        from .provider import HttpTeacherProvider
        url = spec[len("http:"):]
        if "://" not in url:
            url = "http://" + url
        return HttpTeacherProvider(url, timeout=timeout, max_retries=max_retries)
    raise CliError(f"unknown provider spec {spec!r} "
                   "(expected oracle, cache:PATH, or http:URL)")


def _load_task(path: str | None) -> TaskSpec:
    if path is None:
        return synthetic_task()
    return TaskSpec.from_json(fsio.read_json(path))


def _model_config(resolved: dict, task: TaskSpec) -> ModelConfig:
    return ModelConfig(
        n_classes=task.n_classes,
        d_model=resolved["d_model"], n_layers=resolved["n_layers"],
        n_heads=resolved["n_heads"], d_ff=resolved["d_ff"],
        max_len=resolved["max_len"],
        input_dropout=resolved["input_dropout"],
        hidden_dropout=resolved["hidden_dropout"],
        multilabel=(task.kind == "multilabel"),
    )


_MODEL_DEFAULTS = {
    "d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256, "max_len": 512,
    "input_dropout": 0.1, "hidden_dropout": 0.2,
}

_TRAIN_DEFAULTS = {
    "mode": "dual", "knowledge_n": 1, "format": kf.INLINE, "seed": 0,
    "batch_size": 16, "max_epochs": 4, "lr_backbone": 3e-4,
    "lr_cls_head": 1e-3, "grad_clip_norm": 1.0,
}


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=resolved["batch_size"], max_epochs=resolved["max_epochs"],
        lr_backbone=resolved["lr_backbone"], lr_cls_head=resolved["lr_cls_head"],
        seed=resolved["seed"], mode=resolved["mode"],
        knowledge_n=resolved["knowledge_n"], format=resolved["format"],
        grad_clip_norm=resolved["grad_clip_norm"],
    )


# ---- subcommands ----

def cmd_synth(resolved: dict) -> int:
    _require(resolved, "out")
    out = pathlib.Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(n_entities=resolved["n_entities"],
                      n_train=resolved["n_train"], n_val=resolved["n_val"],
                      n_test=resolved["n_test"], seed=resolved["seed"])
    train_s, val_s, test_s, kb = generate_synthetic(cfg)
    save_samples(out / "train.jsonl", train_s)
    save_samples(out / "val.jsonl", val_s)
    save_samples(out / "test.jsonl", test_s)
    fsio.write_json(out / "kb.json", kb.to_json())
    fsio.write_json(out / "task.json", synthetic_task().to_json())
    fsio.write_json(out / "manifest.json", {
        "n_train": len(train_s), "n_val": len(val_s), "n_test": len(test_s),
        "provenance": _provenance("synth", resolved),
    })
    print(f"wrote {len(train_s)}/{len(val_s)}/{len(test_s)} samples to {out}")
    return EXIT_OK


def cmd_augment(resolved: dict) -> int:
    _require(resolved, "data", "out", "provider", "n")
    samples = load_samples(resolved["data"])
    provider = build_provider(resolved["provider"], resolved["kb"],
                              timeout=resolved["timeout"],
                              max_retries=resolved["max_retries"])
    augmented, manifest = build_augmented_dataset(
        samples, provider, resolved["n"], resolved["format"],
        failure_threshold=resolved["max_failure_rate"])
    save_samples(resolved["out"], augmented)
    manifest["provenance"] = _provenance("augment", resolved)
    manifest_path = pathlib.Path(resolved["out"]).with_suffix(".manifest.json")
    fsio.write_json(manifest_path, manifest)
    print(f"augmented {manifest['n_samples']} samples "
          f"({len(manifest['failed_ids'])} failures) -> {resolved['out']}")
    return EXIT_OK


def cmd_train(resolved: dict) -> int:
    _require(resolved, "train", "val", "out")
    out = pathlib.Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    task = _load_task(resolved["task"])
    train_s = load_samples(resolved["train"])
    val_s = load_samples(resolved["val"])
    try:
        tc = _train_config(resolved)
        mc = _model_config(resolved, task)
    except (TrainError, ValueError) as e:
        raise CliError(str(e)) from e
    model = DualHeadModel(mc, seed=resolved["seed"])
    model, log = train(model, train_s, val_s, task, tc)
    model.save(out / "checkpoint.kid")
    log.write_csv(out / "train_log.csv")
    summary = log.summary()
    summary["provenance"] = _provenance("train", resolved)
    fsio.write_json(out / "summary.json", summary)
    best = f"{log.best_val:.4f}" if log.val_metrics else "n/a"
    print(f"trained {len(log.steps)} steps, best val {best} -> {out}")
    return EXIT_OK


def _eval_scores(model, samples, task, decision: str, batch_size: int):
    """(decided, ranking score for binary AUC or None)."""
    if decision == "semantic":
        decided, _, scores = decode_semantic_many(model, samples, task,
                                                  batch_size=batch_size)
        ranking = scores[:, 1] - scores[:, 0] if task.kind == "binary" else None
        return decided, ranking
    probs = cls_probs_many(model, samples, task, batch_size=batch_size)
    decided = [decide_from_probs(p, task) for p in probs]
    ranking = probs[:, 1] if task.kind == "binary" else None
    return decided, ranking


def cmd_eval(resolved: dict) -> int:
    _require(resolved, "data", "checkpoint", "out")
    if resolved["decision"] not in ("cls", "semantic"):
        raise CliError("--decision must be cls or semantic")
    task = _load_task(resolved["task"])
    samples = load_samples(resolved["data"])
    missing = [s.id for s in samples if s.label is None]
    if missing:
        raise CliError(f"{len(missing)} samples lack gold labels (first: {missing[0]})")
    model = DualHeadModel.load(resolved["checkpoint"])
    decided, ranking = _eval_scores(model, samples, task, resolved["decision"],
                                    resolved["batch_size"])
    gold = [s.label for s in samples]
    report = {
        "n_samples": len(samples),
        "decision": resolved["decision"],
        "accuracy": accuracy(decided, gold),
        "macro_f1": macro_f1(decided, gold, task.labels),
        "auc": None,
        "provenance": _provenance("eval", resolved),
    }
    if task.kind == "binary" and ranking is not None:
        gold_bits = [1 if g == task.labels[1] else 0 for g in gold]
        if len(set(gold_bits)) == 2:
            report["auc"] = auc(list(ranking), gold_bits)
    fsio.write_json(resolved["out"], report)
    print(f"eval n={report['n_samples']} accuracy={report['accuracy']:.4f} "
          f"macro_f1={report['macro_f1']:.4f} auc={report['auc']} -> {resolved['out']}")
    return EXIT_OK


def cmd_predict(resolved: dict) -> int:
    _require(resolved, "data", "checkpoint", "out")
    task = _load_task(resolved["task"])
    samples = load_samples(resolved["data"])
    model = DualHeadModel.load(resolved["checkpoint"])
    provider = None
    if resolved["provider"] is not None:
        provider = build_provider(resolved["provider"], resolved["kb"],
                                  timeout=resolved["timeout"],
                                  max_retries=resolved["max_retries"])
    preds = predict_many(model, samples, task, provider=provider,
                         n=resolved["n"], fmt=resolved["format"],
                         batch_size=resolved["batch_size"])
    fsio.write_jsonl(resolved["out"], [p.to_json() for p in preds])
    manifest_path = pathlib.Path(resolved["out"]).with_suffix(".manifest.json")
    agree = sum(1 for p in preds if p.heads_agree) / len(preds) if preds else None
    fsio.write_json(manifest_path, {
        "n_samples": len(preds), "heads_agreement": agree,
        "provenance": _provenance("predict", resolved),
    })
    print(f"predicted {len(preds)} samples -> {resolved['out']}")
    return EXIT_OK


def cmd_ablate(resolved: dict) -> int:
    _require(resolved, "train", "val", "test", "out", "provider")
    task = _load_task(resolved["task"])
    dataset = (load_samples(resolved["train"]), load_samples(resolved["val"]),
               load_samples(resolved["test"]))
    provider = build_provider(resolved["provider"], resolved["kb"],
                              timeout=resolved["timeout"],
                              max_retries=resolved["max_retries"])
    cells = [Cell(n=n, format=f, mode=m)
             for n in _ints(resolved["n_values"])
             for f in _strs(resolved["formats"])
             for m in _strs(resolved["modes"])]
    try:
        # mode, knowledge_n, format, and seed are grid axes; run_ablation
        # fills them per cell on top of this base
        tc = TrainConfig(
            batch_size=resolved["batch_size"], max_epochs=resolved["max_epochs"],
            lr_backbone=resolved["lr_backbone"], lr_cls_head=resolved["lr_cls_head"],
            grad_clip_norm=resolved["grad_clip_norm"])
        mc = _model_config(resolved, task)
    except (TrainError, ValueError) as e:
        raise CliError(str(e)) from e
    result = run_ablation(cells, dataset, _ints(resolved["seeds"]), task,
                          provider, model_config=mc, train_config=tc,
                          metric=resolved["metric"], out_dir=resolved["out"],
                          progress=lambda msg: print(msg, flush=True))
    fsio.write_json(pathlib.Path(resolved["out"]) / "provenance.json",
                    _provenance("ablate", resolved))
    for key, s in result.summary.items():
        print(f"{key}: mean={s['mean']:.4f} sd={s['sd']:.4f}")
    return EXIT_OK


def cmd_mock_teacher(resolved: dict) -> int:
    _require(resolved, "kb")
    kb = KnowledgeBase.from_json(fsio.read_json(resolved["kb"]))
    cfg = MockTeacherConfig(kb=kb, fail_rate=resolved["fail_rate"])
    server = start_mock_teacher(cfg, host=resolved["host"], port=resolved["port"])
    print(server.base_url, flush=True)
    try:
        if resolved["max_seconds"] is not None:
            time.sleep(resolved["max_seconds"])
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


# ---- selftest ----

def _selftest_grad_checks():
    rng = np.random.default_rng(0)

    def t(shape, offset=0.0):
        return nc.Tensor(rng.normal(size=shape) + offset, requires_grad=True)

    # weight constants are drawn once, outside the probed functions:
    # grad_check requires the target to be bit-deterministic across calls
    w35 = nc.Tensor(rng.normal(size=(3, 5)))
    w36 = nc.Tensor(rng.normal(size=(3, 6)))
    w43 = nc.Tensor(rng.normal(size=(4, 3)))

    checks = []
    checks.append(("grad:matmul", lambda: nc.grad_check(
        lambda a, b: nc.tsum(nc.matmul(a, b)), [t((3, 4)), t((4, 2))])))
    checks.append(("grad:add", lambda: nc.grad_check(
        lambda a, b: nc.tsum(nc.add(a, b)), [t((3, 4)), t((3, 4))])))
    checks.append(("grad:mul", lambda: nc.grad_check(
        lambda a, b: nc.tsum(nc.mul(a, b)), [t((3, 4)), t((3, 4))])))
    checks.append(("grad:softmax_rows", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.mul(nc.softmax_rows(x), w35)), t((3, 5)))))
    checks.append(("grad:log", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.log(x)), t((3, 4), offset=4.0))))
    checks.append(("grad:exp", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.exp(x)), t((3, 4)))))
    checks.append(("grad:layer_norm", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.mul(nc.layer_norm(x), w36)), t((3, 6)))))
    checks.append(("grad:relu", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.relu(x)), t((3, 4), offset=1.5))))
    checks.append(("grad:embedding_lookup", lambda: nc.grad_check(
        lambda tab: nc.tsum(nc.embedding_lookup(tab, [0, 2, 2, 5])), t((7, 5)))))
    checks.append(("grad:concat_rows", lambda: nc.grad_check(
        lambda a, b: nc.tsum(nc.concat_rows([a, b])), [t((2, 4)), t((3, 4))])))
    checks.append(("grad:slice_rows", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.slice_rows(x, 1, 3)), t((4, 4)))))
    checks.append(("grad:masked_fill", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.masked_fill(x, np.eye(3, dtype=bool), -5.0)), t((3, 3)))))
    checks.append(("grad:tsum", lambda: nc.grad_check(lambda x: nc.tsum(x), t((3, 4)))))
    checks.append(("grad:tmean", lambda: nc.grad_check(lambda x: nc.tmean(x), t((3, 4)))))
    checks.append(("grad:transpose", lambda: nc.grad_check(
        lambda x: nc.tsum(nc.mul(nc.transpose(x), w43)), t((3, 4)))))
    return checks


def _selftest_model_grad():
    task = TaskSpec(kind="binary", labels=["low", "high"], template="statement")
    cfg = ModelConfig(n_classes=2, d_model=4, n_layers=1, n_heads=2, d_ff=8,
                      max_len=64, input_dropout=0.0, hidden_dropout=0.0)
    model = DualHeadModel(cfg, seed=0)
    rng = np.random.default_rng(1)
    samples = [MemeSample(id=f"s{i}", text="ab", image=rng.random((32, 32)),
                          label=task.labels[i % 2]) for i in range(2)]
    batch = model.build_batch(samples, task,
                              targets=[f"This meme is {s.label}" for s in samples])
    names = ["patch_proj.w", "blocks.0.attn.q.0.w", "gen_head.b", "cls_head.fc2.w"]
    tensors = [model.params[n] for n in names]

    def f(*ts):
        loss, _ = model.total_loss(batch, "dual")
        return loss

    report = nc.grad_check(f, tensors)
    if not report.ok:
        raise AssertionError(f"dual loss grad check failed: {report.worst}")


_REFERENCE_MARKUP = (
    "The image shows ⟨Pepe the Frog⟩ [an internet meme symbol often "
    "used by far-right groups], looking at...",
    "...mocking ⟨Ghotis⟩[a colloquial term for people from West Bengal...] "
    "...with ⟨Jio⟩[a telecom provider...]...",
)


def _selftest_parser():
    rng = np.random.default_rng(2)
    words = ["sun", "moon", "arch", "veil", "stone", "ash"]
    for trial in range(30):
        n_items = int(rng.integers(0, 4))
        parts = [str(rng.choice(words))]
        for k in range(n_items):
            parts.append(f"⟨E{k}⟩ [{rng.choice(words)} fact {k}]")
            parts.append(str(rng.choice(words)))
        s = " ".join(parts)
        t = kf.parse(s)
        assert kf.serialize(t) == s, f"round trip failed on {s!r}"
        flipped = kf.convert(t, kf.APPENDED if t.source_format == kf.INLINE else kf.INLINE)
        same = {(i.entity, i.knowledge) for i in t.items()}
        assert {(i.entity, i.knowledge) for i in flipped.items()} == same
    for s in _REFERENCE_MARKUP:
        assert kf.serialize(kf.parse(s)) == s, "reference string round trip failed"


def _selftest_metrics():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(4, 40))
        scores = rng.integers(0, 6, size=n).astype(float)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        brute_num, brute_den = 0.0, 0
        for i in range(n):
            for j in range(n):
                if labels[i] == 1 and labels[j] == 0:
                    brute_den += 1
                    brute_num += (1.0 if scores[i] > scores[j]
                                  else 0.5 if scores[i] == scores[j] else 0.0)
        assert auc(list(scores), list(labels)) == brute_num / brute_den
    r = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert abs(r.t - 2.0 * np.sqrt(3.0)) < 1e-12
    assert abs(r.p - 0.074180) < 1e-3
    assert paired_t_test([1.0, 2.0], [1.0, 2.0]).p == 1.0


def _selftest_templates():
    binary = TaskSpec(kind="binary", labels=["a", "b"], template="yes_no")
    multi = TaskSpec(kind="multilabel", labels=["x", "y", "z"],
                     template="categories", allow_empty=True)
    for task in (binary, multi):
        template = build_template(task)
        for r in template.renderings():
            decoded = template.decode(r.text)
            want = list(r.label) if isinstance(r.label, tuple) else r.label
            assert decoded == want, f"bijection failed on {r.text!r}"


def _selftest_checkpoint(tmp_dir):
    cfg = ModelConfig(n_classes=2, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                      max_len=64)
    model = DualHeadModel(cfg, seed=5)
    path = pathlib.Path(tmp_dir) / "selftest.kid"
    model.save(path)
    loaded = DualHeadModel.load(path)
    for name, p in model.params.items():
        assert np.array_equal(p.data, loaded.params[name].data), name


def selftest_checks(tmp_dir: str):
    checks = list(_selftest_grad_checks())

    def wrap_grad(fn):
        def run():
            report = fn()
            if not report.ok:
                raise AssertionError(
                    f"max rel err {report.max_rel_err:.3g} ({report.worst})")
        return run

    checks = [(name, wrap_grad(fn)) for name, fn in checks]
    checks.append(("grad:dual_loss", _selftest_model_grad))
    checks.append(("parser:round_trip", _selftest_parser))
    checks.append(("metrics:oracles", _selftest_metrics))
    checks.append(("templates:bijection", _selftest_templates))
    checks.append(("checkpoint:round_trip", lambda: _selftest_checkpoint(tmp_dir)))
    return checks


def cmd_selftest(resolved: dict, out=None) -> int:
    import tempfile
    out = sys.stdout if out is None else out
    t0 = time.monotonic()
    failures = 0
    with tempfile.TemporaryDirectory() as tmp:
        for name, fn in selftest_checks(tmp):
            try:
                fn()
                print(f"PASS {name}", file=out)
            except Exception as e:
                failures += 1
                print(f"FAIL {name}: {e}", file=out)
    elapsed = time.monotonic() - t0
    print(f"{'FAILED' if failures else 'OK'} "
          f"({failures} failures, {elapsed:.1f}s)", file=out)
    return EXIT_INTERNAL if failures else EXIT_OK


# ---- wiring ----

_PROVIDER_DEFAULTS = {"provider": None, "kb": None, "timeout": 10.0,
                      "max_retries": 2}

_COMMANDS: dict[str, tuple] = {}


def _register(name: str, fn, defaults: dict, help_text: str):
    _COMMANDS[name] = (fn, defaults, help_text)


_register("synth", cmd_synth, {
    "out": None, "n_entities": 128, "n_train": 2000, "n_val": 200,
    "n_test": 500, "seed": 0,
}, "generate the synthetic entity-knowledge dataset")

_register("augment", cmd_augment, {
    "data": None, "out": None, "n": None, "format": kf.INLINE,
    "max_failure_rate": 0.05, **_PROVIDER_DEFAULTS,
}, "attach knowledge to a dataset through a provider")

_register("train", cmd_train, {
    "train": None, "val": None, "out": None, "task": None,
    **_TRAIN_DEFAULTS, **_MODEL_DEFAULTS,
}, "train a dual-head model")

_register("eval", cmd_eval, {
    "data": None, "checkpoint": None, "out": None, "task": None,
    "decision": "cls", "batch_size": 16,
}, "score a checkpoint on labeled data")

_register("predict", cmd_predict, {
    "data": None, "checkpoint": None, "out": None, "task": None,
    "n": 0, "format": kf.INLINE, "batch_size": 16, **_PROVIDER_DEFAULTS,
}, "two-step inference: inject knowledge, then predict")

_register("ablate", cmd_ablate, {
    "train": None, "val": None, "test": None, "out": None, "task": None,
    "n_values": "0,1", "formats": kf.INLINE, "modes": "dual",
    "seeds": "0,1,2", "metric": None,
    **{k: v for k, v in _TRAIN_DEFAULTS.items() if k not in ("mode", "knowledge_n", "format", "seed")},
    **_MODEL_DEFAULTS, **_PROVIDER_DEFAULTS,
}, "train and score a grid of (N, format, mode) cells")

_register("selftest", cmd_selftest, {}, "run built-in fidelity checks")

_register("mock-teacher", cmd_mock_teacher, {
    "kb": None, "host": "127.0.0.1", "port": 0, "fail_rate": 0.0,
    "max_seconds": None,
}, "serve the bundled mock knowledge teacher over HTTP")

_FLAG_TYPES = {
    "n_entities": int, "n_train": int, "n_val": int, "n_test": int,
    "seed": int, "n": int, "max_retries": int, "batch_size": int,
    "max_epochs": int, "d_model": int, "n_layers": int, "n_heads": int,
    "d_ff": int, "max_len": int, "port": int, "knowledge_n": int,
    "timeout": float, "max_failure_rate": float, "lr_backbone": float,
    "lr_cls_head": float, "grad_clip_norm": float, "input_dropout": float,
    "hidden_dropout": float, "fail_rate": float, "max_seconds": float,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="kid", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (fn, defaults, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON file of option values (flags win)")
        for key in defaults:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, default=None, type=_FLAG_TYPES.get(key, str),
                           dest=key)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_VALIDATION
        fn, defaults, _ = _COMMANDS[args.command]
        config = _load_config_file(getattr(args, "config", None))
        resolved = _merge(args, config, defaults)
        return fn(resolved)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TransportError, HttpStatusError, MalformedTeacherOutput,
            AugmentFailureRateError) as e:
        print(f"external service error: {e}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (ValueError, FileNotFoundError, TrainError, CacheMissError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
