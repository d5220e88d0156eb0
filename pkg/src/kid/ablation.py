"""Ablation harness: trains one model per (cell, seed) over the
N / format / mode axes and reports mean, sd, and paired significance
against the fixed reference cells."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fsio
from .dataset import TaskSpec
from .infer import cls_probs_many, decide_from_probs, decode_semantic_many
from .knowledge_format import FORMATS, APPENDED, INLINE
from .metrics import accuracy, macro_f1, paired_t_test
from .model import DUAL, GEN_ONLY, MODES, DualHeadModel, ModelConfig
from .provider import build_augmented_dataset
from .train import TrainConfig, train

DUAL_PLUS_KNOWLEDGE = "dual+knowledge"
CELL_MODES = (GEN_ONLY, DUAL, DUAL_PLUS_KNOWLEDGE)
N_VALUES = tuple(range(6))
METRICS = ("accuracy", "macro_f1")


class AblationError(Exception):
    pass


@dataclass(frozen=True)
class Cell:
    """One grid point. dual+knowledge trains exactly like dual but
    guarantees at least one knowledge item is injected."""

    n: int
    format: str = INLINE
    mode: str = DUAL

    def __post_init__(self):
        if self.n not in N_VALUES:
            raise AblationError(f"n must be in {list(N_VALUES)}, got {self.n}")
        if self.format not in FORMATS:
            raise AblationError(f"unknown format {self.format!r}")
        if self.mode not in CELL_MODES:
            raise AblationError(f"unknown mode {self.mode!r}")

    @property
    def effective_n(self) -> int:
        return max(1, self.n) if self.mode == DUAL_PLUS_KNOWLEDGE else self.n

    @property
    def train_mode(self) -> str:
        return DUAL if self.mode == DUAL_PLUS_KNOWLEDGE else self.mode

    def key(self) -> str:
        return f"N{self.n}-{self.format}-{self.mode}"


def _decide_all(model: DualHeadModel, samples, task: TaskSpec, mode: str,
                batch_size: int):
    """gen_only cells carry no trained classification head; they are
    scored by constrained semantic decoding instead."""
    if mode == GEN_ONLY:
        decided, _, _ = decode_semantic_many(model, samples, task,
                                             batch_size=batch_size)
        return decided
    probs = cls_probs_many(model, samples, task, batch_size=batch_size)
    return [decide_from_probs(p, task) for p in probs]


def score_samples(decided, gold, task: TaskSpec, metric: str) -> float:
    if metric == "accuracy":
        return accuracy(decided, gold)
    if metric == "macro_f1":
        return macro_f1(decided, gold, task.labels)
    raise AblationError(f"unknown metric {metric!r}")


def default_metric(task: TaskSpec) -> str:
    return "macro_f1" if task.kind == "multilabel" else "accuracy"


@dataclass
class AblationResult:
    metric: str
    seeds: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)  # {n, format, mode, seed, value}
    summary: dict = field(default_factory=dict)     # key -> {mean, sd, p_vs_reference}

    def values_for(self, key: str) -> list[float]:
        return [r["value"] for r in self.rows if r["cell"] == key]

    def write_csv(self, path) -> None:
        lines = ["n,format,mode,seed,metric,value"]
        for r in self.rows:
            lines.append(f"{r['n']},{r['format']},{r['mode']},{r['seed']},"
                         f"{self.metric},{r['value']!r}")
        for key, s in self.summary.items():
            n, fmt, mode = _split_key(key)
            lines.append(f"{n},{fmt},{mode},mean,{self.metric},{s['mean']!r}")
        fsio.atomic_write_text(path, "\n".join(lines) + "\n")

    def write_summary(self, path) -> None:
        fsio.write_json(path, {"metric": self.metric, "seeds": list(self.seeds),
                               "cells": self.summary})

    def write_plot_data(self, path) -> None:
        lines = ["n,format,mode,mean"]
        for key in sorted(self.summary, key=lambda k: _split_key(k)[0]):
            n, fmt, mode = _split_key(key)
            lines.append(f"{n},{fmt},{mode},{self.summary[key]['mean']!r}")
        fsio.atomic_write_text(path, "\n".join(lines) + "\n")


def _split_key(key: str) -> tuple[int, str, str]:
    n_part, fmt, mode = key.split("-", 2)
    return int(n_part[1:]), fmt, mode


def _reference_keys(cell: Cell, present: set[str]) -> list[str]:
    """Reference cells along each axis: N=0, gen_only, appended."""
    refs = []
    for ref in (replace(cell, n=0),
                replace(cell, mode=GEN_ONLY),
                replace(cell, format=APPENDED)):
        k = ref.key()
        if k != cell.key() and k in present:
            refs.append(k)
    return refs


def run_ablation(cells, dataset, seeds, task: TaskSpec, provider, *,
                 model_config: ModelConfig | None = None,
                 train_config: TrainConfig | None = None,
                 metric: str | None = None,
                 out_dir=None,
                 progress=None) -> AblationResult:
    """Train one model per (cell, seed); every cell sees the identical
    seed set and the identical underlying samples, re-augmented per cell.

    dataset is (train_samples, val_samples, test_samples), un-augmented.
    """
    cells = [c if isinstance(c, Cell) else Cell(**c) for c in cells]
    if not cells:
        raise AblationError("no cells requested")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise AblationError("no seeds requested")
    keys = [c.key() for c in cells]
    if len(set(keys)) != len(keys):
        raise AblationError("duplicate cells in grid")
    train_s, val_s, test_s = dataset
    metric = metric or default_metric(task)
    if metric not in METRICS:
        raise AblationError(f"unknown metric {metric!r}")
    base_tc = train_config or TrainConfig()
    base_mc = model_config or ModelConfig(
        n_classes=len(task.labels), multilabel=(task.kind == "multilabel"))

    result = AblationResult(metric=metric, seeds=seeds)
    gold = [s.label for s in test_s]
    for cell in cells:
        try:
            aug_train, _ = build_augmented_dataset(train_s, provider,
                                                   cell.effective_n, cell.format)
            aug_val, _ = build_augmented_dataset(val_s, provider,
                                                 cell.effective_n, cell.format)
            aug_test, _ = build_augmented_dataset(test_s, provider,
                                                  cell.effective_n, cell.format)
        except Exception as e:
            raise AblationError(f"cell {cell.key()}: augmentation failed: {e}") from e
        for seed in seeds:
            if progress:
                progress(f"cell {cell.key()} seed {seed}")
            try:
                model = DualHeadModel(base_mc, seed=seed)
                tc = replace(base_tc, seed=seed, mode=cell.train_mode,
                             knowledge_n=cell.effective_n, format=cell.format)
                model, _ = train(model, aug_train, aug_val, task, tc)
                decided = _decide_all(model, aug_test, task, cell.train_mode,
                                      base_tc.batch_size)
                value = score_samples(decided, gold, task, metric)
            except Exception as e:
                raise AblationError(f"cell {cell.key()} seed {seed}: {e}") from e
            result.rows.append({"cell": cell.key(), "n": cell.n,
                                "format": cell.format, "mode": cell.mode,
                                "seed": seed, "value": value})

    present = set(keys)
    for cell in cells:
        vals = result.values_for(cell.key())
        entry = {"mean": float(np.mean(vals)),
                 "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                 "p_vs_reference": {}}
        if len(seeds) >= 2:
            for ref_key in _reference_keys(cell, present):
                ref_vals = result.values_for(ref_key)
                entry["p_vs_reference"][ref_key] = paired_t_test(vals, ref_vals).p
        result.summary[cell.key()] = entry

    if out_dir is not None:
        import pathlib
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "grid.csv")
        result.write_summary(out / "summary.json")
        result.write_plot_data(out / "plot_data.csv")
    return result
