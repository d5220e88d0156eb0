"""Joint dual-head training: Adam with per-group learning rates,
global-norm clipping, seeded data order and dropout, best-val selection."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fsio
from . import numcore as nc
from .dataset import TaskSpec
from .infer import cls_probs_many, decide_from_probs, decode_semantic_many, render_target
from .knowledge_format import FORMATS, INLINE
from .metrics import accuracy, macro_f1
from .model import CLS_ONLY, DUAL, GEN_ONLY, MODES, DualHeadModel

# seed-stream tags so shuffling and dropout draw from independent streams
_SHUFFLE_TAG = 101
_DROPOUT_TAG = 202


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 4
    lr_backbone: float = 3e-4
    lr_cls_head: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = DUAL
    knowledge_n: int = 1
    format: str = INLINE
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise TrainError("max_epochs must be >= 1")
        if self.lr_backbone < 0 or self.lr_cls_head < 0:
            raise TrainError("learning rates must be non-negative")
        if self.mode not in MODES:
            raise TrainError(f"unknown mode {self.mode!r}")
        if self.format not in FORMATS:
            raise TrainError(f"unknown format {self.format!r}")
        if self.knowledge_n < 0:
            raise TrainError("knowledge_n must be >= 0")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise TrainError("grad_clip_norm must be positive or None")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "lr_backbone": self.lr_backbone, "lr_cls_head": self.lr_cls_head,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "seed": self.seed, "mode": self.mode,
            "knowledge_n": self.knowledge_n, "format": self.format,
            "grad_clip_norm": self.grad_clip_norm,
        }


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, nc.Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def build_lr_map(params: dict[str, nc.Tensor], config: TrainConfig) -> dict[str, float]:
    """Classification-head tensors get their own learning rate."""
    return {name: config.lr_cls_head if name.startswith("cls_head.") else config.lr_backbone
            for name in params}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale all grads in place so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr_map: dict[str, float], *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              grad_clip_norm: float | None = 1.0) -> AdamState:
    """One bias-corrected Adam update, clipping the global grad norm first."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in {name}")
    clip_global_norm(grads, grad_clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr_map[name] * (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[name].data = params[name].data - update
    return state


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("-inf")
    wall_time: float = 0.0

    def record(self, step: int, parts: dict) -> None:
        self.steps.append({"step": step, "L_gen": parts["L_gen"],
                           "L_cls": parts["L_cls"], "L_total": parts["L_total"]})

    def write_csv(self, path) -> None:
        lines = ["step,L_gen,L_cls,L_total"]
        for rec in self.steps:
            lines.append(f"{rec['step']},{rec['L_gen']!r},{rec['L_cls']!r},{rec['L_total']!r}")
        fsio.atomic_write_text(path, "\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "final_L_total": self.steps[-1]["L_total"] if self.steps else None,
            "val_metrics": self.val_metrics,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val if self.val_metrics else None,
            "wall_time_s": self.wall_time,
        }

    def write_summary(self, path) -> None:
        fsio.write_json(path, self.summary())


def _val_score(model: DualHeadModel, samples, task: TaskSpec, mode: str,
               batch_size: int) -> float:
    """Primary validation metric under the mode's own decision rule.

    gen_only has no trained classification head, so its decisions come
    from constrained semantic decoding; the other modes use the head.
    """
    gold = [s.label for s in samples]
    if mode == GEN_ONLY:
        decided, _, _ = decode_semantic_many(model, samples, task, batch_size=batch_size)
    else:
        probs = cls_probs_many(model, samples, task, batch_size=batch_size)
        decided = [decide_from_probs(p, task) for p in probs]
    if task.kind == "multilabel":
        return macro_f1(decided, gold, task.labels)
    return accuracy(decided, gold)


def _check_aug_presence(samples, config: TrainConfig, split: str) -> None:
    if config.knowledge_n > 0:
        missing = [s.id for s in samples if s.aug_text is None]
        if missing:
            raise TrainError(
                f"knowledge_n={config.knowledge_n} but {len(missing)} {split} "
                f"samples lack aug_text (first: {missing[0]})")


def train(model: DualHeadModel, train_samples, val_samples, task: TaskSpec,
          config: TrainConfig) -> tuple[DualHeadModel, TrainLog]:
    """Run the seeded loop; model ends up holding the best-val weights."""
    if not train_samples:
        raise TrainError("empty training set")
    _check_aug_presence(train_samples, config, "train")
    _check_aug_presence(val_samples, config, "val")

    t0 = time.monotonic()
    rng_shuffle = np.random.default_rng([config.seed, _SHUFFLE_TAG])
    rng_dropout = np.random.default_rng([config.seed, _DROPOUT_TAG])

    needs_targets = config.mode in (GEN_ONLY, DUAL)
    targets = ([render_target(task, s.label) for s in train_samples]
               if needs_targets else [None] * len(train_samples))

    params = model.params
    state = AdamState.for_params(params)
    lr_map = build_lr_map(params, config)
    log = TrainLog()
    best_params: dict[str, np.ndarray] | None = None

    n = len(train_samples)
    step = 0
    for epoch in range(config.max_epochs):
        order = rng_shuffle.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = model.build_batch([train_samples[i] for i in idx], task,
                                      targets=[targets[i] for i in idx])
            for t in params.values():
                t.grad = None
            loss, parts = model.total_loss(batch, config.mode, train=True,
                                           rng=rng_dropout)
            if not np.isfinite(parts["L_total"]):
                raise TrainError(
                    f"diverged: L_total={parts['L_total']} at step {step}")
            nc.backward(loss)
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for name, t in params.items()}
            adam_step(params, grads, state, lr_map,
                      beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                      grad_clip_norm=config.grad_clip_norm)
            log.record(step, parts)
            step += 1

        if val_samples:
            score = _val_score(model, val_samples, task, config.mode,
                               config.batch_size)
            log.val_metrics.append(score)
            # strict improvement keeps the earliest epoch on ties
            if score > log.best_val:
                log.best_val = score
                log.best_epoch = epoch
                best_params = {k: t.data.copy() for k, t in params.items()}

    if best_params is not None:
        for name, arr in best_params.items():
            params[name].data = arr
    log.wall_time = time.monotonic() - t0
    return model, log
