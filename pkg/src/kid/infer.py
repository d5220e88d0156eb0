"""Templates, constrained semantic decoding, and two-step prediction.

The generation head's output space is pinned to a finite set of
template renderings: every candidate string is scored by its sequence
log-probability under teacher forcing and the best rendering's label is
the semantic answer. The final decision always comes from the
classification head; the semantic answer rides along and agreement
between the two is reported, never enforced.

Multi-label tasks enumerate "Categories: ..." subsets up to size 4;
label spaces wider than 12 switch to per-label containment scoring
(each label's singleton rendering against the empty rendering) because
subset enumeration would explode.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import replace

import numpy as np

from . import knowledge_format as kf
from . import numcore as nc
from .dataset import MULTILABEL, N_PATCHES, MemeSample, TaskSpec
from .model import DualHeadModel, build_batch, cls_forward, gen_logits, span_nll
from .provider import ProviderRequest

SUBSET_CAP = 4  # largest enumerated multi-label subset
ENUM_LABEL_LIMIT = 12  # label spaces above this use containment scoring
EMPTY_RENDERING = "Categories: none"


class InferError(ValueError):
    pass


class DecodeError(InferError):
    pass


@dataclasses.dataclass(frozen=True)
class Rendering:
    label: object  # str, or tuple[str, ...] for label sets
    text: str


class Template:
    """One template family bound to a task's label space."""

    def __init__(self, family: str, task: TaskSpec):
        self.family = family
        self.task = task
        self._decode_map: dict[str, object] | None = None

    # rendering -------------------------------------------------------
    def render(self, y) -> str:
        labels = self.task.labels
        if self.family == "categories":
            if not isinstance(y, (list, tuple)):
                raise InferError("categories template renders label lists")
            members = list(y)
            for m in members:
                if m not in labels:
                    raise InferError(f"label {m!r} outside task space")
            if len(set(members)) != len(members):
                raise InferError("duplicate labels in category set")
            ordered = [l for l in labels if l in set(members)]
            return f"Categories: {', '.join(ordered)}" if ordered else EMPTY_RENDERING
        if y not in labels:
            raise InferError(f"label {y!r} outside task space")
        if self.family == "statement":
            return f"This meme is {y}"
        if self.family == "yes_no":
            pos = labels[-1]
            if y == pos:
                return f"Yes, this meme is {pos}"
            return f"No, this meme is not {pos}"
        if self.family == "target":
            return f"The target of this hateful meme is {y}"
        if self.family == "category":
            return f"This meme belongs to the category: {y}"
        raise InferError(f"unknown template family {self.family!r}")

    # enumeration -----------------------------------------------------
    def enumerable(self) -> bool:
        return self.family != "categories" or len(self.task.labels) <= ENUM_LABEL_LIMIT

    def renderings(self) -> list[Rendering]:
        labels = self.task.labels
        if self.family != "categories":
            return [Rendering(label=y, text=self.render(y)) for y in labels]
        if not self.enumerable():
            raise InferError(
                f"label space of {len(labels)} exceeds the enumeration limit {ENUM_LABEL_LIMIT}"
            )
        out: list[Rendering] = []
        if self.task.allow_empty:
            out.append(Rendering(label=(), text=EMPTY_RENDERING))
        for size in range(1, min(SUBSET_CAP, len(labels)) + 1):
            for combo in itertools.combinations(labels, size):
                out.append(Rendering(label=combo, text=self.render(list(combo))))
        return out

    # decoding --------------------------------------------------------
    def decode(self, text: str):
        if self.enumerable():
            if self._decode_map is None:
                self._decode_map = {r.text: r.label for r in self.renderings()}
            if text not in self._decode_map:
                raise DecodeError(f"text matches no rendering: {text!r}")
            got = self._decode_map[text]
            return list(got) if isinstance(got, tuple) else got
        prefix = "Categories: "
        if not text.startswith(prefix):
            raise DecodeError(f"text matches no rendering: {text!r}")
        body = text[len(prefix):]
        if body == "none":
            return []
        members = body.split(", ")
        for m in members:
            if m not in self.task.labels:
                raise DecodeError(f"label {m!r} outside task space")
        return members


_FAMILIES = ("statement", "yes_no", "target", "category", "categories")


def build_template(task: TaskSpec) -> Template:
    family = task.template
    if family not in _FAMILIES:
        raise InferError(f"no template family named {family!r}")
    if family == "categories":
        if task.kind != MULTILABEL:
            raise InferError("categories template needs a multilabel task")
    else:
        if task.kind == MULTILABEL:
            raise InferError(f"{family!r} template cannot address a multilabel task")
        if family == "yes_no" and len(task.labels) != 2:
            raise InferError("yes_no template needs a binary task")
    return Template(family, task)


def render_target(task: TaskSpec, label) -> str:
    return build_template(task).render(label)


# ---- scoring ----

def _candidate_scores(model: DualHeadModel, samples: list[MemeSample],
                      task: TaskSpec, texts: list[str]) -> np.ndarray:
    """(len(samples), len(texts)) sequence log-probs, teacher-forced."""
    scores = np.zeros((len(samples), len(texts)))
    with nc.no_grad():
        for j, text in enumerate(texts):
            batch = build_batch(samples, task, model.config, [text] * len(samples))
            hidden = model.encode(batch)
            for i, h in enumerate(hidden):
                start, stop = batch.target_spans[i]
                rows = nc.slice_rows(h, start - 1, stop - 1)
                tokens = batch.token_ids[i, start - N_PATCHES:stop - N_PATCHES]
                nll = span_nll(gen_logits(model.params, rows), tokens)
                scores[i, j] = -float(nll.data) * (stop - start)
    return scores


def _chunked_scores(model, samples, task, texts, batch_size: int) -> np.ndarray:
    blocks = [_candidate_scores(model, samples[lo:lo + batch_size], task, texts)
              for lo in range(0, len(samples), batch_size)]
    return np.concatenate(blocks, axis=0)


def decode_semantic_many(model: DualHeadModel, samples: list[MemeSample],
                         task: TaskSpec, batch_size: int = 16):
    """Constrained decoding for a batch: (labels, texts, score matrix)."""
    template = build_template(task)
    if template.enumerable():
        rends = template.renderings()
        if not rends:
            raise InferError("no renderings for this task")
        scores = _chunked_scores(model, samples, task,
                                 [r.text for r in rends], batch_size)
        picks = np.argmax(scores, axis=1)  # ties resolve to registration order
        labels = [list(rends[k].label) if isinstance(rends[k].label, tuple)
                  else rends[k].label for k in picks]
        texts = [rends[k].text for k in picks]
        return labels, texts, scores

    # containment fallback: each label scored alone against the empty rendering
    singles = [template.render([l]) for l in task.labels]
    scores = _chunked_scores(model, samples, task,
                             singles + [EMPTY_RENDERING], batch_size)
    labels, texts = [], []
    for i in range(len(samples)):
        none_score = scores[i, -1]
        chosen = [l for j, l in enumerate(task.labels) if scores[i, j] > none_score]
        if not chosen and not task.allow_empty:
            chosen = [task.labels[int(np.argmax(scores[i, :-1]))]]
        labels.append(chosen)
        texts.append(template.render(chosen))
    return labels, texts, scores


def decode_semantic(model: DualHeadModel, sample: MemeSample, task: TaskSpec):
    """(label, rendering text, per-rendering log-probs) for one sample."""
    labels, texts, scores = decode_semantic_many(model, [sample], task)
    return labels[0], texts[0], scores[0]


def cls_probs_many(model: DualHeadModel, samples: list[MemeSample],
                   task: TaskSpec, batch_size: int = 16) -> np.ndarray:
    out = np.zeros((len(samples), model.config.n_classes))
    with nc.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = build_batch(chunk, task, model.config, None)
            hidden = model.encode(batch)
            for i, h in enumerate(hidden):
                probs = cls_forward(model.params, model.config, h,
                                    batch.input_end[i], batch.n_real[i])
                out[lo + i] = probs.data[0]
    return out


def decide_from_probs(probs: np.ndarray, task: TaskSpec,
                      threshold: float = 0.5):
    if task.kind == MULTILABEL:
        chosen = [l for l, p in zip(task.labels, probs) if p >= threshold]
        return chosen
    return task.labels[int(np.argmax(probs))]


# ---- prediction ----

@dataclasses.dataclass
class Prediction:
    id: str
    probs: list[float]
    decided: object  # label, or label list for multilabel
    semantic_text: str
    heads_agree: bool
    semantic_label: object = None  # convenience field, not serialized

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "probs": self.probs,
            "decided": self.decided,
            "semantic_text": self.semantic_text,
            "heads_agree": self.heads_agree,
        }


def _agree(a, b) -> bool:
    if isinstance(a, list) or isinstance(b, list):
        return isinstance(a, list) and isinstance(b, list) and set(a) == set(b)
    return a == b


def augment_for_inference(sample: MemeSample, provider, n: int,
                          fmt: str = kf.INLINE) -> MemeSample:
    """Step one of two-step prediction: obtain the description."""
    if n == 0:
        return replace(sample, aug_text=sample.text)
    if provider is None:
        if sample.aug_text is None:
            raise InferError(f"sample {sample.id}: no provider and no pre-filled aug_text")
        return sample
    req = ProviderRequest(id=sample.id, text=sample.text, image=sample.image,
                          max_items=n)
    resp = provider.augment(req)
    return replace(sample, aug_text=kf.serialize(resp.aug_text, fmt))


def predict_many(model: DualHeadModel, samples: list[MemeSample], task: TaskSpec,
                 provider=None, n: int = 0, fmt: str = kf.INLINE,
                 batch_size: int = 16) -> list[Prediction]:
    prepared = [augment_for_inference(s, provider, n, fmt) for s in samples]
    probs = cls_probs_many(model, prepared, task, batch_size)
    threshold = model.config.decision_threshold
    sem_labels: list = [None] * len(prepared)
    sem_texts: list = [None] * len(prepared)
    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo:lo + batch_size]
        labels, texts, _ = decode_semantic_many(model, chunk, task)
        sem_labels[lo:lo + len(chunk)] = labels
        sem_texts[lo:lo + len(chunk)] = texts
    out = []
    for i, s in enumerate(prepared):
        decided = decide_from_probs(probs[i], task, threshold)
        out.append(Prediction(
            id=s.id,
            probs=[float(p) for p in probs[i]],
            decided=decided,
            semantic_text=sem_texts[i],
            heads_agree=_agree(sem_labels[i], decided),
            semantic_label=sem_labels[i],
        ))
    return out


def predict(model: DualHeadModel, sample: MemeSample, task: TaskSpec,
            provider=None, n: int = 0, fmt: str = kf.INLINE) -> Prediction:
    return predict_many(model, [sample], task, provider, n, fmt)[0]


def heads_agreement(predictions: list[Prediction]) -> float:
    if not predictions:
        raise InferError("heads_agreement needs at least one prediction")
    return sum(1 for p in predictions if p.heads_agree) / len(predictions)
