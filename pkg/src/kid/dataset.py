"""Samples, tokens, images, and the synthetic benchmark generator.

Token ids are raw UTF-8 bytes 0..255 plus four specials; images are
32x32 grayscale in [0,1] cut into sixteen 8x8 patches; samples live in
JSONL with unknown fields carried through untouched.

The synthetic task is built so the right answer cannot be read off the
surface input: each entity hides a binary attribute stated only in its
knowledge string, the text carries a binary cue word, and the gold
label is their XOR. Test entities never appear in training, so a model
that ignores injected knowledge cannot beat chance on them.
"""

from __future__ import annotations

import base64
import random
from dataclasses import dataclass, field

import numpy as np

from . import fsio
from .knowledge_format import AugmentedText, KnowledgeItem, PlainSpan, parse, serialize, truncate_to_n

PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260

IMAGE_SIDE = 32
PATCH_SIDE = 8
N_PATCHES = 16
PATCH_DIM = 64


class TokenLimitError(ValueError):
    pass


def tokenize(text: str, max_len: int | None = None) -> list[int]:
    """UTF-8 bytes as ids 0..255. Specials are added at batch assembly."""
    if not isinstance(text, str):
        raise TypeError(f"tokenize expects str, got {type(text).__name__}")
    ids = list(text.encode("utf-8"))
    if max_len is not None and len(ids) > max_len:
        raise TokenLimitError(f"text encodes to {len(ids)} tokens, budget is {max_len}")
    return ids


def detokenize(ids) -> str:
    """Inverse of tokenize; special ids are dropped."""
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def patchify(image: np.ndarray) -> np.ndarray:
    """Cut a 32x32 image into 16 row-major 8x8 patches, each flattened
    row-major to 64 values -> (16, 64)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"image must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    grid = img.reshape(4, PATCH_SIDE, 4, PATCH_SIDE)
    return grid.transpose(0, 2, 1, 3).reshape(N_PATCHES, PATCH_DIM)


# ---- PGM (binary P5, maxval 255) ----


def write_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    body = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).tobytes()
    return f"P5\n{w} {h}\n255\n".encode("ascii") + body


def read_pgm(data: bytes) -> np.ndarray:
    # header: magic, width, height, maxval as whitespace-separated
    # tokens with optional '#' comment lines, then one raster byte each
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (missing P5 magic)")
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        if i >= len(data):
            raise ValueError("truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            fields.append(int(data[i:j]))
            i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    raster = data[i : i + w * h]
    if len(raster) != w * h:
        raise ValueError(f"PGM raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# ---- task and sample records ----


BINARY = "binary"
MULTICLASS = "multiclass"
MULTILABEL = "multilabel"
TASK_KINDS = (BINARY, MULTICLASS, MULTILABEL)


@dataclass
class TaskSpec:
    """Label space and decoding template for one classification task."""

    kind: str
    labels: list[str]
    template: str
    allow_empty: bool = False  # multilabel: empty label set is a legal answer

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if len(self.labels) != len(set(self.labels)):
            raise ValueError("duplicate labels")
        if self.kind == BINARY and len(self.labels) != 2:
            raise ValueError("binary task needs exactly 2 labels")
        if len(self.labels) < 2:
            raise ValueError("need at least 2 labels")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "labels": list(self.labels),
            "template": self.template,
            "allow_empty": self.allow_empty,
        }

    @staticmethod
    def from_json(obj: dict) -> "TaskSpec":
        return TaskSpec(
            kind=obj["kind"],
            labels=list(obj["labels"]),
            template=obj["template"],
            allow_empty=bool(obj.get("allow_empty", False)),
        )


_KNOWN_FIELDS = ("id", "text", "image_b64", "label", "aug_text")


@dataclass
class MemeSample:
    """One item: text plus image, optional gold label, optional
    augmented text filled in by a knowledge provider. Fields we do not
    model ride along in extra and survive JSONL round trips."""

    id: str
    text: str
    image: np.ndarray | None = None
    label: str | list[str] | None = None
    aug_text: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        row = {"id": self.id, "text": self.text}
        if self.image is not None:
            row["image_b64"] = base64.b64encode(write_pgm(self.image)).decode("ascii")
        if self.label is not None:
            row["label"] = self.label
        if self.aug_text is not None:
            row["aug_text"] = self.aug_text
        for k, v in self.extra.items():
            if k in _KNOWN_FIELDS:
                raise ValueError(f"extra field {k!r} collides with a sample field")
            row[k] = v
        return row

    @staticmethod
    def from_json(row: dict) -> "MemeSample":
        image = None
        if row.get("image_b64"):
            image = read_pgm(base64.b64decode(row["image_b64"]))
        return MemeSample(
            id=str(row["id"]),
            text=row["text"],
            image=image,
            label=row.get("label"),
            aug_text=row.get("aug_text"),
            extra={k: v for k, v in row.items() if k not in _KNOWN_FIELDS},
        )


def save_samples(path: str, samples) -> None:
    fsio.write_jsonl(path, [s.to_json() for s in samples])


def load_samples(path: str) -> list[MemeSample]:
    return [MemeSample.from_json(r) for r in fsio.read_jsonl(path)]


def shrink_aug_to_budget(aug_text: str, budget: int) -> str:
    """Fit augmented text into a token budget: drop trailing knowledge
    items first, then cut plain text from the end."""
    if len(tokenize(aug_text)) <= budget:
        return aug_text
    t = parse(aug_text)
    n = t.item_count()
    while n > 0:
        n -= 1
        s = serialize(truncate_to_n(t, n))
        if len(tokenize(s)) <= budget:
            return s
    s = serialize(truncate_to_n(t, 0))
    return bytes(tokenize(s)[:budget]).decode("utf-8", errors="ignore")


# ---- synthetic benchmark ----

# every pool word is 6 bytes and both words of each pair match in
# length, so all generated texts and augmentations have identical
# field positions; detectors can then anchor on absolute positions and
# sequence length carries no label information
DEFAULT_DISTRACTOR_POOL = [
    "ribbon", "kettle", "mirror", "anchor", "candle", "goblet",
    "hammer", "inkpot", "ladder", "mantle", "needle", "trowel",
]

ATTR_WORDS = ("azure", "coral")  # attribute bit 0 / 1
CUE_WORDS = ("alpha", "omega")  # cue bit 0 / 1

SYNTH_LABELS = ["non-harmful", "harmful"]


def synthetic_task() -> TaskSpec:
    return TaskSpec(kind=BINARY, labels=list(SYNTH_LABELS), template="statement")


@dataclass
class SynthConfig:
    n_entities: int = 128
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    seed: int = 0
    distractor_pool: list[str] | None = None
    props_per_sample: int = 4


@dataclass
class KnowledgeBase:
    """Ground truth the teacher knows: per-entity hidden attribute and
    the wording of every knowledge string."""

    entity_attr: dict[str, int]
    prop_house: dict[str, int]

    def has_entity(self, name: str) -> bool:
        return name in self.entity_attr

    def relevant_knowledge(self, entity: str) -> str:
        word = ATTR_WORDS[self.entity_attr[entity]]
        return f"{entity} bears the {word} sigil"

    def prop_knowledge(self, prop: str) -> str:
        return f"{prop} is a stall ware of row {self.prop_house[prop]}"

    def to_json(self) -> dict:
        return {"entity_attr": dict(self.entity_attr), "prop_house": dict(self.prop_house)}

    @staticmethod
    def from_json(obj: dict) -> "KnowledgeBase":
        return KnowledgeBase(
            entity_attr={k: int(v) for k, v in obj["entity_attr"].items()},
            prop_house={k: int(v) for k, v in obj["prop_house"].items()},
        )


# 2+2+4 chars: every entity name is exactly 8 bytes
_SYLL_A = ["ba", "do", "fi", "gu", "ka", "lo", "mi", "nu", "pa", "re", "si", "tu", "va", "zo"]
_SYLL_B = ["brak", "dorn", "fell", "gast", "hild", "korn", "lund", "nest", "sten", "wick"]


def _entity_names(n: int, rng: random.Random) -> list[str]:
    names: list[str] = []
    seen = set()
    while len(names) < n:
        name = (rng.choice(_SYLL_A) + rng.choice(_SYLL_A) + rng.choice(_SYLL_B)).capitalize()
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _glyph(entity_index: int, seed: int, sample_nonce: int) -> np.ndarray:
    # per-entity 8x8 binary pattern blown up to 32x32, with a little
    # per-sample shading; values are snapped to the PGM byte grid so
    # file round trips are lossless
    g = np.random.default_rng([seed, 7001, entity_index])
    base = g.random((8, 8)) < 0.5
    img = np.where(np.kron(base, np.ones((4, 4), dtype=bool)), 0.85, 0.15)
    s = np.random.default_rng([seed, 7003, sample_nonce])
    img = img + s.normal(0.0, 0.02, size=img.shape)
    return np.clip(np.round(img * 255.0) / 255.0, 0.0, 1.0)


def _sample_text(entity: str, props: list[str], cue_word: str) -> str:
    return f"glyph {entity} shows {' '.join(props)} marker {cue_word}"


def parse_sample_text(text: str) -> tuple[str, list[str], str] | None:
    """Recover (entity, props, cue word) from synthetic sample text;
    None if the text does not follow the synthetic grammar."""
    words = text.split()
    if len(words) < 5 or words[0] != "glyph" or words[2] != "shows" or words[-2] != "marker":
        return None
    cue = words[-1]
    if cue not in CUE_WORDS:
        return None
    return words[1], words[3:-2], cue


def build_oracle_augmentation(text: str, kb: KnowledgeBase) -> AugmentedText | None:
    """The synthetic teacher's full answer: the entity's knowledge item
    first (most salient), then one item per prop, all anchored inline."""
    hit = parse_sample_text(text)
    if hit is None:
        return None
    entity, props, cue = hit
    if not kb.has_entity(entity):
        return None
    segments: list = [
        PlainSpan(text="glyph "),
        KnowledgeItem(entity=entity, knowledge=kb.relevant_knowledge(entity), order_index=0),
        PlainSpan(text=" shows"),
    ]
    k = 1
    for p in props:
        segments.append(PlainSpan(text=" "))
        if p in kb.prop_house:
            segments.append(
                KnowledgeItem(entity=p, knowledge=kb.prop_knowledge(p), order_index=k)
            )
            k += 1
        else:
            segments.append(PlainSpan(text=p))
    segments.append(PlainSpan(text=f" marker {cue}"))
    return AugmentedText(segments=segments, source_format="inline")


def _make_samples(
    tag: str,
    count: int,
    entities: list[str],
    kb: KnowledgeBase,
    pool: list[str],
    props_per_sample: int,
    seed: int,
    rng: random.Random,
    name_to_index: dict[str, int],
) -> list[MemeSample]:
    samples = []
    nonce_base = {"train": 0, "val": 1_000_000, "test": 2_000_000}[tag]
    for i in range(count):
        target = i % 2  # exact class balance
        entity = rng.choice(entities)
        attr = kb.entity_attr[entity]
        cue_bit = target ^ attr
        props = rng.sample(pool, props_per_sample)
        text = _sample_text(entity, props, CUE_WORDS[cue_bit])
        image = _glyph(name_to_index[entity], seed, nonce_base + i)
        samples.append(
            MemeSample(
                id=f"{tag}-{i:05d}",
                text=text,
                image=image,
                label=SYNTH_LABELS[target],
                extra={"entity": entity, "cue": CUE_WORDS[cue_bit], "attr": attr},
            )
        )
    return samples


def generate_synthetic(cfg: SynthConfig):
    """Deterministic splits (train, val, test) plus the KnowledgeBase.

    Train and val share one entity set; test entities are disjoint from
    it. Labels alternate, so every split is balanced to within one
    sample. The gold label is XOR(entity attribute, cue bit): with the
    entity's knowledge string injected the label is a deterministic
    function of the visible tokens, and with no injection the test
    labels are independent of everything observable.
    """
    if cfg.n_entities < 4 or cfg.n_entities % 2:
        raise ValueError("n_entities must be even and at least 4")
    pool = list(cfg.distractor_pool or DEFAULT_DISTRACTOR_POOL)
    if cfg.props_per_sample > len(pool):
        raise ValueError("distractor pool smaller than props_per_sample")
    rng = random.Random(cfg.seed)
    names = _entity_names(cfg.n_entities, rng)
    name_to_index = {n: i for i, n in enumerate(names)}
    kb = KnowledgeBase(
        entity_attr={n: rng.randint(0, 1) for n in names},
        prop_house={p: rng.randint(1, 9) for p in pool},
    )
    half = cfg.n_entities // 2
    train_entities, test_entities = names[:half], names[half:]
    train = _make_samples(
        "train", cfg.n_train, train_entities, kb, pool, cfg.props_per_sample, cfg.seed, rng, name_to_index
    )
    val = _make_samples(
        "val", cfg.n_val, train_entities, kb, pool, cfg.props_per_sample, cfg.seed, rng, name_to_index
    )
    test = _make_samples(
        "test", cfg.n_test, test_entities, kb, pool, cfg.props_per_sample, cfg.seed, rng, name_to_index
    )
    return train, val, test, kb
