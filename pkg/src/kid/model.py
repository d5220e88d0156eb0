"""Dual-head multimodal sequence model.

A small decoder-only transformer consumes one causal stream of
[16 image-patch tokens][BOS] text [SEP] augmented-description [SEP]
target [EOS], and feeds two heads: an autoregressive generation head
over the byte vocabulary and an MLP classification head pooled at the
last position of the input span. A mean-pooled linear baseline head is
kept alongside for comparison runs. Everything is built from the
numcore op set so the whole loss is differentiable end to end.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct

import numpy as np

from . import fsio
from . import numcore as nc
from .dataset import (
    BOS,
    EOS,
    N_PATCHES,
    PAD,
    PATCH_DIM,
    SEP,
    VOCAB_SIZE,
    MULTILABEL,
    TaskSpec,
    patchify,
    shrink_aug_to_budget,
    tokenize,
)

CHECKPOINT_MAGIC = b"KIDCKPT1"
MASK_FILL = -1e30

GEN_ONLY = "gen_only"
CLS_ONLY = "cls_only"
DUAL = "dual"
MODES = (GEN_ONLY, CLS_ONLY, DUAL)


class ModelError(ValueError):
    pass


class SequenceOverflowError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    max_len: int = 512
    input_dropout: float = 0.1
    hidden_dropout: float = 0.2
    multilabel: bool = False
    cls_activation: str = "relu"
    use_baseline_head: bool = True
    # multilabel decisions use prob >= this threshold
    decision_threshold: float = 0.5

    def __post_init__(self):
        for field in ("n_classes", "d_model", "n_layers", "n_heads", "d_ff",
                      "vocab_size", "max_len"):
            if getattr(self, field) <= 0:
                raise ModelError(f"{field} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.cls_activation != "relu":
            raise ModelError(f"unsupported cls activation {self.cls_activation!r}")
        for field in ("input_dropout", "hidden_dropout"):
            p = getattr(self, field)
            if not 0.0 <= p < 1.0:
                raise ModelError(f"{field} must be in [0, 1)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(obj) - known
        if bad:
            raise ModelError(f"unknown config fields: {sorted(bad)}")
        return cls(**obj)


# ---- parameters ----

def _param_specs(cfg: ModelConfig):
    """(name, shape, init std) in the fixed manifest order; std None = zeros.

    Weight matrices use fan-in scaling (1/sqrt(rows)): inputs are unit-scale
    after layer norm, so this keeps attention scores and head logits O(1) at
    step zero. The training budget is a few hundred steps, and a smaller init
    leaves attention near-uniform for long enough that the label-bearing
    positions never separate from the distractors.
    """
    d, dh = cfg.d_model, cfg.d_model // cfg.n_heads

    def fan(rows: int) -> float:
        return 1.0 / math.sqrt(rows)

    specs = [
        ("patch_proj.w", (PATCH_DIM, d), fan(PATCH_DIM)),
        ("patch_proj.b", (1, d), None),
        ("token_embed.w", (cfg.vocab_size, d), fan(d)),
        # position at half the token scale so content dominates the stream
        ("pos_embed.w", (cfg.max_len, d), 0.5 * fan(d)),
    ]
    for i in range(cfg.n_layers):
        a = f"blocks.{i}.attn"
        for h in range(cfg.n_heads):
            specs += [
                (f"{a}.q.{h}.w", (d, dh), fan(d)),
                (f"{a}.k.{h}.w", (d, dh), fan(d)),
                (f"{a}.v.{h}.w", (d, dh), fan(d)),
            ]
        for h in range(cfg.n_heads):
            specs.append((f"{a}.out.{h}.w", (dh, d), fan(dh)))
        specs.append((f"{a}.out.b", (1, d), None))
        m = f"blocks.{i}.mlp"
        specs += [
            (f"{m}.fc1.w", (d, cfg.d_ff), fan(d)),
            (f"{m}.fc1.b", (1, cfg.d_ff), None),
            (f"{m}.fc2.w", (cfg.d_ff, d), fan(cfg.d_ff)),
            (f"{m}.fc2.b", (1, d), None),
        ]
    specs += [
        ("gen_head.w", (d, cfg.vocab_size), fan(d)),
        ("gen_head.b", (1, cfg.vocab_size), None),
        ("cls_head.fc1.w", (d, cfg.d_ff), fan(d)),
        ("cls_head.fc1.b", (1, cfg.d_ff), None),
        ("cls_head.fc2.w", (cfg.d_ff, cfg.n_classes), fan(cfg.d_ff)),
        ("cls_head.fc2.b", (1, cfg.n_classes), None),
    ]
    if cfg.use_baseline_head:
        specs += [
            ("baseline_head.w", (d, cfg.n_classes), fan(d)),
            ("baseline_head.b", (1, cfg.n_classes), None),
        ]
    return specs


def init_params(cfg: ModelConfig, seed: int) -> dict[str, nc.Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, nc.Tensor] = {}
    for name, shape, std in _param_specs(cfg):
        if std is None:
            data = np.zeros(shape, dtype=np.float64)
        else:
            data = rng.normal(0.0, std, shape)
        params[name] = nc.Tensor(data, requires_grad=True)
    return params


def param_count(params: dict[str, nc.Tensor]) -> int:
    return sum(t.size for t in params.values())


# ---- batch assembly ----

@dataclasses.dataclass
class Batch:
    ids: list[str]
    patches: list[np.ndarray]  # (16, 64) float64 per sample
    token_ids: np.ndarray  # (B, L-16) int64, PAD-padded
    n_real: list[int]  # non-PAD length in full-sequence coordinates
    input_end: list[int]  # index of the second SEP (cls pooling position)
    target_spans: list[tuple[int, int] | None]  # [start, stop) incl. EOS
    class_targets: np.ndarray | None  # (B, n_classes)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def seq_len(self) -> int:
        return N_PATCHES + self.token_ids.shape[1]


def label_to_vec(task: TaskSpec, label, n_classes: int) -> np.ndarray:
    vec = np.zeros(n_classes, dtype=np.float64)
    if task.kind == MULTILABEL:
        if not isinstance(label, list):
            raise ModelError(f"multilabel target must be a list, got {type(label).__name__}")
        for one in label:
            if one not in task.labels:
                raise ModelError(f"label {one!r} outside task space")
            vec[task.labels.index(one)] = 1.0
    else:
        if label not in task.labels:
            raise ModelError(f"label {label!r} outside task space")
        vec[task.labels.index(label)] = 1.0
    return vec


def build_batch(samples, task: TaskSpec, cfg: ModelConfig,
                targets: list | None = None) -> Batch:
    """Assemble padded model input from samples.

    targets holds one rendered target string per sample (None entries
    mean an empty target span, the inference layout). The augmented
    description is shrunk to fit max_len; text plus target overflowing
    on their own is an error.
    """
    if targets is None:
        targets = [None] * len(samples)
    if len(targets) != len(samples):
        raise ModelError("targets must align with samples")

    rows, patches, n_real, input_end, spans, ids = [], [], [], [], [], []
    class_vecs = []
    for s, tgt in zip(samples, targets):
        text_tok = tokenize(s.text)
        tgt_tok = tokenize(tgt) if tgt else []
        aug_str = s.aug_text if s.aug_text is not None else s.text
        overhead = N_PATCHES + 1 + len(text_tok) + 2 + len(tgt_tok) + 1
        budget = cfg.max_len - overhead
        if budget < 0:
            raise SequenceOverflowError(
                f"sample {s.id}: text and target need {overhead} positions, max_len is {cfg.max_len}"
            )
        aug_tok = tokenize(shrink_aug_to_budget(aug_str, budget))
        toks = [BOS] + text_tok + [SEP] + aug_tok + [SEP] + tgt_tok + [EOS]
        sep2 = N_PATCHES + 2 + len(text_tok) + len(aug_tok)
        rows.append(toks)
        patches.append(patchify(s.image))
        n_real.append(N_PATCHES + len(toks))
        input_end.append(sep2)
        spans.append((sep2 + 1, sep2 + 2 + len(tgt_tok)) if tgt_tok else None)
        ids.append(s.id)
        class_vecs.append(
            None if s.label is None else label_to_vec(task, s.label, cfg.n_classes)
        )

    width = max(len(r) for r in rows)
    token_ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        token_ids[i, :len(r)] = r

    have_all = all(v is not None for v in class_vecs)
    class_targets = np.stack(class_vecs) if have_all and class_vecs else None
    return Batch(ids=ids, patches=patches, token_ids=token_ids, n_real=n_real,
                 input_end=input_end, target_spans=spans, class_targets=class_targets)


# ---- forward pieces ----

def _c(value) -> nc.Tensor:
    return nc.Tensor(np.asarray(value, dtype=np.float64))


def _bcast_rows(b: nc.Tensor, n: int) -> nc.Tensor:
    # (1, d) bias replicated to n rows through the op set
    return nc.matmul(_c(np.ones((n, 1))), b)


def _dropout(x: nc.Tensor, p: float, rng) -> nc.Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64)
    return nc.mul(x, _c(keep / (1.0 - p)))


def _attn_mask(length: int, n_real: int) -> np.ndarray:
    cols = np.arange(length)
    causal = cols[None, :] > cols[:, None]
    return causal | (cols[None, :] >= n_real)


def _block(params, cfg: ModelConfig, prefix: str, x: nc.Tensor,
           mask: np.ndarray, train: bool, rng) -> nc.Tensor:
    h = nc.layer_norm(x)
    dh = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(dh)
    mixed = None
    for head in range(cfg.n_heads):
        q = nc.matmul(h, params[f"{prefix}.attn.q.{head}.w"])
        k = nc.matmul(h, params[f"{prefix}.attn.k.{head}.w"])
        v = nc.matmul(h, params[f"{prefix}.attn.v.{head}.w"])
        scores = nc.mul(nc.matmul(q, nc.transpose(k)), _c(scale))
        scores = nc.masked_fill(scores, mask, MASK_FILL)
        ctx = nc.matmul(nc.softmax_rows(scores), v)
        proj = nc.matmul(ctx, params[f"{prefix}.attn.out.{head}.w"])
        mixed = proj if mixed is None else nc.add(mixed, proj)
    length = x.shape[0]
    attn = nc.add(mixed, _bcast_rows(params[f"{prefix}.attn.out.b"], length))
    if train:
        attn = _dropout(attn, cfg.hidden_dropout, rng)
    x = nc.add(x, attn)

    h2 = nc.layer_norm(x)
    m = nc.add(nc.matmul(h2, params[f"{prefix}.mlp.fc1.w"]),
               _bcast_rows(params[f"{prefix}.mlp.fc1.b"], length))
    m = nc.relu(m)
    m = nc.add(nc.matmul(m, params[f"{prefix}.mlp.fc2.w"]),
               _bcast_rows(params[f"{prefix}.mlp.fc2.b"], length))
    if train:
        m = _dropout(m, cfg.hidden_dropout, rng)
    return nc.add(x, m)


def encode(params, cfg: ModelConfig, batch: Batch, *, train: bool = False,
           rng=None) -> list[nc.Tensor]:
    """Run the backbone; returns one (L, d_model) tensor per sample."""
    if train and rng is None:
        raise ModelError("training forward needs an rng for dropout masks")
    length = batch.seq_len
    if length > cfg.max_len:
        raise SequenceOverflowError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    pos_ids = np.arange(length)
    outs = []
    for i in range(batch.size):
        patch_block = nc.add(
            nc.matmul(_c(batch.patches[i]), params["patch_proj.w"]),
            _bcast_rows(params["patch_proj.b"], N_PATCHES),
        )
        tok_block = nc.embedding_lookup(params["token_embed.w"], batch.token_ids[i])
        x = nc.concat_rows([patch_block, tok_block])
        x = nc.add(x, nc.embedding_lookup(params["pos_embed.w"], pos_ids))
        if train:
            x = _dropout(x, cfg.input_dropout, rng)
        mask = _attn_mask(length, batch.n_real[i])
        for li in range(cfg.n_layers):
            x = _block(params, cfg, f"blocks.{li}", x, mask, train, rng)
        outs.append(nc.layer_norm(x))
    return outs


def _log_softmax_rows(x: nc.Tensor) -> nc.Tensor:
    # numerically safe log-softmax out of primitive ops; the row-max
    # shift is a detached constant, which leaves values and grads exact
    n_cols = x.shape[1]
    shift = _c(np.repeat(x.data.max(axis=1, keepdims=True), n_cols, axis=1))
    shifted = nc.add(x, nc.mul(shift, _c(-1.0)))
    row_sums = nc.matmul(nc.exp(shifted), _c(np.ones((n_cols, 1))))
    lse = nc.matmul(nc.log(row_sums), _c(np.ones((1, n_cols))))
    return nc.add(shifted, nc.mul(lse, _c(-1.0)))


def _mean_scalars(parts: list[nc.Tensor]) -> nc.Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = nc.add(total, p)
    return nc.mul(total, _c(1.0 / len(parts)))


def gen_logits(params, h: nc.Tensor) -> nc.Tensor:
    return nc.add(nc.matmul(h, params["gen_head.w"]),
                  _bcast_rows(params["gen_head.b"], h.shape[0]))


def span_nll(logits: nc.Tensor, token_ids) -> nc.Tensor:
    """Mean negative log-likelihood of token_ids under row-wise logits."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = logits.shape[0]
    if token_ids.shape != (n,):
        raise ModelError(f"need one token per logit row, got {token_ids.shape} for {n} rows")
    onehot = np.zeros(logits.shape, dtype=np.float64)
    onehot[np.arange(n), token_ids] = 1.0
    picked = nc.tsum(nc.mul(_log_softmax_rows(logits), _c(onehot)))
    return nc.mul(picked, _c(-1.0 / n))


def gen_loss(params, cfg: ModelConfig, hidden: list[nc.Tensor], batch: Batch) -> nc.Tensor:
    """Teacher-forced NLL over each sample's target span, then batch mean.

    The span covers the target bytes plus the closing EOS; prompt and
    PAD positions contribute nothing. Logit rows are taken one position
    before each span token (causal prediction).
    """
    per_sample = []
    for i, h in enumerate(hidden):
        span = batch.target_spans[i]
        if span is None:
            raise ModelError(f"sample {batch.ids[i]}: generation loss needs a non-empty target span")
        start, stop = span
        rows = nc.slice_rows(h, start - 1, stop - 1)
        tokens = _full_seq_tokens(batch, i, start, stop)
        per_sample.append(span_nll(gen_logits(params, rows), tokens))
    return _mean_scalars(per_sample)


def _full_seq_tokens(batch: Batch, i: int, start: int, stop: int) -> np.ndarray:
    if start < N_PATCHES:
        raise ModelError("target span overlaps the patch block")
    return batch.token_ids[i, start - N_PATCHES:stop - N_PATCHES]


def cls_forward(params, cfg: ModelConfig, h: nc.Tensor, last_index: int,
                n_real: int) -> nc.Tensor:
    """Class probabilities from the hidden state at last_index.

    Softmax row for single-label tasks; per-class sigmoid (computed as
    two-way softmax pairs) when cfg.multilabel. Shape (1, n_classes).
    """
    if not 0 <= last_index < n_real:
        raise ModelError(f"last_index {last_index} points at a PAD position (n_real {n_real})")
    row = nc.slice_rows(h, last_index, last_index + 1)
    z = nc.relu(nc.add(nc.matmul(row, params["cls_head.fc1.w"]), params["cls_head.fc1.b"]))
    logits = nc.add(nc.matmul(z, params["cls_head.fc2.w"]), params["cls_head.fc2.b"])
    if not cfg.multilabel:
        return nc.softmax_rows(logits)
    pairs = nc.concat_rows([logits, _c(np.zeros((1, cfg.n_classes)))])
    sig = nc.softmax_rows(nc.transpose(pairs))  # (C, 2): [sigma(z), 1-sigma(z)]
    return nc.slice_rows(nc.transpose(sig), 0, 1)


def cls_loss(probs: nc.Tensor, target_vec: np.ndarray, multilabel: bool) -> nc.Tensor:
    y = np.asarray(target_vec, dtype=np.float64).reshape(1, -1)
    if y.shape != probs.shape:
        raise ModelError(f"target shape {y.shape} does not match probs {probs.shape}")
    if not multilabel:
        return nc.mul(nc.tsum(nc.mul(nc.log(probs), _c(y))), _c(-1.0))
    n = y.shape[1]
    comp = nc.add(nc.mul(probs, _c(-1.0)), _c(1.0))
    hit = nc.tsum(nc.mul(nc.log(probs), _c(y)))
    miss = nc.tsum(nc.mul(nc.log(comp), _c(1.0 - y)))
    return nc.mul(nc.add(hit, miss), _c(-1.0 / n))


def batch_cls_loss(params, cfg: ModelConfig, hidden: list[nc.Tensor], batch: Batch) -> nc.Tensor:
    if batch.class_targets is None:
        raise ModelError("classification loss needs class targets on every sample")
    per_sample = []
    for i, h in enumerate(hidden):
        probs = cls_forward(params, cfg, h, batch.input_end[i], batch.n_real[i])
        per_sample.append(cls_loss(probs, batch.class_targets[i], cfg.multilabel))
    return _mean_scalars(per_sample)


def total_loss(params, cfg: ModelConfig, batch: Batch, mode: str, *,
               train: bool = False, rng=None):
    """Mode-selected loss. Returns (loss tensor, {"L_gen", "L_cls", "L_total"}).

    dual is the unweighted sum of both heads' losses; parts not used by
    the mode are reported as 0.0.
    """
    if mode not in MODES:
        raise ModelError(f"unknown mode {mode!r}, expected one of {MODES}")
    hidden = encode(params, cfg, batch, train=train, rng=rng)
    l_gen = gen_loss(params, cfg, hidden, batch) if mode in (GEN_ONLY, DUAL) else None
    l_cls = batch_cls_loss(params, cfg, hidden, batch) if mode in (CLS_ONLY, DUAL) else None
    if mode == DUAL:
        loss = nc.add(l_gen, l_cls)
    else:
        loss = l_gen if mode == GEN_ONLY else l_cls
    parts = {
        "L_gen": float(l_gen.data) if l_gen is not None else 0.0,
        "L_cls": float(l_cls.data) if l_cls is not None else 0.0,
        "L_total": float(loss.data),
    }
    return loss, parts


def baseline_forward(params, cfg: ModelConfig, h: nc.Tensor, n_real: int) -> nc.Tensor:
    """Mean-pool the non-PAD rows, then a linear head plus softmax."""
    if not cfg.use_baseline_head:
        raise ModelError("baseline head is not configured on this model")
    pooled = nc.mul(nc.matmul(_c(np.ones((1, n_real))), nc.slice_rows(h, 0, n_real)),
                    _c(1.0 / n_real))
    logits = nc.add(nc.matmul(pooled, params["baseline_head.w"]), params["baseline_head.b"])
    return nc.softmax_rows(logits)


# ---- checkpoint container ----

def save_checkpoint(path: str, params: dict[str, nc.Tensor], cfg: ModelConfig,
                    seed: int) -> None:
    manifest = {name: list(t.shape) for name, t in params.items()}
    header = json.dumps(
        {"config": cfg.to_json(), "manifest": manifest, "seed": seed},
        ensure_ascii=True,
    ).encode("ascii")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<Q", len(header))
    blob += header
    for name in manifest:
        blob += np.ascontiguousarray(params[name].data, dtype="<f8").tobytes()
    fsio.atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path: str):
    """Returns (params, config, seed); validates magic, shapes and size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (header_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + header_len].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    off += header_len
    cfg = ModelConfig.from_json(header["config"])
    manifest = header["manifest"]
    expected = {name: list(shape) for name, shape, _ in _param_specs(cfg)}
    if {k: v for k, v in manifest.items()} != expected:
        raise CheckpointError(f"{path}: manifest does not match the config's parameter set")
    params: dict[str, nc.Tensor] = {}
    for name, shape in manifest.items():
        count = int(np.prod(shape))
        nbytes = count * 8
        if len(raw) < off + nbytes:
            raise CheckpointError(f"{path}: truncated tensor data at {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params[name] = nc.Tensor(arr.astype(np.float64), requires_grad=True)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after tensor data")
    return params, cfg, int(header["seed"])


class DualHeadModel:
    """Parameter bundle plus convenience methods over the functional API."""

    def __init__(self, config: ModelConfig, seed: int = 0, params=None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)

    def param_count(self) -> int:
        return param_count(self.params)

    def build_batch(self, samples, task: TaskSpec, targets=None) -> Batch:
        return build_batch(samples, task, self.config, targets)

    def encode(self, batch: Batch, *, train: bool = False, rng=None):
        return encode(self.params, self.config, batch, train=train, rng=rng)

    def gen_loss(self, hidden, batch: Batch) -> nc.Tensor:
        return gen_loss(self.params, self.config, hidden, batch)

    def cls_forward(self, h, last_index: int, n_real: int) -> nc.Tensor:
        return cls_forward(self.params, self.config, h, last_index, n_real)

    def total_loss(self, batch: Batch, mode: str, *, train: bool = False, rng=None):
        return total_loss(self.params, self.config, batch, mode, train=train, rng=rng)

    def baseline_forward(self, h, n_real: int) -> nc.Tensor:
        return baseline_forward(self.params, self.config, h, n_real)

    def save(self, path: str) -> None:
        save_checkpoint(path, self.params, self.config, self.seed)

    @classmethod
    def load(cls, path: str) -> "DualHeadModel":
        params, cfg, seed = load_checkpoint(path)
        return cls(cfg, seed=seed, params=params)
