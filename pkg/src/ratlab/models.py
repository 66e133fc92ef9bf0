"""Token tagger and relation classifier sharing one small encoder.

Pipeline: embedding lookup -> (+ perturbation) -> padding zeroed -> windowed
feed-forward mixer ``tanh(concat(window) W1 + b1) W2 + b2`` -> optional
single-head self-attention (residual) -> task head. The tagger scores every
position; the relation classifier mean-pools unmasked positions first.
Perturbations are added to the embedding output, so attacks live in the
continuous embedding space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import Example, LabelSet, micro_f1
from .tensor import Tensor

CHECKPOINT_FORMAT = "ratlab-checkpoint"
CHECKPOINT_VERSION = 1
TASKS = ("ner", "re")


class VocabularyError(IndexError):
    pass


class TaskShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    task: str
    vocab_size: int
    num_labels: int
    dim: int = 16
    hidden: int = 32
    window: int = 3
    attention: bool = False
    init_scale: float = 0.08  # embedding range; weight matrices use Glorot, biases start at 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.dim < 2 or self.hidden < 1 or self.vocab_size < 2 or self.num_labels < 2:
            raise ValueError("need dim >= 2, hidden >= 1, vocab_size >= 2, num_labels >= 2")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd number, got {self.window}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        d, h, K, V, w = config.dim, config.hidden, config.num_labels, config.vocab_size, config.window
        shapes = {
            "embedding": (V, d),
            "mix.w1": (w * d, h),
            "mix.b1": (h,),
            "mix.w2": (h, d),
            "mix.b2": (d,),
        }
        if config.attention:
            shapes.update({"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d)})
        shapes.update({"head.w": (d, K), "head.b": (K,)})
        tensors = {}
        for name, shape in shapes.items():
            if name == "embedding":
                a = config.init_scale
            elif len(shape) == 2:
                a = np.sqrt(6.0 / sum(shape))  # Glorot uniform
            else:
                a = 0.0
            tensors[name] = Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def frozen(self) -> "ModelParams":
        """Same values, no gradient tracking."""
        return ModelParams(self.config, {k: t.detach() for k, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.values, requires_grad=True, name=k) for k, t in self.tensors.items()},
        )

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros(t.shape) if t.grad is None else t.grad) for k, t in self.tensors.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([t.values.reshape(-1) for t in self.tensors.values()])

    def equal(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality of every parameter."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            np.array_equal(a.values, other.tensors[k].values) for k, a in self.tensors.items()
        )


@dataclass
class Batch:
    token_ids: np.ndarray  # int [B, L]
    mask: np.ndarray  # bool [B, L]
    labels: np.ndarray  # int [B, L] tags (ner) or [B] relations (re)
    task: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


def collate(examples: Sequence[Example], task: str) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    L = max(len(e.ids) for e in examples)
    B = len(examples)
    ids = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    if task == "ner":
        labels = np.zeros((B, L), dtype=np.int64)
    else:
        labels = np.zeros(B, dtype=np.int64)
    for i, e in enumerate(examples):
        n = len(e.ids)
        ids[i, :n] = e.ids
        mask[i, :n] = True
        if task == "ner":
            labels[i, :n] = e.labels
        else:
            labels[i] = int(e.labels)
    return Batch(ids, mask, labels, task)


class Forward(NamedTuple):
    loss: Tensor
    probs: Tensor  # [N, K]; N = B*L for ner, B for re
    logits: Tensor
    embeddings: Tensor  # [B, L, d], gradient target for attacks
    row_mask: np.ndarray  # which rows of probs are real


def embed(batch: Batch, params: ModelParams) -> Tensor:
    V = params.config.vocab_size
    ids = batch.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise VocabularyError(f"token id {int(ids.max())} outside vocabulary of size {V}")
    return T.gather(params["embedding"], ids)


def _check_batch(batch: Batch, cfg: ModelConfig) -> None:
    B, L = batch.token_ids.shape
    if batch.task != cfg.task:
        raise TaskShapeError(f"batch is for task {batch.task!r}, model for {cfg.task!r}")
    want = (B, L) if cfg.task == "ner" else (B,)
    if batch.labels.shape != want:
        raise TaskShapeError(f"{cfg.task} labels must have shape {want}, got {batch.labels.shape}")
    if batch.mask.shape != (B, L):
        raise TaskShapeError(f"mask shape {batch.mask.shape} does not match tokens {(B, L)}")


def encode(batch: Batch, params: ModelParams, x: Tensor) -> Tensor:
    cfg = params.config
    B, L = batch.token_ids.shape
    m = np.broadcast_to(batch.mask[:, :, None], (B, L, cfg.dim)).astype(np.float64)
    x = T.mul(x, Tensor(m))
    half = cfg.window // 2
    cols = [T.shift(x, off, axis=1) if off else x for off in range(half, -half - 1, -1)]
    win = T.concat(cols, axis=-1) if len(cols) > 1 else cols[0]
    h = T.tanh(T.add_bias(T.matmul(win, params["mix.w1"]), params["mix.b1"]))
    z = T.add_bias(T.matmul(h, params["mix.w2"]), params["mix.b2"])
    if cfg.attention:
        z = _attention(z, batch.mask, params)
    return z


def _attention(z: Tensor, mask: np.ndarray, params: ModelParams) -> Tensor:
    d = z.shape[-1]
    q = T.matmul(z, params["attn.wq"])
    k = T.matmul(z, params["attn.wk"])
    v = T.matmul(z, params["attn.wv"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
    B, L = mask.shape
    bias = np.where(np.broadcast_to(mask[:, None, :], (B, L, L)), 0.0, -1e9)
    att = T.softmax(T.add(scores, Tensor(bias)), axis=-1)
    return T.add(z, T.matmul(att, v))


def forward(batch: Batch, params: ModelParams, perturbation=None, ledger=None) -> Forward:
    """One model forward pass (charged to ``ledger.fp`` when given)."""
    cfg = params.config
    _check_batch(batch, cfg)
    emb = embed(batch, params)
    x = emb
    if perturbation is not None:
        r = perturbation if isinstance(perturbation, Tensor) else Tensor(perturbation)
        if r.shape != emb.shape:
            raise TaskShapeError(f"perturbation shape {r.shape} differs from embeddings {emb.shape}")
        x = T.add(emb, r)
    z = encode(batch, params, x)
    B, L = batch.token_ids.shape
    K = cfg.num_labels
    if cfg.task == "ner":
        logits = T.reshape(
            T.add_bias(T.matmul(z, params["head.w"]), params["head.b"]), (B * L, K)
        )
        labels = batch.labels.reshape(-1)
        row_mask = batch.mask.reshape(-1)
    else:
        pooled = T.masked_mean(z, batch.mask)
        logits = T.add_bias(T.matmul(pooled, params["head.w"]), params["head.b"])
        labels = batch.labels
        row_mask = np.ones(B, dtype=bool)
    loss = T.softmax_cross_entropy(logits, labels, row_mask)
    probs = T.softmax(logits)
    if ledger is not None:
        ledger.fp += 1
    return Forward(loss, probs, logits, emb, row_mask)


def forward_loss(batch: Batch, params: ModelParams, perturbation=None, ledger=None) -> tuple[Tensor, Tensor]:
    out = forward(batch, params, perturbation, ledger)
    return out.loss, out.probs


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=-1)


def predict(batch: Batch, params: ModelParams, perturbation=None) -> np.ndarray:
    """Label ids: ``[B, L]`` for ner (padding positions undefined), ``[B]`` for re."""
    out = forward(batch, params.frozen(), perturbation)
    pred = argmax_lowest(out.logits.values)
    if params.config.task == "ner":
        return pred.reshape(batch.token_ids.shape)
    return pred


def batches(examples: Sequence[Example], batch_size: int, task: str, order=None):
    idx = range(len(examples)) if order is None else order
    idx = list(idx)
    for i in range(0, len(idx), batch_size):
        yield collate([examples[j] for j in idx[i : i + batch_size]], task)


def decode_predictions(batch: Batch, pred: np.ndarray, labels: LabelSet) -> tuple[list, list]:
    """(pred, gold) as label strings, trimmed to real lengths."""
    if batch.task == "ner":
        P, G = [], []
        for i, n in enumerate(batch.mask.sum(axis=1)):
            P.append(labels.decode(pred[i, :n]))
            G.append(labels.decode(batch.labels[i, :n]))
        return P, G
    return labels.decode(pred), labels.decode(batch.labels)


def score(pred: list, gold: list, task: str) -> dict[str, float]:
    if task == "ner":
        ent = micro_f1(pred, gold, "entity")
        tok = micro_f1(pred, gold, "token")
        n = sum(len(g) for g in gold)
        correct = sum(p == g for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
        return {
            "f1": ent.f1,
            "precision": ent.precision,
            "recall": ent.recall,
            "token_f1": tok.f1,
            "accuracy": correct / n if n else 0.0,
        }
    rel = micro_f1(pred, gold, "sentence")
    n = len(gold)
    return {
        "f1": rel.f1,
        "precision": rel.precision,
        "recall": rel.recall,
        "accuracy": sum(p == g for p, g in zip(pred, gold)) / n if n else 0.0,
    }


def evaluate(params: ModelParams, examples: Sequence[Example], labels: LabelSet, batch_size: int = 64) -> dict[str, float]:
    """Headline ``f1`` is entity-level for ner and sentence-level for re."""
    task = params.config.task
    P, G = [], []
    for batch in batches(examples, batch_size, task):
        p, g = decode_predictions(batch, predict(batch, params), labels)
        P += p
        G += g
    T.new_graph()
    return score(P, G, task)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config_hash: str = "", extra: dict | None = None) -> None:
    """Write an ``.npz`` holding every parameter plus a ``__meta__`` JSON record."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "model": params.config.to_dict(),
        "parameters": [[k, list(t.shape)] for k, t in params],
    }
    if extra:
        meta["extra"] = extra
    arrays = {k: np.asarray(t.values) for k, t in params}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["model"])
        tensors = {}
        for name, shape in meta["parameters"]:
            arr = z[name]
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {shape}")
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(config, tensors), meta
