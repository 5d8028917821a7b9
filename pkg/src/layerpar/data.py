"""Synthetic token tasks standing in for real corpora.

Every dataset is a pure function of its :class:`TaskSpec`; batch order is a
pure function of ``(seed, epoch)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASKS = ("token_classification", "copy_sequence", "tiny_translation")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "token_classification"
    vocab: int = 16
    seq_len: int = 8
    classes: int = 4
    train_size: int = 256
    val_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.vocab < 2 or self.seq_len < 2 or self.classes < 2:
            raise ValueError("vocab, seq_len and classes must be >= 2")


@dataclass
class Batch:
    src: np.ndarray  # [B, s] token ids
    labels: np.ndarray  # [B, t] class ids, -1 = ignored
    tgt_in: np.ndarray | None = None  # [B, t] decoder inputs (encoder-decoder only)

    def __len__(self):
        return self.src.shape[0]

    def take(self, idx):
        return Batch(
            self.src[idx], self.labels[idx], None if self.tgt_in is None else self.tgt_in[idx]
        )


@dataclass
class Dataset:
    spec: TaskSpec
    train: Batch
    val: Batch
    n_classes: int  # output vocabulary of the head
    tgt_vocab: int = 0  # decoder input vocabulary (encoder-decoder only)

    def batches(self, epoch: int, batch_size: int):
        """Shuffled full batches of the training split for ``epoch``."""
        order = np.random.default_rng([self.spec.seed, 1, epoch]).permutation(len(self.train))
        for i in range(len(order) // batch_size):
            yield self.train.take(order[i * batch_size : (i + 1) * batch_size])

    def n_batches(self, batch_size: int) -> int:
        return len(self.train) // batch_size


def _token_classification(spec, rule_rng, rng, n):
    # Tokens in the lower half carry their own class; upper-half tokens take
    # the class of the previous token, so context must be attended to.
    table = rule_rng.integers(0, spec.classes, size=spec.vocab)
    src = rng.integers(0, spec.vocab, size=(n, spec.seq_len))
    prev = np.concatenate([np.zeros((n, 1), dtype=src.dtype), src[:, :-1]], axis=1)
    labels = np.where(src < spec.vocab // 2, table[src], table[prev])
    return Batch(src, labels)


def _copy_sequence(spec, rule_rng, rng, n):
    # [x_1..x_k, SEP, x_1..x_k]: predict the copy after the separator.
    k = spec.seq_len
    x = rng.integers(0, spec.vocab, size=(n, k))
    seq = np.concatenate([x, np.full((n, 1), spec.vocab), x], axis=1)
    src = seq[:, :-1]
    labels = np.full(src.shape, -1)
    labels[:, k:] = seq[:, k + 1 :]
    return Batch(src, labels)


def _tiny_translation(spec, rule_rng, rng, n):
    # Target = word-by-word dictionary lookup, reversed; decoder is teacher-forced.
    lexicon = rule_rng.permutation(spec.vocab)
    src = rng.integers(0, spec.vocab, size=(n, spec.seq_len))
    tgt = lexicon[src][:, ::-1].copy()
    tgt_in = np.concatenate([np.full((n, 1), spec.vocab), tgt[:, :-1]], axis=1)
    return Batch(src, tgt, tgt_in)


_MAKERS = {
    "token_classification": _token_classification,
    "copy_sequence": _copy_sequence,
    "tiny_translation": _tiny_translation,
}


def make_dataset(spec: TaskSpec) -> Dataset:
    make = _MAKERS[spec.kind]
    splits = []
    for split, n in ((0, spec.train_size), (1, spec.val_size)):
        rule_rng = np.random.default_rng([spec.seed, 0])
        splits.append(make(spec, rule_rng, np.random.default_rng([spec.seed, 2, split]), n))
    train, val = splits
    if spec.kind == "token_classification":
        return Dataset(spec, train, val, spec.classes)
    if spec.kind == "copy_sequence":
        # separator token is id ``vocab``
        return Dataset(spec, train, val, spec.vocab)
    return Dataset(spec, train, val, spec.vocab, spec.vocab + 1)


def input_vocab(spec: TaskSpec) -> int:
    """Encoder/decoder-only input vocabulary, including special tokens."""
    return spec.vocab + 1 if spec.kind == "copy_sequence" else spec.vocab


def input_len(spec: TaskSpec) -> int:
    return 2 * spec.seq_len if spec.kind == "copy_sequence" else spec.seq_len
