"""Tab-separated classification corpora and a synthetic keyword task.

Each line is ``label<TAB>space separated tokens``. The vocabulary comes from
the training split only; unseen tokens map to the reserved ``<unk>`` id 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .training import SequenceDataset

UNK = "<unk>"


@dataclass
class Corpus:
    labels: list[str]
    texts: list[list[str]]

    def __len__(self) -> int:
        return len(self.labels)


def parse_tsv_lines(lines: Iterable[str], source: str = "<tsv>") -> Corpus:
    labels, texts = [], []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            raise ValueError(f"{source}:{lineno}: empty line")
        label, sep, text = line.partition("\t")
        tokens = text.split()
        if not sep or not label.strip() or not tokens:
            raise ValueError(f"{source}:{lineno}: expected 'label<TAB>text'")
        labels.append(label.strip())
        texts.append(tokens)
    return Corpus(labels, texts)


def read_tsv(path) -> Corpus:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: dataset file not found")
    with p.open(encoding="utf-8") as fh:
        return parse_tsv_lines(fh, str(p))


def write_tsv(path, corpus: Corpus) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for label, toks in zip(corpus.labels, corpus.texts):
            fh.write(f"{label}\t{' '.join(toks)}\n")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = [UNK] + [t for t in tokens if t != UNK]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpus: Corpus) -> "Vocab":
        # first-seen order keeps ids stable for a given file
        return cls(list(dict.fromkeys(t for toks in corpus.texts for t in toks)))

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, 0) for t in tokens], dtype=np.int64)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        itos = json.loads(Path(path).read_text(encoding="utf-8"))
        if not itos or itos[0] != UNK:
            raise ValueError(f"{path}: not a vocabulary file")
        return cls(itos[1:])


@dataclass
class LabelSet:
    names: list[str]

    @classmethod
    def build(cls, train: Corpus, *others: Corpus) -> "LabelSet":
        """Sorted training labels; other splits must not introduce new ones."""
        names = sorted(set(train.labels))
        for i, c in enumerate(others):
            extra = sorted(set(c.labels) - set(names))
            if extra:
                raise ValueError(f"label set mismatch: split {i + 1} has labels {extra} absent from train")
        return cls(names)

    def ids(self, labels: Sequence[str]) -> np.ndarray:
        index = {n: i for i, n in enumerate(self.names)}
        return np.array([index[l] for l in labels], dtype=np.int64)


def to_dataset(corpus: Corpus, vocab: Vocab, labels: LabelSet) -> SequenceDataset:
    return SequenceDataset([vocab.encode(t) for t in corpus.texts], labels.ids(corpus.labels))


def keyword_task(count: int, seed: int, n_distractors: int = 50, min_len: int = 5,
                 max_len: int = 15, trigger: str = "trigger") -> Corpus:
    """Label ``1`` iff the trigger token occurs in a sentence of random distractors.

    Half of the sentences (in expectation) get the trigger at a uniformly
    random position, so a max-pool over any token detector separates them.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([seed, 7])
    words = [f"w{i}" for i in range(n_distractors)]
    labels, texts = [], []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        toks = [words[i] for i in rng.integers(0, n_distractors, n)]
        positive = bool(rng.random() < 0.5)
        if positive:
            toks[int(rng.integers(0, n))] = trigger
        labels.append("1" if positive else "0")
        texts.append(toks)
    return Corpus(labels, texts)
