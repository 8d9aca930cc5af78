"""Toy source/target distributions over short token strings."""
import itertools
from typing import List, Optional, Tuple

import numpy as np

from editflow.schemas.config_schemas import DataConfig
from editflow.structures import ConfigError, Sequence, Vocab

MAX_ATOMS = 200_000


class ToyDataset:
    """A discrete distribution over sequences.

    kinds:
        empty           point mass on the empty sequence
        uniform_length  uniform over all strings of exactly `length` tokens
        uniform_upto    uniform over all strings of at most `length` tokens
        fixed           uniform over `strings`
    """

    def __init__(self, kind: str, vocab: Vocab, length: int = 0, strings: Optional[Tuple[str, ...]] = None):
        self.kind = kind
        self.vocab = vocab
        self.length = length
        self.support: Optional[List[Sequence]] = None
        if kind == "empty":
            self.support = [vocab.empty()]
        elif kind == "fixed":
            if not strings:
                raise ConfigError("Dataset is empty: no strings given")
            self.support = [vocab.encode(s) for s in strings]
        elif kind == "uniform_length":
            self._counts = np.array([0.0] * length + [1.0])
        elif kind == "uniform_upto":
            self._counts = np.array([float(vocab.size) ** k for k in range(length + 1)])
        else:
            raise ConfigError(f"Unknown dataset kind {kind!r}")

    def sample(self, rng: np.random.Generator) -> Sequence:
        if self.support is not None:
            return self.support[int(rng.integers(len(self.support)))]
        k = int(rng.choice(self.length + 1, p=self._counts / self._counts.sum()))
        return (self.vocab.bos_id, *(int(a) for a in rng.integers(self.vocab.size, size=k)))

    def atoms(self) -> List[Tuple[Sequence, float]]:
        """Exact (sequence, probability) list."""
        if self.support is not None:
            out = {}
            for x in self.support:
                out[x] = out.get(x, 0.0) + 1.0 / len(self.support)
            return list(out.items())
        lengths = [k for k in range(self.length + 1) if self._counts[k] > 0]
        total = sum(self.vocab.size ** k for k in lengths)
        if total > MAX_ATOMS:
            raise ConfigError(f"Dataset has {total} strings, too many to enumerate")
        return [
            ((self.vocab.bos_id, *tokens), 1.0 / total)
            for k in lengths
            for tokens in itertools.product(range(self.vocab.size), repeat=k)
        ]

    def token_frequencies(self) -> np.ndarray:
        """Mean token frequencies; uniform for the generated kinds."""
        m = self.vocab.size
        if self.support is None:
            return np.full(m, 1.0 / m)
        counts = np.zeros(m)
        for x in self.support:
            counts += np.bincount(np.asarray(x[1:], dtype=np.int64), minlength=m)[:m]
        if counts.sum() == 0:
            return np.full(m, 1.0 / m)
        return counts / counts.sum()


def vocab_from_config(data: DataConfig) -> Vocab:
    names = tuple(data.token_names) if data.token_names else None
    return Vocab(size=data.vocab_size, names=names)


def build_datasets(data: DataConfig) -> Tuple[ToyDataset, ToyDataset]:
    """(source p, target q)."""
    vocab = vocab_from_config(data)
    source = ToyDataset(data.source, vocab, data.source_length, data.source_strings)
    target = ToyDataset(data.target, vocab, data.target_length, data.target_strings)
    return source, target
