"""Alignment space: sequences over vocabulary-plus-blank and the couplings built on them."""
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, List, Literal, Optional, Sequence as Seq, Tuple

import numpy as np

from editflow.structures import (
    AlignmentError,
    EditOp,
    Sequence,
    Vocab,
    delete,
    insert,
    substitute,
)

# Blank cell. Never a token id, lives only in alignment space.
EPS = -1

AlignedSequence = Tuple[int, ...]
Provenance = Literal["optimal", "pad_right", "worst_case", "uniform_x0"]

# (pair, probability) atoms of a discrete coupling
CouplingAtoms = List[Tuple["AlignedPair", float]]


@dataclass(frozen=True)
class AlignedPair:
    z0: AlignedSequence
    z1: AlignedSequence
    provenance: Provenance

    def __post_init__(self):
        if len(self.z0) != len(self.z1):
            raise AlignmentError(f"Aligned sequences differ in length: {len(self.z0)} vs {len(self.z1)}")
        if not self.z0 or self.z0[0] == EPS or self.z0[0] != self.z1[0]:
            raise AlignmentError("Both aligned sequences must start with a shared BOS cell")

    def __len__(self):
        return len(self.z0)

    @property
    def x0(self) -> Sequence:
        return rm_blanks(self.z0)

    @property
    def x1(self) -> Sequence:
        return rm_blanks(self.z1)

    def num_disagreements(self) -> int:
        return sum(a != b for a, b in zip(self.z0, self.z1))

    def swapped(self) -> "AlignedPair":
        return AlignedPair(self.z1, self.z0, self.provenance)


def rm_blanks(z: AlignedSequence, bos_id: Optional[int] = None) -> Sequence:
    """Order-preserving removal of every blank cell."""
    x = tuple(a for a in z if a != EPS)
    if not x:
        raise AlignmentError("Aligned sequence has no BOS cell")
    if bos_id is not None and x[0] != bos_id:
        raise AlignmentError(f"Stripped sequence starts with {x[0]}, expected BOS {bos_id}")
    return x


def align_optimal(x0: Sequence, x1: Sequence) -> AlignedPair:
    """Minimum edit-distance alignment with unit costs.

    The table holds suffix distances and is traced from the front, so ties are
    broken at the earliest cell, preferring substitute (or match), then delete,
    then insert.
    """
    if x0[0] != x1[0]:
        raise AlignmentError("Sequences must share BOS")
    a, b = x0[1:], x1[1:]
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n:
                dist[i][j] = m - j
            elif j == m:
                dist[i][j] = n - i
            else:
                dist[i][j] = min(
                    dist[i + 1][j + 1] + (a[i] != b[j]),
                    dist[i + 1][j] + 1,
                    dist[i][j + 1] + 1,
                )

    z0, z1 = [x0[0]], [x1[0]]
    i = j = 0
    while i < n or j < m:
        if i < n and j < m and dist[i][j] == dist[i + 1][j + 1] + (a[i] != b[j]):
            z0.append(a[i])
            z1.append(b[j])
            i += 1
            j += 1
        elif i < n and dist[i][j] == dist[i + 1][j] + 1:
            z0.append(a[i])
            z1.append(EPS)
            i += 1
        else:
            z0.append(EPS)
            z1.append(b[j])
            j += 1
    return AlignedPair(tuple(z0), tuple(z1), "optimal")


def align_pad_right(x0: Sequence, x1: Sequence) -> AlignedPair:
    if x0[0] != x1[0]:
        raise AlignmentError("Sequences must share BOS")
    size = max(len(x0), len(x1))
    z0 = tuple(x0) + (EPS,) * (size - len(x0))
    z1 = tuple(x1) + (EPS,) * (size - len(x1))
    return AlignedPair(z0, z1, "pad_right")


def align_worst_case(x0: Sequence, x1: Sequence) -> AlignedPair:
    """Delete every token of x0, insert every token of x1."""
    if x0[0] != x1[0]:
        raise AlignmentError("Sequences must share BOS")
    n0, n1 = len(x0) - 1, len(x1) - 1
    z0 = tuple(x0) + (EPS,) * n1
    z1 = (x1[0],) + (EPS,) * n0 + tuple(x1[1:])
    return AlignedPair(z0, z1, "worst_case")


_INS, _DEL, _SUB = 0, 1, 2


def _uniform_x0_counts(num_tokens: int, num_delete: int, num_substitute: int) -> Tuple[int, int]:
    if num_delete < 0 or num_substitute < 0:
        raise AlignmentError("Deletion and substitution counts must be non-negative")
    n_sub = min(num_tokens, num_substitute)
    n_del = num_delete + num_substitute - n_sub
    return n_del, n_sub


def _build_uniform_x0(x1: Sequence, kinds: Seq[int], x0_tokens: Seq[int]) -> AlignedPair:
    ids = x1[1:]
    z0, z1 = [x1[0]], [x1[0]]
    ids_index = 0
    x0_index = 0
    for kind in kinds:
        if kind == _DEL:
            z0.append(int(x0_tokens[x0_index]))
            z1.append(EPS)
            x0_index += 1
        elif kind == _INS:
            z0.append(EPS)
            z1.append(ids[ids_index])
            ids_index += 1
        else:
            z0.append(int(x0_tokens[x0_index]))
            z1.append(ids[ids_index])
            x0_index += 1
            ids_index += 1
    return AlignedPair(tuple(z0), tuple(z1), "uniform_x0")


def align_uniform_x0(
    x1: Sequence,
    vocab: Vocab,
    num_delete: int,
    num_substitute: int,
    rng: np.random.Generator,
    token_probs: Optional[np.ndarray] = None,
) -> AlignedPair:
    """Draw x0 tokens from the vocabulary and shuffle insertion, deletion and substitution cells.

    Substitutions are clipped to len(x1); the clipped amount becomes extra deletions.
    """
    n_del, n_sub = _uniform_x0_counts(len(x1) - 1, num_delete, num_substitute)
    x0_tokens = rng.choice(vocab.size, size=n_del + n_sub, p=token_probs)
    kinds = [_INS] * (len(x1) - 1 - n_sub) + [_DEL] * n_del + [_SUB] * n_sub
    kinds = [kinds[k] for k in rng.permutation(len(kinds))]
    return _build_uniform_x0(x1, kinds, x0_tokens)


def _distinct_arrangements(kinds: List[int]) -> List[Tuple[int, ...]]:
    counts = {k: kinds.count(k) for k in set(kinds)}
    out = []

    def walk(prefix):
        if len(prefix) == len(kinds):
            out.append(tuple(prefix))
            return
        for k in sorted(counts):
            if counts[k]:
                counts[k] -= 1
                prefix.append(k)
                walk(prefix)
                prefix.pop()
                counts[k] += 1

    walk([])
    return out


def uniform_x0_atoms(
    x1: Sequence,
    vocab: Vocab,
    num_delete: int,
    num_substitute: int,
    token_probs: Optional[np.ndarray] = None,
) -> CouplingAtoms:
    """Exact distribution of `align_uniform_x0` for a fixed x1."""
    n_del, n_sub = _uniform_x0_counts(len(x1) - 1, num_delete, num_substitute)
    probs = np.full(vocab.size, 1.0 / vocab.size) if token_probs is None else np.asarray(token_probs, float)
    kinds = [_INS] * (len(x1) - 1 - n_sub) + [_DEL] * n_del + [_SUB] * n_sub
    arrangements = _distinct_arrangements(kinds)
    atoms = []
    for tokens in itertools.product(range(vocab.size), repeat=n_del + n_sub):
        p_tokens = float(np.prod([probs[a] for a in tokens]))
        if p_tokens == 0.0:
            continue
        for arrangement in arrangements:
            atoms.append((_build_uniform_x0(x1, arrangement, tokens), p_tokens / len(arrangements)))
    return atoms


def independent_coupling(
    sources: Iterable[Tuple[Sequence, float]],
    targets: Iterable[Tuple[Sequence, float]],
    align: Callable[[Sequence, Sequence], AlignedPair],
) -> CouplingAtoms:
    """Product coupling of two discrete marginals, aligned deterministically."""
    targets = list(targets)
    return [(align(x0, x1), p0 * p1) for x0, p0 in sources for x1, p1 in targets if p0 * p1 > 0]


def alignment_edits(pair: AlignedPair) -> List[EditOp]:
    """Edits read off an alignment, to be applied one after another from the left.

    Anchors refer to the partially edited sequence at the moment each edit is applied.
    """
    ops = []
    pos = 0  # position of the last kept or produced token
    for a, b in zip(pair.z0[1:], pair.z1[1:]):
        if a == EPS and b == EPS:
            continue
        if a == EPS:
            ops.append(insert(pos, b))
            pos += 1
        elif b == EPS:
            ops.append(delete(pos + 1))
        else:
            if a != b:
                ops.append(substitute(pos + 1, b))
            pos += 1
    return ops
