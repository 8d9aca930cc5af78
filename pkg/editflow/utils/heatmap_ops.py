"""Tabulating terminal strings into p̂1(x1 | x0) tables."""
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence as Seq, Tuple

from editflow.schemas.record_schemas import HeatmapRow
from editflow.structures import Sequence, Vocab

OTHER = "other"


def tabulate(
    finals: Dict[Sequence, Counter],
    targets: Seq[Sequence],
    vocab: Vocab,
) -> List[HeatmapRow]:
    """One row per (x0, x1 in targets) plus an `other` row per x0.

    Terminal strings outside `targets` land in `other`, so every x0's probabilities sum to 1.
    """
    rows = []
    for x0, counts in finals.items():
        total = sum(counts.values())
        if total == 0:
            continue
        inside = 0
        for x1 in targets:
            c = counts.get(x1, 0)
            inside += c
            rows.append(HeatmapRow(x0=vocab.decode(x0), x1=vocab.decode(x1), count=c, prob=c / total))
        rows.append(HeatmapRow(x0=vocab.decode(x0), x1=OTHER, count=total - inside, prob=(total - inside) / total))
    return rows


def reference_rows(
    sources: Seq[Sequence],
    target_atoms: Seq[Tuple[Sequence, float]],
    vocab: Vocab,
) -> List[HeatmapRow]:
    """The independent training coupling: pi(x1 | x0) = q(x1) for every x0."""
    return [
        HeatmapRow(x0=vocab.decode(x0), x1=vocab.decode(x1), count=0, prob=p)
        for x0 in sources
        for x1, p in target_atoms
    ]


@dataclass
class HeatmapSummary:
    finals: Dict[Sequence, Counter]
    targets: List[Sequence]
    target_probs: List[float]
    mean_edits: float
    coupling_mean_edits: float
    mean_distance: float = 0.0
    coupling_mean_distance: float = 0.0
    rows: List[HeatmapRow] = field(default_factory=list)

    def conditional(self, x0: Sequence, x1: Sequence) -> float:
        counts = self.finals[x0]
        total = sum(counts.values())
        return counts.get(x1, 0) / total if total else 0.0

    def marginal(self) -> Counter:
        out: Counter = Counter()
        for counts in self.finals.values():
            out.update(counts)
        return out

    def marginal_tv(self) -> float:
        """TV between the pooled terminal strings and q; mass outside q counts fully."""
        marginal = self.marginal()
        total = sum(marginal.values())
        if total == 0:
            return 1.0
        q = dict(zip(self.targets, self.target_probs))
        keys = set(marginal) | set(q)
        return 0.5 * sum(abs(marginal.get(k, 0) / total - q.get(k, 0.0)) for k in keys)
