"""Probability paths over alignment space: schedulers, the factorized mixture path,
the conditional rate, and the localized propagation path."""
import math
from dataclasses import dataclass, field
from typing import List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from scipy.stats import poisson

from editflow.alignment import EPS, AlignedPair, AlignedSequence, rm_blanks
from editflow.structures import EditOp, PathError, Sequence, delete, insert, substitute

SchedulerKind = Literal["linear", "cubic"]

KAPPA_EPS = 1e-12
# logit kappa range covered by time knots and logit time sampling
TIME_LOGIT_SPAN = 6.0


def _check_unit(value, name: str):
    arr = np.asarray(value, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise PathError(f"{name} must lie in [0, 1], got {value}")
    return arr


@dataclass(frozen=True)
class Scheduler:
    """kappa(0) = 0, kappa(1) = 1, nondecreasing. Works on floats and arrays."""
    kind: SchedulerKind = "cubic"

    def kappa(self, t):
        t = _check_unit(t, "t")
        out = t if self.kind == "linear" else t ** 3
        return float(out) if out.ndim == 0 else out

    def kappa_dot(self, t):
        t = _check_unit(t, "t")
        out = np.ones_like(t) if self.kind == "linear" else 3.0 * t ** 2
        return float(out) if out.ndim == 0 else out

    def kappa_inv(self, u):
        u = _check_unit(u, "u")
        out = u if self.kind == "linear" else np.cbrt(u)
        return float(out) if out.ndim == 0 else out

    def rate(self, t):
        """Independent switching rate kappa_dot / (1 - kappa); singular at t = 1."""
        k = self.kappa(t)
        if np.any(np.asarray(k) >= 1.0):
            raise PathError("The mixture rate is singular where kappa(t) = 1")
        return self.kappa_dot(t) / (1.0 - k)


@dataclass(frozen=True)
class ReversedScheduler:
    """Scheduler of the time-reversed path, s = 1 - t: kappa'(s) = 1 - kappa(1 - s)."""
    base: Scheduler

    @property
    def kind(self) -> str:
        return f"reversed_{self.base.kind}"

    def kappa(self, s):
        return 1.0 - self.base.kappa(1.0 - _check_unit(s, "s"))

    def kappa_dot(self, s):
        return self.base.kappa_dot(1.0 - _check_unit(s, "s"))

    def kappa_inv(self, u):
        return 1.0 - self.base.kappa_inv(1.0 - _check_unit(u, "u"))

    def rate(self, s):
        k = self.kappa(s)
        if np.any(np.asarray(k) >= 1.0):
            raise PathError("The mixture rate is singular where kappa(s) = 1")
        return self.kappa_dot(s) / (1.0 - k)


def scheduler_for(kind: str):
    """Scheduler by name; `reversed_<kind>` is the time-reversed one."""
    if kind.startswith("reversed_"):
        return ReversedScheduler(Scheduler(kind[len("reversed_"):]))
    return Scheduler(kind)


def kappa_logit(sched, t: float) -> float:
    """log(kappa / (1 - kappa)) at t, finite at both ends."""
    k = min(max(float(sched.kappa(t)), KAPPA_EPS), 1.0 - KAPPA_EPS)
    return math.log(k / (1.0 - k))


def sample_time(rng: np.random.Generator, delta: float = 1e-3) -> float:
    """t ~ Uniform[0, 1 - delta]; keeps the loss weight finite."""
    return float(rng.uniform(0.0, 1.0 - delta))


def sample_time_logit(rng: np.random.Generator, sched, delta: float = 1e-3, span: float = TIME_LOGIT_SPAN) -> float:
    """t with logit kappa(t) uniform on [-span, min(span, logit kappa(1 - delta))].

    Spreads samples evenly over the switching odds rather than the clock.
    """
    hi = min(span, kappa_logit(sched, 1.0 - delta))
    u = float(rng.uniform(-span, hi))
    t = float(sched.kappa_inv(1.0 / (1.0 + math.exp(-u))))
    return min(max(t, 0.0), 1.0 - delta)


@dataclass
class PathSample:
    t: float
    z0: AlignedSequence
    z1: AlignedSequence
    zt: AlignedSequence
    xt: Sequence
    weights: Optional[np.ndarray]
    cell_to_xpos: Tuple[int, ...]
    cond: Optional[Sequence] = None
    mask: Optional[np.ndarray] = None

    @property
    def disagreeing_cells(self) -> List[int]:
        return [i for i, (a, b) in enumerate(zip(self.zt, self.z1)) if a != b]


def cell_positions(zt: AlignedSequence) -> Tuple[int, ...]:
    """Map aligned cells to positions in rm_blanks(zt); blank cells map to -1."""
    out = []
    pos = -1
    for a in zt:
        if a == EPS:
            out.append(-1)
        else:
            pos += 1
            out.append(pos)
    return tuple(out)


def _finish_sample(pair, t, zt, weights, cond=None, mask=None) -> PathSample:
    zt = tuple(int(a) for a in zt)
    return PathSample(
        t=t,
        z0=pair.z0,
        z1=pair.z1,
        zt=zt,
        xt=rm_blanks(zt),
        weights=weights,
        cell_to_xpos=cell_positions(zt),
        cond=cond,
        mask=mask,
    )


def sample_zt(
    pair: AlignedPair,
    t: float,
    sched,
    rng: np.random.Generator,
    weighted: bool = True,
    cond: Optional[Sequence] = None,
) -> PathSample:
    """Each cell independently takes its z1 value with probability kappa(t), else its z0 value."""
    kappa = sched.kappa(t)
    z0 = np.asarray(pair.z0)
    z1 = np.asarray(pair.z1)
    take = rng.random(len(z0)) < kappa
    take[0] = True
    zt = np.where(take, z1, z0)
    weights = None
    if weighted:
        rate = sched.rate(t)
        weights = np.where(zt != z1, rate, 0.0)
    return _finish_sample(pair, t, zt, weights, cond=cond, mask=take)


class CellRate(NamedTuple):
    cell: int
    target: int
    rate: float


def conditional_rate(zt: AlignedSequence, z1: AlignedSequence, sched, t: float) -> List[CellRate]:
    """One entry per cell still differing from z1, each at rate kappa_dot / (1 - kappa)."""
    rate = sched.rate(t)
    return [CellRate(i, b, rate) for i, (a, b) in enumerate(zip(zt, z1)) if a != b]


def cell_edit(zt: AlignedSequence, z1: AlignedSequence, cell: int, cell_to_xpos: Tuple[int, ...]) -> EditOp:
    """The edit on rm_blanks(zt) that sets `cell` to its z1 value.

    An insertion anchors at the nearest non-blank cell to the left; the BOS cell
    guarantees one exists.
    """
    a, b = zt[cell], z1[cell]
    if a == b:
        raise PathError(f"Cell {cell} already agrees with z1")
    if a == EPS:
        anchor = cell - 1
        while cell_to_xpos[anchor] < 0:
            anchor -= 1
        return insert(cell_to_xpos[anchor], b)
    if b == EPS:
        return delete(cell_to_xpos[cell])
    return substitute(cell_to_xpos[cell], b)


def target_edits(sample: PathSample) -> List[Tuple[EditOp, float]]:
    """(edit, weight) for every disagreeing cell of a weighted path sample."""
    if sample.weights is None:
        raise PathError("Path sample carries no loss weights")
    return [
        (cell_edit(sample.zt, sample.z1, i, sample.cell_to_xpos), float(sample.weights[i]))
        for i in sample.disagreeing_cells
    ]


# --- Localized propagation ---

@dataclass
class PropagationState:
    t: float
    lam_prop: float
    switch_times: np.ndarray
    n_left: np.ndarray
    n_right: np.ndarray
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.switch_times)

    @property
    def active(self) -> np.ndarray:
        return self.switch_times <= self.t

    @property
    def matrix(self) -> np.ndarray:
        """M_t[i, j]: row i's diagonal is active and j lies inside its propagated interval."""
        if self._matrix is None:
            j = np.arange(self.size)
            i = j[:, None]
            left = (j[None, :] < i) & (j[None, :] >= i - self.n_left[:, None])
            right = (j[None, :] > i) & (j[None, :] <= i + self.n_right[:, None])
            diag = j[None, :] == i
            self._matrix = self.active[:, None] & (diag | left | right)
        return self._matrix

    @property
    def mask(self) -> np.ndarray:
        return self.matrix.any(axis=0)


def _poisson_counts(mu: np.ndarray, u: np.ndarray) -> np.ndarray:
    counts = np.where(mu > 0, poisson.ppf(u, np.where(mu > 0, mu, 1.0)), 0.0)
    return np.maximum(counts, 0).astype(np.int64)


def draw_propagation(num: int, size: int, t: float, sched, lam_prop: float, rng: np.random.Generator):
    """Batched two-step sampler. Returns (switch_times, n_left, n_right), each (num, size)."""
    if size < 1:
        raise PathError("Propagation needs at least one cell")
    if lam_prop < 0:
        raise PathError("lambda_prop must be non-negative")
    _check_unit(t, "t")
    switch_times = np.asarray(sched.kappa_inv(rng.random((num, size))), dtype=float)
    elapsed = np.where(switch_times <= t, t - switch_times, 0.0)
    mu = lam_prop * elapsed
    n_left = _poisson_counts(mu, rng.random((num, size)))
    n_right = _poisson_counts(mu, rng.random((num, size)))
    return switch_times, n_left, n_right


def propagation_masks(switch_times: np.ndarray, n_left: np.ndarray, n_right: np.ndarray, t: float) -> np.ndarray:
    """Column-OR of the propagated intervals, batched: (num, size) booleans."""
    num, size = switch_times.shape
    idx = np.arange(size)
    lo = np.maximum(idx[None, :] - n_left, 0)
    hi = np.minimum(idx[None, :] + n_right, size - 1)
    active = switch_times <= t
    # difference array over interval endpoints
    cover = np.zeros((num, size + 1), dtype=np.int64)
    rows = np.repeat(np.arange(num)[:, None], size, axis=1)
    np.add.at(cover, (rows[active], lo[active]), 1)
    np.add.at(cover, (rows[active], hi[active] + 1), -1)
    return np.cumsum(cover[:, :size], axis=1) > 0


def sample_propagation(size: int, t: float, sched, lam_prop: float, rng: np.random.Generator) -> PropagationState:
    switch_times, n_left, n_right = draw_propagation(1, size, t, sched, lam_prop, rng)
    return PropagationState(t, lam_prop, switch_times[0], n_left[0], n_right[0])


def effective_weights(prop: PropagationState, sched, t: float) -> np.ndarray:
    """lambda_indep + lambda_prop * (number of rows with an active neighbour of the cell)."""
    matrix = prop.matrix
    neighbour = np.zeros_like(matrix)
    neighbour[:, 1:] |= matrix[:, :-1]
    neighbour[:, :-1] |= matrix[:, 1:]
    return sched.rate(t) + prop.lam_prop * neighbour.sum(axis=0)


def sample_zt_localized(
    pair: AlignedPair,
    t: float,
    sched,
    lam_prop: float,
    rng: np.random.Generator,
    cond: Optional[Sequence] = None,
) -> PathSample:
    prop = sample_propagation(len(pair), t, sched, lam_prop, rng)
    take = prop.mask.copy()
    take[0] = True
    z0 = np.asarray(pair.z0)
    z1 = np.asarray(pair.z1)
    zt = np.where(take, z1, z0)
    weights = np.where(zt != z1, effective_weights(prop, sched, t), 0.0)
    return _finish_sample(pair, t, zt, weights, cond=cond, mask=take)
