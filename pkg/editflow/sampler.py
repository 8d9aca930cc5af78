"""CTMC simulation: Euler steps with simultaneous edits, correctors, exact
event-driven simulation, guidance and token sharpening."""
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence as Seq, Tuple

import numpy as np

from editflow.rate_model import ModelParams, RateFn, RatePrediction, predict
from editflow.schemas.config_schemas import SamplerConfig
from editflow.schemas.record_schemas import EditRecord, TraceRecord, TraceStepRecord
from editflow.structures import (
    EditKind,
    EditOp,
    GuidanceError,
    SamplerError,
    Sequence,
    Vocab,
    apply_edit,
    apply_simultaneous,
    delete,
    insert,
    substitute,
)

logger = logging.getLogger(__name__)

MAX_GILLESPIE_STATES = 2000


# --- Sharpening ---

class Sharpening(NamedTuple):
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: Optional[int] = None

    @property
    def is_identity(self) -> bool:
        return self.temperature == 1.0 and self.top_p >= 1.0 and self.top_k is None


def sharpening_at(cfg: SamplerConfig, t: float, reverse: bool = False) -> Sharpening:
    if reverse:
        return Sharpening(cfg.reverse_temperature, cfg.reverse_top_p, cfg.top_k)
    return Sharpening(cfg.temperature_at(t), cfg.top_p, cfg.top_k)


def sharpen(q, temperature: float = 1.0, top_p: float = 1.0, top_k: Optional[int] = None) -> np.ndarray:
    """Temperature, then top-k, then nucleus truncation, then renormalize."""
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-6:
        raise SamplerError("sharpen expects a probability distribution")
    if temperature <= 0:
        raise SamplerError("temperature must be positive")
    if top_k is not None and top_k < 1:
        raise SamplerError("top_k must be at least 1")
    if temperature == 1.0 and top_p >= 1.0 and top_k is None:
        return q.copy()
    out = q.copy()
    if temperature != 1.0:
        pos = out > 0
        logits = np.full_like(out, -np.inf)
        logits[pos] = np.log(out[pos]) / temperature
        logits -= logits[pos].max()
        out = np.where(pos, np.exp(logits), 0.0)
        out /= out.sum()
    order = np.argsort(-out, kind="stable")
    if top_k is not None and top_k < len(out):
        out[order[top_k:]] = 0.0
        out /= out.sum()
    if top_p < 1.0:
        cumulative = np.cumsum(out[order])
        keep = int(np.searchsorted(cumulative, top_p, side="left")) + 1
        out[order[keep:]] = 0.0
        out /= out.sum()
    return out


def sharpen_prediction(pred: RatePrediction, knobs: Sharpening) -> RatePrediction:
    if knobs.is_identity:
        return pred
    out = pred.copy()
    for q in (out.q_ins, out.q_sub):
        for i in range(len(q)):
            q[i] = sharpen(q[i], *knobs)
    return out


# --- Guidance ---

def _geometric(a: np.ndarray, b: np.ndarray, wa: float, wb: float) -> np.ndarray:
    """a^wa * b^wb, zero wherever either factor is zero."""
    both = (a > 0) & (b > 0)
    out = np.zeros(np.broadcast(a, b).shape)
    out[both] = np.exp(wa * np.log(a[both]) + wb * np.log(b[both]))
    return out


def _guided_q(q_u: np.ndarray, q_c: np.ndarray, w: float, lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    raw = _geometric(q_u, q_c, 1.0 - w, w)
    mass = raw.sum(axis=1)
    q = np.where(mass[:, None] > 0, raw / np.where(mass > 0, mass, 1.0)[:, None], q_c)
    if np.any((mass == 0) & (lam > 0)):
        raise GuidanceError("Guided token distribution has no support")
    return q, mass


def apply_cfg(pred_cond: RatePrediction, pred_uncond: RatePrediction, w: float, variant: str) -> RatePrediction:
    """Combine conditional and unconditional rates.

    weighted: lam_u^(1-w) lam_c^w sum_a Q_u^(1-w) Q_c^w
    fixed:    lam_c
    naive:    lam_c^(1+w) lam_u^(-w)
    Tokens always follow Q_u^(1-w) Q_c^w renormalized.

    weighted and fixed reduce to the conditional rate at w = 1; naive does not,
    it gives lam_c^2 / lam_u there and equals the conditional rate only at w = 0.
    """
    if tuple(pred_cond.x) != tuple(pred_uncond.x):
        raise GuidanceError("Predictions refer to different states")
    if variant == "off":
        return pred_cond
    if variant not in ("weighted", "fixed", "naive"):
        raise GuidanceError(f"Unknown guidance variant {variant!r}")
    if w == 1.0 and variant != "naive":
        return pred_cond.copy()

    heads = {}
    for name, q_name in (("lam_ins", "q_ins"), ("lam_del", None), ("lam_sub", "q_sub")):
        lam_c, lam_u = getattr(pred_cond, name), getattr(pred_uncond, name)
        if variant == "fixed" or (variant == "naive" and w == 0.0):
            lam = lam_c.copy()
        elif variant == "naive":
            lam = _geometric(lam_c, lam_u, 1.0 + w, -w)
        else:
            lam = _geometric(lam_u, lam_c, 1.0 - w, w)
        if q_name is not None:
            q, mass = _guided_q(getattr(pred_uncond, q_name), getattr(pred_cond, q_name), w, lam)
            if variant == "weighted":
                lam = lam * mass
            heads[q_name] = q
        heads[name] = lam
    return RatePrediction(x=pred_cond.x, **heads)


def guided_rate_fn(params: ModelParams, cond: Optional[Sequence], cfg: SamplerConfig, reverse: bool = False) -> RateFn:
    """Rate function for sampling, with guidance when a condition is given.

    Reverse models are trained on s = 1 - t and are queried on that clock.
    """
    def clock(t):
        return 1.0 - t if reverse else t

    w = cfg.guidance_weight
    if reverse and cfg.reverse_guidance_weight is not None:
        w = cfg.reverse_guidance_weight
    if cfg.cfg_variant == "off" or not cond:
        return lambda x, t: predict(params, x, clock(t), cond)
    return lambda x, t: apply_cfg(
        predict(params, x, clock(t), cond), predict(params, x, clock(t), None), w, cfg.cfg_variant
    )


# --- Euler stepping ---

@dataclass
class StepResult:
    x: Sequence
    edits: List[EditOp]
    overflow_drops: int = 0


def _sample_tokens(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; u has shape (k, n) and q (n, M)."""
    cdf = np.cumsum(q, axis=1)
    cdf = cdf / cdf[:, -1:]
    return (u[..., None] >= cdf[None]).sum(axis=-1)


def _fire(pred: RatePrediction, k: int, h: float, rng: np.random.Generator):
    """Fire decisions for k independent copies of one state."""
    n = pred.n
    u_ins, u_grp, u_kind, u_tok_ins, u_tok_sub = rng.random((5, k, n))
    fire_ins = u_ins < np.minimum(h * pred.lam_ins, 1.0)
    group = pred.lam_del + pred.lam_sub
    fire_grp = u_grp < np.minimum(h * group, 1.0)
    fire_grp[:, 0] = False
    is_del = u_kind * group < pred.lam_del
    return fire_ins, fire_grp, is_del, u_tok_ins, u_tok_sub


def _collect_edits(
    x: Sequence,
    fire_ins: np.ndarray,
    fire_grp: np.ndarray,
    is_del: np.ndarray,
    tok_ins: np.ndarray,
    tok_sub: np.ndarray,
    max_length: int,
) -> Tuple[List[EditOp], int]:
    """Edits of one copy in anchor order; overflowing insertions dropped from the right."""
    changes = []
    deletions = 0
    for i in np.flatnonzero(fire_grp):
        if is_del[i]:
            changes.append(delete(int(i)))
            deletions += 1
        else:
            changes.append(substitute(int(i), int(tok_sub[i])))
    inserts = [insert(int(i), int(tok_ins[i])) for i in np.flatnonzero(fire_ins)]
    room = max(max_length - (len(x) - 1 - deletions), 0)
    dropped = max(len(inserts) - room, 0)
    if dropped:
        inserts = inserts[:room]
    edits = sorted(changes + inserts, key=lambda op: (op.pos, op.kind is EditKind.INSERT))
    return edits, dropped


def _check_step(t: float, h: float, reverse: bool) -> None:
    if h <= 0:
        raise SamplerError("Step size must be positive")
    if not reverse and t + h > 1.0 + 1e-9:
        raise SamplerError(f"Step from t={t} with h={h} passes t = 1")
    if reverse and t - h < -1e-9:
        raise SamplerError(f"Reverse step from t={t} with h={h} passes t = 0")


def euler_step(
    rates: RateFn,
    x: Sequence,
    t: float,
    h: float,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    reverse: bool = False,
) -> StepResult:
    """One first-order step: every anchor decides independently, edits apply together.

    Forward steps go from t to t + h; reverse steps from t back to t - h, with
    `rates` then being the reverse rate on the forward clock.
    """
    _check_step(t, h, reverse)
    pred = rates(x, t)
    fire_ins, fire_grp, is_del, u_ins, u_sub = _fire(pred, 1, h, rng)
    if not fire_ins.any() and not fire_grp.any():
        return StepResult(x, [])
    pred = sharpen_prediction(pred, sharpening_at(cfg, t, reverse))
    edits, dropped = _collect_edits(
        x,
        fire_ins[0],
        fire_grp[0],
        is_del[0],
        _sample_tokens(pred.q_ins, u_ins)[0],
        _sample_tokens(pred.q_sub, u_sub)[0],
        cfg.max_length,
    )
    return StepResult(apply_simultaneous(x, edits), edits, dropped)


def corrector_step(
    rates: RateFn,
    reverse_rates: RateFn,
    x: Sequence,
    t: float,
    h: float,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Tuple[Sequence, StepResult, StepResult]:
    """Forward to t + h, then back to t with the reverse rate. Leaves p_t invariant to first order."""
    fwd = euler_step(rates, x, t, h, cfg, rng)
    back = euler_step(reverse_rates, fwd.x, t + h, h, cfg, rng, reverse=True)
    return back.x, fwd, back


# --- Traces ---

@dataclass
class TraceStep:
    step: int
    t: float
    edits: List[EditOp]
    x: Sequence
    corrector_edits: List[List[EditOp]] = field(default_factory=list)


@dataclass
class GenerationTrace:
    x0: Sequence
    steps: List[TraceStep] = field(default_factory=list)
    overflow_drops: int = 0

    @property
    def final(self) -> Sequence:
        return self.steps[-1].x if self.steps else self.x0

    @property
    def num_edits(self) -> int:
        return sum(len(s.edits) + sum(len(g) for g in s.corrector_edits) for s in self.steps)

    def replay(self) -> Sequence:
        """Re-apply every recorded edit group from x0."""
        x = self.x0
        for s in self.steps:
            x = apply_simultaneous(x, s.edits)
            for group in s.corrector_edits:
                x = apply_simultaneous(x, group)
        return x

    def to_record(self, index: int, vocab: Optional[Vocab] = None) -> TraceRecord:
        def edits(ops):
            return [EditRecord(**op.to_record()) for op in ops]

        return TraceRecord(
            trace=index,
            x0=list(self.x0),
            steps=[
                TraceStepRecord(
                    step=s.step,
                    t=s.t,
                    edits=edits(s.edits),
                    corrector_edits=[edits(g) for g in s.corrector_edits],
                    sequence=list(s.x),
                )
                for s in self.steps
            ],
            final=list(self.final),
            text=vocab.decode(self.final) if vocab is not None else None,
            overflow_drops=self.overflow_drops,
        )


def simulate(
    rates: RateFn,
    x0: Sequence,
    cfg: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    reverse_rates: Optional[RateFn] = None,
) -> GenerationTrace:
    """Euler simulation from t = 0 to 1 over cfg.steps equal steps.

    Where alpha_t > 0, each step overshoots to t + h(1 + alpha_t) with the
    forward rate and comes back to t + h with the reverse rate.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    h = 1.0 / cfg.steps
    trace = GenerationTrace(tuple(x0))
    x = tuple(x0)
    for k in range(cfg.steps):
        t = k * h
        t_next = 1.0 if k == cfg.steps - 1 else (k + 1) * h
        alpha = cfg.alpha(t)
        if alpha > 0:
            if reverse_rates is None:
                raise SamplerError("alpha_t > 0 needs a reverse rate")
            overshoot = min(h * (1.0 + alpha), 1.0 - t)
            fwd = euler_step(rates, x, t, overshoot, cfg, rng)
            back_h = overshoot - (t_next - t)
            if back_h > 0:
                back = euler_step(reverse_rates, fwd.x, t + overshoot, back_h, cfg, rng, reverse=True)
            else:
                back = StepResult(fwd.x, [])
            x = back.x
            trace.overflow_drops += fwd.overflow_drops + back.overflow_drops
            trace.steps.append(TraceStep(k, t_next, fwd.edits, x, [back.edits]))
        else:
            step = euler_step(rates, x, t, t_next - t, cfg, rng)
            x = step.x
            trace.overflow_drops += step.overflow_drops
            trace.steps.append(TraceStep(k, t_next, step.edits, x))
    if trace.overflow_drops:
        logger.debug("Dropped %d insertions at max_length=%d", trace.overflow_drops, cfg.max_length)
    return trace


def simulate_many(
    rates: RateFn,
    x0s: Seq[Sequence],
    cfg: SamplerConfig,
    reverse_rates: Optional[RateFn] = None,
) -> List[GenerationTrace]:
    """One trace per source with its own rng stream spawned from cfg.seed."""
    streams = np.random.SeedSequence(cfg.seed).spawn(len(x0s))
    return [
        simulate(rates, x0, cfg, np.random.default_rng(stream), reverse_rates)
        for x0, stream in zip(x0s, streams)
    ]


# --- Population simulation ---

def population_step(
    rates: RateFn,
    states: List[Sequence],
    t: float,
    h: float,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    reverse: bool = False,
) -> Tuple[List[Sequence], np.ndarray]:
    """Euler step for many trajectories, evaluating rates once per distinct state.

    Returns the new states and the number of edits each trajectory made.
    """
    _check_step(t, h, reverse)
    groups: Dict[Sequence, List[int]] = {}
    for idx, x in enumerate(states):
        groups.setdefault(x, []).append(idx)
    out = list(states)
    counts = np.zeros(len(states), dtype=np.int64)
    for x in sorted(groups, key=lambda s: (len(s), s)):
        members = groups[x]
        pred = rates(x, t)
        fire_ins, fire_grp, is_del, u_ins, u_sub = _fire(pred, len(members), h, rng)
        fired = fire_ins.any(axis=1) | fire_grp.any(axis=1)
        if not fired.any():
            continue
        pred = sharpen_prediction(pred, sharpening_at(cfg, t, reverse))
        tok_ins = _sample_tokens(pred.q_ins, u_ins)
        tok_sub = _sample_tokens(pred.q_sub, u_sub)
        for j in np.flatnonzero(fired):
            edits, _ = _collect_edits(x, fire_ins[j], fire_grp[j], is_del[j], tok_ins[j], tok_sub[j], cfg.max_length)
            out[members[j]] = apply_simultaneous(x, edits)
            counts[members[j]] = len(edits)
    return out, counts


@dataclass
class PopulationResult:
    final: List[Sequence]
    edit_counts: np.ndarray
    snapshots: Dict[float, Counter] = field(default_factory=dict)

    def distribution(self) -> Counter:
        return Counter(self.final)


def simulate_population(
    rates: RateFn,
    x0s: Seq[Sequence],
    cfg: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    snapshot_times: Iterable[float] = (),
    reverse: bool = False,
) -> PopulationResult:
    """Euler simulation of many trajectories at once (no corrector).

    With `reverse`, `rates` is a reverse rate on the forward clock and the
    population runs from t = 1 back to t = 0; snapshots keep forward times.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    h = 1.0 / cfg.steps
    marks = {min(int(round((1.0 - s if reverse else s) / h)), cfg.steps): s for s in snapshot_times}
    states = [tuple(x) for x in x0s]
    edit_counts = np.zeros(len(states), dtype=np.int64)
    result = PopulationResult(states, edit_counts)
    if 0 in marks:
        result.snapshots[marks[0]] = Counter(states)
    for k in range(cfg.steps):
        if reverse:
            t = 1.0 - k * h
            step = t if k == cfg.steps - 1 else h
        else:
            t = k * h
            step = (1.0 if k == cfg.steps - 1 else (k + 1) * h) - t
        states, counts = population_step(rates, states, t, step, cfg, rng, reverse)
        edit_counts += counts
        if k + 1 in marks:
            result.snapshots[marks[k + 1]] = Counter(states)
    result.final = states
    return result


# --- Exact event-driven simulation ---

# (x, t) -> [(op, rate)] over the legal edits of x
RateOracle = Callable[[Sequence, float], List[Tuple[EditOp, float]]]


def gillespie_simulate(
    oracle: RateOracle,
    x0: Sequence,
    rng: np.random.Generator,
    slice_width: Optional[float] = 1e-3,
    t_end: float = 1.0,
    max_states: int = MAX_GILLESPIE_STATES,
    max_length: Optional[int] = None,
) -> GenerationTrace:
    """Next-reaction simulation with rates frozen over slices of `slice_width`.

    slice_width=None treats the oracle as time-independent.
    """
    if slice_width is not None and slice_width <= 0:
        raise SamplerError("slice_width must be positive")
    trace = GenerationTrace(tuple(x0))
    x = tuple(x0)
    t = 0.0
    seen = {x}
    while t < t_end:
        slice_end = t_end if slice_width is None else min(t + slice_width, t_end)
        events = [(op, r) for op, r in oracle(x, t) if r > 0]
        total = sum(r for _, r in events)
        if total <= 0:
            if slice_width is None:
                break
            t = slice_end
            continue
        tau = rng.exponential(1.0 / total)
        if t + tau >= slice_end:
            t = slice_end
            continue
        t += tau
        rates = np.array([r for _, r in events])
        op = events[int(rng.choice(len(events), p=rates / total))][0]
        x = apply_edit(x, op, max_length)
        seen.add(x)
        if len(seen) > max_states:
            raise SamplerError(f"Gillespie simulation visited more than {max_states} states")
        trace.steps.append(TraceStep(len(trace.steps), t, [op], x))
    return trace
