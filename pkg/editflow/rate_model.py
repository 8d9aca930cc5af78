"""Parametric edit rates u_t(. | x_t) with analytic gradients.

Two desk-scale parameterizations share one output head: per position, three
rate logits (insert, delete, substitute) mapped through a clamped exponential,
then M insertion-token logits and M substitution-token logits mapped through a
masked softmax. With `rate_scaling` set, every rate is the exponential times the
scheduler rate kappa_dot / (1 - kappa) at t.
"""
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from editflow.paths import TIME_LOGIT_SPAN, kappa_logit, scheduler_for
from editflow.schemas.config_schemas import ModelSpec
from editflow.structures import (
    EditError,
    EditKind,
    EditOp,
    ModelError,
    PathError,
    Sequence,
    Vocab,
    enumerate_edits,
)

logger = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
MAX_TABULAR_VALUES = 50_000_000

# column layout of one position's logits
_INS, _DEL, _SUB = 0, 1, 2
_HEAD = 3


@dataclass
class RatePrediction:
    """Model output over one x_t of length n (BOS included).

    lam_del[0] and lam_sub[0] are always 0. q_sub[i] puts no mass on x_t[i].
    """
    x: Sequence
    lam_ins: np.ndarray
    lam_del: np.ndarray
    lam_sub: np.ndarray
    q_ins: np.ndarray
    q_sub: np.ndarray

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def vocab_size(self) -> int:
        return self.q_ins.shape[1]

    def exit_rate(self) -> float:
        return float(self.lam_ins.sum() + self.lam_del.sum() + self.lam_sub.sum())

    def zeros_like(self) -> "RatePrediction":
        return RatePrediction(
            self.x,
            np.zeros_like(self.lam_ins),
            np.zeros_like(self.lam_del),
            np.zeros_like(self.lam_sub),
            np.zeros_like(self.q_ins),
            np.zeros_like(self.q_sub),
        )

    def copy(self) -> "RatePrediction":
        return RatePrediction(
            self.x,
            self.lam_ins.copy(),
            self.lam_del.copy(),
            self.lam_sub.copy(),
            self.q_ins.copy(),
            self.q_sub.copy(),
        )


def rate_of_edit(pred: RatePrediction, op: EditOp) -> float:
    n, m = pred.n, pred.vocab_size
    if op.kind is EditKind.INSERT:
        if not 0 <= op.pos < n or op.token is None or not 0 <= op.token < m:
            raise ModelError(f"Illegal insertion {op} for a length-{n} state")
        return float(pred.lam_ins[op.pos] * pred.q_ins[op.pos, op.token])
    if not 1 <= op.pos < n:
        raise ModelError(f"Illegal {op.kind.value} anchor {op.pos} for a length-{n} state")
    if op.kind is EditKind.DELETE:
        return float(pred.lam_del[op.pos])
    if op.token is None or not 0 <= op.token < m or op.token == pred.x[op.pos]:
        raise ModelError(f"Illegal substitution {op} of token {pred.x[op.pos]}")
    return float(pred.lam_sub[op.pos] * pred.q_sub[op.pos, op.token])


def edit_rates(pred: RatePrediction, vocab: Vocab, max_length: Optional[int] = None) -> List[Tuple[EditOp, Sequence, float]]:
    """(op, neighbor, rate) for every legal edit of pred.x."""
    return [(op, y, rate_of_edit(pred, op)) for op, y in enumerate_edits(pred.x, vocab, max_length)]


# --- Output head ---

def _rate_masks(spec: ModelSpec, x: Sequence) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(x)
    ins = np.full(n, 1.0 if n - 1 < spec.max_length else 0.0)
    dele = np.ones(n)
    dele[0] = 0.0
    sub = dele.copy() if spec.vocab_size > 1 else np.zeros(n)
    if spec.restriction == "substitution_only":
        ins[:] = 0.0
        dele[:] = 0.0
    elif spec.restriction == "insert_only":
        dele[:] = 0.0
        sub[:] = 0.0
    elif spec.restriction == "append_only":
        ins[:-1] = 0.0
        dele[:] = 0.0
        sub[:] = 0.0
    elif spec.restriction == "mask":
        ins[:] = 0.0
        dele[:] = 0.0
        sub *= np.asarray(x) == spec.mask_token
    return ins, dele, sub


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row softmax over allowed entries. Rows with nothing allowed become uniform."""
    empty = ~mask.any(axis=1)
    z = np.where(mask, logits, -np.inf)
    top = np.where(empty, 0.0, z.max(axis=1))
    e = np.where(mask, np.exp(z - top[:, None]), 0.0)
    total = e.sum(axis=1, keepdims=True)
    q = np.where(empty[:, None], 1.0 / mask.shape[1], e / np.where(total > 0, total, 1.0))
    return q, empty


def _sub_mask(x: Sequence, m: int) -> np.ndarray:
    mask = np.ones((len(x), m), dtype=bool)
    for i, a in enumerate(x[1:], start=1):
        mask[i, a] = False
    return mask


def head_forward(spec: ModelSpec, x: Sequence, logits: np.ndarray, scale: float = 1.0) -> RatePrediction:
    m = spec.vocab_size
    ins, dele, sub = _rate_masks(spec, x)
    lam = scale * np.exp(np.clip(logits[:, :_HEAD], -LOGIT_CLAMP, LOGIT_CLAMP))
    q_ins, _ = _masked_softmax(logits[:, _HEAD:_HEAD + m], np.ones((len(x), m), dtype=bool))
    q_sub, _ = _masked_softmax(logits[:, _HEAD + m:], _sub_mask(x, m))
    return RatePrediction(
        x=tuple(x),
        lam_ins=lam[:, _INS] * ins,
        lam_del=lam[:, _DEL] * dele,
        lam_sub=lam[:, _SUB] * sub,
        q_ins=q_ins,
        q_sub=q_sub,
    )


def head_backward(spec: ModelSpec, x: Sequence, logits: np.ndarray, cot: RatePrediction, scale: float = 1.0) -> np.ndarray:
    """Vector-Jacobian product of head_forward: cotangent on the outputs -> d logits."""
    m = spec.vocab_size
    pred = head_forward(spec, x, logits, scale)
    raw = logits[:, :_HEAD]
    inside = (raw > -LOGIT_CLAMP) & (raw < LOGIT_CLAMP)
    d = np.zeros_like(logits)
    lam = np.stack([pred.lam_ins, pred.lam_del, pred.lam_sub], axis=1)
    g_lam = np.stack([cot.lam_ins, cot.lam_del, cot.lam_sub], axis=1)
    d[:, :_HEAD] = g_lam * lam * inside
    for cols, q, g, mask in (
        (slice(_HEAD, _HEAD + m), pred.q_ins, cot.q_ins, np.ones((len(x), m), dtype=bool)),
        (slice(_HEAD + m, _HEAD + 2 * m), pred.q_sub, cot.q_sub, _sub_mask(x, m)),
    ):
        empty = ~mask.any(axis=1)
        inner = (g * q).sum(axis=1, keepdims=True)
        d[:, cols] = np.where(empty[:, None], 0.0, q * (g - inner))
    return d


# --- Parameterizations ---

class TabularRateModel:
    """A free logit block per (state, time bucket) over every sequence up to max_length."""
    kind = "tabular"

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.vocab = Vocab(size=spec.vocab_size)
        self.width = _HEAD + 2 * spec.vocab_size
        total_states = sum(spec.vocab_size ** k for k in range(spec.max_length + 1))
        self.states: List[Sequence] = []
        self.offsets: Dict[Sequence, int] = {}
        offset = 0
        for length in range(spec.max_length + 1):
            for tokens in itertools.product(range(spec.vocab_size), repeat=length):
                x = (self.vocab.bos_id, *tokens)
                self.states.append(x)
                self.offsets[x] = offset
                offset += len(x) * self.width
                if offset * spec.num_buckets > MAX_TABULAR_VALUES:
                    raise ModelError(
                        f"Tabular model over {total_states} states is too large; lower max_length or use the featurized kind"
                    )
        self.per_bucket = offset
        self.num_values = offset * spec.num_buckets
        self.sched = scheduler_for(spec.rate_scaling) if spec.rate_scaling else None

    def bucket(self, t: float) -> int:
        return min(int(t * self.spec.num_buckets), self.spec.num_buckets - 1)

    def knots(self, t: float) -> List[Tuple[int, float]]:
        """(bucket, weight) pairs whose blocks mix into the logits at t.

        Without rate scaling a single bucket of equal width in t. With it, linear
        interpolation between knots spaced evenly in logit kappa(t) over
        [-TIME_LOGIT_SPAN, TIME_LOGIT_SPAN], held constant outside.
        """
        b = self.spec.num_buckets
        if self.sched is None:
            return [(self.bucket(t), 1.0)]
        if b == 1:
            return [(0, 1.0)]
        pos = (kappa_logit(self.sched, t) + TIME_LOGIT_SPAN) / (2.0 * TIME_LOGIT_SPAN) * (b - 1)
        pos = min(max(pos, 0.0), b - 1.0)
        lo = min(int(pos), b - 2)
        frac = pos - lo
        return [(lo, 1.0 - frac), (lo + 1, frac)]

    def _offset(self, x: Sequence, cond: Optional[Sequence]) -> int:
        if cond:
            raise ModelError("The tabular model does not support conditioning")
        offset = self.offsets.get(tuple(x))
        if offset is None:
            raise ModelError(f"State {x} is outside the enumerated space of the tabular model")
        return offset

    def _slices(self, x: Sequence, t: float, cond: Optional[Sequence]) -> List[Tuple[slice, float]]:
        offset = self._offset(x, cond)
        size = len(x) * self.width
        return [
            (slice(k * self.per_bucket + offset, k * self.per_bucket + offset + size), w)
            for k, w in self.knots(t)
        ]

    def init_values(self, rng: np.random.Generator) -> np.ndarray:
        values = np.zeros((self.num_values // self.width, self.width))
        values[:, :_HEAD] = self.spec.init_log_rate
        return values.reshape(-1)

    def logits(self, values: np.ndarray, x: Sequence, t: float, cond: Optional[Sequence] = None) -> np.ndarray:
        parts = self._slices(x, t, cond)
        out = parts[0][1] * values[parts[0][0]]
        for sl, w in parts[1:]:
            out = out + w * values[sl]
        return out.reshape(len(x), self.width)

    def accumulate_grad(self, values, x, t, cond, d_logits: np.ndarray, out: np.ndarray) -> None:
        flat = d_logits.reshape(-1)
        for sl, w in self._slices(x, t, cond):
            out[sl] += w * flat


class FeaturizedRateModel:
    """Linear map from local features to logits.

    Per position: one-hot tokens in a window of radius `window` (content, BOS or
    padding), t, t^2, relative position, relative length, a bias, and a summary
    of the conditioning prefix (presence, relative length, token frequencies).
    """
    kind = "featurized"

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.vocab = Vocab(size=spec.vocab_size)
        m = spec.vocab_size
        self.width = _HEAD + 2 * m
        self.categories = m + 2  # content tokens, BOS, padding
        self.window_features = (2 * spec.window + 1) * self.categories
        self.num_features = self.window_features + 5 + 2 + m
        self.num_values = self.num_features * self.width

    def features(self, x: Sequence, t: float, cond: Optional[Sequence] = None) -> np.ndarray:
        spec, m = self.spec, self.spec.vocab_size
        n = len(x)
        phi = np.zeros((n, self.num_features))
        tokens = np.asarray(x)
        rows = np.arange(n)
        for k, d in enumerate(range(-spec.window, spec.window + 1)):
            j = rows + d
            inside = (j >= 0) & (j < n)
            # BOS id is m, so in-range cells index directly; m + 1 is padding
            cat = np.full(n, m + 1)
            cat[inside] = tokens[j[inside]]
            phi[rows, k * self.categories + cat] = 1.0
        base = self.window_features
        phi[:, base] = t
        phi[:, base + 1] = t * t
        phi[:, base + 2] = rows / n
        phi[:, base + 3] = (n - 1) / spec.max_length
        phi[:, base + 4] = 1.0
        if cond:
            phi[:, base + 5] = 1.0
            phi[:, base + 6] = len(cond) / spec.max_length
            phi[:, base + 7:] = np.bincount(np.asarray(cond), minlength=m)[:m] / len(cond)
        return phi

    def init_values(self, rng: np.random.Generator) -> np.ndarray:
        weights = rng.normal(0.0, self.spec.init_scale, size=(self.num_features, self.width))
        weights[self.window_features + 4, :_HEAD] += self.spec.init_log_rate
        return weights.reshape(-1)

    def logits(self, values: np.ndarray, x: Sequence, t: float, cond: Optional[Sequence] = None) -> np.ndarray:
        return self.features(x, t, cond) @ values.reshape(self.num_features, self.width)

    def accumulate_grad(self, values, x, t, cond, d_logits: np.ndarray, out: np.ndarray) -> None:
        out += (self.features(x, t, cond).T @ d_logits).reshape(-1)


MODEL_KINDS = {
    "tabular": TabularRateModel,
    "featurized": FeaturizedRateModel,
}


@lru_cache(maxsize=16)
def build_model(spec: ModelSpec):
    return MODEL_KINDS[spec.kind](spec)


@dataclass
class ModelParams:
    spec: ModelSpec
    values: np.ndarray

    @property
    def model(self):
        return build_model(self.spec)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.values.copy())

    def restricted(self, restriction: Optional[str], mask_token: Optional[int] = None) -> "ModelParams":
        """Same values under a different special-case restriction."""
        spec = ModelSpec.model_validate({**self.spec.model_dump(), "restriction": restriction, "mask_token": mask_token})
        return ModelParams(spec, self.values)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    values = build_model(spec).init_values(rng)
    logger.debug("Initialized %s model with %d values", spec.kind, values.size)
    return ModelParams(spec, values)


def _check_inputs(params: ModelParams, x_t: Sequence, t: float, cond: Optional[Sequence]) -> None:
    vocab = params.model.vocab
    try:
        vocab.validate_sequence(x_t)
        if cond:
            vocab.validate_sequence((vocab.bos_id, *cond))
    except EditError as e:
        raise ModelError(str(e)) from None
    if not 0.0 <= t <= 1.0:
        raise ModelError(f"t must lie in [0, 1], got {t}")


def rate_scale(spec: ModelSpec, t: float) -> float:
    """Multiplier on every lambda at t: 1, or the scheduler rate under rate_scaling."""
    if spec.rate_scaling is None:
        return 1.0
    try:
        return float(scheduler_for(spec.rate_scaling).rate(t))
    except PathError as e:
        raise ModelError(f"Rates scaled by {spec.rate_scaling} are undefined at t={t}: {e}") from None


def reversed_spec(spec: ModelSpec) -> ModelSpec:
    """Spec for the reverse-rate model, which runs on the clock s = 1 - t."""
    kind = spec.rate_scaling
    if kind is None:
        return spec
    flipped = kind[len("reversed_"):] if kind.startswith("reversed_") else f"reversed_{kind}"
    return spec.model_copy(update={"rate_scaling": flipped})


def predict(params: ModelParams, x_t: Sequence, t: float, cond: Optional[Sequence] = None) -> RatePrediction:
    _check_inputs(params, x_t, t, cond)
    logits = params.model.logits(params.values, x_t, t, cond)
    return head_forward(params.spec, x_t, logits, rate_scale(params.spec, t))


def grad_predict(
    params: ModelParams,
    x_t: Sequence,
    t: float,
    cond: Optional[Sequence],
    cotangent: RatePrediction,
    out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of <cotangent, predict(params, x_t, t, cond)> w.r.t. params.values.

    Accumulates into `out` when given.
    """
    _check_inputs(params, x_t, t, cond)
    model = params.model
    if out is None:
        out = np.zeros_like(params.values)
    logits = model.logits(params.values, x_t, t, cond)
    d_logits = head_backward(params.spec, x_t, logits, cotangent, rate_scale(params.spec, t))
    model.accumulate_grad(params.values, x_t, t, cond, d_logits, out)
    return out


RateFn = Callable[[Sequence, float], RatePrediction]


def rate_fn(params: ModelParams, cond: Optional[Sequence] = None) -> RateFn:
    return lambda x, t: predict(params, x, t, cond)


def reverse_rate_fn(params_rev: ModelParams, cond: Optional[Sequence] = None) -> RateFn:
    """Reverse model trained on s = 1 - t, exposed on the forward clock."""
    return lambda x, t: predict(params_rev, x, 1.0 - t, cond)
