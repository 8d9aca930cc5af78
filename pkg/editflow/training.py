"""The Edit Flow loss, Bregman divergence, optimizers and the training loop."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from editflow.alignment import AlignedPair, align_uniform_x0
from editflow.paths import (
    PathSample,
    ReversedScheduler,
    sample_time,
    sample_time_logit,
    sample_zt,
    sample_zt_localized,
    target_edits,
)
from editflow.rate_model import ModelParams, grad_predict, predict
from editflow.schemas.config_schemas import TrainConfig
from editflow.schemas.record_schemas import MetricsRecord
from editflow.structures import EditKind, Sequence, TrainingDivergedError, Vocab
from editflow.utils.datasets import ToyDataset
from editflow.variables import coupling_mapping, scheduler_mapping

logger = logging.getLogger(__name__)

RATE_FLOOR = 1e-30

# rng -> (aligned pair, conditioning prefix or None)
PairSampler = Callable[[np.random.Generator], Tuple[AlignedPair, Optional[Sequence]]]


@dataclass
class LossTerms:
    loss: float
    term1: float
    term2: float
    clamp_warnings: int
    grad: Optional[np.ndarray]


def loss_terms(params: ModelParams, batch: List[PathSample], with_grad: bool = True) -> LossTerms:
    """Batch mean of  sum(lambda) - sum_i w_i log u(edit_i | x_t)."""
    if not batch:
        raise ValueError("Empty batch")
    grad = np.zeros_like(params.values) if with_grad else None
    term1 = term2 = 0.0
    clamps = 0
    for sample in batch:
        pred = predict(params, sample.xt, sample.t, sample.cond)
        term1 += pred.exit_rate()
        cot = pred.zeros_like()
        cot.lam_ins[:] = 1.0
        cot.lam_del[:] = 1.0
        cot.lam_sub[:] = 1.0
        for op, w in target_edits(sample):
            p = op.pos
            if op.kind is EditKind.INSERT:
                lam, q = pred.lam_ins[p], pred.q_ins[p, op.token]
            elif op.kind is EditKind.DELETE:
                lam, q = pred.lam_del[p], 1.0
            else:
                lam, q = pred.lam_sub[p], pred.q_sub[p, op.token]
            rate = lam * q
            if rate < RATE_FLOOR:
                # clamped: constant contribution, no gradient
                clamps += 1
                term2 -= w * math.log(RATE_FLOOR)
                continue
            term2 -= w * math.log(rate)
            if op.kind is EditKind.INSERT:
                cot.lam_ins[p] -= w / lam
                cot.q_ins[p, op.token] -= w / q
            elif op.kind is EditKind.DELETE:
                cot.lam_del[p] -= w / lam
            else:
                cot.lam_sub[p] -= w / lam
                cot.q_sub[p, op.token] -= w / q
        if with_grad:
            grad_predict(params, sample.xt, sample.t, sample.cond, cot, out=grad)
    size = len(batch)
    if with_grad:
        grad /= size
    return LossTerms(
        loss=(term1 + term2) / size,
        term1=term1 / size,
        term2=term2 / size,
        clamp_warnings=clamps,
        grad=grad,
    )


def loss_and_grad(params: ModelParams, batch: List[PathSample]) -> Tuple[float, np.ndarray]:
    terms = loss_terms(params, batch)
    return terms.loss, terms.grad


def bregman_divergence(f, g) -> float:
    """Generalized KL  sum(f log(f/g) - f + g), with 0 log 0 = 0; inf if g = 0 where f > 0."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(f < 0) or np.any(g < 0):
        raise ValueError("Bregman divergence needs nonnegative rates")
    if np.any((g == 0) & (f > 0)):
        return math.inf
    pos = f > 0
    log_term = np.zeros_like(f)
    log_term[pos] = f[pos] * np.log(f[pos] / g[pos])
    return float(np.sum(log_term - f + g))


# --- Optimizers ---

class SGD:
    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        return values - lr * grad


class Adam:
    """Adam with bias correction over the flat value vector:
    m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,  theta <- theta - lr m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.count = 0

    def step(self, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.count)
        v_hat = self.v / (1 - self.beta2 ** self.count)
        return values - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)


def learning_rate_at(step: int, cfg: TrainConfig, base_lr: float) -> float:
    """Linear warmup, then constant or cosine decay to zero at the last step."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return base_lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return base_lr
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


# --- Data ---

def split_conditioning(x1: Sequence, cond_drop: float, rng: np.random.Generator) -> Tuple[Sequence, Optional[Sequence]]:
    """Move a prefix of fraction c^3 (c ~ U[0, 1]) into the conditioning.

    With probability cond_drop nothing is split off and the model is trained
    unconditionally on the whole sequence.
    """
    c = rng.random()
    if rng.random() < cond_drop:
        return x1, None
    k = int(math.floor(c ** 3 * (len(x1) - 1)))
    if k == 0:
        return x1, None
    return (x1[0], *x1[1 + k:]), tuple(x1[1:1 + k])


def make_pair_sampler(dataset_p: ToyDataset, dataset_q: ToyDataset, cfg: TrainConfig, conditioning: bool = False) -> PairSampler:
    """Independent coupling of p and q, aligned per cfg.coupling."""
    vocab: Vocab = dataset_q.vocab
    token_probs = dataset_q.token_frequencies() if cfg.x0_tokens == "empirical" else None

    def draw(rng: np.random.Generator):
        x1 = dataset_q.sample(rng)
        cond = None
        if conditioning:
            x1, cond = split_conditioning(x1, cfg.cond_drop, rng)
        if cfg.coupling == "uniform_x0":
            pair = align_uniform_x0(x1, vocab, cfg.num_delete, cfg.num_substitute, rng, token_probs)
        else:
            pair = coupling_mapping[cfg.coupling](dataset_p.sample(rng), x1)
        return pair, cond

    return draw


def draw_path_sample(
    pair_sampler: PairSampler,
    sched,
    cfg: TrainConfig,
    rng: np.random.Generator,
    reverse: bool = False,
) -> PathSample:
    pair, cond = pair_sampler(rng)
    if reverse:
        pair = pair.swapped()
    if cfg.time_sampling == "logit_kappa":
        t = sample_time_logit(rng, sched, cfg.delta)
    else:
        t = sample_time(rng, cfg.delta)
    if cfg.localized:
        return sample_zt_localized(pair, t, sched, cfg.lambda_prop, rng, cond=cond)
    return sample_zt(pair, t, sched, rng, cond=cond)


# --- Loop ---

@dataclass
class TrainResult:
    params: ModelParams
    history: List[MetricsRecord] = field(default_factory=list)

    @property
    def clamp_warnings(self) -> int:
        return self.history[-1].clamp_warnings if self.history else 0


def train(
    params: ModelParams,
    pair_sampler: PairSampler,
    cfg: TrainConfig,
    reverse: bool = False,
    log_callback: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Deterministic given cfg.seed. The input params are not modified."""
    rng = np.random.default_rng(cfg.seed)
    sched = scheduler_mapping[cfg.scheduler]
    if reverse:
        sched = ReversedScheduler(sched)
    optimizer = make_optimizer(cfg)
    base_lr = cfg.resolved_learning_rate(params.spec.kind)
    params = params.copy()
    result = TrainResult(params)
    clamps = 0
    for step in range(cfg.steps):
        batch = [draw_path_sample(pair_sampler, sched, cfg, rng, reverse) for _ in range(cfg.batch_size)]
        terms = loss_terms(params, batch)
        if not math.isfinite(terms.loss) or not np.all(np.isfinite(terms.grad)):
            raise TrainingDivergedError(
                f"Loss diverged at step {step}: loss={terms.loss}, term1={terms.term1}, "
                f"term2={terms.term2}, clamp_warnings={clamps + terms.clamp_warnings}"
            )
        clamps += terms.clamp_warnings
        lr = learning_rate_at(step, cfg, base_lr)
        params.values = optimizer.step(params.values, terms.grad, lr)
        record = MetricsRecord(
            step=step,
            loss=terms.loss,
            term1=terms.term1,
            term2=terms.term2,
            grad_norm=float(np.linalg.norm(terms.grad)),
            clamp_warnings=clamps,
            learning_rate=lr,
        )
        result.history.append(record)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            message = f"step {step}: loss={terms.loss:.4f} term1={terms.term1:.4f} term2={terms.term2:.4f}"
            logger.info(message)
            if log_callback:
                log_callback(message)
    return result


def train_reverse(
    params_rev: ModelParams,
    pair_sampler: PairSampler,
    cfg: TrainConfig,
    log_callback: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Learn the rate that transports q back to p, on the clock s = 1 - t."""
    return train(params_rev, pair_sampler, cfg, reverse=True, log_callback=log_callback)
