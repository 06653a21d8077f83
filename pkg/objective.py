"""Winner-takes-all selection, the training loss, AdamW and the training step."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from config import RunConfig
from encoder import SceneContext
from errors import DataError, NumericFailure
from ilnet import ILNet, PredictionSet
from numerics import (
    DenseArray, ParamStore, TapeContext, first_non_finite, getitem, huber, log_softmax, param_gradients, reduce_sum,
)

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    reg_pro: float
    reg_fin: float
    cls_fin: float
    total: float
    num_pairs: int = 0

    def as_dict(self) -> Dict[str, float]:
        return {"reg_pro": self.reg_pro, "reg_fin": self.reg_fin, "cls_fin": self.cls_fin, "total": self.total}


@dataclass
class LossTerms:
    reg_pro: DenseArray
    reg_fin: DenseArray
    cls_fin: DenseArray
    total: DenseArray
    num_pairs: int

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(self.reg_pro.item(), self.reg_fin.item(), self.cls_fin.item(), self.total.item(),
                             self.num_pairs)


def endpoint_errors(preds: np.ndarray, gt: np.ndarray, mask: np.ndarray = None) -> np.ndarray:
    """[N, K] error of every mode at each agent's last valid target step"""
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(gt.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    errors = np.zeros(preds.shape[:2])
    for n in range(preds.shape[0]):
        valid = np.flatnonzero(mask[n])
        if len(valid) == 0:
            raise DataError(f"agent row {n} has no valid ground-truth step to select a mode against")
        last = valid[-1]
        diff = preds[n, :, last] - gt[n, last]
        errors[n] = np.hypot(diff[:, 0], diff[:, 1])
    return errors


def wta_select(preds: np.ndarray, gt: np.ndarray, mode: str = "joint", mask: np.ndarray = None) -> np.ndarray:
    """Winning mode per agent; joint picks one shared mode, ties go to the lowest index"""
    errors = endpoint_errors(preds, gt, mask)
    if mode == "joint":
        return np.full(errors.shape[0], int(np.argmin(errors.sum(axis=0))), dtype=np.int64)
    if mode == "marginal":
        return np.argmin(errors, axis=1).astype(np.int64)
    raise ValueError(f"unknown selection mode '{mode}'")


def select_winners(preds: np.ndarray, ctx: SceneContext, task: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(n, t, k) of every supervised pair; joint selection is made per timestamp"""
    supervised = ctx.supervised
    rows_n: List[np.ndarray] = []
    rows_t: List[np.ndarray] = []
    rows_k: List[np.ndarray] = []
    for t in range(ctx.history_steps):
        agents = np.flatnonzero(supervised[:, t])
        if len(agents) == 0:
            continue
        k = wta_select(preds[agents, t], ctx.targets[agents, t], task, ctx.target_mask[agents, t])
        rows_n.append(agents)
        rows_t.append(np.full(len(agents), t))
        rows_k.append(k)
    if not rows_n:
        raise DataError(f"scenario {ctx.scenario_id} has no supervised (agent, timestamp) pair")
    return (np.concatenate(rows_n).astype(np.int64), np.concatenate(rows_t).astype(np.int64),
            np.concatenate(rows_k).astype(np.int64))


def _masked_regression(preds: DenseArray, n: np.ndarray, t: np.ndarray, k: np.ndarray, ctx: SceneContext,
                       delta: float) -> DenseArray:
    chosen = getitem(preds, (n, t, k))
    mask = ctx.target_mask[n, t].astype(np.float64)
    penalty = huber(chosen, ctx.targets[n, t], delta) * mask[..., None]
    per_pair = reduce_sum(penalty, axis=(1, 2)) / (2.0 * mask.sum(axis=1))
    return reduce_sum(per_pair) / float(len(n))


def compute_loss(pred: PredictionSet, ctx: SceneContext, task: str = "joint", huber_delta: float = 1.0) -> LossTerms:
    """Huber on the winning proposal and final modes plus cross-entropy on the final winner"""
    n, t, k_pro = select_winners(pred.p_pro.data, ctx, task)
    _, _, k_fin = select_winners(pred.p_fin.data, ctx, task)
    pairs = len(n)
    reg_pro = _masked_regression(pred.p_pro, n, t, k_pro, ctx, huber_delta)
    reg_fin = _masked_regression(pred.p_fin, n, t, k_fin, ctx, huber_delta)
    log_probs = log_softmax(getitem(pred.logits, (n, t)), axis=-1)
    cls_fin = -reduce_sum(getitem(log_probs, (np.arange(pairs), k_fin))) / float(pairs)
    return LossTerms(reg_pro, reg_fin, cls_fin, reg_pro + reg_fin + cls_fin, pairs)


def cosine_lr(epoch: int, epochs: int, lr_init: float, lr_min: float = 0.0) -> float:
    return lr_min + (lr_init - lr_min) * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


class AdamW:
    """Adam with decoupled weight decay applied before the moment update"""

    def __init__(self, params: ParamStore, weight_decay: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.first = {name: np.zeros(shape) for name, shape in params.shapes().items()}
        self.second = {name: np.zeros(shape) for name, shape in params.shapes().items()}

    def step(self, lr: float):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, param in self.params.items():
            grad = self.params.grad(name)
            param.data *= 1.0 - lr * self.weight_decay
            m = self.first[name]
            v = self.second[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"first.{name}": m for name, m in self.first.items()}
        arrays.update({f"second.{name}": v for name, v in self.second.items()})
        return arrays

    def load_state(self, arrays: Mapping[str, np.ndarray], steps: int):
        for name in self.first:
            try:
                self.first[name][...] = arrays[f"first.{name}"]
                self.second[name][...] = arrays[f"second.{name}"]
            except KeyError as e:
                raise DataError(f"optimizer state is missing {e}")
        self.steps = int(steps)


def _check_finite(named, scenario_id: str):
    bad = first_non_finite(named)
    if bad is not None:
        raise NumericFailure(bad, f"scenario {scenario_id}")


class Trainer:
    """Runs forward/backward per scenario on a thread pool and steps AdamW.

    Gradients are accumulated in batch order after all workers finish, so
    the worker count never changes the result.
    """

    def __init__(self, model: ILNet, config: RunConfig):
        self.model = model
        self.config = config
        self.optimizer = AdamW(model.params, weight_decay=config.weight_decay)

    def scenario_gradients(self, ctx: SceneContext) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
        with TapeContext():
            pred = self.model.forward(ctx)
            terms = compute_loss(pred, ctx, self.config.task, self.config.huber_delta)
        _check_finite([
            ("p_pro", pred.p_pro), ("frac_index", pred.anchors.frac_index), ("p_fin", pred.p_fin),
            ("logits", pred.logits), ("loss.reg_pro", terms.reg_pro), ("loss.reg_fin", terms.reg_fin),
            ("loss.cls_fin", terms.cls_fin), ("loss.total", terms.total),
        ], ctx.scenario_id)
        grads = param_gradients(terms.total, self.model.params)
        _check_finite(((f"grad.{name}", g) for name, g in grads.items()), ctx.scenario_id)
        return terms.breakdown(), grads

    def train_step(self, batch: Sequence[SceneContext], lr: float) -> LossBreakdown:
        params = self.model.params
        params.zero_grad()
        if self.config.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(self.scenario_gradients, batch))
        else:
            results = [self.scenario_gradients(ctx) for ctx in batch]
        scale = 1.0 / len(batch)
        for _, grads in results:
            params.accumulate(grads, scale)
        self.optimizer.step(lr)
        parts = [b for b, _ in results]
        return LossBreakdown(
            reg_pro=sum(b.reg_pro for b in parts) * scale,
            reg_fin=sum(b.reg_fin for b in parts) * scale,
            cls_fin=sum(b.cls_fin for b in parts) * scale,
            total=sum(b.total for b in parts) * scale,
            num_pairs=sum(b.num_pairs for b in parts),
        )

    def epoch_order(self, epoch: int, count: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(count)

    def train_epoch(self, contexts: Sequence[SceneContext], epoch: int) -> Tuple[float, LossBreakdown]:
        """One pass over ``contexts`` in a seed- and epoch-determined order; returns (lr, mean losses)"""
        lr = cosine_lr(epoch, self.config.epochs, self.config.lr, self.config.lr_min)
        order = self.epoch_order(epoch, len(contexts))
        size = self.config.batch_size
        totals = np.zeros(4)
        batches = 0
        for start in range(0, len(order), size):
            batch = [contexts[i] for i in order[start:start + size]]
            step = self.train_step(batch, lr)
            totals += (step.reg_pro, step.reg_fin, step.cls_fin, step.total)
            batches += 1
            logger.debug(f"epoch {epoch} batch {batches}: total {step.total:.5f}")
        mean = totals / max(batches, 1)
        return lr, LossBreakdown(*(float(x) for x in mean))
