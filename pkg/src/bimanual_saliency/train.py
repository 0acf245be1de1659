"""Training loops: correction-module pre-training, then joint BSPN + BCPN training.

The joint loop implements the iterative saliency strategy: from epoch K on,
every M epochs the working single-handed map of each object is replaced by the
current bimanual prediction (S <- B), the adjustment loss switches to its
iteration-phase support, and training stops once every object has mean
labeled saliency >= sigma_s and balance distance < sigma_p.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data.shapes import build_vector_gt
from .geom import LEFT, NONE, RIGHT, GravityLine, PointCloud
from .losses import ITERATION, PRE_ITERATION, LossWeights, hard_balance_distance, l_c, l_a, l_classify, l_correct, l_p
from .nets import ModelWeights, bcpn_forward, bspn_forward, cm_forward, save_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3000
    cm_epochs: int = 2000
    lr: float = 1e-3
    optimizer: str = "adam"
    K: int = 2000
    M: int = 200
    m_max: int = 10
    sigma_s: float = 0.8
    sigma_p: float = 0.12
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    temp_decay_every: int = 500
    temp_floor: float = 1e-3
    n_points: int | None = None
    n_cand: int = 1000
    use_balance: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        if not 0 < self.sigma_s <= 1:
            raise ValueError("sigma_s must be in (0, 1]")
        if self.sigma_p <= 0:
            raise ValueError("sigma_p must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.m_max < 0:
            raise ValueError("m_max must be >= 0")

    def temperature(self, epoch: int) -> float:
        return max(self.temp_floor, self.loss.softsel_temp * 0.5 ** (epoch // self.temp_decay_every))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainObject:
    """One annotated object ready for training."""

    object_id: str
    cloud: PointCloud
    labels: np.ndarray
    s_o: np.ndarray
    vector_gt: dict[int, np.ndarray] = field(default_factory=dict)
    s: np.ndarray | None = None  # working single-handed map (after CM)

    @property
    def gravity(self) -> GravityLine:
        return GravityLine.through_center(self.cloud)


def prepare_object(object_id, cloud, labels, s_o, n_points=None, n_cand=1000, seed=0) -> TrainObject:
    """Optionally subsample to ``n_points`` (seeded) and build vector ground truth."""
    labels = np.asarray(labels, dtype=np.int64)
    s_o = np.asarray(s_o, dtype=np.float64)
    if n_points is not None and n_points < cloud.n:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(cloud.n, n_points, replace=False))
        cloud, labels, s_o = cloud.subset(keep), labels[keep], s_o[keep]
    if not (np.any(labels == RIGHT) and np.any(labels == LEFT)):
        raise ValueError(f"{object_id}: needs both right- and left-hand labels")
    return TrainObject(str(object_id), cloud, labels, s_o, build_vector_gt(cloud, labels, n_cand, seed))


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr=1e-3):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g


def make_optimizer(params, config: TrainConfig):
    return Adam(params, lr=config.lr) if config.optimizer == "adam" else SGD(params, lr=config.lr)


def optimizer_step(optimizer, grads: Sequence[np.ndarray]) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    optimizer.step(grads)


def _grads_for(params: Sequence[Tensor], found: dict) -> list[np.ndarray]:
    return [found.get(p, np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------- correction module


def train_cm(weights: ModelWeights, dataset: Sequence[TrainObject], config: TrainConfig) -> list[float]:
    """Fit the correction module on L_correct; fills ``obj.s`` with its output."""
    if not dataset:
        raise ValueError("empty dataset")
    for obj in dataset:
        if not np.any(obj.labels == RIGHT):
            raise ValueError(f"{obj.object_id}: no right-hand labels for the correction module")
    params = weights.parameters("cm")
    opt = make_optimizer(params, config)
    history = []
    for epoch in range(config.cm_epochs):
        total = np.zeros(1)
        acc = [np.zeros_like(p.data) for p in params]
        for obj in dataset:
            _, s = cm_forward(weights, obj.cloud, obj.s_o)
            loss = l_correct(s, obj.labels)
            found = ad.backward(loss)
            for a, g in zip(acc, _grads_for(params, found)):
                a += g / len(dataset)
            total += loss.item() / len(dataset)
        history.append(float(total[0]))
        optimizer_step(opt, acc)
    for obj in dataset:
        obj.s = cm_forward(weights, obj.cloud, obj.s_o)[1].data.reshape(-1).copy()
    if history:
        log.info("cm: loss %.5f -> %.5f over %d epochs", history[0], history[-1], len(history))
    return history


# ---------------------------------------------------------------- iterative strategy


@dataclass
class TrainState:
    s: list[np.ndarray]
    t: int = 0
    epoch: int = 0
    stopped: bool = False
    history: list[dict] = field(default_factory=list)

    @property
    def phase(self) -> str:
        return ITERATION if self.t > 0 else PRE_ITERATION


def update_due(epoch: int, state: TrainState, config: TrainConfig) -> bool:
    return epoch >= config.K and (epoch - config.K) % config.M == 0 and state.t < config.m_max


def apply_saliency_update(state: TrainState, b_current: Sequence[np.ndarray], config: TrainConfig) -> TrainState:
    """S^t = B^(t-1) for every object (values copied, never part of a graph)."""
    if not update_due(state.epoch, state, config):
        if state.t >= config.m_max:
            raise RuntimeError(f"saliency update cap m_max={config.m_max} reached")
        raise RuntimeError(f"epoch {state.epoch} is not a scheduled saliency update")
    state.s = [np.clip(np.asarray(b, dtype=np.float64).reshape(-1), 0.0, 1.0).copy() for b in b_current]
    state.t += 1
    return state


def mean_labeled_saliency(b, labels) -> float:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    labeled = np.asarray(labels) != NONE
    if not labeled.any():
        raise ValueError("no labeled points")
    return float(b[labeled].mean())


def stop_rule(mean_saliency: float, distance: float, sigma_s: float = 0.8, sigma_p: float = 0.12) -> bool:
    return mean_saliency >= sigma_s and distance < sigma_p


def check_stop(b, labels, cloud: PointCloud, gravity: GravityLine, sigma_s=0.8, sigma_p=0.12) -> bool:
    """Mean labeled saliency >= sigma_s and hard-selection balance distance < sigma_p."""
    dist = hard_balance_distance(cloud, b, labels, gravity)
    return stop_rule(mean_labeled_saliency(b, labels), dist, sigma_s, sigma_p)


# ---------------------------------------------------------------- joint training


def joint_loss(weights, obj: TrainObject, s: np.ndarray, config: TrainConfig, phase: str, temp: float):
    """Returns (L_classify tensor, dict of component values, b array)."""
    lw = config.loss
    v, _, b = bspn_forward(weights, obj.cloud, s)
    lc = l_c(v, obj.vector_gt, obj.labels)
    # correspondences are fitted by l_c alone; l_a only moves saliency
    la = l_a(b, s, v.detach(), obj.cloud, obj.labels, lw, phase)
    total = lw.w1 * lc + lw.w2 * la
    lp_val = 0.0
    if config.use_balance and lw.w3 > 0:
        lp = l_p(obj.cloud, b, obj.labels, obj.gravity, temp)
        total = total + lw.w3 * lp
        lp_val = lp.item()
    logits = bcpn_forward(weights, obj.cloud, b.detach())
    loss = l_classify(logits, obj.labels, total, lw.w4)
    parts = dict(l_c=lc.item(), l_a=la.item(), l_p=lp_val, l_total=total.item(), l_classify=loss.item())
    return loss, parts, b.data.reshape(-1)


def predict_b(weights: ModelWeights, obj: TrainObject, s: np.ndarray) -> np.ndarray:
    return bspn_forward(weights, obj.cloud, s, with_vectors=False)[2].data.reshape(-1).copy()


def train_joint(
    weights: ModelWeights,
    dataset: Sequence[TrainObject],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainState:
    """Train BSPN and BCPN together on L_classify with the iterative saliency strategy."""
    if not dataset:
        raise ValueError("empty dataset")
    for obj in dataset:
        if obj.s is None:
            obj.s = np.clip(obj.s_o, 0.0, 1.0)
    params = weights.parameters("bspn") + weights.parameters("bcpn")
    opt = make_optimizer(params, config)
    state = TrainState(s=[obj.s.copy() for obj in dataset])
    order = np.random.default_rng(config.seed).permutation(len(dataset))
    for epoch in range(config.epochs):
        state.epoch = epoch
        record = {"epoch": epoch, "updated": False}
        if update_due(epoch, state, config):
            b_now = [predict_b(weights, obj, s) for obj, s in zip(dataset, state.s)]
            apply_saliency_update(state, b_now, config)
            flags = [
                check_stop(b, obj.labels, obj.cloud, obj.gravity, config.sigma_s, config.sigma_p)
                for obj, b in zip(dataset, b_now)
            ]
            record.update(updated=True, stop_flags=flags)
            log.info("epoch %d: saliency update t=%d, stop flags %s", epoch, state.t, flags)
            if all(flags):
                state.stopped = True
                record.update(t=state.t, phase=state.phase, stop=True)
                state.history.append(record)
                if on_epoch:
                    on_epoch(record)
                break
        temp = config.temperature(epoch)
        acc = [np.zeros_like(p.data) for p in params]
        sums: dict[str, float] = {}
        for k in order:
            obj = dataset[k]
            loss, parts, _ = joint_loss(weights, obj, state.s[k], config, state.phase, temp)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss on {obj.object_id} at epoch {epoch}")
            found = ad.backward(loss)
            for a, g in zip(acc, _grads_for(params, found)):
                a += g / len(dataset)
            for name, val in parts.items():
                sums[name] = sums.get(name, 0.0) + val / len(dataset)
        optimizer_step(opt, acc)
        record.update(sums, t=state.t, phase=state.phase, temp=temp, stop=False)
        state.history.append(record)
        if on_epoch:
            on_epoch(record)
        if config.checkpoint_every and config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
            Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_weights(weights, Path(config.checkpoint_dir) / f"epoch_{epoch + 1:06d}.bgsw")
    for obj, s in zip(dataset, state.s):
        obj.s = s
    weights.meta["saliency_updates"] = state.t
    # the map that met the stop rule took t passes of BSPN; otherwise one more
    weights.meta["inference_passes"] = state.t if state.stopped else state.t + 1
    return state


def write_trace(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
