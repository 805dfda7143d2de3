"""Off-policy actor-critic training mixing imitation and value gradients.

The actor ascends

    (1 - epsilon) * dQ/da * dmu/dtheta  +  epsilon * phi * dmu/dtheta

where the first term is the deterministic policy gradient through the
critic and the second is the negative gradient of the multi-label cross
entropy against the doctor's prescription. The critic regresses
``Q(c_t, doctor_action_t)`` onto ``r_t + gamma * Q_target(c_{t+1}, mu_target(c_{t+1}))``.
Every per-step term is weighted ``1 / (I * T_i)`` for a batch of ``I``
admissions of lengths ``T_i``.

The critic is fit in units of ``reward_scale`` (rewards are divided by it
before entering the TD target). With the default of 15 the survival reward
becomes 1 and dQ/da lives on the same scale as the 1/K imitation term, so
``epsilon`` actually trades one signal against the other. Values reported
to callers are multiplied back into reward units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .metrics import batch_jaccard
from .nets import PROB_CLAMP, Actor, Batch, Critic, NetDims, Networks, copy_params, soft_update
from .tensor import Adam, Params, check_finite, clip_by_global_norm, make_rng

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    epsilon: float = 0.5
    gamma: float = 0.99
    tau: float = 0.01
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    optimizer: str = "adam"       # "adam" or "sgd" (plain fixed-rate steps)
    batch_size: int = 64
    epochs: int = 12
    steps_per_epoch: int = 0      # 0: one pass over the buffer per epoch
    seed: int = 0
    threshold: float = 0.5
    grad_clip: Optional[float] = 5.0
    lstm_hidden: int = 64
    static_hidden: int = 32
    disease_hidden: int = 64
    hidden: tuple = (128, 128)
    capacity: Optional[int] = None
    reward_scale: float = 15.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and steps_per_epoch >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def net_dims(self, n_ts: int, n_static: int, n_diseases: int, n_meds: int) -> NetDims:
        return NetDims(n_ts, n_static, n_diseases, n_meds, self.lstm_hidden,
                       self.static_hidden, self.disease_hidden, self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class ReplayBuffer:
    """Complete admissions, sampled uniformly with replacement.

    With ``capacity`` set, adding beyond it evicts the oldest admissions.
    """

    def __init__(self, batch: Batch, capacity: Optional[int] = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.data = batch.take(np.arange(batch.size)[-capacity:] if capacity else np.arange(batch.size))

    def __len__(self) -> int:
        return self.data.size

    def add(self, batch: Batch) -> None:
        T = max(self.data.horizon, batch.horizon)
        parts = [_pad(self.data, T), _pad(batch, T)]
        merged = Batch(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                         ("ts", "static", "diseases", "actions", "rewards", "mask")))
        keep = np.arange(merged.size)
        if self.capacity:
            keep = keep[-self.capacity:]
        self.data = merged.take(keep)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("replay buffer is empty")
        return rng.integers(0, len(self), size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        return self.data.take(self.sample_indices(n, rng))


def _pad(b: Batch, T: int) -> Batch:
    extra = T - b.horizon
    if extra == 0:
        return b
    pad3 = ((0, 0), (0, extra), (0, 0))
    return Batch(np.pad(b.ts, pad3), b.static, b.diseases, np.pad(b.actions, pad3),
                 np.pad(b.rewards, ((0, 0), (0, extra))), np.pad(b.mask, ((0, 0), (0, extra))))


def step_weights(mask: np.ndarray) -> np.ndarray:
    """``1 / (I * T_i)`` on real steps, 0 on padding."""
    lengths = mask.sum(axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise ValueError("batch contains an empty admission")
    return mask / (mask.shape[0] * lengths)


# ----------------------------------------------------------------------------
# supervised (indicator) signal
# ----------------------------------------------------------------------------


def sl_action_gradient(doctor: np.ndarray, actor: np.ndarray) -> np.ndarray:
    """Per-medication terms ``(a_hat - a) / (K (1 - a) a)``.

    This is minus the derivative of the mean binary cross entropy with
    respect to the actor probabilities.
    """
    doctor = np.asarray(doctor, dtype=np.float64)
    actor = np.asarray(actor, dtype=np.float64)
    if doctor.shape != actor.shape:
        raise ValueError(f"doctor actions {doctor.shape} vs actor actions {actor.shape}")
    K = actor.shape[-1]
    return (doctor - actor) / (K * (1.0 - actor) * actor)


def sl_weight(doctor: np.ndarray, actor: np.ndarray) -> np.ndarray:
    """``phi = (1/K) sum_k (a_hat_k - a_k) / ((1 - a_k) a_k)`` over the last axis."""
    return sl_action_gradient(doctor, actor).sum(axis=-1)


def cross_entropy(doctor: np.ndarray, actor: np.ndarray) -> np.ndarray:
    """Mean binary cross entropy over medications (last axis)."""
    return -np.mean(doctor * np.log(actor) + (1.0 - doctor) * np.log(1.0 - actor), axis=-1)


# ----------------------------------------------------------------------------
# critic
# ----------------------------------------------------------------------------


def critic_td_target(reward: float, terminal: bool, q_next: float, gamma: float) -> float:
    """``r + gamma * q_next``, or ``r`` alone at an admission's last step."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return float(reward) if terminal else float(reward) + gamma * float(q_next)


def td_targets(nets: Networks, batch: Batch, gamma: float, reward_scale: float = 1.0) -> np.ndarray:
    """Bootstrapped targets ``y`` (B, T) from the target actor and critic; 0 on padding.

    Targets are in critic units: rewards are divided by ``reward_scale``.
    """
    actor, critic = Actor(nets.dims), Critic(nets.dims)
    mu_tar, _ = actor.forward(nets.target_actor, batch)
    q_tar, _ = critic.forward(nets.target_critic, batch, mu_tar)
    q_next = np.zeros_like(q_tar)
    q_next[:, :-1] = q_tar[:, 1:]
    has_next = np.zeros_like(batch.mask)
    has_next[:, :-1] = batch.mask[:, 1:]
    y = batch.rewards / reward_scale + gamma * np.where(has_next, q_next, 0.0)
    return np.where(batch.mask, y, 0.0)


def critic_gradient(nets: Networks, batch: Batch, targets: np.ndarray):
    """Gradient of ``sum_i sum_t w_it * delta_it^2 / 2`` and the weighted mean ``delta^2``."""
    critic = Critic(nets.dims)
    q, cache = critic.forward(nets.critic, batch, batch.actions)
    w = step_weights(batch.mask)
    delta = np.where(batch.mask, q - targets, 0.0)
    grads, _ = critic.backward(nets.critic, cache, w * delta)
    return grads, float(np.sum(w * delta ** 2))


def critic_update(nets: Networks, batch: Batch, lr: float, gamma: float,
                  targets: Optional[np.ndarray] = None, clip: Optional[float] = None,
                  reward_scale: float = 1.0):
    """One descent step on the squared TD error at the doctor's actions.

    Returns ``(new_critic_params, mean_squared_td_error)``.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    if targets is None:
        targets = td_targets(nets, batch, gamma, reward_scale)
    grads, msq = critic_gradient(nets, batch, targets)
    grads = clip_by_global_norm(grads, clip)
    return {k: v - lr * grads[k] for k, v in nets.critic.items()}, msq


# ----------------------------------------------------------------------------
# actor
# ----------------------------------------------------------------------------


def critic_action_gradient(nets: Networks, batch: Batch, actions: np.ndarray) -> np.ndarray:
    """``dQ/da`` at ``actions`` for every step, shape (B, T, K)."""
    critic = Critic(nets.dims)
    _, cache = critic.forward(nets.critic, batch, actions)
    _, da = critic.backward(nets.critic, cache, np.ones(batch.mask.shape), need_params=False)
    return da


def actor_ascent_direction(nets: Networks, batch: Batch, epsilon: float):
    """Mixed ascent direction for the actor parameters.

    Returns ``(grads, info)`` where ``grads`` is keyed like ``nets.actor`` and
    ``info`` holds the actor probabilities and the two per-step action
    weightings (``rl`` = dQ/da, ``sl`` = per-medication imitation terms).
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if batch.size == 0:
        raise ValueError("empty batch")
    actor = Actor(nets.dims)
    probs, cache = actor.forward(nets.actor, batch)
    rl = critic_action_gradient(nets, batch, probs) if epsilon < 1.0 else np.zeros_like(probs)
    sl = sl_action_gradient(batch.actions, probs) if epsilon > 0.0 else np.zeros_like(probs)
    w = step_weights(batch.mask)[:, :, None]
    grads = actor.backward(nets.actor, cache, w * ((1.0 - epsilon) * rl + epsilon * sl))
    return grads, {"probs": probs, "rl": rl, "sl": sl}


def actor_update(nets: Networks, batch: Batch, epsilon: float, lr: float, clip: Optional[float] = None) -> Params:
    """One ascent step of the actor; returns new actor parameters."""
    grads, _ = actor_ascent_direction(nets, batch, epsilon)
    grads = clip_by_global_norm(grads, clip)
    return {k: v + lr * grads[k] for k, v in nets.actor.items()}


# ----------------------------------------------------------------------------
# policy
# ----------------------------------------------------------------------------


@dataclass
class TrainedPolicy:
    dims: NetDims
    actor: Params
    threshold: float = 0.5
    scaler: Optional[object] = None

    def _prep(self, batch: Batch) -> Batch:
        return self.scaler.transform(batch) if self.scaler is not None else batch

    def probabilities(self, batch: Batch) -> np.ndarray:
        probs, _ = Actor(self.dims).forward(self.actor, self._prep(batch))
        return probs

    def recommend_all(self, batch: Batch, threshold: Optional[float] = None) -> np.ndarray:
        thr = self.threshold if threshold is None else threshold
        return np.where(batch.mask[:, :, None], self.probabilities(batch) >= thr, False).astype(np.float64)

    def __call__(self, view) -> np.ndarray:
        """Treat simulated patients: recommendation for the latest day of ``view``."""
        n, T = view.obs.shape[:2]
        batch = Batch(view.obs, view.static, view.diseases, np.zeros((n, T, self.dims.n_meds)),
                      np.zeros((n, T)), np.ones((n, T), dtype=bool))
        return (self.probabilities(batch)[:, -1] >= self.threshold).astype(np.float64)


def recommend(policy: TrainedPolicy, prefix: Batch, threshold: Optional[float] = None) -> np.ndarray:
    """Binary prescription at the last real step of each admission prefix in ``prefix``."""
    thr = policy.threshold if threshold is None else threshold
    if not 0.0 < thr < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    lengths = prefix.lengths
    if prefix.size == 0 or np.any(lengths == 0):
        raise ValueError("empty prefix")
    probs = policy.probabilities(prefix)
    last = probs[np.arange(prefix.size), lengths - 1]
    return (last >= thr).astype(np.float64)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


TRACE_FIELDS = ("epoch", "mean_td_error", "mean_return", "jaccard")


def q_scale(nets: Networks) -> float:
    return float(nets.meta.get("reward_scale", 1.0))


def q_values(nets: Networks, batch: Batch, actions: np.ndarray) -> np.ndarray:
    """Critic values (B, T) in reward units."""
    q, _ = Critic(nets.dims).forward(nets.critic, batch, actions)
    return q * q_scale(nets)


def policy_q_values(nets: Networks, batch: Batch) -> np.ndarray:
    """``Q(c_t, mu(c_t))`` (B, T) in reward units."""
    probs, _ = Actor(nets.dims).forward(nets.actor, batch)
    return q_values(nets, batch, probs)


def policy_start_value(nets: Networks, batch: Batch) -> float:
    """Critic estimate of the policy's return from the first step, averaged over admissions."""
    return float(policy_q_values(nets, batch.truncate(1))[:, 0].mean())


class Optimizers:
    """Per-network step rules; plain steps reproduce :func:`critic_update` and :func:`actor_update`."""

    def __init__(self, config: TrainConfig):
        self.kind = config.optimizer
        self.actor = Adam(config.actor_lr) if self.kind == "adam" else None
        self.critic = Adam(config.critic_lr) if self.kind == "adam" else None

    def state(self) -> dict:
        if self.kind != "adam":
            return {}
        return {"actor": self.actor.state(), "critic": self.critic.state()}

    def load_state(self, state: dict) -> None:
        if self.kind == "adam" and state:
            self.actor.load_state(state["actor"])
            self.critic.load_state(state["critic"])


def srl_iteration(nets: Networks, batch: Batch, config: TrainConfig, opt: Optional[Optimizers] = None) -> float:
    """One pass of the update loop on a sampled batch; mutates ``nets``. Returns mean squared TD error.

    Order: TD targets, critic step, target-critic soft update, actor step
    (using the freshly updated critic), target-actor soft update.
    """
    if opt is None or opt.kind == "sgd":
        nets.critic, msq = critic_update(nets, batch, config.critic_lr, config.gamma, clip=config.grad_clip,
                                         reward_scale=config.reward_scale)
    else:
        grads, msq = critic_gradient(nets, batch, td_targets(nets, batch, config.gamma, config.reward_scale))
        nets.critic = opt.critic.step(nets.critic, clip_by_global_norm(grads, config.grad_clip))
    nets.target_critic = soft_update(nets.critic, nets.target_critic, config.tau)
    if opt is None or opt.kind == "sgd":
        nets.actor = actor_update(nets, batch, config.epsilon, config.actor_lr, clip=config.grad_clip)
    else:
        grads, _ = actor_ascent_direction(nets, batch, config.epsilon)
        nets.actor = opt.actor.step(nets.actor, clip_by_global_norm(grads, config.grad_clip), ascend=True)
    nets.target_actor = soft_update(nets.actor, nets.target_actor, config.tau)
    return msq


def train_epochs(config: TrainConfig, buffer: ReplayBuffer, nets: Networks, validation: Optional[Batch] = None,
                 start_epoch: int = 0, trace: Optional[List[dict]] = None,
                 on_epoch: Optional[Callable[[int, Networks, List[dict], Optimizers], None]] = None,
                 optimizers: Optional[Optimizers] = None):
    """Run epochs ``start_epoch .. config.epochs - 1``; returns ``(nets, trace)``.

    Returns after the last epoch; the optimizer state (Adam moments) lives
    in ``optimizers`` so a caller can checkpoint it alongside ``nets``.
    Each epoch performs ``steps_per_epoch`` sampled-batch iterations (one
    pass over the buffer when 0). Batch sampling for epoch ``e`` draws from
    a stream keyed on ``(seed, e)``, so resuming from a checkpoint written
    after epoch ``e - 1`` reproduces the uninterrupted run exactly.
    """
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    trace = list(trace or [])
    nets.meta["reward_scale"] = config.reward_scale
    opt = optimizers if optimizers is not None else Optimizers(config)
    steps = config.steps_per_epoch or math.ceil(len(buffer) / config.batch_size)
    monitor = validation if validation is not None else buffer.data
    for epoch in range(start_epoch, config.epochs):
        rng = make_rng(config.seed, 101, epoch)
        total = 0.0
        for _ in range(steps):
            batch = buffer.sample(config.batch_size, rng)
            msq = srl_iteration(nets, batch, config, opt)
            if not math.isfinite(msq):
                raise NumericalError(f"non-finite TD error in epoch {epoch}")
            total += msq
        check_finite(nets.actor, "actor parameter")
        check_finite(nets.critic, "critic parameter")
        policy = TrainedPolicy(nets.dims, nets.actor, config.threshold)
        row = {
            "epoch": epoch,
            "mean_td_error": total / steps,
            "mean_return": policy_start_value(nets, monitor),
            "jaccard": batch_jaccard(policy.recommend_all(monitor), monitor.actions, monitor.mask),
        }
        trace.append(row)
        log.info("epoch %d td=%.4f return=%.3f jaccard=%.4f", epoch, row["mean_td_error"],
                 row["mean_return"], row["jaccard"])
        if on_epoch is not None:
            on_epoch(epoch, nets, trace, opt)
    return nets, trace
