"""History encoder, actor and critic networks with explicit backward passes.

Every network is a plain ``dict`` of named float64 arrays plus a small
object describing its architecture. Forward passes operate on a padded
:class:`Batch` of admissions and return ``(output, cache)``; backward passes
consume the cache and return gradients keyed like the parameters.

Actor and critic each own a history encoder (LSTM over time-series
variables, one tanh layer over static demographics, one tanh layer over the
disease multi-hot). The encoded state at step ``t`` is the concatenation
``[h_t, static_embedding, disease_embedding]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .tensor import (
    Params,
    ShapeError,
    dense_backward,
    dense_forward,
    lstm_cell_backward,
    lstm_cell_forward,
    make_rng,
    xavier_uniform,
)

PROB_CLAMP = 1e-6
CHECKPOINT_FORMAT = "srlrnn-params"
CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    """Padded admissions. ``T`` is the longest admission in the batch.

    ts:        (B, T, n_ts) time-series observations
    static:    (B, n_static) demographics
    diseases:  (B, n_diseases) multi-hot diagnosis codes
    actions:   (B, T, K) doctor prescriptions in {0, 1}
    rewards:   (B, T)
    mask:      (B, T) True on real steps
    """

    ts: np.ndarray
    static: np.ndarray
    diseases: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return self.ts.shape[0]

    @property
    def horizon(self) -> int:
        return self.ts.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def take(self, index) -> "Batch":
        index = np.asarray(index)
        sub = Batch(self.ts[index], self.static[index], self.diseases[index],
                    self.actions[index], self.rewards[index], self.mask[index])
        T = int(sub.lengths.max()) if sub.size else 0
        return sub.truncate(T)

    def truncate(self, T: int) -> "Batch":
        return Batch(self.ts[:, :T], self.static, self.diseases,
                     self.actions[:, :T], self.rewards[:, :T], self.mask[:, :T])


@dataclass
class NetDims:
    n_ts: int
    n_static: int
    n_diseases: int
    n_meds: int
    lstm_hidden: int = 64
    static_hidden: int = 32
    disease_hidden: int = 64
    hidden: tuple = (128, 128)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_meds < 1:
            raise ValueError("n_meds must be at least 1")

    @property
    def state_dim(self) -> int:
        return self.lstm_hidden + self.static_hidden + self.disease_hidden


# ----------------------------------------------------------------------------
# history encoder
# ----------------------------------------------------------------------------


@dataclass
class EncoderCache:
    steps: list
    static: object
    disease: object
    shape: tuple


class HistoryEncoder:
    """Causal summary ``c_t = f(o_1..o_t)`` of an admission."""

    def __init__(self, dims: NetDims, prefix: str = "enc."):
        self.dims = dims
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator) -> Params:
        d, p = self.dims, self.prefix
        H = d.lstm_hidden
        return {
            p + "lstm.Wx": xavier_uniform(rng, d.n_ts, 4 * H),
            p + "lstm.Wh": xavier_uniform(rng, H, 4 * H),
            p + "lstm.b": np.zeros(4 * H),
            p + "static.W": xavier_uniform(rng, d.n_static, d.static_hidden),
            p + "static.b": np.zeros(d.static_hidden),
            p + "disease.W": xavier_uniform(rng, d.n_diseases, d.disease_hidden),
            p + "disease.b": np.zeros(d.disease_hidden),
        }

    def _check(self, batch: Batch) -> None:
        d = self.dims
        if batch.ts.shape[2] != d.n_ts or batch.static.shape[1] != d.n_static \
                or batch.diseases.shape[1] != d.n_diseases:
            raise ShapeError(
                f"batch feature dims ts={batch.ts.shape[2]} static={batch.static.shape[1]} "
                f"diseases={batch.diseases.shape[1]} do not match encoder "
                f"({d.n_ts}, {d.n_static}, {d.n_diseases})")

    def forward(self, params: Params, batch: Batch):
        """Encoded states of shape (B, T, state_dim)."""
        self._check(batch)
        p = self.prefix
        B, T = batch.size, batch.horizon
        H = self.dims.lstm_hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T, H))
        steps = []
        for t in range(T):
            h, c, cache = lstm_cell_forward(params, batch.ts[:, t], h, c, prefix=p + "lstm.")
            hs[:, t] = h
            steps.append(cache)
        es, cs = dense_forward(params[p + "static.W"], params[p + "static.b"], batch.static, "tanh")
        ed, cd = dense_forward(params[p + "disease.W"], params[p + "disease.b"], batch.diseases, "tanh")
        states = np.concatenate([
            hs,
            np.broadcast_to(es[:, None, :], (B, T, es.shape[1])),
            np.broadcast_to(ed[:, None, :], (B, T, ed.shape[1])),
        ], axis=2)
        return states, EncoderCache(steps, cs, cd, (B, T))

    def backward(self, params: Params, cache: EncoderCache, dstates: np.ndarray) -> Params:
        p = self.prefix
        d = self.dims
        B, T = cache.shape
        H = d.lstm_hidden
        dh_seq = dstates[:, :, :H]
        des = dstates[:, :, H:H + d.static_hidden].sum(axis=1)
        ded = dstates[:, :, H + d.static_hidden:].sum(axis=1)
        grads = {k: np.zeros_like(v) for k, v in params.items() if k.startswith(p)}
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(range(T)):
            g, _, dh, dc = lstm_cell_backward(params, cache.steps[t], dh + dh_seq[:, t], dc, prefix=p + "lstm.")
            for k, v in g.items():
                grads[k] += v
        dW, db, _ = dense_backward(cache.static, des)
        grads[p + "static.W"] += dW
        grads[p + "static.b"] += db
        dW, db, _ = dense_backward(cache.disease, ded)
        grads[p + "disease.W"] += dW
        grads[p + "disease.b"] += db
        return grads


def _mlp_init(rng, sizes, prefix) -> Params:
    params = {}
    names = [f"fc{i + 1}" for i in range(len(sizes) - 2)] + ["out"]
    for name, fan_in, fan_out in zip(names, sizes[:-1], sizes[1:]):
        params[f"{prefix}{name}.W"] = xavier_uniform(rng, fan_in, fan_out)
        params[f"{prefix}{name}.b"] = np.zeros(fan_out)
    return params


def _mlp_forward(params, x, n_hidden, out_activation, prefix=""):
    caches = []
    for i in range(n_hidden):
        x, cache = dense_forward(params[f"{prefix}fc{i + 1}.W"], params[f"{prefix}fc{i + 1}.b"], x, "relu")
        caches.append(cache)
    y, cache = dense_forward(params[f"{prefix}out.W"], params[f"{prefix}out.b"], x, out_activation)
    caches.append(cache)
    return y, caches


def _mlp_backward(caches, dy, prefix=""):
    grads = {}
    names = [f"fc{i + 1}" for i in range(len(caches) - 1)] + ["out"]
    for name, cache in zip(reversed(names), reversed(caches)):
        dW, db, dy = dense_backward(cache, dy)
        grads[f"{prefix}{name}.W"] = dW
        grads[f"{prefix}{name}.b"] = db
    return grads, dy


# ----------------------------------------------------------------------------
# actor and critic
# ----------------------------------------------------------------------------


@dataclass
class ActorCache:
    enc: EncoderCache
    mlp: list
    raw: np.ndarray
    clamped: np.ndarray
    shape: tuple


class Actor:
    """Maps encoded history to K per-medication probabilities.

    Probabilities are clamped to ``[PROB_CLAMP, 1 - PROB_CLAMP]``; entries
    pinned by the clamp receive no gradient.
    """

    def __init__(self, dims: NetDims):
        self.dims = dims
        self.encoder = HistoryEncoder(dims)

    def init_params(self, rng: np.random.Generator) -> Params:
        params = self.encoder.init_params(rng)
        params.update(_mlp_init(rng, (self.dims.state_dim, *self.dims.hidden, self.dims.n_meds), ""))
        return params

    def head(self, params: Params, states: np.ndarray):
        """Probabilities for already-encoded states of shape (..., state_dim)."""
        if states.shape[-1] != self.dims.state_dim:
            raise ShapeError(f"state dim {states.shape[-1]} != actor input {self.dims.state_dim}")
        lead = states.shape[:-1]
        raw, mlp = _mlp_forward(params, states.reshape(-1, states.shape[-1]), len(self.dims.hidden), "sigmoid")
        probs = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
        return probs.reshape(*lead, -1), mlp, raw

    def forward(self, params: Params, batch: Batch):
        states, enc = self.encoder.forward(params, batch)
        probs, mlp, raw = self.head(params, states)
        return probs, ActorCache(enc, mlp, raw, raw != probs.reshape(raw.shape), states.shape[:2])

    def backward(self, params: Params, cache: ActorCache, dprobs: np.ndarray) -> Params:
        """Gradient of ``sum(dprobs * probs)`` with respect to every actor parameter."""
        B, T = cache.shape
        dp = dprobs.reshape(B * T, -1).copy()
        dp[cache.clamped] = 0.0
        grads, dstates = _mlp_backward(cache.mlp, dp)
        grads.update(self.encoder.backward(params, cache.enc, dstates.reshape(B, T, -1)))
        return grads


@dataclass
class CriticCache:
    enc: EncoderCache
    mlp: list
    shape: tuple


class Critic:
    """Scores ``Q(c_t, a)`` from the encoded history and an action vector."""

    def __init__(self, dims: NetDims):
        self.dims = dims
        self.encoder = HistoryEncoder(dims)

    def init_params(self, rng: np.random.Generator) -> Params:
        params = self.encoder.init_params(rng)
        params.update(_mlp_init(rng, (self.dims.state_dim + self.dims.n_meds, *self.dims.hidden, 1), ""))
        return params

    def head(self, params: Params, states: np.ndarray, actions: np.ndarray):
        if actions.shape[:-1] != states.shape[:-1] or actions.shape[-1] != self.dims.n_meds:
            raise ShapeError(f"actions {actions.shape} do not match states {states.shape} with K={self.dims.n_meds}")
        lead = states.shape[:-1]
        x = np.concatenate([states, actions], axis=-1).reshape(-1, states.shape[-1] + actions.shape[-1])
        q, mlp = _mlp_forward(params, x, len(self.dims.hidden), "identity")
        return q.reshape(lead), mlp

    def forward(self, params: Params, batch: Batch, actions: np.ndarray):
        states, enc = self.encoder.forward(params, batch)
        q, mlp = self.head(params, states, actions)
        return q, CriticCache(enc, mlp, states.shape[:2])

    def backward(self, params: Params, cache: CriticCache, dq: np.ndarray, need_params: bool = True):
        """Returns ``(grads, dactions)`` for the scalar ``sum(dq * Q)``.

        With ``need_params=False`` only the action gradient is computed and
        ``grads`` is ``None``.
        """
        B, T = cache.shape
        D = self.dims.state_dim
        grads, dx = _mlp_backward(cache.mlp, dq.reshape(-1, 1))
        dactions = dx[:, D:].reshape(B, T, -1)
        if not need_params:
            return None, dactions
        grads.update(self.encoder.backward(params, cache.enc, dx[:, :D].reshape(B, T, D)))
        return grads, dactions


# ----------------------------------------------------------------------------
# parameter sets
# ----------------------------------------------------------------------------


def soft_update(live: Params, target: Params, tau: float) -> Params:
    """``tau * live + (1 - tau) * target`` per block."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if live.keys() != target.keys():
        raise ShapeError("live and target parameter sets have different blocks")
    out = {}
    for k, v in live.items():
        if v.shape != target[k].shape:
            raise ShapeError(f"block {k!r}: live {v.shape} vs target {target[k].shape}")
        out[k] = v.copy() if tau == 1.0 else tau * v + (1.0 - tau) * target[k]
    return out


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class Networks:
    """Live and target actor/critic parameters sharing one architecture."""

    dims: NetDims
    actor: Params
    critic: Params
    target_actor: Params
    target_critic: Params
    meta: Dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, dims: NetDims, seed: int) -> "Networks":
        actor = Actor(dims).init_params(make_rng(seed, 1))
        critic = Critic(dims).init_params(make_rng(seed, 2))
        return cls(dims, actor, critic, copy_params(actor), copy_params(critic))

    @property
    def actor_net(self) -> Actor:
        return Actor(self.dims)

    @property
    def critic_net(self) -> Critic:
        return Critic(self.dims)

    def copy(self) -> "Networks":
        return Networks(self.dims, copy_params(self.actor), copy_params(self.critic),
                        copy_params(self.target_actor), copy_params(self.target_critic), dict(self.meta))

    def blocks(self) -> Params:
        out = {}
        for group in ("actor", "critic", "target_actor", "target_critic"):
            for k, v in getattr(self, group).items():
                out[f"{group}/{k}"] = v
        return out


def encode_history(dims: NetDims, params: Params, batch: Batch, upto: int) -> np.ndarray:
    """Encoded state after steps ``1..upto`` (1-based) of each admission in ``batch``."""
    if not 1 <= upto <= batch.horizon:
        raise IndexError(f"step {upto} outside 1..{batch.horizon}")
    if np.any(batch.lengths < upto):
        raise IndexError(f"step {upto} exceeds the length of some admissions")
    states, _ = HistoryEncoder(dims).forward(params, batch.truncate(upto))
    return states[:, upto - 1]


# ----------------------------------------------------------------------------
# checkpoint files
# ----------------------------------------------------------------------------


def params_to_json(blocks: Params) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in blocks.items()}


def params_from_json(obj: dict) -> Params:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj.items()}


def save_networks(nets: Networks, path, extra: Optional[dict] = None) -> None:
    """Write a JSON checkpoint.

    Layout::

        {"format": "srlrnn-params", "version": 1,
         "dims": {...NetDims...}, "meta": {...}, "extra": {...},
         "blocks": {"actor/fc1.W": {"shape": [160, 128], "data": [...]}, ...}}

    Python's float repr round-trips float64 exactly, so loading restores
    bit-identical arrays.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {**asdict(nets.dims), "hidden": list(nets.dims.hidden)},
        "meta": nets.meta,
        "extra": extra or {},
        "blocks": params_to_json(nets.blocks()),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_networks(path):
    """Returns ``(networks, extra)`` from a file written by :func:`save_networks`."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    dims = NetDims(**doc["dims"])
    blocks = params_from_json(doc["blocks"])
    groups = {g: {} for g in ("actor", "critic", "target_actor", "target_critic")}
    for key, v in blocks.items():
        group, name = key.split("/", 1)
        groups[group][name] = v
    return Networks(dims, meta=doc.get("meta", {}), **groups), doc.get("extra", {})
