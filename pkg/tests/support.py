"""Small fixtures shared by the test modules."""

import numpy as np

from srlrnn.nets import Batch, NetDims, Networks
from srlrnn.tensor import make_rng

TINY = NetDims(n_ts=3, n_static=2, n_diseases=3, n_meds=3, lstm_hidden=4, static_hidden=3,
               disease_hidden=3, hidden=(5, 4))


def random_batch(seed, dims=TINY, B=3, T=4, lengths=None):
    rng = make_rng(seed, 99)
    if lengths is None:
        lengths = rng.integers(1, T + 1, size=B)
        lengths[0] = T
    mask = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    ts = rng.normal(size=(B, T, dims.n_ts)) * mask[:, :, None]
    actions = (rng.random((B, T, dims.n_meds)) < 0.5) * mask[:, :, None]
    rewards = np.zeros((B, T))
    for i, L in enumerate(lengths):
        rewards[i, L - 1] = rng.choice([-1.0, 1.0])
    return Batch(ts, rng.normal(size=(B, dims.n_static)),
                 (rng.random((B, dims.n_diseases)) < 0.5).astype(float),
                 actions.astype(float), rewards, mask)


def random_networks(seed, dims=TINY, spread=0.3):
    """Initialized networks with non-zero biases and targets that differ from the live nets."""
    nets = Networks.initialize(dims, seed)
    rng = make_rng(seed, 55)
    for group in (nets.actor, nets.critic, nets.target_actor, nets.target_critic):
        for k in group:
            group[k] = group[k] + spread * rng.normal(size=group[k].shape)
    return nets


LD = np.longdouble


def extended(batch):
    """``batch`` in long double, for finite-difference oracles with a lower round-off floor."""
    return Batch(*(a if a.dtype == bool else a.astype(LD) for a in
                   (batch.ts, batch.static, batch.diseases, batch.actions, batch.rewards, batch.mask)))


def extended_params(params):
    return {k: v.astype(LD) for k, v in params.items()}
