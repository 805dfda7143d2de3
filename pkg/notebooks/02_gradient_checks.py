"""
Checking hand-written gradients
===============================

Every backward pass in the kernel is compared with a central finite
difference. The forward pass is rerun in long double so the difference
itself is accurate to well below the tolerance.
"""

# %%
import numpy as np

from srlrnn.nets import Actor, Critic, NetDims, Networks
from srlrnn.tensor import dense_backward, dense_forward, finite_diff_check, make_rng

rng = make_rng(0)
W, b, x = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=(5, 4))
R = rng.normal(size=(5, 3))          # a random linear read-out makes the loss scalar
dW, db, dx = dense_backward(dense_forward(W, b, x, "tanh")[1], R)
loss = lambda _: np.sum(R * dense_forward(W, b, x, "tanh")[0])
print("dense  dW", finite_diff_check(loss, W, dW), " dx", finite_diff_check(loss, x, dx))

# %%
# The critic, including the gradient with respect to its action input.
from srlrnn.nets import Batch

dims = NetDims(n_ts=3, n_static=2, n_diseases=3, n_meds=3, lstm_hidden=4, static_hidden=3, disease_hidden=3,
               hidden=(5, 4))
nets = Networks.initialize(dims, 1)
B, T = 2, 3
batch = Batch(rng.normal(size=(B, T, 3)), rng.normal(size=(B, 2)), (rng.random((B, 3)) < 0.5) * 1.0,
              (rng.random((B, T, 3)) < 0.5) * 1.0, np.zeros((B, T)), np.ones((B, T), dtype=bool))
critic = Critic(dims)
a = rng.random((B, T, 3))
Rq = rng.normal(size=(B, T))
grads, da = critic.backward(nets.critic, critic.forward(nets.critic, batch, a)[1], Rq)

LD = np.longdouble
P = {k: v.astype(LD) for k, v in nets.critic.items()}
xb = Batch(*(f.astype(LD) if f.dtype.kind == "f" else f for f in
             (batch.ts, batch.static, batch.diseases, batch.actions, batch.rewards, batch.mask)))
aL = a.astype(LD)
loss = lambda _: np.sum(Rq.astype(LD) * critic.forward(P, xb, aL)[0])
for k in ("enc.lstm.Wh", "fc1.W", "out.W"):
    print(f"critic {k:12s}", finite_diff_check(loss, P[k], grads[k]))
print("critic dQ/da       ", finite_diff_check(loss, aL, da))
