"""
Driving a prototype stack toward orthonormal rows
=================================================

The prototype regularizer penalizes Sum |sigma_i - 1| over the singular
values of the prototype matrix.  Plain gradient descent on that loss
alone should push a random matrix toward orthonormal rows; this script
watches it happen and reports the sparsity score (closeness of P P^T to
the identity) along the way.

A fixed step on this loss oscillates forever -- the subgradient update
moves every singular value by exactly the step size -- so we halve the
rate whenever the loss stops improving.
"""

import numpy as np

from protodet import losses, metrics

rng = np.random.default_rng(0)
P = rng.normal(0.0, 0.5, size=(5, 16))

rate = 0.05
prev = np.inf
print(f"{'step':>5} {'loss':>10} {'sparsity':>10} {'rate':>8}")
for step in range(2000):
    val = losses.pr_loss_svd(P)
    if step % 10 == 0 or val < 0.01:
        print(f"{step:>5} {val:>10.5f} {metrics.sparsity([P]):>10.5f} {rate:>8.4f}")
    if val < 0.01:
        break
    if val >= prev:
        rate *= 0.5
    prev = val
    P = P - rate * losses.pr_loss_svd_grad(P)

print(f"final loss {val:.5f}, sparsity {metrics.sparsity([P]):.5f}")
u, s, vt = np.linalg.svd(P)
print("singular values:", np.round(s, 4))
