"""How good is an order-M successive approximation?

For constant A the Picard iterates from x(tau) = mu are the truncated
exponential series sum_{m<=M} ((t - tau) A)^m / m! mu, up to the error of the
trapezoid rule used for the integrals.  This script shows both effects: the
truncation error shrinks quickly with M near the anchor and grows away from
it, and the quadrature error falls by four each time the grid step halves.

    python demos/picard_series.py
"""

import numpy as np
from scipy.linalg import expm

from mlfm import BasisSet, TimeGrid, picard_mean, trapz_weights

A = np.array([[0.0, -1.2, 0.5], [1.2, 0.0, -0.8], [-0.5, 0.8, 0.0]])
basis = BasisSet(A[None])
mu = np.array([1.0, 0.0, 0.0])
anchor_time = 1.5


def picard(order, h):
    grid = TimeGrid.uniform(0.0, 3.0, h)
    k = int(round(anchor_time / h))
    m = picard_mean(k, order, mu, np.zeros((0, len(grid))), [[1.0]], trapz_weights(grid, k), basis)
    return grid.times, m


print("distance from the exact solution expm((t - tau) A) mu")
print("  M   |t-tau|=0.5   |t-tau|=1.0   |t-tau|=1.5")
for order in (1, 3, 5, 7):
    t, m = picard(order, 1e-3)
    row = []
    for d in (0.5, 1.0, 1.5):
        n = int(np.argmin(np.abs(t - (anchor_time + d))))
        row.append(np.linalg.norm(m[n] - expm((t[n] - anchor_time) * A) @ mu))
    print(f"{order:3d}" + "".join(f"{e:14.2e}" for e in row))

print("\nquadrature error against the truncated series, M = 5")
prev = None
for h in (0.05, 0.025, 0.0125, 0.00625):
    t, m = picard(5, h)
    series = []
    for s in t:
        term, acc = mu.copy(), mu.copy()
        for j in range(1, 6):
            term = (s - anchor_time) * A @ term / j
            acc = acc + term
        series.append(acc)
    gap = np.max(np.abs(m - np.array(series)))
    print(f"h = {h:<6} gap {gap:.3e}" + ("" if prev is None else f"  ratio {prev / gap:.2f}"))
    prev = gap
