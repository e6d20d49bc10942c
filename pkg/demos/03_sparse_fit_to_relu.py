"""Sparse-grid CPWL fitting and its exact shallow ReLU compilation.

Prints the error/parameter frontier for an oscillatory target and then
compiles one interpolant to a depth-<=4 network, verifying exactness.
"""

import numpy as np

from arbsurf import AnisotropyConfig, compile_to_relu, error_frontier, smolyak_fit

target = lambda X, Y: np.sin(np.pi * X) * np.sin(np.pi * Y)
domain = ((0.0, 1.0), (0.0, 1.0))

rows = error_frontier(target, [2, 3, 4, 5, 6], AnisotropyConfig(1, 1, 2), domain)
print("level  vertices  params   weighted error   wall(s)")
for r in rows:
    print(f"{r['level']:>5}  {r['node_count']:>8}  {r['param_count']:>6}   "
          f"{r['weighted_error']:.6e}   {r['wall_seconds']:.3f}")

fit = smolyak_fit(target, AnisotropyConfig(1, 1, 4), domain)
net = compile_to_relu(fit)
rng = np.random.default_rng(0)
pts = rng.random((10_000, 2))
gap = np.abs(net.evaluate(pts) - fit.evaluate(pts)).max()
print(f"\ncompiled net: depth {net.depth}, {net.param_count} parameters "
      f"(bound {net.constants['param_bound']:.0f})")
print(f"max |net - CPWL| over 10^4 points: {gap:.2e}")
