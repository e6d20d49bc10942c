"""Chain-consistency statistics and the Gate-V2 decision.

Tracks the chain MMD^2 across growing sample sizes for identically
distributed maturity slices and prints the gate verdict with its bands.
"""

import numpy as np

from arbsurf import ChainSeries, chain_energy, gate_v2

rng = np.random.default_rng(12)
sizes = np.unique(np.round(np.geomspace(50, 1500, 16)).astype(int))
values = []
for n in sizes:
    slices = [rng.standard_normal(int(n)) for _ in range(4)]
    total, per_edge = chain_energy(slices, np.full(3, 1 / 3))
    values.append(total)

series = ChainSeries(sizes.astype(float), np.asarray(values), sizes.astype(float))
print("size   chain MMD^2")
for n, v in zip(sizes, values):
    print(f"{n:>5}  {v:+.5e}")

decision = gate_v2(series)
print(f"\ntail slope (median of sliding OLS): {decision.slope_tail:+.3e}  "
      f"(threshold |.| <= 0.12, band {decision.band_slope:.2e})")
print(f"area drop: {decision.area_drop:+.4f}  (threshold >= -0.02)")
print(f"FIR smoother l1 mass: {decision.fir_l1:.3f}  (bound 120)")
print(f"Gate-V2 verdict: {'PASS' if decision.passed else 'FAIL'}")
