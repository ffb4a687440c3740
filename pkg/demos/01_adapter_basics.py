"""Adapted linear maps and the four composition strategies.

A layer computes y = W0 x + (alpha/r) * DeltaW x with a frozen base W0 and
DeltaW assembled from M down-projections A_i (r x m) and N up-projections
B_j (n x r). This script builds one layer per strategy on the same pools and
shows how the composition rule changes DeltaW, and how the familiar adapter
families fall out as corners of the (M, N, strategy) space.
"""

import numpy as np

from cola_forge import (
    CoLAConfig,
    Strategy,
    delta_weight,
    forward,
    hydra_preset,
    lora_preset,
    make_layer,
    make_rng,
    merge,
    moe_preset,
    trainable_params,
)

rng = make_rng(0)
n, m, r = 8, 10, 3
M, N = 2, 3

w0 = rng.normal(size=(n, m))
a_pool = [rng.normal(size=(r, m)) for _ in range(M)]
b_pool = [rng.normal(size=(n, r)) for _ in range(N)]
x = rng.normal(size=m)

print(f"base map:   {n}x{m}  ({n * m} frozen entries)")
print(f"pools:      M={M} down ({r}x{m} each), N={N} up ({n}x{r} each)")
print(f"trainable:  {M * r * m + N * n * r} entries\n")

# --- one layer per strategy, same pools -----------------------------------
print("strategy        ||DeltaW||_F   composition")
for strategy in Strategy:
    cfg = CoLAConfig(in_dim=m, out_dim=n, rank=r, a_count=M, b_count=N,
                     strategy=strategy, alpha=float(r))
    layer = make_layer(w0, a_pool, b_pool, cfg, rng=make_rng(1))
    dw = delta_weight(layer, layer.pairing)
    if strategy is Strategy.FULL:
        rule = "(B1+..+BN)(A1+..+AM)"
    elif strategy is Strategy.RANDOM_AB:
        rule = f"sum_i B_sigma(i) A_i, sigma={layer.pairing.map}"
    elif strategy is Strategy.RANDOM_BA:
        rule = f"sum_j B_j A_tau(j), tau={layer.pairing.map}"
    else:
        rule = "B1 A1 + .. + (B_M+..+B_N) A_M"
    print(f"{strategy.value:12s}    {np.linalg.norm(dw):8.3f}      {rule}")

# --- forward stays factored, never materializing DeltaW --------------------
cfg = CoLAConfig(in_dim=m, out_dim=n, rank=r, a_count=M, b_count=N,
                 strategy=Strategy.FULL, alpha=float(r))
layer = make_layer(w0, a_pool, b_pool, cfg)
y = forward(layer, x)
dense = (layer.w0 + cfg.scale * delta_weight(layer)) @ x
print(f"\nfactored forward vs dense product: max deviation "
      f"{np.abs(y - dense).max():.2e}")

# --- merging collapses everything back into one matrix ---------------------
merged = merge(layer)
print(f"merged single-matrix map agrees with eval forward: "
      f"{np.abs(merged @ x - forward(layer, x, mode='eval')).max():.2e}")

# --- the familiar families as presets --------------------------------------
print("\npresets (M | N | strategy | trainable):")
for name, cfg in [
    ("single pair      ", lora_preset(m, n, r)),
    ("shared-down multi", hydra_preset(m, n, r, b_count=3)),
    ("paired experts   ", moe_preset(m, n, r, experts=3)),
]:
    print(f"  {name}  {cfg.a_count} | {cfg.b_count} | {cfg.strategy.value:9s} "
          f"| {trainable_params(cfg)}")
