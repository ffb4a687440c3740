"""Built-in invariant suite backing the ``selfcheck`` command.

Each check is small, fast and self-contained; together they cover the
load-bearing identities: SVD reconstruction, loss-free spectral splits,
gradient correctness, the closed-form strategy reductions, factored versus
materialized agreement, cost-model ordering, and parameter accounting against
the bundled geometries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import (
    CoLAConfig,
    Strategy,
    delta_weight,
    flop_count,
    forward,
    hydra_preset,
    lora_preset,
    make_layer,
    merge,
    moe_preset,
)
from .harness import bundled_geometry, param_count
from .initializers import GAUSSIAN_ZERO, PISSA, InitSpec, build_layer
from .linalg import frobenius_norm, make_rng, svd
from .training import finite_diff_check

__all__ = ["CheckResult", "run_selfcheck"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_svd_reconstruction() -> CheckResult:
    rng = make_rng(42)
    worst = 0.0
    for n, m in [(5, 3), (16, 16), (24, 40), (31, 7)]:
        w = rng.normal(size=(n, m))
        fac = svd(w)
        err = frobenius_norm(fac.reconstruct() - w) / frobenius_norm(w)
        ortho = max(
            frobenius_norm(fac.u.T @ fac.u - np.eye(fac.u.shape[1])),
            frobenius_norm(fac.v.T @ fac.v - np.eye(fac.v.shape[1])),
        )
        worst = max(worst, err, ortho)
    return CheckResult("svd_reconstruction", worst <= 1e-10,
                       f"max rel error {worst:.3e} (tol 1e-10)")


def _check_spectral_split() -> CheckResult:
    rng = make_rng(43)
    worst = 0.0
    for a_count, b_count in [(1, 1), (2, 3), (3, 2)]:
        w = rng.normal(size=(24, 18))
        config = CoLAConfig(in_dim=18, out_dim=24, rank=4, a_count=a_count,
                            b_count=b_count, strategy=Strategy.FULL, alpha=4.0)
        layer = build_layer(config, InitSpec(PISSA, source_w=w), rng)
        worst = max(worst, frobenius_norm(merge(layer) - w) / frobenius_norm(w))
    return CheckResult("spectral_split_reconstruction", worst <= 1e-10,
                       f"max rel error {worst:.3e} (tol 1e-10)")


def _check_gradients() -> CheckResult:
    rng = make_rng(44)
    worst = 0.0
    for strategy, a_count, b_count in [
        (Strategy.FULL, 2, 3), (Strategy.RANDOM_AB, 2, 3),
        (Strategy.RANDOM_BA, 2, 3), (Strategy.HEURISTIC, 2, 3),
    ]:
        config = CoLAConfig(in_dim=12, out_dim=16, rank=4, a_count=a_count,
                            b_count=b_count, strategy=strategy)
        layer = build_layer(config, InitSpec(GAUSSIAN_ZERO, std=0.3), rng,
                            base_w0=rng.normal(size=(16, 12)))
        for b in layer.b_list:
            b += rng.normal(0.0, 0.3, size=b.shape)
        err = finite_diff_check(layer, rng.normal(size=12), rng.normal(size=16))
        worst = max(worst, err)
    return CheckResult("gradient_fd_agreement", worst <= 1e-6,
                       f"max rel error {worst:.3e} (tol 1e-6)")


def _check_special_cases() -> CheckResult:
    rng = make_rng(45)
    n, m, r = 14, 10, 3
    worst = 0.0
    # single pair: DeltaW = B A
    layer = _random_layer(lora_preset(m, n, r, alpha=float(r)), rng)
    worst = max(worst, np.abs(delta_weight(layer)
                              - layer.b_list[0] @ layer.a_list[0]).max())
    # shared down-projection: DeltaW = (sum B_j) A
    layer = _random_layer(hydra_preset(m, n, r, b_count=3, alpha=float(r)), rng)
    worst = max(worst, np.abs(delta_weight(layer)
                              - sum(layer.b_list) @ layer.a_list[0]).max())
    # paired experts: DeltaW = sum B_i A_i
    layer = _random_layer(moe_preset(m, n, r, experts=3, alpha=float(r)), rng)
    expert_sum = sum(b @ a for a, b in zip(layer.a_list, layer.b_list))
    worst = max(worst, np.abs(delta_weight(layer) - expert_sum).max())
    return CheckResult("preset_closed_forms", worst <= 1e-12,
                       f"max abs deviation {worst:.3e} (tol 1e-12)")


def _random_layer(config: CoLAConfig, rng) -> "object":
    w0 = rng.normal(size=(config.out_dim, config.in_dim))
    a_list = [rng.normal(size=(config.rank, config.in_dim))
              for _ in range(config.a_count)]
    b_list = [rng.normal(size=(config.out_dim, config.rank))
              for _ in range(config.b_count)]
    return make_layer(w0, a_list, b_list, config, rng=rng)


def _check_factored_vs_materialized() -> CheckResult:
    rng = make_rng(46)
    worst = 0.0
    for strategy in Strategy:
        config = CoLAConfig(in_dim=11, out_dim=9, rank=3, a_count=2, b_count=3,
                            strategy=strategy, alpha=6.0)
        layer = _random_layer(config, rng)
        x = rng.normal(size=11)
        pairing = layer.pairing
        y = forward(layer, x, mode="train", pairing=pairing)
        dense = layer.w0 + config.scale * delta_weight(layer, pairing)
        worst = max(worst, np.abs(y - dense @ x).max())
    return CheckResult("factored_materialized_agreement", worst <= 1e-10,
                       f"max abs deviation {worst:.3e} (tol 1e-10)")


def _check_cost_ordering() -> CheckResult:
    def cfg(strategy):
        return CoLAConfig(in_dim=64, out_dim=64, rank=8, a_count=2, b_count=3,
                          strategy=strategy, alpha=16.0)

    ab = flop_count(cfg(Strategy.RANDOM_AB), "train_step")
    full = flop_count(cfg(Strategy.FULL), "train_step")
    heur = flop_count(cfg(Strategy.HEURISTIC), "train_step")
    ok = ab < full and ab <= heur <= full
    return CheckResult("train_cost_ordering", ok,
                       f"random_ab={ab} heuristic={heur} full={full}")


def _check_param_accounting() -> CheckResult:
    geo = bundled_geometry("llama31_8b")
    _, pct_lora = param_count(geo, 1, 1, 8)
    _, pct_13 = param_count(geo, 1, 3, 8)
    geo3 = bundled_geometry("llama32_3b")
    _, pct_3b = param_count(geo3, 1, 1, 8)
    ok = (abs(pct_lora - 0.2605) <= 0.005 and abs(pct_13 - 0.5325) <= 0.005
          and abs(pct_3b - 0.3770) <= 0.005)
    return CheckResult("param_percent_tables", ok,
                       f"{pct_lora:.4f}/{pct_13:.4f}/{pct_3b:.4f} "
                       "vs 0.2605/0.5325/0.3770")


def run_selfcheck() -> list[CheckResult]:
    """Run every built-in invariant check and return the results."""
    return [
        _check_svd_reconstruction(),
        _check_spectral_split(),
        _check_gradients(),
        _check_special_cases(),
        _check_factored_vs_materialized(),
        _check_cost_ordering(),
        _check_param_accounting(),
    ]
