"""Flexible low-rank adapter layers with collaborative composition strategies.

An adapted linear map is ``y = W0 x + (alpha / r) * DeltaW x`` where W0 is a
frozen n x m base and DeltaW is assembled from a pool of M down-projections
A_i (r x m) and N up-projections B_j (n x r). How the pools combine is the
layer's *strategy*:

* ``FULL``       DeltaW = (B_1 + ... + B_N)(A_1 + ... + A_M); every pool
                 member interacts with every other.
* ``RANDOM_AB``  DeltaW = sum_i B_{sigma(i)} A_i; each down-projection is
                 paired with one uniformly drawn up-projection.
* ``RANDOM_BA``  DeltaW = sum_j B_j A_{tau(j)}; the mirrored sampling, each
                 up-projection draws its down partner.
* ``HEURISTIC``  DeltaW = sum_{i<M} B_i A_i + (B_M + ... + B_N) A_M; one-to-one
                 pairs plus a one-to-many tail (requires M <= N).

Setting (M, N, strategy) recovers the familiar adapter families: (1, 1) is a
vanilla single-pair adapter, (1, N, FULL) the shared-down multi-head layout,
and (N, N, HEURISTIC) the per-expert paired layout.

The forward path always stays factored (down-projections first); DeltaW is
only materialized by :func:`delta_weight`, which exists as a test oracle and
for merging.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, as_matrix

__all__ = [
    "Strategy",
    "CoLAConfig",
    "Pairing",
    "CoLALayer",
    "make_layer",
    "sample_pairing",
    "forward",
    "delta_weight",
    "delta_weight_eval",
    "merge",
    "lora_preset",
    "hydra_preset",
    "moe_preset",
    "trainable_params",
    "flop_breakdown",
    "flop_count",
]


class Strategy(str, enum.Enum):
    FULL = "full"
    RANDOM_AB = "random_ab"
    RANDOM_BA = "random_ba"
    HEURISTIC = "heuristic"


RANDOM_STRATEGIES = (Strategy.RANDOM_AB, Strategy.RANDOM_BA)


class ConfigError(ValueError):
    """An adapter configuration violates a structural rule."""


@dataclass(frozen=True)
class CoLAConfig:
    """Hyperparameters of one adapted layer.

    ``alpha`` may be left as None and resolved by the initializer: spectral
    (principal-split) layers default to alpha = rank so the split is loss-free
    at step 0, Gaussian/zero layers to alpha = 2 * rank.
    """

    in_dim: int
    out_dim: int
    rank: int
    a_count: int = 1
    b_count: int = 1
    strategy: Strategy = Strategy.FULL
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"dims must be positive, got {self.out_dim}x{self.in_dim}")
        if not 1 <= self.rank <= min(self.in_dim, self.out_dim):
            raise ConfigError(
                f"rank must satisfy 1 <= r <= min(n, m) = "
                f"{min(self.in_dim, self.out_dim)}, got {self.rank}"
            )
        if self.a_count < 1 or self.b_count < 1:
            raise ConfigError(
                f"pool counts must be >= 1, got M={self.a_count}, N={self.b_count}"
            )
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.strategy is Strategy.HEURISTIC and self.a_count > self.b_count:
            raise ConfigError(
                f"heuristic strategy requires M <= N, got M={self.a_count} > N={self.b_count}"
            )
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @property
    def scale(self) -> float:
        if self.alpha is None:
            raise ConfigError("alpha is unresolved; initialize the layer first")
        return self.alpha / self.rank


@dataclass(frozen=True)
class Pairing:
    """A sampled pool assignment for the random strategies.

    ``kind`` is "ab" (maps each A index to a B index, length M) or "ba" (maps
    each B index to an A index, length N). ``frozen`` pairings survive across
    training steps; unfrozen ones are resampled every step, dropout-style.
    """

    kind: str
    map: tuple[int, ...]
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in ("ab", "ba"):
            raise ConfigError(f"pairing kind must be 'ab' or 'ba', got {self.kind!r}")
        object.__setattr__(self, "map", tuple(int(i) for i in self.map))


def sample_pairing(a_count: int, b_count: int, kind: str,
                   rng: np.random.Generator, frozen: bool = False) -> Pairing:
    """Uniform i.i.d. pairing: 'ab' draws M targets in [0, N), 'ba' the mirror."""
    if a_count < 1 or b_count < 1:
        raise ConfigError(f"pool counts must be >= 1, got M={a_count}, N={b_count}")
    if kind == "ab":
        draws = rng.integers(0, b_count, size=a_count)
    elif kind == "ba":
        draws = rng.integers(0, a_count, size=b_count)
    else:
        raise ConfigError(f"pairing kind must be 'ab' or 'ba', got {kind!r}")
    return Pairing(kind=kind, map=tuple(int(d) for d in draws), frozen=frozen)


def _pairing_kind(strategy: Strategy) -> str | None:
    if strategy is Strategy.RANDOM_AB:
        return "ab"
    if strategy is Strategy.RANDOM_BA:
        return "ba"
    return None


@dataclass
class CoLALayer:
    """One adapted linear map: frozen base plus trainable pools.

    ``a_list`` and ``b_list`` are mutated in place by training; ``w0`` never
    is. ``pairing`` holds the layer's current pairing for random strategies
    (None for deterministic ones).
    """

    w0: np.ndarray
    a_list: list[np.ndarray]
    b_list: list[np.ndarray]
    config: CoLAConfig
    pairing: Pairing | None = field(default=None)

    def validate(self) -> None:
        cfg = self.config
        n, m, r = cfg.out_dim, cfg.in_dim, cfg.rank
        if self.w0.shape != (n, m):
            raise ShapeError(f"w0 must be {n}x{m}, got {self.w0.shape}")
        if len(self.a_list) != cfg.a_count or len(self.b_list) != cfg.b_count:
            raise ShapeError(
                f"pool sizes {len(self.a_list)}/{len(self.b_list)} do not match "
                f"config M={cfg.a_count}, N={cfg.b_count}"
            )
        for a in self.a_list:
            if a.shape != (r, m):
                raise ShapeError(f"every A must be {r}x{m}, got {a.shape}")
        for b in self.b_list:
            if b.shape != (n, r):
                raise ShapeError(f"every B must be {n}x{r}, got {b.shape}")


def make_layer(w0: np.ndarray, a_list: list[np.ndarray], b_list: list[np.ndarray],
               config: CoLAConfig, rng: np.random.Generator | None = None) -> CoLALayer:
    """Assemble and validate a layer; random strategies get an initial pairing."""
    layer = CoLALayer(
        w0=as_matrix(w0),
        a_list=[as_matrix(a) for a in a_list],
        b_list=[as_matrix(b) for b in b_list],
        config=config,
    )
    layer.validate()
    kind = _pairing_kind(config.strategy)
    if kind is not None:
        if rng is None:
            raise ConfigError("random strategies need an rng to sample the initial pairing")
        layer.pairing = sample_pairing(config.a_count, config.b_count, kind, rng)
    return layer


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _check_pairing(layer: CoLALayer, pairing: Pairing | None) -> Pairing | None:
    """Validate that pairing presence/kind/size fit the layer's strategy."""
    cfg = layer.config
    kind = _pairing_kind(cfg.strategy)
    if kind is None:
        if pairing is not None:
            raise ConfigError(
                f"strategy {cfg.strategy.value} is deterministic; no pairing applies"
            )
        return None
    if pairing is None:
        raise ConfigError(f"strategy {cfg.strategy.value} requires a pairing")
    if pairing.kind != kind:
        raise ConfigError(f"pairing kind {pairing.kind!r} does not match strategy "
                          f"{cfg.strategy.value}")
    expect = cfg.a_count if kind == "ab" else cfg.b_count
    limit = cfg.b_count if kind == "ab" else cfg.a_count
    if len(pairing.map) != expect:
        raise ConfigError(f"pairing length {len(pairing.map)} != {expect}")
    if any(not 0 <= t < limit for t in pairing.map):
        raise ConfigError(f"pairing entry out of range [0, {limit})")
    return pairing


def _delta_apply(layer: CoLALayer, x: np.ndarray, pairing: Pairing | None,
                 mean_pairing: bool) -> np.ndarray:
    """Unscaled DeltaW @ x, computed factored (never materializing DeltaW)."""
    cfg = layer.config
    a_list, b_list = layer.a_list, layer.b_list
    if cfg.strategy is Strategy.FULL:
        t = a_list[0] @ x
        for a in a_list[1:]:
            t += a @ x
        out = b_list[0] @ t
        for b in b_list[1:]:
            out += b @ t
        return out
    if cfg.strategy is Strategy.HEURISTIC:
        m_count = cfg.a_count
        out = None
        for i in range(m_count - 1):
            term = b_list[i] @ (a_list[i] @ x)
            out = term if out is None else out + term
        t_tail = a_list[m_count - 1] @ x
        for b in b_list[m_count - 1:]:
            term = b @ t_tail
            out = term if out is None else out + term
        return out
    if mean_pairing:
        # Expectation over uniform pairings: every sampled partner is replaced
        # by the pool mean, collapsing both random strategies to a scaled FULL.
        t = a_list[0] @ x
        for a in a_list[1:]:
            t += a @ x
        out = b_list[0] @ t
        for b in b_list[1:]:
            out += b @ t
        scale = 1.0 / (cfg.b_count if cfg.strategy is Strategy.RANDOM_AB else cfg.a_count)
        return scale * out
    assert pairing is not None
    if cfg.strategy is Strategy.RANDOM_AB:
        out = None
        for i, target in enumerate(pairing.map):
            term = b_list[target] @ (a_list[i] @ x)
            out = term if out is None else out + term
        return out
    out = None
    for j, target in enumerate(pairing.map):
        term = b_list[j] @ (a_list[target] @ x)
        out = term if out is None else out + term
    return out


def forward(layer: CoLALayer, x: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None,
            pairing: Pairing | None = None) -> np.ndarray:
    """Evaluate the layer on x (a length-m vector or an m x batch matrix).

    ``train`` mode composes the sampled pairing for random strategies,
    resampling it from ``rng`` unless one is passed explicitly or the layer's
    own pairing is frozen. ``eval`` mode uses the deterministic mean-pairing
    composition. Deterministic strategies behave identically in both modes.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.config.in_dim:
        raise ShapeError(
            f"input has leading dim {x.shape[0]}, layer expects {layer.config.in_dim}"
        )
    kind = _pairing_kind(layer.config.strategy)
    if kind is None and pairing is not None:
        raise ConfigError(
            f"strategy {layer.config.strategy.value} is deterministic; no pairing applies"
        )
    use_mean = kind is None or mode == "eval"
    active = None
    if kind is not None and mode == "train":
        if pairing is not None:
            active = _check_pairing(layer, pairing)
        elif layer.pairing is not None and layer.pairing.frozen:
            active = layer.pairing
        elif rng is not None:
            active = sample_pairing(layer.config.a_count, layer.config.b_count, kind, rng)
        else:
            raise ConfigError(
                f"train-mode forward under {layer.config.strategy.value} needs a "
                "pairing, a frozen layer pairing, or an rng to resample"
            )
    delta = _delta_apply(layer, x, active, mean_pairing=use_mean)
    return layer.w0 @ x + layer.config.scale * delta


def delta_weight(layer: CoLALayer, pairing: Pairing | None = None) -> np.ndarray:
    """Materialized unscaled DeltaW for the layer's strategy (test oracle).

    Random strategies require the pairing that fixes the composition;
    deterministic strategies reject one.
    """
    cfg = layer.config
    active = _check_pairing(layer, pairing)
    a_list, b_list = layer.a_list, layer.b_list
    if cfg.strategy is Strategy.FULL:
        return sum(b_list) @ sum(a_list)
    if cfg.strategy is Strategy.HEURISTIC:
        m_count = cfg.a_count
        delta = np.zeros((cfg.out_dim, cfg.in_dim))
        for i in range(m_count - 1):
            delta += b_list[i] @ a_list[i]
        delta += sum(b_list[m_count - 1:]) @ a_list[m_count - 1]
        return delta
    assert active is not None
    delta = np.zeros((cfg.out_dim, cfg.in_dim))
    if cfg.strategy is Strategy.RANDOM_AB:
        for i, target in enumerate(active.map):
            delta += b_list[target] @ a_list[i]
    else:
        for j, target in enumerate(active.map):
            delta += b_list[j] @ a_list[target]
    return delta


def delta_weight_eval(layer: CoLALayer) -> np.ndarray:
    """Deterministic DeltaW used by eval forward and merging.

    For random strategies this is the mean over the uniform pairing
    distribution, i.e. every sampled partner replaced by its pool mean:
    (sum B)(sum A) / N for the AB direction, / M for BA.
    """
    cfg = layer.config
    if cfg.strategy in RANDOM_STRATEGIES:
        scale = 1.0 / (cfg.b_count if cfg.strategy is Strategy.RANDOM_AB else cfg.a_count)
        return scale * (sum(layer.b_list) @ sum(layer.a_list))
    return delta_weight(layer)


def merge(layer: CoLALayer) -> np.ndarray:
    """Collapse the adapter into a single matrix: w0 + (alpha/r) * DeltaW_eval."""
    return layer.w0 + layer.config.scale * delta_weight_eval(layer)


# ---------------------------------------------------------------------------
# Presets: the familiar adapter families as (M, N, strategy) corners
# ---------------------------------------------------------------------------

def lora_preset(in_dim: int, out_dim: int, rank: int, **kw) -> CoLAConfig:
    """Single A/B pair (vanilla adapter)."""
    return CoLAConfig(in_dim=in_dim, out_dim=out_dim, rank=rank,
                      a_count=1, b_count=1, strategy=Strategy.FULL, **kw)


def hydra_preset(in_dim: int, out_dim: int, rank: int, b_count: int, **kw) -> CoLAConfig:
    """One shared down-projection feeding N up-projections."""
    return CoLAConfig(in_dim=in_dim, out_dim=out_dim, rank=rank,
                      a_count=1, b_count=b_count, strategy=Strategy.FULL, **kw)


def moe_preset(in_dim: int, out_dim: int, rank: int, experts: int, **kw) -> CoLAConfig:
    """N independent one-to-one expert pairs."""
    return CoLAConfig(in_dim=in_dim, out_dim=out_dim, rank=rank,
                      a_count=experts, b_count=experts,
                      strategy=Strategy.HEURISTIC, **kw)


def trainable_params(config: CoLAConfig) -> int:
    """Trainable entries in one layer: M*r*m + N*n*r."""
    return (config.a_count * config.rank * config.in_dim
            + config.b_count * config.out_dim * config.rank)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

def _application_counts(config: CoLAConfig) -> tuple[int, int]:
    """(down, up) matrix applications in one factored forward pass.

    Every A_i @ (vector) costs r*m MACs, every B_j @ (vector) costs n*r. The
    random strategies only apply the matrices their pairing touches: AB makes
    M up-applications (one per down branch), BA makes N down-applications.
    The counts are pairing-independent, so the model is deterministic.
    """
    m_count, n_count = config.a_count, config.b_count
    if config.strategy is Strategy.RANDOM_AB:
        return m_count, m_count
    if config.strategy is Strategy.RANDOM_BA:
        return n_count, n_count
    return m_count, n_count  # FULL and HEURISTIC apply every pool member


def flop_breakdown(config: CoLAConfig, pass_kind: str = "forward") -> dict[str, int]:
    """Per-component MAC counts for one sample through one layer.

    forward: the frozen base map (n*m) plus the factored adapter
    applications. train_step: forward plus reverse-mode products (one B^T g
    per up-application) and parameter-gradient outer products (one n x r
    outer per up-application, one r x m outer per down-application). The
    frozen base contributes no backward cost: it has no gradient and the
    input needs none.
    """
    if pass_kind not in ("forward", "train_step"):
        raise ValueError(f"pass kind must be 'forward' or 'train_step', got {pass_kind!r}")
    n, m, r = config.out_dim, config.in_dim, config.rank
    down_apps, up_apps = _application_counts(config)
    parts = {
        "base": n * m,
        "down": down_apps * r * m,
        "up": up_apps * n * r,
    }
    if pass_kind == "train_step":
        parts["reverse"] = up_apps * n * r
        parts["grad_outer"] = up_apps * n * r + down_apps * r * m
    return parts


def flop_count(config: CoLAConfig, pass_kind: str = "forward") -> int:
    """Total multiply-accumulate count for one sample through one layer."""
    return sum(flop_breakdown(config, pass_kind).values())
