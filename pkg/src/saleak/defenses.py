"""Client-side gradient obfuscation applied before secure-aggregation encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import GradientSet

NONE = "none"
GAUSSIAN = "gaussian_noise"
COMPRESSION = "compression"


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = NONE
    sigma: float = 0.0
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (NONE, GAUSSIAN, COMPRESSION):
            raise ConfigError(f"unknown defense kind {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not 0 <= self.theta < 1:
            raise ConfigError("theta must lie in [0, 1)")


def apply_gaussian(grads: GradientSet, sigma: float, rng) -> GradientSet:
    """Add independent N(0, sigma^2) noise to every gradient element."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if sigma == 0:
        return grads
    rng = np.random.default_rng(rng)
    return grads.map(lambda flat: flat + rng.normal(0.0, sigma, size=flat.size))


def apply_compression(grads: GradientSet, theta: float) -> GradientSet:
    """Zero the ``floor(theta * size)`` smallest-magnitude elements across the whole set.

    Ties are broken by flat index, lower index pruned first.
    """
    if not 0 <= theta < 1:
        raise ConfigError("theta must lie in [0, 1)")
    flat = grads.flatten()
    k = int(np.floor(theta * flat.size))
    if k == 0:
        return grads
    order = np.argsort(np.abs(flat), kind="stable")
    pruned = flat.copy()
    pruned[order[:k]] = 0.0
    return GradientSet.from_flat(grads.layout(), pruned)


def make_defense_hook(config: DefenseConfig, salt: int = 0):
    """Build a ``hook(client_id, grads) -> grads`` callable, or ``None`` for no defense.

    Noise streams are derived from ``(config.seed, salt, client_id)`` so every
    client in every round gets an independent, reproducible stream.
    """
    if config.kind == NONE:
        return None
    if config.kind == COMPRESSION:
        return lambda client_id, grads: apply_compression(grads, config.theta)

    def gaussian(client_id, grads):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, salt, int(client_id)]))
        return apply_gaussian(grads, config.sigma, rng)

    return gaussian
