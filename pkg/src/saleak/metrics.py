"""Label-count accuracy and stealthiness metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .nn import GradientSet, Model


def lnacc(pred, truth) -> float:
    """Fraction of classes whose predicted count equals the true count."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"count vectors differ in shape: {pred.shape} vs {truth.shape}")
    return float(np.mean(pred == truth))


def lnacc_all(preds, truths) -> float:
    """LnAcc of the class-wise count totals summed over all clients."""
    return lnacc(np.sum(preds, axis=0), np.sum(truths, axis=0))


def lnacc_target(preds, truths) -> list[float]:
    return [lnacc(p, t) for p, t in zip(preds, truths)]


def cos_sim(g1, g2) -> float:
    a = g1.flatten() if isinstance(g1, GradientSet) else np.ravel(g1)
    b = g2.flatten() if isinstance(g2, GradientSet) else np.ravel(g2)
    if a.shape != b.shape:
        raise ShapeError("gradient vectors differ in size")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        raise ValueError("cosine similarity undefined for two zero vectors")
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def nomp_ratio(a: Model, b: Model) -> tuple[int, float]:
    """Number of scalar parameters that differ (exact comparison) and their share of the total."""
    if a.layers != b.layers or a.layout() != b.layout():
        raise ShapeError("models have different architectures")
    fa, fb = a.flat_params(), b.flat_params()
    nomp = int(np.count_nonzero(fa != fb))
    return nomp, nomp / fa.size


@dataclass
class MetricReport:
    lnacc_all: float | None = None
    lnacc_target: list = field(default_factory=list)
    nomp: int | None = None
    ratio: float | None = None
    cossim: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def cossim_mean(self) -> float | None:
        return float(np.mean(self.cossim)) if self.cossim else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cossim_mean"] = self.cossim_mean
        return d
